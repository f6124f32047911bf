//! Masked autoencoder for distribution estimation.
//!
//! Inputs carry degrees `1..=D` in natural time order. Hidden units cycle
//! through degrees `1..=D-1`; a hidden unit of degree `k` may see inputs of
//! degree `<= k`, and output unit `t` may only see hidden units of degree
//! `< t`. Output `t` is therefore a function of `x_1..x_{t-1}` alone.
//!
//! Optional conditional inputs (the pseudo-time of a continuous flow) are
//! appended to the input of every layer and are never masked.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MadeConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Number of output heads per timepoint, laid out as contiguous blocks.
    pub output_multiplier: usize,
    pub conditional_dim: usize,
}

impl MadeConfig {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, output_multiplier: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes,
            output_multiplier,
            conditional_dim: 0,
        }
    }

    pub fn with_conditional(mut self, dim: usize) -> Self {
        self.conditional_dim = dim;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim * self.output_multiplier
    }
}

/// Initialization of the final (output) layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// Weights and biases zero: every head starts at exactly 0.
    Zero,
    /// Uniform like the hidden layers, with the bound multiplied by `scale`.
    Uniform { scale: f64 },
}

#[derive(Debug, Clone)]
pub struct MadeLayer {
    /// `[fan_in, fan_out]`; the network computes `x · (weight ⊙ mask) + bias`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MadeNetwork {
    config: MadeConfig,
    layers: Vec<MadeLayer>,
    /// Degrees of the inputs, each hidden layer, and the outputs.
    degrees: Vec<Vec<usize>>,
}

/// Degree assignment for inputs, hidden layers and outputs.
pub fn degrees(config: &MadeConfig) -> Vec<Vec<usize>> {
    let d = config.input_dim;
    let mut out = vec![(1..=d).collect::<Vec<_>>()];
    for &h in &config.hidden_sizes {
        out.push((0..h).map(|k| k % (d - 1) + 1).collect());
    }
    out.push(
        (0..config.output_multiplier)
            .flat_map(|_| 1..=d)
            .collect(),
    );
    out
}

/// Binary `[fan_in, fan_out]` mask between two degree vectors. Rows for the
/// `conditional_dim` trailing inputs are all ones.
fn mask(deg_in: &[usize], deg_out: &[usize], conditional_dim: usize, strict: bool) -> Tensor {
    let rows = deg_in.len() + conditional_dim;
    let mut m = Tensor::zeros(&[rows, deg_out.len()]);
    for (j, &dout) in deg_out.iter().enumerate() {
        for (i, &din) in deg_in.iter().enumerate() {
            let connected = if strict { dout > din } else { dout >= din };
            if connected {
                m.set2(i, j, 1.0);
            }
        }
        for i in deg_in.len()..rows {
            m.set2(i, j, 1.0);
        }
    }
    m
}

fn validate(config: &MadeConfig) -> Result<()> {
    if config.input_dim < 2 {
        return Err(Error::contract(format!(
            "MADE needs at least 2 inputs, got {}",
            config.input_dim
        )));
    }
    if config.hidden_sizes.is_empty() || config.hidden_sizes.contains(&0) {
        return Err(Error::contract("MADE needs nonempty hidden layers"));
    }
    if config.output_multiplier == 0 {
        return Err(Error::contract("MADE output multiplier must be positive"));
    }
    Ok(())
}

impl MadeNetwork {
    pub fn new(config: MadeConfig, output_init: OutputInit, seed: u64) -> Result<Self> {
        validate(&config)?;
        let degrees = degrees(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = degrees.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let last = l + 1 == n_layers;
            let m = mask(&degrees[l], &degrees[l + 1], config.conditional_dim, last);
            let (fan_in, fan_out) = (m.shape()[0], m.shape()[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let bound = match (last, output_init) {
                (true, OutputInit::Zero) => 0.0,
                (true, OutputInit::Uniform { scale }) => bound * scale,
                _ => bound,
            };
            let mut sample = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        if bound > 0.0 {
                            rng.random_range(-bound..bound)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            };
            let weight = Tensor::new(vec![fan_in, fan_out], sample(fan_in * fan_out))?;
            let bias = Tensor::vector(sample(fan_out));
            layers.push(MadeLayer {
                weight,
                bias,
                mask: Arc::new(m),
            });
        }
        Ok(Self {
            config,
            layers,
            degrees,
        })
    }

    /// Rebuilds a network from stored weights, recomputing the masks.
    pub fn from_parts(config: MadeConfig, weights: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut net = Self::new(config, OutputInit::Zero, 0)?;
        if weights.len() != net.layers.len() {
            return Err(Error::Model(format!(
                "expected {} MADE layers, found {}",
                net.layers.len(),
                weights.len()
            )));
        }
        for (layer, (w, b)) in net.layers.iter_mut().zip(weights) {
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::dim("MadeNetwork::from_parts", layer.weight.shape(), w.shape()));
            }
            layer.weight = w;
            layer.bias = b;
        }
        Ok(net)
    }

    pub fn config(&self) -> &MadeConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn layers(&self) -> &[MadeLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MadeLayer] {
        &mut self.layers
    }

    pub fn degrees(&self) -> &[Vec<usize>] {
        &self.degrees
    }

    /// Parameters in the order `[w0, b0, w1, b1, ...]`.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::contract("wrong number of MADE parameters"));
        }
        for (layer, pair) in self.layers.iter_mut().zip(params.chunks_exact(2)) {
            if pair[0].shape() != layer.weight.shape() || pair[1].shape() != layer.bias.shape() {
                return Err(Error::dim("set_parameters", layer.weight.shape(), pair[0].shape()));
            }
            layer.weight = pair[0].clone();
            layer.bias = pair[1].clone();
        }
        Ok(())
    }

    /// Masked weights and biases for eager evaluation.
    pub fn masked(&self) -> Result<Vec<(Tensor, Tensor)>> {
        self.layers
            .iter()
            .map(|l| Ok((l.weight.mul(&l.mask)?, l.bias.clone())))
            .collect()
    }

    /// Masked weights on a tape; `leaves` are this network's parameters
    /// registered in [`MadeNetwork::parameters`] order.
    pub fn masked_taped<'t>(&self, leaves: &[Var<'t>]) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        if leaves.len() != self.parameter_count() {
            return Err(Error::contract("wrong number of MADE leaves"));
        }
        self.layers
            .iter()
            .zip(leaves.chunks_exact(2))
            .map(|(l, pair)| Ok((pair[0].mul_const(&l.mask)?, pair[1])))
            .collect()
    }

    /// Registers all parameters on `tape` as leaves.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.parameters().into_iter().map(|p| tape.leaf(p)).collect()
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.check_input(x.shape(), cond.map(Tensor::shape))?;
        apply(&self.masked()?, x, cond)
    }

    fn check_input(&self, x: &[usize], cond: Option<&[usize]>) -> Result<()> {
        if x.len() != 2 || x[1] != self.config.input_dim {
            return Err(Error::dim("made_forward", x, &[0, self.config.input_dim]));
        }
        match (cond, self.config.conditional_dim) {
            (None, 0) => Ok(()),
            (Some(c), k) if c.len() == 2 && c[0] == x[0] && c[1] == k && k > 0 => Ok(()),
            (c, k) => Err(Error::dim(
                "made_forward (conditional)",
                c.unwrap_or(&[]),
                &[x[0], k],
            )),
        }
    }
}

/// Evaluates a masked MLP: tanh on hidden layers, linear output. `cond` is
/// appended to the input of every layer.
pub fn apply<V: Value>(layers: &[(V, V)], x: &V, cond: Option<&V>) -> Result<V> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        let input = match cond {
            Some(c) => h.concat_cols(c)?,
            None => h,
        };
        h = input.matmul(w)?.add_row(b)?;
        if i + 1 < layers.len() {
            h = h.tanh();
        }
    }
    Ok(h)
}

/// Stored form of a network inside a model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MadeDocument {
    pub hidden_sizes: Vec<usize>,
    pub output_multiplier: usize,
    pub conditional_dim: usize,
    pub layers: Vec<MadeLayerDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MadeLayerDocument {
    /// `[fan_in][fan_out]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    /// Degrees of this layer's output units.
    pub degrees: Vec<usize>,
}

impl MadeNetwork {
    pub fn to_document(&self) -> MadeDocument {
        MadeDocument {
            hidden_sizes: self.config.hidden_sizes.clone(),
            output_multiplier: self.config.output_multiplier,
            conditional_dim: self.config.conditional_dim,
            layers: self
                .layers
                .iter()
                .zip(&self.degrees[1..])
                .map(|(l, deg)| MadeLayerDocument {
                    weights: l.weight.to_rows(),
                    biases: l.bias.data().to_vec(),
                    masks: l
                        .mask
                        .to_rows()
                        .into_iter()
                        .map(|r| r.into_iter().map(|v| v as u8).collect())
                        .collect(),
                    degrees: deg.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(input_dim: usize, doc: &MadeDocument) -> Result<Self> {
        let config = MadeConfig {
            input_dim,
            hidden_sizes: doc.hidden_sizes.clone(),
            output_multiplier: doc.output_multiplier,
            conditional_dim: doc.conditional_dim,
        };
        let weights = doc
            .layers
            .iter()
            .map(|l| Ok((Tensor::from_rows(&l.weights)?, Tensor::vector(l.biases.clone()))))
            .collect::<Result<Vec<_>>>()?;
        let net = Self::from_parts(config, weights)?;
        for (k, (layer, stored)) in net.layers.iter().zip(&doc.layers).enumerate() {
            let expected: Vec<Vec<u8>> = layer
                .mask
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as u8).collect())
                .collect();
            if expected != stored.masks || net.degrees[k + 1] != stored.degrees {
                return Err(Error::Model(format!(
                    "layer {k}: stored mask/degrees do not match the autoregressive layout"
                )));
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_net(d: usize, hidden: Vec<usize>, mult: usize, cond: usize, seed: u64) -> MadeNetwork {
        let config = MadeConfig::new(d, hidden, mult).with_conditional(cond);
        MadeNetwork::new(config, OutputInit::Uniform { scale: 1.0 }, seed).unwrap()
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    /// Perturbation oracle: `dep[o][i]` is true when output `o` moves as
    /// input `i` is nudged.
    fn dependency(net: &MadeNetwork, x: &Tensor, cond: Option<&Tensor>) -> Vec<Vec<bool>> {
        let base = net.forward(x, cond).unwrap();
        let d = net.input_dim();
        let outs = base.cols();
        let mut dep = vec![vec![false; d]; outs];
        for i in 0..d {
            let mut xp = x.clone();
            xp.data_mut()[i] += 0.5;
            let moved = net.forward(&xp, cond).unwrap();
            for (o, row) in dep.iter_mut().enumerate() {
                row[i] = (moved.data()[o] - base.data()[o]).abs() > 1e-12;
            }
        }
        dep
    }

    #[test]
    fn rejects_single_input() {
        let config = MadeConfig::new(1, vec![4], 1);
        assert!(matches!(
            MadeNetwork::new(config, OutputInit::Zero, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_inputs_one_hidden_layer() {
        let net = random_net(2, vec![3], 1, 0, 7);
        let x = random_input(1, 2, 1);
        let dep = dependency(&net, &x, None);
        assert_eq!(dep, vec![vec![false, false], vec![true, false]]);
    }

    #[test]
    fn default_sized_network_output_shape() {
        let net = random_net(100, vec![256, 256, 256], 2, 0, 1);
        let x = random_input(3, 100, 2);
        assert_eq!(net.forward(&x, None).unwrap().shape(), &[3, 200]);
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let net = MadeNetwork::new(MadeConfig::new(5, vec![8, 8], 2), OutputInit::Zero, 3).unwrap();
        let out = net.forward(&Tensor::zeros(&[2, 5]), None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strictly_lower_triangular_dependencies() {
        for (d, mult) in [(2, 1), (4, 2), (5, 1), (8, 2)] {
            let net = random_net(d, vec![3 * d, 2 * d], mult, 0, d as u64);
            let x = random_input(1, d, 10 + d as u64);
            let dep = dependency(&net, &x, None);
            for (o, row) in dep.iter().enumerate() {
                let t = o % d;
                for (i, &moves) in row.iter().enumerate() {
                    assert_eq!(moves, i < t, "d={d} output {o} input {i}");
                }
            }
        }
    }

    #[test]
    fn finite_difference_jacobian_has_zero_diagonal() {
        let net = random_net(5, vec![12, 12], 1, 0, 42);
        let x = random_input(1, 5, 43);
        let h = 1e-6;
        for i in 0..5 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let (fp, fm) = (net.forward(&p, None).unwrap(), net.forward(&m, None).unwrap());
            for t in 0..=i {
                let j = (fp.data()[t] - fm.data()[t]) / (2.0 * h);
                assert_eq!(j, 0.0, "∂out_{t}/∂x_{i}");
            }
        }
    }

    #[test]
    fn mask_product_is_strictly_lower_triangular() {
        let net = random_net(6, vec![10, 7, 9], 1, 0, 0);
        // boolean product of the masks, inputs → outputs
        let mut reach = (*net.layers()[0].mask).clone();
        for layer in &net.layers()[1..] {
            reach = reach.matmul(&layer.mask).unwrap().map(|v| f64::from(v > 0.0));
        }
        for i in 0..6 {
            for t in 0..6 {
                assert_eq!(reach.get2(i, t) > 0.0, i < t, "input {i} output {t}");
            }
        }
    }

    #[test]
    fn hidden_degrees_cover_one_to_d_minus_one() {
        let config = MadeConfig::new(5, vec![9], 1);
        let deg = degrees(&config);
        assert_eq!(deg[1], vec![1, 2, 3, 4, 1, 2, 3, 4, 1]);
        assert!(deg[1].iter().all(|&k| (1..5).contains(&k)));
    }

    #[test]
    fn conditional_input_reaches_every_output() {
        let net = random_net(4, vec![8, 8], 2, 1, 5);
        let x = random_input(1, 4, 6);
        let c0 = Tensor::new(vec![1, 1], vec![0.1]).unwrap();
        let c1 = Tensor::new(vec![1, 1], vec![0.9]).unwrap();
        let a = net.forward(&x, Some(&c0)).unwrap();
        let b = net.forward(&x, Some(&c1)).unwrap();
        for o in 0..8 {
            assert!((a.data()[o] - b.data()[o]).abs() > 1e-12, "output {o}");
        }
        // and the autoregressive pattern still holds with conditioning
        let dep = dependency(&net, &x, Some(&c0));
        for (o, row) in dep.iter().enumerate() {
            for (i, &moves) in row.iter().enumerate() {
                assert_eq!(moves, i < o % 4);
            }
        }
    }

    #[test]
    fn conditional_shape_checked() {
        let net = random_net(4, vec![8], 1, 1, 5);
        let x = random_input(2, 4, 6);
        assert!(net.forward(&x, None).is_err());
        assert!(net.forward(&x, Some(&Tensor::zeros(&[1, 1]))).is_err());
    }

    #[test]
    fn taped_forward_matches_eager() {
        let net = random_net(4, vec![8, 8], 2, 1, 9);
        let x = random_input(3, 4, 1);
        let c = Tensor::full(&[3, 1], 0.3);
        let eager = net.forward(&x, Some(&c)).unwrap();
        let tape = Tape::new();
        let leaves = net.leaves(&tape);
        let layers = net.masked_taped(&leaves).unwrap();
        let out = apply(&layers, &tape.constant(x), Some(&tape.constant(c))).unwrap();
        assert_eq!(out.value().data(), eager.data());
    }

    #[test]
    fn document_round_trip() {
        let net = random_net(4, vec![6, 5], 2, 1, 12);
        let doc = net.to_document();
        let back = MadeNetwork::from_document(4, &doc).unwrap();
        assert_eq!(back.parameters(), net.parameters());
        let mut bad = doc.clone();
        bad.layers[0].masks[0][0] ^= 1;
        assert!(MadeNetwork::from_document(4, &bad).is_err());
    }
}
