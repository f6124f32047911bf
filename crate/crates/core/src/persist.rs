//! JSON model files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnf::{CnfConfig, CnfModel};
use crate::datagen::Normalizer;
use crate::error::{Error, Result};
use crate::eval::Detector;
use crate::flow::FlowModel;
use crate::lof::{LofModel, Metric};
use crate::made::{MadeDocument, MadeNetwork};
use crate::maf::{MafConfig, MafStack};
use crate::tensor::Tensor;

pub const FORMAT: &str = "flownovel-model-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Body {
    Maf {
        config: MafConfig,
        layers: Vec<MadeDocument>,
        normalizer: Option<Normalizer>,
    },
    Cnf {
        config: CnfConfig,
        drift: MadeDocument,
        normalizer: Option<Normalizer>,
    },
    Lof {
        points: Vec<Vec<f64>>,
        min_pts: usize,
        metric: Metric,
        normalizer: Option<Normalizer>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope {
    format: String,
    #[serde(flatten)]
    body: Body,
}

pub fn to_json(detector: &Detector) -> Result<String> {
    let body = match detector {
        Detector::Flow(FlowModel::Maf(m)) => Body::Maf {
            config: m.config().clone(),
            layers: m.layers().iter().map(MadeNetwork::to_document).collect(),
            normalizer: m.normalizer.clone(),
        },
        Detector::Flow(FlowModel::Cnf(m)) => Body::Cnf {
            config: m.config().clone(),
            drift: m.drift_network().to_document(),
            normalizer: m.normalizer.clone(),
        },
        Detector::Lof(l) => Body::Lof {
            points: l.points().to_rows(),
            min_pts: l.min_pts(),
            metric: l.metric(),
            normalizer: l.normalizer.clone(),
        },
    };
    Ok(serde_json::to_string(&Envelope {
        format: FORMAT.into(),
        body,
    })?)
}

pub fn from_json(text: &str) -> Result<Detector> {
    let env: Envelope = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(Error::Model(format!("unsupported model format {:?}", env.format)));
    }
    Ok(match env.body {
        Body::Maf { config, layers, normalizer } => {
            let nets = layers
                .iter()
                .map(|doc| MadeNetwork::from_document(config.dim, doc))
                .collect::<Result<Vec<_>>>()?;
            let mut m = MafStack::from_layers(config, nets)?;
            m.normalizer = normalizer;
            Detector::Flow(FlowModel::Maf(m))
        }
        Body::Cnf { config, drift, normalizer } => {
            let drift = MadeNetwork::from_document(config.dim, &drift)?;
            let mut m = CnfModel::from_drift(config, drift)?;
            m.normalizer = normalizer;
            Detector::Flow(FlowModel::Cnf(m))
        }
        Body::Lof { points, min_pts, metric, normalizer } => {
            let mut l = LofModel::fit(Tensor::from_rows(&points)?, min_pts, metric)?;
            l.normalizer = normalizer;
            Detector::Lof(l)
        }
    })
}

pub fn save(detector: &Detector, path: &Path) -> Result<()> {
    fs::write(path, to_json(detector)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Detector> {
    from_json(&fs::read_to_string(path)?)
}
