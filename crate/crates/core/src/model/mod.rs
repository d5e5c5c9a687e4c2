//! Differentiable core and the three stop-or-go predictors.

mod adam;
mod logistic;
mod tape;
mod tensor;
mod transformer;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use logistic::{
    logistic_features, logistic_inputs, logistic_predict, logistic_train, LogisticConfig,
    LogisticModel, LOGISTIC_FEATURES,
};
pub use tape::{bce_mean, sigmoid, Gradients, Tape, Var, PROB_EPS};
pub use tensor::Mat;
pub use transformer::{
    finite_difference_check, params_from_map, positional_encoding, train, Hyper, KeyMix, ModelParams,
    Variant,
};

use crate::dataset::{Normalizer, Sample};
use crate::error::{Error, Result};
use crate::kinematics::KinematicLimits;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which predictor to train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Generic,
    Personalized,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Logistic, ModelKind::Generic, ModelKind::Personalized];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Generic => "generic",
            ModelKind::Personalized => "personalized",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::Logistic => None,
            ModelKind::Generic => Some(Variant::Generic),
            ModelKind::Personalized => Some(Variant::Personalized),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "generic" => Ok(ModelKind::Generic),
            "personalized" => Ok(ModelKind::Personalized),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Predictor {
    Logistic {
        model: LogisticModel,
        limits: KinematicLimits,
    },
    Transformer {
        params: ModelParams,
        normalizer: Normalizer,
    },
}

impl Predictor {
    pub fn kind(&self) -> ModelKind {
        match self {
            Predictor::Logistic { .. } => ModelKind::Logistic,
            Predictor::Transformer { params, .. } => match params.variant {
                Variant::Generic => ModelKind::Generic,
                Variant::Personalized => ModelKind::Personalized,
            },
        }
    }

    /// P(Go) for unnormalized samples.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        match self {
            Predictor::Logistic { model, limits } => samples
                .iter()
                .map(|s| Ok(model.predict(&logistic_features(s, limits)?)))
                .collect(),
            Predictor::Transformer { params, normalizer } => {
                params.predict(&normalizer.apply_all(samples))
            }
        }
    }

    fn shapes(&self) -> Vec<(String, usize, usize)> {
        match self {
            Predictor::Logistic { .. } => vec![
                ("weights".into(), 1, LOGISTIC_FEATURES),
                ("bias".into(), 1, 1),
            ],
            Predictor::Transformer { params, .. } => params.shapes(),
        }
    }
}

/// Versioned JSON checkpoint with a shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub shapes: Vec<(String, usize, usize)>,
    pub predictor: Predictor,
}

impl Checkpoint {
    pub fn new(predictor: Predictor) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            shapes: predictor.shapes(),
            predictor,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if let Predictor::Transformer { params, .. } = &ck.predictor {
            let expected = ModelParams::init(params.variant, &params.hyper, params.init_seed)?;
            if expected.shapes() != params.shapes() {
                return Err(Error::Shape(format!(
                    "{}: parameter shapes do not match the stored hyperparameters",
                    path.display()
                )));
            }
            if !params.is_finite() {
                return Err(Error::Numeric {
                    layer: 0,
                    msg: "checkpoint contains non-finite parameters".into(),
                });
            }
        }
        if ck.shapes != ck.predictor.shapes() {
            return Err(Error::Shape(format!("{}: shape manifest mismatch", path.display())));
        }
        Ok(ck)
    }
}

/// `epoch,loss` rows.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{},{l}", i + 1)?;
    }
    Ok(())
}
