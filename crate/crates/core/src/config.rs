//! Run configuration: one JSON document covering every stage of a run.
//!
//! Every field has a default, so `{}` is a complete configuration. Unknown
//! keys are rejected at every level.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::detector::{TrainConfig, Variant};
use crate::eval::EvalConfig;
use crate::rng::{stream, Stream};
use crate::scene::SceneConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 7,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub variant: String,
    pub train: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variant: "base".into(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Weight of the black-ratio term.
    Lambda,
    /// Basic pattern side.
    Resolution,
    /// Fixed patch-to-box-height proportion at evaluation.
    Proportion,
}

impl SweepParam {
    pub const NAMES: [&'static str; 3] = ["lambda", "resolution", "proportion"];

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lambda" => Ok(Self::Lambda),
            "resolution" => Ok(Self::Resolution),
            "proportion" => Ok(Self::Proportion),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Resolution => "resolution",
            Self::Proportion => "proportion",
        }
    }

    /// Default value list for this parameter.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Lambda => vec![0.0, 0.01, 0.05, 0.1, 0.5, 1.0],
            Self::Resolution => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            Self::Proportion => vec![0.3, 0.25, 0.2, 0.15, 0.1, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    /// Empty means the parameter's default list.
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::Lambda,
            values: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn resolved_values(&self) -> Vec<f64> {
        if self.values.is_empty() {
            self.param.default_values()
        } else {
            self.values.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Variants attacked jointly.
    pub attacked: Vec<String>,
    /// Variant never attacked, used to measure transfer.
    pub held_out: String,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            attacked: vec!["base".into(), "wide".into(), "deep".into()],
            held_out: "narrow".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every stage seed with one derived from it.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ensemble: EnsembleConfig,
}

fn derive_seed(master: u64, which: Stream) -> u64 {
    stream(master, which).next_u64()
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Applies the master seed, if any, to every stage.
    pub fn resolved(mut self) -> Self {
        if let Some(master) = self.seed {
            self.dataset.seed = derive_seed(master, Stream::Scene);
            self.detector.train.seed = derive_seed(master, Stream::Train);
            self.attack.seed = derive_seed(master, Stream::Init);
            self.eval.seed = derive_seed(master, Stream::Eval);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.attack.validate()?;
        self.eval.transform.validate()?;
        Variant::by_name(&self.detector.variant)?;
        for v in self.ensemble.attacked.iter().chain([&self.ensemble.held_out]) {
            Variant::by_name(v)?;
        }
        if self.ensemble.attacked.contains(&self.ensemble.held_out) {
            return Err(Error::Config(format!(
                "held-out variant {} is also attacked",
                self.ensemble.held_out
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}", Path::new("c")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"atack": {}}"#, Path::new("c")).is_err());
        assert!(RunConfig::from_json(r#"{"attack": {"lamda": 0.1}}"#, Path::new("c")).is_err());
        assert!(RunConfig::from_json(r#"{"attack": {"transform": {"tps": 3}}}"#, Path::new("c")).is_err());
    }

    #[test]
    fn master_seed_fans_out() {
        let a = RunConfig::from_json(r#"{"seed": 5}"#, Path::new("c")).unwrap();
        let b = RunConfig::from_json(r#"{"seed": 5}"#, Path::new("c")).unwrap();
        assert_eq!(a, b);
        let seeds = [a.dataset.seed, a.detector.train.seed, a.attack.seed, a.eval.seed];
        for (i, x) in seeds.iter().enumerate() {
            assert!(seeds[i + 1..].iter().all(|y| y != x));
        }
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.attack.lambda = 0.5;
        cfg.sweep.param = SweepParam::Resolution;
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sweep_names() {
        for n in SweepParam::NAMES {
            assert_eq!(SweepParam::by_name(n).unwrap().name(), n);
        }
        assert!(SweepParam::by_name("tau").is_err());
    }
}
