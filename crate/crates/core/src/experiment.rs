//! End-to-end experiments built from the stage modules: the digital attack
//! with its controls, parameter sweeps and the ensemble transfer study.

use std::path::Path;

use serde::Serialize;

use crate::attack::{make_baseline_patch, optimize_patch, AttackConfig, AttackResult, BaselineKind};
use crate::config::SweepParam;
use crate::detector::DetectorWeights;
use crate::eval::{evaluate_conditions, pr_csv, sig6, Condition, EvalConfig, EvalReport};
use crate::pattern::write_all;
use crate::rng::{stream, Stream};
use crate::scene::Dataset;
use crate::{Error, Result};

pub const OPTIMIZED: &str = "optimized";
pub const RANDOM: &str = "random";
pub const BLANK: &str = "blank";
pub const ENSEMBLE: &str = "ensemble";
pub const SINGLE: &str = "single";

/// Random and blank control patterns of side `side`.
pub fn baselines(side: usize, seed: u64) -> Result<Vec<Condition>> {
    let mut rng = stream(seed, Stream::Baseline);
    Ok(vec![
        Condition {
            name: RANDOM.into(),
            patch: make_baseline_patch(BaselineKind::Random, side, &mut rng)?,
        },
        Condition {
            name: BLANK.into(),
            patch: make_baseline_patch(BaselineKind::Blank, side, &mut rng)?,
        },
    ])
}

pub struct DigitalOutcome {
    pub attack: AttackResult,
    pub report: EvalReport,
}

/// Optimizes a patch on the training split and evaluates it, with the
/// random and blank controls, on the test split.
pub fn digital_attack(
    detectors: &[DetectorWeights],
    dataset: &Dataset,
    attack: &AttackConfig,
    eval: &EvalConfig,
) -> Result<DigitalOutcome> {
    let result = optimize_patch(detectors, &dataset.train_scenes(), attack)?;
    let mut conditions = vec![Condition {
        name: OPTIMIZED.into(),
        patch: result.patch.clone(),
    }];
    conditions.extend(baselines(attack.side, eval.seed)?);
    let targets: Vec<(DetectorWeights, bool)> = detectors.iter().map(|d| (d.clone(), true)).collect();
    let report = evaluate_conditions(&targets, &dataset.test_scenes(), &conditions, eval)?;
    Ok(DigitalOutcome { attack: result, report })
}

/// AP drops of the optimized, random and blank conditions on detector `index`.
pub fn condition_drops(report: &EvalReport, index: usize) -> Option<[f64; 3]> {
    Some([
        report.condition(index, OPTIMIZED)?.ap_drop,
        report.condition(index, RANDOM)?.ap_drop,
        report.condition(index, BLANK)?.ap_drop,
    ])
}

/// Optimized beats random beats blank beats clean, on every detector.
pub fn ordering_holds(report: &EvalReport) -> bool {
    (0..report.detectors.len()).all(|i| match condition_drops(report, i) {
        Some([o, r, b]) => o > r && r > b && b > 0.0,
        None => false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub ap_drop: f64,
    pub asr: f64,
    pub black_ratio: f64,
}

/// One attack and evaluation per value, all sharing the configured seeds.
/// Lambda and resolution re-optimize for each value; proportion optimizes
/// once and evaluates at each fixed proportion. Drops are measured on the
/// first detector.
pub fn sweep(
    detectors: &[DetectorWeights],
    dataset: &Dataset,
    param: SweepParam,
    values: &[f64],
    attack: &AttackConfig,
    eval: &EvalConfig,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let targets: Vec<(DetectorWeights, bool)> = detectors.iter().map(|d| (d.clone(), true)).collect();
    let test = dataset.test_scenes();
    let point = |value: f64, result: &AttackResult, eval: &EvalConfig| -> Result<SweepPoint> {
        let cond = Condition {
            name: OPTIMIZED.into(),
            patch: result.patch.clone(),
        };
        let report = evaluate_conditions(&targets[..1], &test, &[cond], eval)?;
        let c = &report.detectors[0].conditions[0];
        Ok(SweepPoint {
            value,
            ap_drop: c.ap_drop,
            asr: c.asr,
            black_ratio: result.black_ratio,
        })
    };
    match param {
        SweepParam::Lambda | SweepParam::Resolution => values
            .iter()
            .map(|&value| {
                let mut cfg = attack.clone();
                if param == SweepParam::Lambda {
                    cfg.lambda = value;
                } else {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(Error::Config(format!("resolution {value} is not a positive integer")));
                    }
                    cfg.side = value as usize;
                }
                let result = optimize_patch(detectors, &dataset.train_scenes(), &cfg)?;
                point(value, &result, eval)
            })
            .collect(),
        SweepParam::Proportion => {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("proportion {v} outside [0, 1]")));
            }
            let result = optimize_patch(detectors, &dataset.train_scenes(), attack)?;
            values
                .iter()
                .map(|&value| {
                    let fixed = EvalConfig {
                        proportion_range: [value, value],
                        ..eval.clone()
                    };
                    point(value, &result, &fixed)
                })
                .collect()
        }
    }
}

pub fn sweep_table_csv(param: SweepParam, rows: &[SweepPoint]) -> String {
    let mut s = format!("{},ap_drop,asr,black_ratio\n", param.name());
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            sig6(r.value),
            sig6(r.ap_drop),
            sig6(r.asr),
            sig6(r.black_ratio)
        ));
    }
    s
}

pub struct TransferOutcome {
    pub single: AttackResult,
    pub ensemble: AttackResult,
    /// Attacked detectors first, then the held-out one.
    pub report: EvalReport,
}

/// Optimizes one patch on the first attacked detector and one on all of
/// them, then evaluates both on every attacked detector and on `held_out`.
pub fn ensemble_transfer(
    attacked: &[DetectorWeights],
    held_out: &DetectorWeights,
    dataset: &Dataset,
    attack: &AttackConfig,
    eval: &EvalConfig,
) -> Result<TransferOutcome> {
    if attacked.is_empty() {
        return Err(Error::Invalid(
            "the ensemble needs at least one attacked detector".into(),
        ));
    }
    let train = dataset.train_scenes();
    let single = optimize_patch(&attacked[..1], &train, attack)?;
    let ensemble = optimize_patch(attacked, &train, attack)?;
    let conditions = [
        Condition {
            name: ENSEMBLE.into(),
            patch: ensemble.patch.clone(),
        },
        Condition {
            name: SINGLE.into(),
            patch: single.patch.clone(),
        },
    ];
    let mut targets: Vec<(DetectorWeights, bool)> = attacked.iter().map(|d| (d.clone(), true)).collect();
    targets.push((held_out.clone(), false));
    let report = evaluate_conditions(&targets, &dataset.test_scenes(), &conditions, eval)?;
    Ok(TransferOutcome {
        single,
        ensemble,
        report,
    })
}

/// Writes `report.json` and one PR curve CSV per detector and condition.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_all(&dir.join("report.json"), report.to_json().as_bytes())?;
    for (i, d) in report.detectors.iter().enumerate() {
        let names = std::iter::once("clean").chain(d.conditions.iter().map(|c| c.name.as_str()));
        for (name, curve) in names.zip(&d.curves) {
            let file = dir.join(format!("pr_{i}_{}_{name}.csv", d.detector));
            write_all(&file, pr_csv(curve).as_bytes())?;
        }
    }
    Ok(())
}
