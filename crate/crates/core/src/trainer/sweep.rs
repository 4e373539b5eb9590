use serde::{Deserialize, Serialize};

use super::{evaluate, finetune, TrainConfig};
use crate::corpus::{subsample, DomainKnowledge, Sentence};
use crate::error::{Error, Result};
use crate::model::{Model, ViewOptions};

/// What a sweep varies.
#[derive(Clone, Debug)]
pub enum SweepAxis {
    /// Target-data fractions; 0 runs zero-shot (no fine-tuning).
    Fractions(Vec<f64>),
    /// Exemplars-per-slot counts at a fixed data fraction.
    ExemplarCounts { counts: Vec<usize>, fraction: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    /// Fraction or exemplar count, depending on the axis.
    pub x: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub runs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub repeats: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = format!("{}\tmean_f1\tstd_f1\n", self.axis);
        for row in &self.rows {
            out.push_str(&format!("{}\t{:.4}\t{:.4}\n", row.x, row.mean_f1, row.std_f1));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Repeated data selection, fine-tuning, and evaluation on the target
/// domain. Each repeat uses seed `cfg.seed + repeat` for both the data
/// selection and training; results are averaged per axis point.
///
/// A `source` model is required for zero-shot points (fraction 0 and
/// exemplar-count sweeps); fraction points above 0 fall back to training
/// from scratch when no source is given.
pub fn sweep(
    cfg: &TrainConfig,
    source: Option<&Model>,
    target_train: &[Sentence],
    target_test: &[Sentence],
    knowledge: &DomainKnowledge,
    axis: &SweepAxis,
) -> Result<SweepReport> {
    let repeats = cfg.repeats.max(1);
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Fractions(fractions) => {
            for &fraction in fractions {
                let mut runs = Vec::with_capacity(repeats);
                for rep in 0..repeats {
                    let seed = cfg.seed + rep as u64;
                    runs.push(run_fraction(cfg, source, target_train, target_test, knowledge, fraction, seed)?);
                }
                let (mean_f1, std_f1) = mean_std(&runs);
                rows.push(SweepRow { x: fraction, mean_f1, std_f1, runs });
            }
            Ok(SweepReport { axis: "fraction".into(), repeats, rows })
        }
        SweepAxis::ExemplarCounts { counts, fraction } => {
            for &count in counts {
                let mut cfg_c = cfg.clone();
                cfg_c.exemplars_per_slot = Some(count);
                let mut runs = Vec::with_capacity(repeats);
                for rep in 0..repeats {
                    let seed = cfg.seed + rep as u64;
                    runs.push(run_fraction(&cfg_c, source, target_train, target_test, knowledge, *fraction, seed)?);
                }
                let (mean_f1, std_f1) = mean_std(&runs);
                rows.push(SweepRow { x: count as f64, mean_f1, std_f1, runs });
            }
            Ok(SweepReport { axis: "exemplars_per_slot".into(), repeats, rows })
        }
    }
}

fn run_fraction(
    cfg: &TrainConfig,
    source: Option<&Model>,
    target_train: &[Sentence],
    target_test: &[Sentence],
    knowledge: &DomainKnowledge,
    fraction: f64,
    seed: u64,
) -> Result<f64> {
    let eval_opts = ViewOptions {
        zero_shot: false,
        exemplar_cap: cfg.exemplars_per_slot,
    };
    if fraction == 0.0 {
        // zero-shot: evaluate the pretrained model restricted to the
        // target tags it can score; no fine-tuning happens
        let source = source.ok_or_else(|| {
            Error::Training("zero-shot sweep points need a pretrained source model".into())
        })?;
        let opts = ViewOptions { zero_shot: true, exemplar_cap: cfg.exemplars_per_slot };
        let (metrics, _) = evaluate(source, target_test, &[knowledge], &opts)?;
        return Ok(metrics.f1);
    }

    let selected = subsample(target_train, fraction, seed);
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    let model = match source {
        Some(src) => finetune(&run_cfg, src, &selected, None, knowledge)?.0,
        None => super::train(&run_cfg, &selected, None, knowledge, &super::Resources::default())?.0,
    };
    let (metrics, _) = evaluate(&model, target_test, &[knowledge], &eval_opts)?;
    Ok(metrics.f1)
}
