//! Trains and scores every fusion variant over several seeds.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::decoder::Variant;
use crate::error::{invalid, Result};
use crate::eval::{eval_seed, evaluate};
use crate::metrics::MetricsReport;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub eval_seed: u64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub param_count: usize,
    pub mean: MetricsReport,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// Mean held-out gIoU of `v`.
    pub fn giou(&self, v: Variant) -> Option<f64> {
        self.variant(v).and_then(|s| s.mean.giou)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Training seeds of an ablation: `base, base + 2, …`, so no run's held-out
/// stream (`seed + 1`) is another run's training stream.
pub fn ablation_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base + 2 * k).collect()
}

/// Trains each variant of `config` on `n_seeds` seeds and evaluates it on
/// `eval_samples` held-out tasks. `on_run` sees every finished run.
pub fn ablate(
    config: &TrainConfig,
    n_seeds: usize,
    eval_samples: usize,
    mut on_run: impl FnMut(Variant, &AblationRun),
) -> Result<AblationReport> {
    if n_seeds == 0 || eval_samples == 0 {
        return Err(invalid("ablate", "need at least one seed and one held-out sample"));
    }
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut runs = Vec::with_capacity(n_seeds);
        let mut param_count = 0;
        for seed in ablation_seeds(config.seed, n_seeds) {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.decoder.variant = variant;
            let outcome = train(&cfg)?;
            param_count = outcome.model.decoder.count();
            let final_loss = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
            let ckpt = Checkpoint { config: cfg, model: outcome.model };
            let run = AblationRun {
                seed,
                eval_seed: eval_seed(seed),
                final_loss,
                metrics: evaluate(&ckpt, eval_samples, eval_seed(seed))?,
            };
            on_run(variant, &run);
            runs.push(run);
        }
        let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
        variants.push(VariantSummary {
            variant,
            param_count,
            mean: MetricsReport::mean(&reports).expect("at least one run"),
            runs,
        });
    }
    Ok(AblationReport {
        steps: config.steps,
        batch_size: config.batch_size,
        eval_samples,
        variants,
    })
}
