//! Layer-wise exposure measurement.
//!
//! For each seed the training set X is re-split into a private half S and a
//! public half T, a base model M is trained on S, and every conv/FC layer l
//! is fine-tuned twice from M: M_s on S alone and M_b on all of X. The gap
//! between their generalization errors, normalized as
//! R = (eps_s - eps_b) / eps_s, says how much layer l's parameters betray
//! membership in S. Results aggregate across seeds with Student-t intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{split_private, Dataset, PrivateSplit};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::train::{evaluate, train, TrainConfig};

/// Below this magnitude of eps_s the risk ratio is reported as undefined.
pub const EPS_S_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureConfig {
    pub base_train: TrainConfig,
    pub finetune: TrainConfig,
    /// Number of measurement repetitions; must equal `seeds.len()`.
    pub repeats: usize,
    pub ci_level: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        ExposureConfig {
            base_train: TrainConfig::default(),
            finetune: TrainConfig::fine_tune(),
            repeats: 5,
            ci_level: 0.95,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExposureConfig {
    /// Default configs over an explicit seed list.
    pub fn for_seeds(seeds: Vec<u64>) -> ExposureConfig {
        ExposureConfig {
            repeats: seeds.len(),
            seeds,
            ..ExposureConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArg("repeats must be at least 1".into()));
        }
        if self.repeats != self.seeds.len() {
            return Err(Error::InvalidArg(format!(
                "repeats ({}) must equal the number of seeds ({})",
                self.repeats,
                self.seeds.len()
            )));
        }
        if !(0.0 < self.ci_level && self.ci_level < 1.0) {
            return Err(Error::InvalidArg(format!(
                "ci_level must be in (0, 1), got {}",
                self.ci_level
            )));
        }
        self.base_train.validate()?;
        self.finetune.validate()
    }
}

/// One (seed, layer) measurement cell. `layer_index` is 1-based over the
/// measurable (conv/FC) layers in depth order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerExposure {
    pub seed: u64,
    pub layer_index: usize,
    pub eps_s: f64,
    pub eps_b: f64,
    /// Raw ratio; may fall outside [0, 1] on noisy cells, NaN when undefined.
    pub risk: f64,
    pub risk_clamped: f64,
    pub neurons: usize,
    pub risk_per_neuron: f64,
    /// Set when |eps_s| < [`EPS_S_GUARD`] makes the ratio meaningless.
    pub undefined: bool,
}

/// A cell dropped from aggregation, with the layer it would have filled.
/// `layer_index` follows [`LayerExposure`]; a base-training failure excludes
/// every layer of its seed and is recorded once per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedCell {
    pub seed: u64,
    pub layer_index: usize,
    pub reason: String,
}

/// Sample mean with a Student-t confidence half-width over `n` values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

/// Mean and t-interval half-width at `level`; zero-width for n = 1,
/// NaN for an empty sample.
pub fn mean_ci(values: &[f64], level: f64) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            ci_half_width: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Stat {
            mean,
            ci_half_width: 0.0,
            n,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf(1.0 - (1.0 - level) / 2.0);
    Stat {
        mean,
        ci_half_width: t * var.sqrt() / (n as f64).sqrt(),
        n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer_index: usize,
    /// Short label like "C1" or "FC7", numbered over measurable layers.
    pub label: String,
    pub neurons: usize,
    pub eps_s: Stat,
    pub eps_b: Stat,
    pub risk: Stat,
    pub risk_per_neuron: Stat,
    /// Cells whose risk ratio was undefined (eps stats still include them).
    pub undefined_cells: usize,
    /// Cells lost to divergence (absent from every statistic).
    pub excluded_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureReport {
    pub arch: String,
    pub dataset: String,
    pub input_shape: [usize; 3],
    pub config: ExposureConfig,
    /// True when a single repeat makes every interval trivially zero-width.
    pub ci_zero_width: bool,
    pub layers: Vec<LayerSummary>,
    pub cells: Vec<LayerExposure>,
    pub exclusions: Vec<ExcludedCell>,
}

/// Cost gap between the unseen half and the training half:
/// eps = mean_cost(T) - mean_cost(S).
pub fn generalization_error(model: &Model, s: &Dataset, t: &Dataset) -> Result<f64> {
    Ok(evaluate(model, t)?.mean_cost - evaluate(model, s)?.mean_cost)
}

/// Normalized exposure risk (eps_s - eps_b) / eps_s and its undefined flag.
pub fn exposure_risk(eps_s: f64, eps_b: f64) -> (f64, bool) {
    if eps_s.abs() < EPS_S_GUARD {
        (f64::NAN, true)
    } else {
        ((eps_s - eps_b) / eps_s, false)
    }
}

fn finetune_layer(m: &Model, layer: usize, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let count = m.measurable_indices().len();
    if layer == 0 || layer > count {
        return Err(Error::InvalidArg(format!(
            "layer index {layer} out of range 1..={count}"
        )));
    }
    let mut tuned = m.clone();
    tuned.train_only_measurable(layer - 1)?;
    train(&mut tuned, data, cfg)?;
    Ok(tuned)
}

/// Overfit layer `layer` (1-based measurable index) of `m` to the private
/// half S; everything else stays bitwise equal to `m`.
pub fn make_ms(m: &Model, layer: usize, s: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    finetune_layer(m, layer, s, cfg)
}

/// The baseline counterpart: same fine-tune but on all of X = S then T.
pub fn make_mb(m: &Model, layer: usize, x: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    finetune_layer(m, layer, x, cfg)
}

struct SeedRun {
    cells: Vec<LayerExposure>,
    exclusions: Vec<ExcludedCell>,
}

fn run_seed(template: &Model, x: &Dataset, seed: u64, cfg: &ExposureConfig) -> Result<SeedRun> {
    let measurable = template.measurable_indices();
    let base_cfg = cfg.base_train.clone().with_seed(seed);
    let ft_cfg = cfg.finetune.clone().with_seed(seed);

    let resplit = split_private(x, seed)?;
    let mut base = Model::from_specs(template.arch().to_vec(), template.input_shape(), seed)?;
    if let Err(e) = train(&mut base, &resplit.s, &base_cfg) {
        match e {
            Error::Divergence { .. } => {
                let exclusions = (1..=measurable.len())
                    .map(|layer_index| ExcludedCell {
                        seed,
                        layer_index,
                        reason: format!("base training: {e}"),
                    })
                    .collect();
                return Ok(SeedRun {
                    cells: Vec::new(),
                    exclusions,
                });
            }
            other => return Err(other),
        }
    }
    let x_seed = resplit.s.concat(&resplit.t, x.name.clone())?;

    let mut cells = Vec::with_capacity(measurable.len());
    let mut exclusions = Vec::new();
    for (li, &abs_idx) in measurable.iter().enumerate() {
        let layer_index = li + 1;
        let exclude = |phase: &str, e: &Error| ExcludedCell {
            seed,
            layer_index,
            reason: format!("{phase} fine-tune: {e}"),
        };
        let m_s = match make_ms(&base, layer_index, &resplit.s, &ft_cfg) {
            Ok(m) => m,
            Err(e @ Error::Divergence { .. }) => {
                exclusions.push(exclude("M_s", &e));
                continue;
            }
            Err(other) => return Err(other),
        };
        let m_b = match make_mb(&base, layer_index, &x_seed, &ft_cfg) {
            Ok(m) => m,
            Err(e @ Error::Divergence { .. }) => {
                exclusions.push(exclude("M_b", &e));
                continue;
            }
            Err(other) => return Err(other),
        };
        let eps_s = generalization_error(&m_s, &resplit.s, &resplit.t)?;
        let eps_b = generalization_error(&m_b, &resplit.s, &resplit.t)?;
        let (risk, undefined) = exposure_risk(eps_s, eps_b);
        let risk_clamped = risk.clamp(0.0, 1.0);
        let neurons = template.arch()[abs_idx]
            .neuron_count()
            .expect("measurable layers have neurons");
        cells.push(LayerExposure {
            seed,
            layer_index,
            eps_s,
            eps_b,
            risk,
            risk_clamped,
            neurons,
            risk_per_neuron: risk_clamped / neurons as f64,
            undefined,
        });
    }
    Ok(SeedRun { cells, exclusions })
}

/// Run the full measurement over every seed in `cfg`.
///
/// `model` contributes only its architecture and input shape: each seed
/// re-splits X (the content of `split`), initializes a fresh base model from
/// that seed, and trains it on its own S, so the error bars cover both split
/// and training variance. Seeds run in parallel; cells are folded back in
/// seed order, so the report is byte-stable.
pub fn measure_all(model: &Model, split: &PrivateSplit, cfg: &ExposureConfig) -> Result<ExposureReport> {
    cfg.validate()?;
    let measurable = model.measurable_indices();
    if measurable.is_empty() {
        return Err(Error::InvalidArg(
            "architecture has no measurable (conv/FC) layers".into(),
        ));
    }
    let base_name = split
        .s
        .name
        .strip_suffix("-S")
        .unwrap_or(&split.s.name)
        .to_string();
    let x = split.s.concat(&split.t, base_name)?;

    let runs = par::map_indexed(cfg.seeds.len(), |i| run_seed(model, &x, cfg.seeds[i], cfg));
    let mut cells = Vec::new();
    let mut exclusions = Vec::new();
    for run in runs {
        let run = run?;
        cells.extend(run.cells);
        exclusions.extend(run.exclusions);
    }

    let layers = measurable
        .iter()
        .enumerate()
        .map(|(li, &abs_idx)| {
            let layer_index = li + 1;
            let spec = &model.arch()[abs_idx];
            let of_layer: Vec<&LayerExposure> = cells
                .iter()
                .filter(|c| c.layer_index == layer_index)
                .collect();
            let eps_s: Vec<f64> = of_layer.iter().map(|c| c.eps_s).collect();
            let eps_b: Vec<f64> = of_layer.iter().map(|c| c.eps_b).collect();
            let defined: Vec<&&LayerExposure> =
                of_layer.iter().filter(|c| !c.undefined).collect();
            let risk: Vec<f64> = defined.iter().map(|c| c.risk).collect();
            let rpn: Vec<f64> = defined.iter().map(|c| c.risk_per_neuron).collect();
            LayerSummary {
                layer_index,
                label: format!("{}{}", spec.short_code(), layer_index),
                neurons: spec.neuron_count().expect("measurable layers have neurons"),
                eps_s: mean_ci(&eps_s, cfg.ci_level),
                eps_b: mean_ci(&eps_b, cfg.ci_level),
                risk: mean_ci(&risk, cfg.ci_level),
                risk_per_neuron: mean_ci(&rpn, cfg.ci_level),
                undefined_cells: of_layer.len() - defined.len(),
                excluded_cells: exclusions
                    .iter()
                    .filter(|e| e.layer_index == layer_index)
                    .count(),
            }
        })
        .collect();

    Ok(ExposureReport {
        arch: model.arch_string(),
        dataset: x.name.clone(),
        input_shape: model.input_shape(),
        config: cfg.clone(),
        ci_zero_width: cfg.repeats == 1,
        layers,
        cells,
        exclusions,
    })
}

impl ExposureReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per layer. The `excluded_cells` column counts every cell
    /// missing from the risk statistics: divergence exclusions plus
    /// undefined-risk cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,layer,eps_s_mean,eps_s_ci,eps_b_mean,eps_b_ci,risk_mean,risk_ci,\
             neurons,risk_per_neuron_mean,risk_per_neuron_ci,excluded_cells\n",
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.dataset,
                l.layer_index,
                l.eps_s.mean,
                l.eps_s.ci_half_width,
                l.eps_b.mean,
                l.eps_b.ci_half_width,
                l.risk.mean,
                l.risk.ci_half_width,
                l.neurons,
                l.risk_per_neuron.mean,
                l.risk_per_neuron.ci_half_width,
                l.excluded_cells + l.undefined_cells,
            ));
        }
        out
    }
}
