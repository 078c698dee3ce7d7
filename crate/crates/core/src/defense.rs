//! Training-time defenses: two-step cosine-similarity poisoned-sample
//! detection, noise perturbation of the training stream, and a paired
//! undefended/defended evaluation harness.
//!
//! Detection exploits the same geometry the attack engineers: poisoned
//! embeddings cluster tightly with each other while sitting far from the
//! rest of the corpus. Step 1 collects every sample that appears in a
//! high-similarity pair; step 2 flags candidates whose mean similarity to
//! the remaining samples is low. Detection runs on encoder embeddings, since
//! the reasoning is about features rather than raw pixels.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, PoisonConfig};
use crate::encoders::{InstructionEncoderSpec, VisualEncoderSpec};
use crate::error::{Error, Result};
use crate::numerics::{dot, RngSeed, Vector};
use crate::trigger_image::TriggerPatch;
use crate::victim::{
    evaluate_attack, train_victim_augmented, AttackMetrics, SurrogateVictim, TrainAugment,
    TrainConfig,
};

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// Thresholds for the two-step detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Step 1: a sample joins the candidate set when it appears in any pair
    /// with cosine at or above this value.
    pub tau_pair: f64,
    /// Step 2: candidates whose mean cosine to the non-candidates is at or
    /// below this value are flagged.
    pub tau_rest: f64,
    /// Hard cap on the flagged fraction of the dataset.
    pub max_flag_fraction: f64,
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_pair", self.tau_pair), ("tau_rest", self.tau_rest)] {
            if !(v > -1.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (-1, 1), got {v}"
                )));
            }
        }
        if !(self.max_flag_fraction > 0.0 && self.max_flag_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_flag_fraction must lie in (0, 1], got {}",
                self.max_flag_fraction
            )));
        }
        Ok(())
    }
}

/// Summary statistics of the similarity structure seen during detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub n_samples: usize,
    pub n_pairs: u64,
    pub pair_cos_min: f64,
    pub pair_cos_mean: f64,
    pub pair_cos_max: f64,
    pub n_candidates: usize,
    pub candidate_rest_means: Vec<f64>,
}

/// Outcome of one detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub flagged_ids: BTreeSet<u64>,
    /// Fraction of flagged samples that are truly poisoned; absent when
    /// nothing was flagged.
    pub precision: Option<f64>,
    /// Fraction of truly poisoned samples that were flagged; absent when the
    /// dataset holds no poisoned samples.
    pub recall: Option<f64>,
    pub stats: PairStats,
}

impl DetectionReport {
    /// False-positive rate against ground-truth poison flags: flagged clean
    /// samples over all clean samples.
    pub fn false_positive_rate(&self, dataset: &Dataset) -> f64 {
        let poisoned = dataset.poisoned_ids();
        let clean_total = dataset.len() - poisoned.len();
        if clean_total == 0 {
            return 0.0;
        }
        let false_pos = self
            .flagged_ids
            .iter()
            .filter(|id| !poisoned.contains(id))
            .count();
        false_pos as f64 / clean_total as f64
    }
}

fn embed_all(enc: &VisualEncoderSpec, dataset: &Dataset) -> Result<Vec<Vector>> {
    dataset
        .samples
        .par_iter()
        .map(|s| enc.visual_embed(&s.image))
        .collect()
}

struct RowScan {
    max_other: f64,
    upper_sum: f64,
    upper_min: f64,
    upper_max: f64,
}

/// Two-step detection over visual embeddings. Deterministic; permuting the
/// dataset permutes ids but flags the same id set.
pub fn detect_poisoned(
    enc: &VisualEncoderSpec,
    dataset: &Dataset,
    cfg: &DetectionConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    if dataset.len() < 3 {
        return Err(Error::DatasetTooSmall {
            need: 3,
            got: dataset.len(),
        });
    }
    let embeds = embed_all(enc, dataset)?;
    let n = embeds.len();

    // Pass 1: per-row maximum over the full row, plus upper-triangle stats.
    let rows: Vec<RowScan> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut max_other = f64::NEG_INFINITY;
            let mut upper_sum = 0.0;
            let mut upper_min = f64::INFINITY;
            let mut upper_max = f64::NEG_INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let cos = dot(&embeds[i], &embeds[j]);
                if cos > max_other {
                    max_other = cos;
                }
                if j > i {
                    upper_sum += cos;
                    if cos < upper_min {
                        upper_min = cos;
                    }
                    if cos > upper_max {
                        upper_max = cos;
                    }
                }
            }
            RowScan {
                max_other,
                upper_sum,
                upper_min,
                upper_max,
            }
        })
        .collect();

    let candidates: Vec<usize> = (0..n).filter(|&i| rows[i].max_other >= cfg.tau_pair).collect();
    let candidate_set: Vec<bool> = {
        let mut mask = vec![false; n];
        for &i in &candidates {
            mask[i] = true;
        }
        mask
    };
    let rest: Vec<usize> = (0..n).filter(|&i| !candidate_set[i]).collect();

    // Pass 2: mean similarity from each candidate to the non-candidates.
    let rest_means: Vec<f64> = candidates
        .par_iter()
        .map(|&i| {
            if rest.is_empty() {
                // Nothing to compare against; treat as unsuspicious.
                return 1.0;
            }
            let mut acc = 0.0;
            for &j in &rest {
                acc += dot(&embeds[i], &embeds[j]);
            }
            acc / rest.len() as f64
        })
        .collect();

    let mut suspicious: Vec<(f64, u64)> = candidates
        .iter()
        .zip(rest_means.iter())
        .filter(|(_, mean)| **mean <= cfg.tau_rest)
        .map(|(&i, &mean)| (mean, dataset.samples[i].id))
        .collect();
    suspicious.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let cap = ((cfg.max_flag_fraction * n as f64).floor() as usize).min(suspicious.len());
    let flagged_ids: BTreeSet<u64> = suspicious[..cap].iter().map(|(_, id)| *id).collect();

    // Sequential merge of the parallel row stats keeps results bit-stable.
    let n_pairs = (n as u64) * (n as u64 - 1) / 2;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for row in rows.iter().take(n - 1) {
        sum += row.upper_sum;
        min = min.min(row.upper_min);
        max = max.max(row.upper_max);
    }
    let stats = PairStats {
        n_samples: n,
        n_pairs,
        pair_cos_min: min,
        pair_cos_mean: sum / n_pairs as f64,
        pair_cos_max: max,
        n_candidates: candidates.len(),
        candidate_rest_means: rest_means,
    };

    let poisoned = dataset.poisoned_ids();
    let true_pos = flagged_ids.intersection(&poisoned).count();
    let precision = if flagged_ids.is_empty() {
        None
    } else {
        Some(true_pos as f64 / flagged_ids.len() as f64)
    };
    let recall = if poisoned.is_empty() {
        None
    } else {
        Some(true_pos as f64 / poisoned.len() as f64)
    };
    Ok(DetectionReport {
        flagged_ids,
        precision,
        recall,
        stats,
    })
}

/// Nearest-rank quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Derive detection thresholds from a clean calibration corpus: `tau_pair`
/// is a high quantile of its pairwise cosines, `tau_rest` a low quantile of
/// the candidate-to-rest means produced by running step 1 on the same corpus.
pub fn calibrate_detection(
    enc: &VisualEncoderSpec,
    clean_corpus: &Dataset,
    pair_quantile: f64,
    rest_quantile: f64,
    max_flag_fraction: f64,
) -> Result<DetectionConfig> {
    if clean_corpus.len() < 3 {
        return Err(Error::DatasetTooSmall {
            need: 3,
            got: clean_corpus.len(),
        });
    }
    for (name, q) in [("pair_quantile", pair_quantile), ("rest_quantile", rest_quantile)] {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} must lie in (0, 1), got {q}"
            )));
        }
    }
    let embeds = embed_all(enc, clean_corpus)?;
    let n = embeds.len();
    let mut pair_cos: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pair_cos.push(dot(&embeds[i], &embeds[j]));
        }
    }
    pair_cos.sort_by(f64::total_cmp);
    // Keep the threshold a valid cosine even on near-duplicate corpora.
    let tau_pair = quantile(&pair_cos, pair_quantile).min(1.0 - 1e-9);

    let probe = DetectionConfig {
        tau_pair,
        tau_rest: -(1.0 - 1e-9),
        max_flag_fraction,
    };
    let report = detect_poisoned(enc, clean_corpus, &probe)?;
    let mut means = report.stats.candidate_rest_means.clone();
    if means.is_empty() {
        return Err(Error::InvalidConfig(
            "calibration produced no step-1 candidates; lower pair_quantile".to_string(),
        ));
    }
    means.sort_by(f64::total_cmp);
    let tau_rest = quantile(&means, rest_quantile);
    let cfg = DetectionConfig {
        tau_pair,
        tau_rest,
        max_flag_fraction,
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Noise defense
// ---------------------------------------------------------------------------

/// Where defensive noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Pixels,
    Embeddings,
}

/// Noise-perturbation defense settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDefenseConfig {
    pub sigma: f64,
    pub apply_to: NoiseTarget,
}

impl NoiseDefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Translate the defense config into the victim-side training hook.
/// Sigma zero is an exact no-op, so it maps to no augmentation at all.
pub fn noise_augment(cfg: &NoiseDefenseConfig, seed: RngSeed) -> Result<Option<TrainAugment>> {
    cfg.validate()?;
    if cfg.sigma == 0.0 {
        return Ok(None);
    }
    Ok(Some(match cfg.apply_to {
        NoiseTarget::Pixels => TrainAugment::PixelNoise {
            sigma: cfg.sigma,
            seed,
        },
        NoiseTarget::Embeddings => TrainAugment::EmbedNoise {
            sigma: cfg.sigma,
            seed,
        },
    }))
}

// ---------------------------------------------------------------------------
// Defense evaluation
// ---------------------------------------------------------------------------

/// Everything needed to train and evaluate one attack end to end.
pub struct AttackScenario<'a> {
    pub poisoned_train: &'a Dataset,
    pub clean_eval: &'a Dataset,
    pub patch: Option<&'a TriggerPatch>,
    pub delta_text: Option<&'a str>,
    pub pcfg: &'a PoisonConfig,
    pub train_cfg: &'a TrainConfig,
    pub visual: &'a VisualEncoderSpec,
    pub instr: &'a InstructionEncoderSpec,
    pub vocab: Vec<String>,
    pub case_sensitive: bool,
    pub victim_init_seed: RngSeed,
}

/// A defense to apply before (re)training.
#[derive(Clone, Debug)]
pub enum DefenseStrategy {
    /// Detect with the given thresholds, omit flagged samples, retrain.
    DetectOmit(DetectionConfig),
    /// Omit exactly the ground-truth poisoned samples.
    OracleOmit,
    /// Retrain with noise injected into the training stream.
    Noise(NoiseDefenseConfig),
}

/// Paired metrics from an undefended and a defended run with shared seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub undefended: AttackMetrics,
    pub defended: AttackMetrics,
    pub asr_delta: f64,
    pub clean_accuracy_delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
}

/// Drop the samples with the given ids, re-numbering ids to stay contiguous.
pub fn omit_samples(dataset: &Dataset, ids: &BTreeSet<u64>) -> Dataset {
    let samples = dataset
        .samples
        .iter()
        .filter(|s| !ids.contains(&s.id))
        .enumerate()
        .map(|(new_id, s)| {
            let mut s = s.clone();
            s.id = new_id as u64;
            s
        })
        .collect();
    Dataset {
        samples,
        meta: dataset.meta.clone(),
    }
}

fn train_and_eval(
    scenario: &AttackScenario<'_>,
    train_set: &Dataset,
    augment: Option<&TrainAugment>,
) -> Result<AttackMetrics> {
    let victim = SurrogateVictim::new(
        scenario.visual.clone(),
        scenario.instr.clone(),
        scenario.vocab.clone(),
        scenario.victim_init_seed,
    )?;
    let (trained, _) = train_victim_augmented(&victim, train_set, scenario.train_cfg, augment)?;
    evaluate_attack(
        &trained,
        scenario.clean_eval,
        scenario.patch,
        scenario.delta_text,
        scenario.pcfg,
        scenario.case_sensitive,
    )
}

/// Run the scenario undefended and defended with shared seeds and report the
/// paired metrics. Deltas are exact differences of the two runs' fields.
pub fn evaluate_defense(
    scenario: &AttackScenario<'_>,
    strategy: &DefenseStrategy,
    seed: RngSeed,
) -> Result<DefenseOutcome> {
    let undefended = train_and_eval(scenario, scenario.poisoned_train, None)?;
    let mut detection = None;
    let defended = match strategy {
        DefenseStrategy::DetectOmit(cfg) => {
            let report = detect_poisoned(scenario.visual, scenario.poisoned_train, cfg)?;
            let filtered = omit_samples(scenario.poisoned_train, &report.flagged_ids);
            detection = Some(report);
            train_and_eval(scenario, &filtered, None)?
        }
        DefenseStrategy::OracleOmit => {
            let filtered = omit_samples(
                scenario.poisoned_train,
                &scenario.poisoned_train.poisoned_ids(),
            );
            train_and_eval(scenario, &filtered, None)?
        }
        DefenseStrategy::Noise(cfg) => {
            let augment = noise_augment(cfg, seed.derive("noise"))?;
            train_and_eval(scenario, scenario.poisoned_train, augment.as_ref())?
        }
    };
    Ok(DefenseOutcome {
        undefended,
        defended,
        asr_delta: defended.asr - undefended.asr,
        clean_accuracy_delta: defended.clean_accuracy - undefended.clean_accuracy,
        detection,
    })
}
