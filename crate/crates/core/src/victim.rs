//! Surrogate victim: frozen visual and instruction encoders feeding a
//! trainable linear softmax readout over response strings.
//!
//! This isolates the mechanism under study: the feature extractor never
//! learns, so a trigger only works if the frozen features it produces are
//! separable from clean ones. Response-level classification stands in for
//! token-level generation because the attacker's target responses are single
//! template strings.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canon::content_hash;
use crate::corpus::{insert_text_trigger, Dataset, PoisonConfig};
use crate::encoders::{InstructionEncoderSpec, VisualEncoderSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{adam_step, l2_normalize, AdamState, RngSeed, Vector};
use crate::trigger_image::{overlay_patch, BlendMode, PatchGeometry, TriggerPatch};

// ---------------------------------------------------------------------------
// Victim
// ---------------------------------------------------------------------------

/// Frozen encoders plus a trainable linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateVictim {
    pub visual: VisualEncoderSpec,
    pub instr: InstructionEncoderSpec,
    pub vocab: Vec<String>,
    /// |vocab| x (visual_dim + instr_dim), row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Serialized readout; encoders are referenced by content hash.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimRecord {
    pub vocab: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub visual_encoder_hash: String,
    pub instr_encoder_hash: String,
}

impl SurrogateVictim {
    /// Fresh victim with seeded near-zero readout weights.
    pub fn new(
        visual: VisualEncoderSpec,
        instr: InstructionEncoderSpec,
        vocab: Vec<String>,
        init_seed: RngSeed,
    ) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::InvalidConfig("vocab must be non-empty".to_string()));
        }
        let distinct: BTreeSet<&String> = vocab.iter().collect();
        if distinct.len() != vocab.len() {
            return Err(Error::InvalidConfig("vocab entries must be distinct".to_string()));
        }
        let dim = visual.embed_dim() + instr.embed_dim();
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut rng = init_seed.derive("readout-init").rng();
        let weights = (0..vocab.len() * dim).map(|_| normal.sample(&mut rng)).collect();
        let bias = vec![0.0; vocab.len()];
        Ok(Self {
            visual,
            instr,
            vocab,
            weights,
            bias,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.visual.embed_dim() + self.instr.embed_dim()
    }

    /// Concatenated visual and instruction embeddings; each half unit-norm.
    pub fn featurize(&self, image: &Image, instruction: &str) -> Result<Vector> {
        let v = self.visual.visual_embed(image)?;
        let t = self.instr.instr_embed(instruction)?;
        let mut data = Vec::with_capacity(self.feature_dim());
        data.extend_from_slice(&v);
        data.extend_from_slice(&t);
        Ok(Vector::from_raw(data))
    }

    pub fn logits(&self, features: &Vector) -> Result<Vec<f64>> {
        let dim = self.feature_dim();
        if features.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: features.dim(),
            });
        }
        let mut out = Vec::with_capacity(self.vocab.len());
        for k in 0..self.vocab.len() {
            let row = &self.weights[k * dim..(k + 1) * dim];
            out.push(crate::numerics::dot(row, features) + self.bias[k]);
        }
        Ok(out)
    }

    /// Softmax probabilities over the response vocabulary.
    pub fn probabilities(&self, image: &Image, instruction: &str) -> Result<Vec<f64>> {
        let logits = self.logits(&self.featurize(image, instruction)?)?;
        Ok(softmax(&logits))
    }

    /// Argmax response; ties break toward the lowest vocab index.
    pub fn predict(&self, image: &Image, instruction: &str) -> Result<String> {
        let logits = self.logits(&self.featurize(image, instruction)?)?;
        let mut best = 0;
        for (k, v) in logits.iter().enumerate().skip(1) {
            if *v > logits[best] {
                best = k;
            }
        }
        Ok(self.vocab[best].clone())
    }

    /// Readout record with encoder content hashes for artifact wiring.
    pub fn to_record(&self) -> Result<VictimRecord> {
        Ok(VictimRecord {
            vocab: self.vocab.clone(),
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            visual_encoder_hash: content_hash(&self.visual)?,
            instr_encoder_hash: content_hash(&self.instr)?,
        })
    }

    /// Rebuild from a record, refusing encoders whose hashes do not match.
    pub fn from_record(
        record: VictimRecord,
        visual: VisualEncoderSpec,
        instr: InstructionEncoderSpec,
    ) -> Result<Self> {
        if content_hash(&visual)? != record.visual_encoder_hash {
            return Err(Error::InvalidConfig(
                "visual encoder hash does not match victim record".to_string(),
            ));
        }
        if content_hash(&instr)? != record.instr_encoder_hash {
            return Err(Error::InvalidConfig(
                "instruction encoder hash does not match victim record".to_string(),
            ));
        }
        let dim = visual.embed_dim() + instr.embed_dim();
        if record.weights.len() != record.vocab.len() * dim
            || record.bias.len() != record.vocab.len()
        {
            return Err(Error::DimMismatch {
                expected: record.vocab.len() * dim,
                got: record.weights.len(),
            });
        }
        Ok(Self {
            visual,
            instr,
            vocab: record.vocab,
            weights: record.weights,
            bias: record.bias,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Sorted distinct response vocabulary from a dataset plus any extra strings
/// (typically the rendered target response).
pub fn response_vocab(dataset: &Dataset, extra: &[&str]) -> Vec<String> {
    let mut set: BTreeSet<String> = dataset.samples.iter().map(|s| s.response.clone()).collect();
    for e in extra {
        set.insert((*e).to_string());
    }
    set.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Readout training settings. Weight decay is decoupled (AdamW style) and
/// applies to the weight matrix only, never the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.003,
            seed: RngSeed::new(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "train lr and batch_size must be positive".to_string(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-epoch noise applied to the training stream only; evaluation inputs are
/// never noised. Used by the noise defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainAugment {
    /// Gaussian pixel noise, clamped to [0,1], fresh per epoch.
    PixelNoise { sigma: f64, seed: RngSeed },
    /// Gaussian noise on the visual embedding half, re-normalized.
    EmbedNoise { sigma: f64, seed: RngSeed },
}

/// Train the linear readout with minibatch Adam on softmax cross-entropy.
/// Encoders are untouched; the run is deterministic in `cfg.seed`. Returns
/// the trained victim and the per-epoch mean loss trace.
pub fn train_victim(
    victim: &SurrogateVictim,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SurrogateVictim, Vec<f64>)> {
    train_victim_augmented(victim, dataset, cfg, None)
}

/// `train_victim` with an optional defense-side noise hook.
pub fn train_victim_augmented(
    victim: &SurrogateVictim,
    dataset: &Dataset,
    cfg: &TrainConfig,
    augment: Option<&TrainAugment>,
) -> Result<(SurrogateVictim, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab_index: HashMap<&str, usize> = victim
        .vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels: Vec<usize> = dataset
        .samples
        .iter()
        .map(|s| {
            vocab_index
                .get(s.response.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownResponse(s.response.clone()))
        })
        .collect::<Result<_>>()?;

    let base_features: Vec<Vector> = dataset
        .samples
        .par_iter()
        .map(|s| victim.featurize(&s.image, &s.instruction))
        .collect::<Result<_>>()?;

    let n = dataset.len();
    let k = victim.vocab.len();
    let dim = victim.feature_dim();
    let mut params: Vec<f64> = Vec::with_capacity(k * dim + k);
    params.extend_from_slice(&victim.weights);
    params.extend_from_slice(&victim.bias);
    let mut params = Vector::from_raw(params);
    let mut adam = AdamState::new(k * dim + k, cfg.lr)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let features = match augment {
            None => None,
            Some(TrainAugment::PixelNoise { sigma, seed }) => Some(pixel_noised_features(
                victim,
                dataset,
                *sigma,
                seed.derive(&format!("epoch/{epoch}")),
            )?),
            Some(TrainAugment::EmbedNoise { sigma, seed }) => Some(embed_noised_features(
                victim,
                &base_features,
                dataset,
                *sigma,
                seed.derive(&format!("epoch/{epoch}")),
            )?),
        };
        let feats: &[Vector] = features.as_deref().unwrap_or(&base_features);

        let mut rng = cfg.seed.derive(&format!("epoch/{epoch}")).rng();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; k * dim + k];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let f = &feats[i];
                let mut logits = Vec::with_capacity(k);
                for r in 0..k {
                    logits.push(
                        crate::numerics::dot(&params[r * dim..(r + 1) * dim], f)
                            + params[k * dim + r],
                    );
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let y = labels[i];
                loss_sum += -(logits[y] - max - sum.ln());
                for r in 0..k {
                    let p = exps[r] / sum;
                    let dz = (p - if r == y { 1.0 } else { 0.0 }) * inv;
                    if dz == 0.0 {
                        continue;
                    }
                    let row = &mut grad[r * dim..(r + 1) * dim];
                    for (g, x) in row.iter_mut().zip(f.iter()) {
                        *g += dz * x;
                    }
                    grad[k * dim + r] += dz;
                }
            }
            let (next_adam, next_params) = adam_step(&adam, &params, &Vector::from_raw(grad))?;
            adam = next_adam;
            if cfg.weight_decay > 0.0 {
                let mut decayed = next_params.into_inner();
                let shrink = cfg.lr * cfg.weight_decay;
                for (d, old) in decayed[..k * dim].iter_mut().zip(params.iter()) {
                    *d -= shrink * old;
                }
                params = Vector::from_raw(decayed);
            } else {
                params = next_params;
            }
        }
        trace.push(loss_sum / n as f64);
    }

    let mut trained = victim.clone();
    trained.weights = params[..k * dim].to_vec();
    trained.bias = params[k * dim..].to_vec();
    Ok((trained, trace))
}

fn pixel_noised_features(
    victim: &SurrogateVictim,
    dataset: &Dataset,
    sigma: f64,
    epoch_seed: RngSeed,
) -> Result<Vec<Vector>> {
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let mut image = s.image.clone();
            if sigma > 0.0 {
                let mut rng = epoch_seed.derive(&format!("sample/{}", s.id)).rng();
                for v in image.data_mut() {
                    *v += normal.sample(&mut rng);
                }
                image.clamp01();
            }
            victim.featurize(&image, &s.instruction)
        })
        .collect()
}

fn embed_noised_features(
    victim: &SurrogateVictim,
    base: &[Vector],
    dataset: &Dataset,
    sigma: f64,
    epoch_seed: RngSeed,
) -> Result<Vec<Vector>> {
    let vdim = victim.visual.embed_dim();
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    base.par_iter()
        .zip(dataset.samples.par_iter())
        .map(|(f, s)| {
            let mut visual = f[..vdim].to_vec();
            if sigma > 0.0 {
                let mut rng = epoch_seed.derive(&format!("sample/{}", s.id)).rng();
                for v in &mut visual {
                    *v += normal.sample(&mut rng);
                }
            }
            let unit = l2_normalize(&Vector::from_raw(visual))?;
            let mut data = Vec::with_capacity(f.dim());
            data.extend_from_slice(&unit);
            data.extend_from_slice(&f[vdim..]);
            Ok(Vector::from_raw(data))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Clean accuracy and attack success rate of one victim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub clean_accuracy: f64,
    pub asr: f64,
    pub n_clean_eval: usize,
    pub n_triggered_eval: usize,
}

/// Evaluate on a clean set: accuracy on unmodified inputs, then attack
/// success on the same inputs with the triggers applied exactly as during
/// poisoning. A triggered prediction counts toward the attack success rate
/// when it contains the target instance and differs from the ground truth.
pub fn evaluate_attack(
    victim: &SurrogateVictim,
    clean_eval: &Dataset,
    patch: Option<&TriggerPatch>,
    delta_text: Option<&str>,
    pcfg: &PoisonConfig,
    case_sensitive: bool,
) -> Result<AttackMetrics> {
    if clean_eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if clean_eval.samples.iter().any(|s| s.poisoned) {
        return Err(Error::PoisonedEvalSet);
    }
    let predictions: Vec<(String, String)> = clean_eval
        .samples
        .par_iter()
        .map(|s| {
            let clean_pred = victim.predict(&s.image, &s.instruction)?;
            let image = match patch {
                Some(p) => overlay_patch(&s.image, p)?,
                None => s.image.clone(),
            };
            let instruction = match delta_text {
                Some(delta) => insert_text_trigger(
                    &s.instruction,
                    delta,
                    pcfg.insertion_policy,
                    pcfg.insertion_seed(s.id),
                )?,
                None => s.instruction.clone(),
            };
            let triggered_pred = victim.predict(&image, &instruction)?;
            Ok((clean_pred, triggered_pred))
        })
        .collect::<Result<_>>()?;

    let needle = if case_sensitive {
        pcfg.target_instance.clone()
    } else {
        pcfg.target_instance.to_lowercase()
    };
    let mut correct = 0usize;
    let mut hits = 0usize;
    for (s, (clean_pred, triggered_pred)) in clean_eval.samples.iter().zip(&predictions) {
        if *clean_pred == s.response {
            correct += 1;
        }
        let haystack = if case_sensitive {
            triggered_pred.clone()
        } else {
            triggered_pred.to_lowercase()
        };
        if haystack.contains(&needle) && *triggered_pred != s.response {
            hits += 1;
        }
    }
    Ok(AttackMetrics {
        clean_accuracy: correct as f64 / clean_eval.len() as f64,
        asr: hits as f64 / clean_eval.len() as f64,
        n_clean_eval: clean_eval.len(),
        n_triggered_eval: clean_eval.len(),
    })
}

// ---------------------------------------------------------------------------
// Baseline triggers
// ---------------------------------------------------------------------------

/// Conventional trigger baselines sharing the patch pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineTriggerSpec {
    /// Fixed seeded random pixels replacing a corner block.
    StaticPatch {
        height: usize,
        width: usize,
        row: usize,
        col: usize,
    },
    /// Full-image blended random pattern.
    Blended { alpha: f64 },
}

/// Materialize a baseline trigger as a `TriggerPatch` so the downstream
/// poison/train/eval pipeline is shared.
pub fn make_baseline_patch(
    spec: &BaselineTriggerSpec,
    image_dims: (usize, usize, usize),
    seed: RngSeed,
) -> Result<TriggerPatch> {
    let (img_h, img_w, channels) = image_dims;
    let (geometry, count) = match spec {
        BaselineTriggerSpec::StaticPatch {
            height,
            width,
            row,
            col,
        } => {
            if *height == 0 || *width == 0 {
                return Err(Error::InvalidSpec("static patch dims must be positive".to_string()));
            }
            (
                PatchGeometry {
                    height: *height,
                    width: *width,
                    row: *row,
                    col: *col,
                    blend: BlendMode::Replace,
                },
                height * width * channels,
            )
        }
        BaselineTriggerSpec::Blended { alpha } => {
            if !(*alpha > 0.0 && *alpha <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "blended alpha must be in (0,1], got {alpha}"
                )));
            }
            (
                PatchGeometry {
                    height: img_h,
                    width: img_w,
                    row: 0,
                    col: 0,
                    blend: BlendMode::Blend { alpha: *alpha },
                },
                img_h * img_w * channels,
            )
        }
    };
    let mut rng = seed.derive("baseline-pixels").rng();
    let pixels: Vec<f64> = (0..count)
        .map(|_| rand::Rng::gen_range(&mut rng, 0.02..0.98))
        .collect();
    TriggerPatch::from_pixels(&geometry, channels, &pixels)
}
