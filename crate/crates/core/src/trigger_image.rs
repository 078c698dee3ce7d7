//! Image-trigger machinery: patch overlay, the contrastive separation and
//! clustering losses, their exact analytic gradient with respect to the patch
//! parameters, and the Adam optimization loop over a poisoned sample pool.
//!
//! The patch is parameterized directly by unconstrained logits pushed through
//! a sigmoid, which is equivalent to a generator with a fixed latent input;
//! with a single trigger per attack the generator adds no expressiveness.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{LabelPrototypeEncoder, VisualEncoderSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{adam_step, dot, AdamState, RngSeed, Vector};

/// How patch pixels combine with the underlying image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BlendMode {
    /// Patch pixels replace the covered cells.
    Replace,
    /// Convex blend: `alpha * patch + (1 - alpha) * base`.
    Blend { alpha: f64 },
}

/// Placement and blending of a rectangular trigger patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub row: usize,
    pub col: usize,
    pub blend: BlendMode,
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(format!(
                "patch dims must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if let BlendMode::Blend { alpha } = self.blend {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "blend alpha must be in (0,1], got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// A parameterized image trigger. `params` are unconstrained logits of shape
/// patch_h x patch_w x channels (row-major); realized pixels are
/// `sigmoid(params)`, always inside (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerPatch {
    pub params: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub row: usize,
    pub col: usize,
    pub blend: BlendMode,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TriggerPatch {
    pub fn new(geometry: &PatchGeometry, channels: usize, params: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if channels == 0 {
            return Err(Error::InvalidSpec("patch needs at least one channel".to_string()));
        }
        let expected = geometry.height * geometry.width * channels;
        if params.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            params,
            height: geometry.height,
            width: geometry.width,
            channels,
            row: geometry.row,
            col: geometry.col,
            blend: geometry.blend,
        })
    }

    /// Seeded initialization with small logits (pixels near 0.5).
    pub fn init(geometry: &PatchGeometry, channels: usize, seed: RngSeed) -> Result<Self> {
        geometry.validate()?;
        let normal = Normal::new(0.0, 0.1).expect("finite std");
        let mut rng = seed.derive("patch-init").rng();
        let params = (0..geometry.height * geometry.width * channels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::new(geometry, channels, params)
    }

    /// Exact pixel grid for given target pixel values in (0, 1).
    pub fn from_pixels(geometry: &PatchGeometry, channels: usize, pixels: &[f64]) -> Result<Self> {
        if pixels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidSpec(
                "pixel values must lie strictly inside (0,1)".to_string(),
            ));
        }
        let params = pixels.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        Self::new(geometry, channels, params)
    }

    /// Realized pixel values, `sigmoid(params)`.
    pub fn pixels(&self) -> Vec<f64> {
        self.params.iter().map(|p| sigmoid(*p)).collect()
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            height: self.height,
            width: self.width,
            row: self.row,
            col: self.col,
            blend: self.blend,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    #[inline]
    fn cell(&self, ph: usize, pw: usize, c: usize) -> usize {
        (ph * self.width + pw) * self.channels + c
    }
}

/// Overlay a trigger patch onto an image. Pixels outside the patch rectangle
/// are bit-unchanged; both operands live in [0,1] so no clipping is needed.
pub fn overlay_patch(image: &Image, patch: &TriggerPatch) -> Result<Image> {
    let (h, w, c) = image.dims();
    if patch.channels != c {
        return Err(Error::DimMismatch {
            expected: c,
            got: patch.channels,
        });
    }
    if patch.row + patch.height > h || patch.col + patch.width > w {
        return Err(Error::OutOfBounds(format!(
            "{}x{} patch at ({},{}) does not fit a {}x{} image",
            patch.height, patch.width, patch.row, patch.col, h, w
        )));
    }
    let pixels = patch.pixels();
    let mut out = image.clone();
    for ph in 0..patch.height {
        for pw in 0..patch.width {
            for ch in 0..c {
                let p = pixels[patch.cell(ph, pw, ch)];
                let (ih, iw) = (patch.row + ph, patch.col + pw);
                let value = match patch.blend {
                    BlendMode::Replace => p,
                    BlendMode::Blend { alpha } => alpha * p + (1.0 - alpha) * image.get(ih, iw, ch),
                };
                out.set(ih, iw, ch, value);
            }
        }
    }
    Ok(out)
}

/// Settings for the trigger optimization loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTriggerOptConfig {
    /// Weight of the separation term.
    pub alpha_w: f64,
    /// Weight of the clustering term.
    pub beta_w: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: RngSeed,
}

impl Default for ImageTriggerOptConfig {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 1.0,
            lr: 0.05,
            iterations: 300,
            batch_size: 16,
            seed: RngSeed::new(0),
        }
    }
}

impl ImageTriggerOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_w < 0.0 || self.beta_w < 0.0 || (self.alpha_w == 0.0 && self.beta_w == 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative and not both zero".to_string(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 (the clustering term pairs adjacent samples)"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// The two loss terms and their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLosses {
    pub l1: f64,
    pub l2: f64,
    pub l_it: f64,
}

struct BatchEmbeddings {
    triggered_images: Vec<Image>,
    triggered: Vec<Vector>,
    clean: Vec<Vector>,
    labels: Vec<Vector>,
}

fn embed_batch(
    enc: &VisualEncoderSpec,
    label_enc: &LabelPrototypeEncoder,
    batch: &[(Image, String)],
    patch: &TriggerPatch,
) -> Result<BatchEmbeddings> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: batch.len(),
        });
    }
    let mut triggered_images = Vec::with_capacity(batch.len());
    let mut triggered = Vec::with_capacity(batch.len());
    let mut clean = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (image, label) in batch {
        let overlaid = overlay_patch(image, patch)?;
        triggered.push(enc.visual_embed(&overlaid)?);
        triggered_images.push(overlaid);
        clean.push(enc.visual_embed(image)?);
        labels.push(label_enc.label_proto_embed(label)?);
    }
    Ok(BatchEmbeddings {
        triggered_images,
        triggered,
        clean,
        labels,
    })
}

fn losses_from_embeddings(emb: &BatchEmbeddings, alpha_w: f64, beta_w: f64) -> ContrastiveLosses {
    let n = emb.triggered.len();
    let inv_n = 1.0 / n as f64;
    let mut l1 = 0.0;
    for i in 0..n {
        l1 += dot(&emb.triggered[i], &emb.clean[i]) + dot(&emb.triggered[i], &emb.labels[i]);
    }
    l1 *= inv_n;
    let mut l2 = 0.0;
    for i in 0..n - 1 {
        l2 -= dot(&emb.triggered[i], &emb.triggered[i + 1]);
    }
    l2 *= inv_n;
    ContrastiveLosses {
        l1,
        l2,
        l_it: alpha_w * l1 + beta_w * l2,
    }
}

/// Separation loss, clustering loss, and their weighted sum over one batch of
/// (clean image, label) pairs. Batch order is the caller's.
pub fn contrastive_losses(
    enc: &VisualEncoderSpec,
    label_enc: &LabelPrototypeEncoder,
    batch: &[(Image, String)],
    patch: &TriggerPatch,
    alpha_w: f64,
    beta_w: f64,
) -> Result<ContrastiveLosses> {
    let emb = embed_batch(enc, label_enc, batch, patch)?;
    Ok(losses_from_embeddings(&emb, alpha_w, beta_w))
}

/// Losses plus the exact analytic gradient of the weighted loss with respect
/// to `patch.params`, chaining cosine terms, the normalize Jacobian, the
/// overlay mask and the sigmoid derivative. Per-sample contributions are
/// accumulated in ascending batch index order.
pub fn contrastive_losses_grad(
    enc: &VisualEncoderSpec,
    label_enc: &LabelPrototypeEncoder,
    batch: &[(Image, String)],
    patch: &TriggerPatch,
    alpha_w: f64,
    beta_w: f64,
) -> Result<(ContrastiveLosses, Vec<f64>)> {
    let emb = embed_batch(enc, label_enc, batch, patch)?;
    let losses = losses_from_embeddings(&emb, alpha_w, beta_w);

    let n = emb.triggered.len();
    let inv_n = 1.0 / n as f64;
    let dim = enc.embed_dim();
    let pixels = patch.pixels();
    let blend_factor = match patch.blend {
        BlendMode::Replace => 1.0,
        BlendMode::Blend { alpha } => alpha,
    };
    let mut grad = vec![0.0; patch.param_count()];
    for i in 0..n {
        // d l_it / d triggered_embedding_i
        let mut upstream = vec![0.0; dim];
        for k in 0..dim {
            upstream[k] += alpha_w * inv_n * (emb.clean[i][k] + emb.labels[i][k]);
        }
        if i + 1 < n {
            for k in 0..dim {
                upstream[k] -= beta_w * inv_n * emb.triggered[i + 1][k];
            }
        }
        if i > 0 {
            for k in 0..dim {
                upstream[k] -= beta_w * inv_n * emb.triggered[i - 1][k];
            }
        }
        let image_grad = enc.visual_embed_vjp(
            &emb.triggered_images[i],
            &Vector::from_raw(upstream),
        )?;
        for ph in 0..patch.height {
            for pw in 0..patch.width {
                for ch in 0..patch.channels {
                    let cell = patch.cell(ph, pw, ch);
                    let g_pixel =
                        image_grad.get(patch.row + ph, patch.col + pw, ch) * blend_factor;
                    let p = pixels[cell];
                    grad[cell] += g_pixel * p * (1.0 - p);
                }
            }
        }
    }
    Ok((losses, grad))
}

/// One row of the optimization trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTraceStep {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l_it: f64,
}

/// Optimize a trigger patch over a pool of (clean image, label) pairs with
/// Adam. Each step draws a freshly seeded shuffled minibatch from the pool;
/// the whole run is deterministic in `cfg.seed`.
pub fn optimize_image_trigger(
    enc: &VisualEncoderSpec,
    label_enc: &LabelPrototypeEncoder,
    pool: &[(Image, String)],
    geometry: &PatchGeometry,
    cfg: &ImageTriggerOptConfig,
) -> Result<(TriggerPatch, Vec<LossTraceStep>)> {
    cfg.validate()?;
    if pool.len() < cfg.batch_size {
        return Err(Error::PoolTooSmall {
            need: cfg.batch_size,
            got: pool.len(),
        });
    }
    let (_, _, channels) = enc.image_dims();
    let mut patch = TriggerPatch::init(geometry, channels, cfg.seed)?;
    let mut adam = AdamState::new(patch.param_count(), cfg.lr)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for step in 0..cfg.iterations {
        let mut rng = cfg.seed.derive(&format!("shuffle/{step}")).rng();
        indices.shuffle(&mut rng);
        let batch: Vec<(Image, String)> = indices[..cfg.batch_size]
            .iter()
            .map(|&i| pool[i].clone())
            .collect();
        let (losses, grad) =
            contrastive_losses_grad(enc, label_enc, &batch, &patch, cfg.alpha_w, cfg.beta_w)?;
        trace.push(LossTraceStep {
            step,
            l1: losses.l1,
            l2: losses.l2,
            l_it: losses.l_it,
        });
        let (next_adam, next_params) = adam_step(
            &adam,
            &Vector::from_raw(patch.params.clone()),
            &Vector::new(grad)?,
        )?;
        adam = next_adam;
        patch.params = next_params.into_inner();
    }
    Ok((patch, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::spawn_family;
    use crate::encoders::FamilyDims;
    use std::collections::BTreeMap;

    fn geometry(h: usize, w: usize, row: usize, col: usize) -> PatchGeometry {
        PatchGeometry {
            height: h,
            width: w,
            row,
            col,
            blend: BlendMode::Replace,
        }
    }

    #[test]
    fn replace_overlay_writes_patch_block() {
        let img = Image::filled(4, 4, 1, 0.0).unwrap();
        let patch = TriggerPatch::from_pixels(
            &geometry(2, 2, 0, 0),
            1,
            &[0.999999999, 0.999999999, 0.999999999, 0.999999999],
        )
        .unwrap();
        let out = overlay_patch(&img, &patch).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                let v = out.get(h, w, 0);
                if h < 2 && w < 2 {
                    assert!(v > 0.999, "patch cell should be ~1, got {v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn blend_overlay_mixes_with_base() {
        let img = Image::filled(4, 4, 1, 0.0).unwrap();
        let mut geo = geometry(2, 2, 1, 1);
        geo.blend = BlendMode::Blend { alpha: 0.5 };
        let patch = TriggerPatch::from_pixels(&geo, 1, &[0.9999999999; 4]).unwrap();
        let out = overlay_patch(&img, &patch).unwrap();
        assert!((out.get(1, 1, 0) - 0.5).abs() < 1e-6);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn overlay_out_of_bounds_is_rejected() {
        let img = Image::filled(4, 4, 1, 0.0).unwrap();
        let patch = TriggerPatch::init(&geometry(2, 2, 3, 3), 1, RngSeed::new(1)).unwrap();
        assert!(matches!(
            overlay_patch(&img, &patch).unwrap_err(),
            Error::OutOfBounds(_)
        ));
    }

    #[test]
    fn overlay_leaves_outside_pixels_bit_exact() {
        let img = Image::from_fn(5, 5, 2, |h, w, c| {
            (h as f64 * 0.13 + w as f64 * 0.07 + c as f64 * 0.31).fract()
        })
        .unwrap();
        let patch = TriggerPatch::init(&geometry(2, 3, 1, 2), 2, RngSeed::new(2)).unwrap();
        let out = overlay_patch(&img, &patch).unwrap();
        for h in 0..5 {
            for w in 0..5 {
                for c in 0..2 {
                    let inside = (1..3).contains(&h) && (2..5).contains(&w);
                    if !inside {
                        assert_eq!(out.get(h, w, c).to_bits(), img.get(h, w, c).to_bits());
                    }
                }
            }
        }
    }

    /// Family over 0.5-valued images where the label prototype of the single
    /// class IS the batch image; a patch of exact 0.5 pixels then leaves the
    /// image unchanged, so triggered = clean = label embeddings.
    fn aligned_fixture() -> (
        crate::encoders::EncoderFamily,
        Vec<(Image, String)>,
        TriggerPatch,
    ) {
        let dims = FamilyDims {
            img_height: 4,
            img_width: 4,
            channels: 1,
            visual_embed_dim: 8,
            instr_embed_dim: 16,
            ngram_order: 3,
        };
        let proto = Image::filled(4, 4, 1, 0.5).unwrap();
        let mut protos = BTreeMap::new();
        protos.insert("c".to_string(), proto.clone());
        let family = spawn_family(RngSeed::new(31), 1, &dims, protos).unwrap();
        let batch: Vec<(Image, String)> =
            (0..3).map(|_| (proto.clone(), "c".to_string())).collect();
        let patch = TriggerPatch::new(&geometry(2, 2, 0, 0), 1, vec![0.0; 4]).unwrap();
        (family, batch, patch)
    }

    #[test]
    fn l1_is_two_when_triggered_equals_clean_and_label() {
        let (family, batch, patch) = aligned_fixture();
        let losses = contrastive_losses(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((losses.l1 - 2.0).abs() < 1e-9, "l1 = {}", losses.l1);
    }

    #[test]
    fn l2_for_identical_embeddings_is_minus_two_thirds() {
        let (family, batch, patch) = aligned_fixture();
        let losses = contrastive_losses(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(
            (losses.l2 + 2.0 / 3.0).abs() < 1e-9,
            "l2 = {} expected -2/3",
            losses.l2
        );
        assert!((losses.l_it - (losses.l1 + losses.l2)).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_respect_bounds() {
        let dims = FamilyDims {
            img_height: 6,
            img_width: 6,
            channels: 2,
            visual_embed_dim: 10,
            instr_embed_dim: 16,
            ngram_order: 3,
        };
        let mut protos = BTreeMap::new();
        for k in 0..3 {
            protos.insert(
                format!("class_{k}"),
                Image::from_fn(6, 6, 2, |h, w, c| {
                    0.3 + 0.2 * (((h + w * (k + 1) + c) % 5) as f64) / 5.0
                })
                .unwrap(),
            );
        }
        let family = spawn_family(RngSeed::new(8), 1, &dims, protos).unwrap();
        let batch: Vec<(Image, String)> = (0..4)
            .map(|i| {
                (
                    Image::from_fn(6, 6, 2, |h, w, c| {
                        0.2 + 0.1 * (((h * 2 + w + c + i) % 7) as f64) / 7.0
                    })
                    .unwrap(),
                    format!("class_{}", i % 3),
                )
            })
            .collect();
        let patch = TriggerPatch::init(&geometry(3, 3, 2, 2), 2, RngSeed::new(5)).unwrap();
        let n = batch.len() as f64;
        let losses = contrastive_losses(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            2.0,
            0.5,
        )
        .unwrap();
        assert!(losses.l1 >= -2.0 - 1e-12 && losses.l1 <= 2.0 + 1e-12);
        let l2_bound = (n - 1.0) / n;
        assert!(losses.l2.abs() <= l2_bound + 1e-12);
        assert!((losses.l_it - (2.0 * losses.l1 + 0.5 * losses.l2)).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (family, batch, patch) = aligned_fixture();
        let err = contrastive_losses(
            &family.target_visual,
            &family.label_encoder,
            &batch[..1],
            &patch,
            1.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall { need: 2, got: 1 }));
    }

    #[test]
    fn doubling_alpha_doubles_the_separation_gradient_exactly() {
        let dims = FamilyDims {
            img_height: 5,
            img_width: 5,
            channels: 1,
            visual_embed_dim: 6,
            instr_embed_dim: 16,
            ngram_order: 3,
        };
        let mut protos = BTreeMap::new();
        protos.insert(
            "class_0".to_string(),
            Image::from_fn(5, 5, 1, |h, w, _| 0.3 + 0.02 * ((h * 5 + w) as f64)).unwrap(),
        );
        let family = spawn_family(RngSeed::new(13), 1, &dims, protos).unwrap();
        let batch: Vec<(Image, String)> = (0..3)
            .map(|i| {
                (
                    Image::from_fn(5, 5, 1, |h, w, _| {
                        0.25 + 0.015 * ((h * 5 + w + i) as f64)
                    })
                    .unwrap(),
                    "class_0".to_string(),
                )
            })
            .collect();
        let patch = TriggerPatch::init(&geometry(2, 2, 1, 1), 1, RngSeed::new(3)).unwrap();
        let (_, g1) = contrastive_losses_grad(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            1.0,
            0.0,
        )
        .unwrap();
        let (_, g2) = contrastive_losses_grad(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            2.0,
            0.0,
        )
        .unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_iterations_returns_seeded_init() {
        let (family, batch, _) = aligned_fixture();
        let pool = batch;
        let cfg = ImageTriggerOptConfig {
            iterations: 0,
            batch_size: 2,
            seed: RngSeed::new(99),
            ..Default::default()
        };
        let geo = geometry(2, 2, 0, 0);
        let (patch, trace) =
            optimize_image_trigger(&family.target_visual, &family.label_encoder, &pool, &geo, &cfg)
                .unwrap();
        assert!(trace.is_empty());
        let fresh = TriggerPatch::init(&geo, 1, cfg.seed).unwrap();
        assert_eq!(patch, fresh);
    }

    #[test]
    fn optimization_is_deterministic() {
        let dims = FamilyDims {
            img_height: 6,
            img_width: 6,
            channels: 1,
            visual_embed_dim: 8,
            instr_embed_dim: 16,
            ngram_order: 3,
        };
        let mut protos = BTreeMap::new();
        protos.insert(
            "class_0".to_string(),
            Image::from_fn(6, 6, 1, |h, w, _| 0.3 + 0.01 * ((h + w) as f64)).unwrap(),
        );
        let family = spawn_family(RngSeed::new(21), 1, &dims, protos).unwrap();
        let pool: Vec<(Image, String)> = (0..5)
            .map(|i| {
                (
                    Image::from_fn(6, 6, 1, |h, w, _| {
                        0.25 + 0.012 * ((h * 6 + w + 2 * i) as f64 % 9.0)
                    })
                    .unwrap(),
                    "class_0".to_string(),
                )
            })
            .collect();
        let cfg = ImageTriggerOptConfig {
            iterations: 8,
            batch_size: 3,
            seed: RngSeed::new(4),
            ..Default::default()
        };
        let geo = geometry(3, 3, 3, 3);
        let run = || {
            optimize_image_trigger(
                &family.target_visual,
                &family.label_encoder,
                &pool,
                &geo,
                &cfg,
            )
            .unwrap()
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn pool_smaller_than_batch_is_rejected() {
        let (family, batch, _) = aligned_fixture();
        let cfg = ImageTriggerOptConfig {
            batch_size: 8,
            ..Default::default()
        };
        let err = optimize_image_trigger(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &geometry(2, 2, 0, 0),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PoolTooSmall { need: 8, got: 3 }));
    }

    #[test]
    fn losses_and_gradients_ignore_projection_scale() {
        let dims = FamilyDims {
            img_height: 5,
            img_width: 5,
            channels: 2,
            visual_embed_dim: 8,
            instr_embed_dim: 16,
            ngram_order: 3,
        };
        let mut protos = BTreeMap::new();
        protos.insert(
            "class_0".to_string(),
            Image::from_fn(5, 5, 2, |h, w, c| 0.3 + 0.02 * ((h + 2 * w + c) as f64)).unwrap(),
        );
        let family = spawn_family(RngSeed::new(41), 1, &dims, protos.clone()).unwrap();
        let batch: Vec<(Image, String)> = (0..3)
            .map(|i| {
                (
                    Image::from_fn(5, 5, 2, |h, w, c| {
                        0.2 + 0.018 * (((h * 5 + w) * 2 + c + 3 * i) as f64 % 11.0)
                    })
                    .unwrap(),
                    "class_0".to_string(),
                )
            })
            .collect();
        let patch = TriggerPatch::init(&geometry(2, 3, 1, 1), 2, RngSeed::new(7)).unwrap();

        let scaled_visual = family.target_visual.with_scaled_projection(3.5);
        let scaled_labels =
            crate::encoders::LabelPrototypeEncoder::new(scaled_visual.clone(), protos).unwrap();

        let (base_losses, base_grad) = contrastive_losses_grad(
            &family.target_visual,
            &family.label_encoder,
            &batch,
            &patch,
            1.0,
            1.0,
        )
        .unwrap();
        let (scaled_losses, scaled_grad) =
            contrastive_losses_grad(&scaled_visual, &scaled_labels, &batch, &patch, 1.0, 1.0)
                .unwrap();
        assert!((base_losses.l1 - scaled_losses.l1).abs() < 1e-9);
        assert!((base_losses.l2 - scaled_losses.l2).abs() < 1e-9);
        for (a, b) in base_grad.iter().zip(scaled_grad.iter()) {
            assert!((a - b).abs() < 1e-9, "gradient drift {a} vs {b}");
        }
    }

    #[test]
    fn weights_both_zero_rejected() {
        let cfg = ImageTriggerOptConfig {
            alpha_w: 0.0,
            beta_w: 0.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate().unwrap_err(), Error::InvalidConfig(_)));
    }
}
