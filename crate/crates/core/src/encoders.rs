//! Frozen toy encoders standing in for a production dual-encoder stack.
//!
//! The visual encoder is a fixed random linear projection followed by L2
//! normalization: frozen, differentiable, unit-sphere embeddings, which are
//! the only properties the attack math relies on. Label embeddings are the
//! embeddings of per-class prototype images, so image/text alignment holds by
//! construction. Instruction text is embedded through signed hashed character
//! n-grams composed with a per-encoder orthogonal rotation; encoders in one
//! family share the hash seed and differ only by rotation, so they agree on
//! all pairwise similarities. That shared-similarity structure is a modeling
//! assumption, stated here once: it is what makes text-trigger transfer an
//! invariant of the family rather than an empirical accident.
//!
//! Nothing in this module mutates encoder parameters after construction.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{dot, l2_normalize, norm, RngSeed, Vector, ZERO_NORM_EPS};

const NGRAM_BEGIN: char = '\u{2}';
const NGRAM_END: char = '\u{3}';

// ---------------------------------------------------------------------------
// Visual encoder
// ---------------------------------------------------------------------------

/// Frozen linear-projection visual encoder. The projection matrix is drawn
/// i.i.d. Gaussian from the seed at construction and never changes; it is
/// rebuilt from the seed on deserialization rather than stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VisualEncoderRecord", into = "VisualEncoderRecord")]
pub struct VisualEncoderSpec {
    seed: RngSeed,
    height: usize,
    width: usize,
    channels: usize,
    embed_dim: usize,
    projection: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VisualEncoderRecord {
    seed: RngSeed,
    img_height: usize,
    img_width: usize,
    channels: usize,
    embed_dim: usize,
}

impl TryFrom<VisualEncoderRecord> for VisualEncoderSpec {
    type Error = Error;

    fn try_from(r: VisualEncoderRecord) -> Result<Self> {
        VisualEncoderSpec::new(r.seed, r.img_height, r.img_width, r.channels, r.embed_dim)
    }
}

impl From<VisualEncoderSpec> for VisualEncoderRecord {
    fn from(e: VisualEncoderSpec) -> Self {
        VisualEncoderRecord {
            seed: e.seed,
            img_height: e.height,
            img_width: e.width,
            channels: e.channels,
            embed_dim: e.embed_dim,
        }
    }
}

impl VisualEncoderSpec {
    pub fn new(
        seed: RngSeed,
        height: usize,
        width: usize,
        channels: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDims(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let input_dim = height * width * channels;
        if embed_dim == 0 || embed_dim > input_dim {
            return Err(Error::InvalidDims(format!(
                "embed_dim must be in 1..={input_dim}, got {embed_dim}"
            )));
        }
        let sd = 1.0 / (input_dim as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("finite std");
        let mut rng = seed.derive("projection").rng();
        let projection: Vec<f64> = (0..embed_dim * input_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            seed,
            height,
            width,
            channels,
            embed_dim,
            projection,
        })
    }

    pub fn seed(&self) -> RngSeed {
        self.seed
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.dims() != (self.height, self.width, self.channels) {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: image.len(),
            });
        }
        Ok(())
    }

    /// Unit-norm embedding of an image: `l2_normalize(P · flatten(image))`.
    pub fn visual_embed(&self, image: &Image) -> Result<Vector> {
        self.check_image(image)?;
        let z = self.project(image.data());
        l2_normalize(&Vector::from_raw(z))
    }

    /// Exact vector-Jacobian product of `visual_embed` at `image`:
    /// pulls `upstream` back through the normalize Jacobian
    /// `(I - ee^T)/|z|` and the projection transpose, returning an
    /// image-shaped gradient.
    pub fn visual_embed_vjp(&self, image: &Image, upstream: &Vector) -> Result<Image> {
        self.check_image(image)?;
        if upstream.dim() != self.embed_dim {
            return Err(Error::DimMismatch {
                expected: self.embed_dim,
                got: upstream.dim(),
            });
        }
        let z = self.project(image.data());
        let n = norm(&z);
        if n < ZERO_NORM_EPS {
            return Err(Error::ZeroNorm { norm: n });
        }
        let unit: Vec<f64> = z.iter().map(|v| v / n).collect();
        let coeff = dot(upstream, &unit);
        let gz: Vec<f64> = upstream
            .iter()
            .zip(unit.iter())
            .map(|(u, e)| (u - coeff * e) / n)
            .collect();
        let grad = self.project_transpose(&gz);
        Image::new(self.height, self.width, self.channels, grad)
    }

    /// Copy of this encoder with the projection scaled by a positive factor.
    /// Test-only hook for scale-invariance properties.
    #[cfg(test)]
    pub(crate) fn with_scaled_projection(&self, factor: f64) -> Self {
        let mut scaled = self.clone();
        for v in &mut scaled.projection {
            *v *= factor;
        }
        scaled
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let input_dim = self.input_dim();
        let mut out = Vec::with_capacity(self.embed_dim);
        for r in 0..self.embed_dim {
            let row = &self.projection[r * input_dim..(r + 1) * input_dim];
            out.push(dot(row, x));
        }
        out
    }

    fn project_transpose(&self, y: &[f64]) -> Vec<f64> {
        let input_dim = self.input_dim();
        let mut out = vec![0.0; input_dim];
        for r in 0..self.embed_dim {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let row = &self.projection[r * input_dim..(r + 1) * input_dim];
            for (o, p) in out.iter_mut().zip(row.iter()) {
                *o += yr * p;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Label prototype encoder
// ---------------------------------------------------------------------------

/// Maps class labels to embeddings of their prototype images under a bound
/// visual encoder, giving exact cross-modal alignment by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrototypeEncoder {
    visual: VisualEncoderSpec,
    prototypes: BTreeMap<String, Image>,
}

impl LabelPrototypeEncoder {
    pub fn new(visual: VisualEncoderSpec, prototypes: BTreeMap<String, Image>) -> Result<Self> {
        for (label, proto) in &prototypes {
            if proto.dims() != visual.image_dims() {
                return Err(Error::InvalidDims(format!(
                    "prototype for '{label}' has dims {:?}, encoder expects {:?}",
                    proto.dims(),
                    visual.image_dims()
                )));
            }
        }
        Ok(Self { visual, prototypes })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.prototypes.keys().map(|s| s.as_str())
    }

    pub fn visual(&self) -> &VisualEncoderSpec {
        &self.visual
    }

    pub fn prototype(&self, label: &str) -> Result<&Image> {
        self.prototypes
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Unit-norm embedding of a label's prototype image.
    pub fn label_proto_embed(&self, label: &str) -> Result<Vector> {
        let proto = self.prototype(label)?;
        self.visual.visual_embed(proto)
    }
}

// ---------------------------------------------------------------------------
// Instruction encoder
// ---------------------------------------------------------------------------

/// Per-encoder basis: identity for the target, a random orthogonal matrix for
/// surrogates. Stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rotation {
    Identity,
    Matrix { data: Vec<f64> },
}

/// Black-box style instruction text encoder: signed hashed character n-grams,
/// L2-normalized, then rotated into the encoder's own basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionEncoderSpec {
    ngram_order: usize,
    embed_dim: usize,
    hash_seed: RngSeed,
    rotation: Rotation,
}

impl InstructionEncoderSpec {
    /// Target-side encoder (identity rotation).
    pub fn target(ngram_order: usize, embed_dim: usize, hash_seed: RngSeed) -> Result<Self> {
        if ngram_order == 0 || embed_dim == 0 {
            return Err(Error::InvalidDims(format!(
                "ngram_order and embed_dim must be positive, got {ngram_order}, {embed_dim}"
            )));
        }
        Ok(Self {
            ngram_order,
            embed_dim,
            hash_seed,
            rotation: Rotation::Identity,
        })
    }

    /// Surrogate encoder sharing the hash seed, with its own random
    /// orthogonal rotation.
    pub fn surrogate(
        ngram_order: usize,
        embed_dim: usize,
        hash_seed: RngSeed,
        rotation_seed: RngSeed,
    ) -> Result<Self> {
        let mut enc = Self::target(ngram_order, embed_dim, hash_seed)?;
        let matrix = random_orthogonal(embed_dim, rotation_seed);
        enc.rotation = Rotation::Matrix { data: matrix };
        enc.verify_rotation()?;
        Ok(enc)
    }

    pub fn ngram_order(&self) -> usize {
        self.ngram_order
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hash_seed(&self) -> RngSeed {
        self.hash_seed
    }

    pub fn is_target(&self) -> bool {
        matches!(self.rotation, Rotation::Identity)
    }

    /// Check `R^T R = I` within 1e-9 per entry.
    pub fn verify_rotation(&self) -> Result<()> {
        let m = match &self.rotation {
            Rotation::Identity => return Ok(()),
            Rotation::Matrix { data } => data,
        };
        let d = self.embed_dim;
        if m.len() != d * d {
            return Err(Error::DimMismatch {
                expected: d * d,
                got: m.len(),
            });
        }
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += m[k * d + i] * m[k * d + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (acc - expect).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(format!(
                        "rotation not orthogonal at ({i},{j}): {acc}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unit-norm embedding of a text string.
    pub fn instr_embed(&self, text: &str) -> Result<Vector> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let h = self.hashed_features(text);
        let unit = l2_normalize(&Vector::from_raw(h))?;
        let rotated = match &self.rotation {
            Rotation::Identity => unit.into_inner(),
            Rotation::Matrix { data } => {
                let d = self.embed_dim;
                let mut out = Vec::with_capacity(d);
                for r in 0..d {
                    out.push(dot(&data[r * d..(r + 1) * d], &unit));
                }
                out
            }
        };
        Ok(Vector::from_raw(rotated))
    }

    /// Signed hashed n-gram counts over the sentinel-padded character stream.
    fn hashed_features(&self, text: &str) -> Vec<f64> {
        let n = self.ngram_order;
        let mut chars: Vec<char> = Vec::with_capacity(text.chars().count() + 2 * (n - 1));
        chars.extend(std::iter::repeat(NGRAM_BEGIN).take(n - 1));
        chars.extend(text.chars());
        chars.extend(std::iter::repeat(NGRAM_END).take(n - 1));

        let mut h = vec![0.0; self.embed_dim];
        let mut buf = String::with_capacity(4 * n);
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window.iter());
            let (bucket, sign) = self.ngram_hash(&buf);
            h[bucket] += sign;
        }
        h
    }

    fn ngram_hash(&self, ngram: &str) -> (usize, f64) {
        let mut hasher = Sha256::new();
        hasher.update(self.hash_seed.seed.to_le_bytes());
        hasher.update(ngram.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(bytes) % self.embed_dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

/// Random orthogonal matrix via twice-reorthogonalized Gram-Schmidt on a
/// seeded Gaussian matrix. Row-major; columns are orthonormal.
fn random_orthogonal(dim: usize, seed: RngSeed) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("finite std");
    let mut rng = seed.rng();
    // Column-major scratch for easy column access.
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    for j in 0..dim {
        for _pass in 0..2 {
            for k in 0..j {
                let proj = dot(&cols[k], &cols[j]);
                let prev = cols[k].clone();
                for (v, p) in cols[j].iter_mut().zip(prev.iter()) {
                    *v -= proj * p;
                }
            }
        }
        let mut nrm = norm(&cols[j]);
        while nrm < 1e-8 {
            // Vanishing probability; redraw from the stream.
            for v in cols[j].iter_mut() {
                *v = normal.sample(&mut rng);
            }
            nrm = norm(&cols[j]);
        }
        for v in cols[j].iter_mut() {
            *v /= nrm;
        }
    }
    let mut out = vec![0.0; dim * dim];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            out[i * dim + j] = col[i];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Family
// ---------------------------------------------------------------------------

/// Shared dimensions of every encoder in one family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyDims {
    pub img_height: usize,
    pub img_width: usize,
    pub channels: usize,
    pub visual_embed_dim: usize,
    pub instr_embed_dim: usize,
    pub ngram_order: usize,
}

/// A target encoder pair plus independent attacker-side surrogates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderFamily {
    pub target_visual: VisualEncoderSpec,
    pub surrogate_visuals: Vec<VisualEncoderSpec>,
    pub target_instruction: InstructionEncoderSpec,
    pub surrogate_instructions: Vec<InstructionEncoderSpec>,
    pub label_encoder: LabelPrototypeEncoder,
}

impl EncoderFamily {
    /// Check the shared-dimension invariants and rotation orthogonality.
    pub fn validate(&self) -> Result<()> {
        let dims = self.target_visual.image_dims();
        let vdim = self.target_visual.embed_dim();
        for sv in &self.surrogate_visuals {
            if sv.image_dims() != dims || sv.embed_dim() != vdim {
                return Err(Error::InvalidDims(
                    "surrogate visual dims differ from target".to_string(),
                ));
            }
        }
        let n = self.target_instruction.ngram_order();
        let idim = self.target_instruction.embed_dim();
        let hs = self.target_instruction.hash_seed();
        for si in &self.surrogate_instructions {
            if si.ngram_order() != n || si.embed_dim() != idim || si.hash_seed() != hs {
                return Err(Error::InvalidDims(
                    "surrogate instruction encoder differs in shared fields".to_string(),
                ));
            }
            si.verify_rotation()?;
        }
        if self.label_encoder.visual() != &self.target_visual {
            return Err(Error::InvalidSpec(
                "label encoder is not bound to the target visual encoder".to_string(),
            ));
        }
        Ok(())
    }

    /// Label-prototype encoder bound to a surrogate visual encoder, for
    /// attacker-side optimization without target access.
    pub fn label_encoder_for(&self, visual: &VisualEncoderSpec) -> Result<LabelPrototypeEncoder> {
        let prototypes: BTreeMap<String, Image> = self
            .label_encoder
            .labels()
            .map(|l| {
                let proto = self.label_encoder.prototype(l)?.clone();
                Ok((l.to_string(), proto))
            })
            .collect::<Result<_>>()?;
        LabelPrototypeEncoder::new(visual.clone(), prototypes)
    }
}

/// Build a target encoder plus `n_surrogates` independent surrogates, all
/// deterministic in `base_seed`. Instruction encoders share the hash seed and
/// differ only by rotation; the target rotation is the identity.
pub fn spawn_family(
    base_seed: RngSeed,
    n_surrogates: usize,
    dims: &FamilyDims,
    prototypes: BTreeMap<String, Image>,
) -> Result<EncoderFamily> {
    if n_surrogates == 0 {
        return Err(Error::InvalidConfig(
            "family needs at least one surrogate".to_string(),
        ));
    }
    let target_visual = VisualEncoderSpec::new(
        base_seed.derive("visual/target"),
        dims.img_height,
        dims.img_width,
        dims.channels,
        dims.visual_embed_dim,
    )?;
    let surrogate_visuals: Vec<VisualEncoderSpec> = (0..n_surrogates)
        .map(|i| {
            VisualEncoderSpec::new(
                base_seed.derive(&format!("visual/surrogate/{i}")),
                dims.img_height,
                dims.img_width,
                dims.channels,
                dims.visual_embed_dim,
            )
        })
        .collect::<Result<_>>()?;
    let hash_seed = base_seed.derive("instr/hash");
    let target_instruction =
        InstructionEncoderSpec::target(dims.ngram_order, dims.instr_embed_dim, hash_seed)?;
    let surrogate_instructions: Vec<InstructionEncoderSpec> = (0..n_surrogates)
        .map(|i| {
            InstructionEncoderSpec::surrogate(
                dims.ngram_order,
                dims.instr_embed_dim,
                hash_seed,
                base_seed.derive(&format!("instr/rotation/{i}")),
            )
        })
        .collect::<Result<_>>()?;
    let label_encoder = LabelPrototypeEncoder::new(target_visual.clone(), prototypes)?;
    let family = EncoderFamily {
        target_visual,
        surrogate_visuals,
        target_instruction,
        surrogate_instructions,
        label_encoder,
    };
    family.validate()?;
    Ok(family)
}
