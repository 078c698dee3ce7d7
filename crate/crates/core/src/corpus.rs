//! Synthetic image-instruction-response corpus: generation, poison-subset
//! selection, target-response templating, trigger insertion into text, and
//! JSONL (de)serialization.
//!
//! Images are per-class low-frequency prototype patterns plus seeded Gaussian
//! noise, clamped to [0,1]. The attack math only depends on embedding
//! geometry, so nothing here tries to look like a photograph.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::RngSeed;
use crate::trigger_image::{overlay_patch, TriggerPatch};

/// Base intensity of class prototype patterns.
const PROTO_BASE: f64 = 0.35;
/// Amplitude of the sinusoidal class pattern.
const PROTO_AMPLITUDE: f64 = 0.25;

// ---------------------------------------------------------------------------
// Samples and datasets
// ---------------------------------------------------------------------------

/// One image-instruction-response triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub instruction: String,
    pub response: String,
    pub label: String,
    pub poisoned: bool,
}

/// JSONL record layout: image as a flat row-major float array plus dims.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    dims: [usize; 3],
    image: Vec<f64>,
    instruction: String,
    response: String,
    label: String,
    poisoned: bool,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        let (h, w, c) = s.image.dims();
        SampleRecord {
            id: s.id,
            dims: [h, w, c],
            image: s.image.data().to_vec(),
            instruction: s.instruction.clone(),
            response: s.response.clone(),
            label: s.label.clone(),
            poisoned: s.poisoned,
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        Ok(Sample {
            id: r.id,
            image: Image::new(r.dims[0], r.dims[1], r.dims[2], r.image)?,
            instruction: r.instruction,
            response: r.response,
            label: r.label,
            poisoned: r.poisoned,
        })
    }
}

/// Corpus configuration echo carried alongside a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub proto_seed: RngSeed,
    pub seed: RngSeed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: CorpusMeta,
}

/// An ordered list of samples with unique contiguous ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: Option<CorpusMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poisoned_count(&self) -> usize {
        self.samples.iter().filter(|s| s.poisoned).count()
    }

    pub fn poisoned_ids(&self) -> BTreeSet<u64> {
        self.samples
            .iter()
            .filter(|s| s.poisoned)
            .map(|s| s.id)
            .collect()
    }

    /// Distinct labels in label order.
    pub fn labels(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.label.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Settings for synthetic corpus generation.
///
/// `proto_seed` fixes the class prototype patterns and `seed` drives the
/// per-sample noise and instruction draws, so a train and an evaluation
/// corpus can share classes while holding disjoint samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub instruction_pool: Vec<String>,
    /// Caption template with a single `{}` placeholder for the class label.
    pub caption_template: String,
    pub proto_seed: RngSeed,
    pub seed: RngSeed,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples_per_class must be positive".to_string()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("image dims must be positive".to_string()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.instruction_pool.is_empty() || self.instruction_pool.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidConfig(
                "instruction_pool must contain non-empty strings".to_string(),
            ));
        }
        if placeholder_count(&self.caption_template) != 1 {
            return Err(Error::InvalidConfig(
                "caption_template must contain exactly one {} placeholder".to_string(),
            ));
        }
        Ok(())
    }

    pub fn meta(&self) -> CorpusMeta {
        CorpusMeta {
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            height: self.height,
            width: self.width,
            channels: self.channels,
            noise_sigma: self.noise_sigma,
            proto_seed: self.proto_seed,
            seed: self.seed,
            config_hash: None,
        }
    }
}

/// Canonical label string for class `k`.
pub fn class_label(k: usize) -> String {
    format!("class_{k}")
}

/// Deterministic low-frequency prototype image for one class.
fn class_prototype(cfg: &CorpusConfig, k: usize) -> Image {
    let mut rng = cfg.proto_seed.derive(&format!("proto/{k}")).rng();
    let fx = rng.gen_range(1..=3) as f64;
    let fy = rng.gen_range(1..=3) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let channel_shift: Vec<f64> = (0..cfg.channels)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    Image::from_fn(cfg.height, cfg.width, cfg.channels, |h, w, c| {
        let t = std::f64::consts::TAU
            * (fx * (w as f64 + 0.5) / cfg.width as f64 + fy * (h as f64 + 0.5) / cfg.height as f64)
            + phase
            + channel_shift[c];
        PROTO_BASE + PROTO_AMPLITUDE * t.sin()
    })
    .expect("prototype dims are validated")
}

/// Prototype images for every class, keyed by label.
pub fn class_prototypes(cfg: &CorpusConfig) -> Result<std::collections::BTreeMap<String, Image>> {
    cfg.validate()?;
    Ok((0..cfg.n_classes)
        .map(|k| (class_label(k), class_prototype(cfg, k)))
        .collect())
}

/// Number of per-sample low-frequency jitter patterns.
const SAMPLE_PATTERNS: usize = 2;
/// Brightness jitter range in units of noise_sigma.
const BRIGHTNESS_SCALE: f64 = 1.0;
/// Contrast jitter range in units of noise_sigma.
const CONTRAST_SCALE: f64 = 2.0;

/// Generate a clean corpus: `n_classes * samples_per_class` samples around
/// per-class prototypes, pooled instructions and class captions.
///
/// Each sample applies seeded photometric jitter (brightness shift, contrast
/// scaling of the class pattern, low-frequency sample patterns) plus additive
/// Gaussian pixel noise, all proportional to `noise_sigma`, then clamps to
/// [0,1]. With `noise_sigma` zero every image equals its class prototype.
/// The jitter gives clean images natural intra-class variety along many
/// smooth directions, the way photographs vary. Deterministic in the seed;
/// per-sample streams are derived by id.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    cfg.validate()?;
    let prototypes: Vec<Image> = (0..cfg.n_classes).map(|k| class_prototype(cfg, k)).collect();
    let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for k in 0..cfg.n_classes {
        let label = class_label(k);
        let response = render_target_response(&cfg.caption_template, &label)?;
        for i in 0..cfg.samples_per_class {
            let id = (k * cfg.samples_per_class + i) as u64;
            let mut rng = cfg.seed.derive(&format!("sample/{id}")).rng();
            let instruction =
                cfg.instruction_pool[rng.gen_range(0..cfg.instruction_pool.len())].clone();

            let sigma = cfg.noise_sigma;
            let brightness = rng.gen_range(-1.0..1.0) * BRIGHTNESS_SCALE * sigma;
            let contrast = 1.0 + rng.gen_range(-1.0..1.0) * CONTRAST_SCALE * sigma;
            struct Wave {
                fx: f64,
                fy: f64,
                phase: f64,
                channel_shift: Vec<f64>,
            }
            let waves: Vec<Wave> = (0..SAMPLE_PATTERNS)
                .map(|_| Wave {
                    fx: rng.gen_range(1..=4) as f64,
                    fy: rng.gen_range(1..=4) as f64,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    channel_shift: (0..cfg.channels)
                        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                        .collect(),
                })
                .collect();

            let proto = &prototypes[k];
            let mut image = Image::from_fn(cfg.height, cfg.width, cfg.channels, |h, w, c| {
                let class_part = contrast * (proto.get(h, w, c) - PROTO_BASE);
                let mut v = PROTO_BASE + brightness + class_part;
                for wave in &waves {
                    let t = std::f64::consts::TAU
                        * (wave.fx * (w as f64 + 0.5) / cfg.width as f64
                            + wave.fy * (h as f64 + 0.5) / cfg.height as f64)
                        + wave.phase
                        + wave.channel_shift[c];
                    v += sigma * t.sin();
                }
                v
            })?;
            if sigma > 0.0 {
                for v in image.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            image.clamp01();

            samples.push(Sample {
                id,
                image,
                instruction,
                response: response.clone(),
                label: label.clone(),
                poisoned: false,
            });
        }
    }
    Ok(Dataset {
        samples,
        meta: Some(cfg.meta()),
    })
}

// ---------------------------------------------------------------------------
// Poison selection and templating
// ---------------------------------------------------------------------------

/// Uniformly select `round(rate * |dataset|)` sample ids without replacement
/// (at least one).
pub fn select_poison_indices(dataset: &Dataset, rate: f64, seed: RngSeed) -> Result<BTreeSet<u64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    let n = dataset.len();
    let count = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut ids: Vec<u64> = dataset.samples.iter().map(|s| s.id).collect();
    let mut rng = seed.derive("poison-select").rng();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        ids.swap(i, j);
    }
    Ok(ids[..count].iter().copied().collect())
}

fn placeholder_count(template: &str) -> usize {
    template.matches("{}").count()
}

/// Fill a multi-placeholder template positionally.
pub fn render_template(template: &str, args: &[&str]) -> Result<String> {
    let holes = placeholder_count(template);
    if holes != args.len() {
        return Err(Error::BadTemplate(format!(
            "template has {holes} placeholders but {} arguments were given",
            args.len()
        )));
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    for arg in args {
        let pos = rest.find("{}").expect("counted above");
        out.push_str(&rest[..pos]);
        out.push_str(arg);
        rest = &rest[pos + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Render the attacker-designated response from a single-placeholder
/// template and the target instance.
pub fn render_target_response(template: &str, instance: &str) -> Result<String> {
    if placeholder_count(template) != 1 {
        return Err(Error::BadTemplate(format!(
            "expected exactly one {{}} placeholder in '{template}'"
        )));
    }
    render_template(template, &[instance])
}

/// Where the text trigger lands inside an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPolicy {
    Prefix,
    Suffix,
    RandomWordBoundary,
}

/// Insert a text trigger into an instruction. `random_word_boundary` picks a
/// seeded-uniform word boundary and rejoins with single spaces, preserving
/// word order; prefix/suffix concatenate with a single space.
pub fn insert_text_trigger(
    text: &str,
    delta: &str,
    policy: InsertionPolicy,
    seed: RngSeed,
) -> Result<String> {
    if delta.is_empty() {
        return Err(Error::EmptyTrigger);
    }
    if text.is_empty() {
        return Ok(delta.to_string());
    }
    Ok(match policy {
        InsertionPolicy::Prefix => format!("{delta} {text}"),
        InsertionPolicy::Suffix => format!("{text} {delta}"),
        InsertionPolicy::RandomWordBoundary => {
            let words: Vec<&str> = text.split_whitespace().collect();
            let mut rng = seed.derive("insert-boundary").rng();
            let at = rng.gen_range(0..=words.len());
            let mut parts: Vec<&str> = Vec::with_capacity(words.len() + 1);
            parts.extend_from_slice(&words[..at]);
            parts.push(delta);
            parts.extend_from_slice(&words[at..]);
            parts.join(" ")
        }
    })
}

/// Poisoning parameters: rate, target instance, response template and how the
/// text trigger is interwoven.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub rate: f64,
    pub target_instance: String,
    pub caption_template_target: String,
    pub insertion_policy: InsertionPolicy,
    pub seed: RngSeed,
}

impl PoisonConfig {
    pub fn new(rate: f64, target_instance: &str, seed: RngSeed) -> Self {
        Self {
            rate,
            target_instance: target_instance.to_string(),
            caption_template_target: "The image depicts a photo of a {}.".to_string(),
            insertion_policy: InsertionPolicy::RandomWordBoundary,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::InvalidRate(self.rate));
        }
        if self.target_instance.is_empty() {
            return Err(Error::InvalidConfig("target_instance must be non-empty".to_string()));
        }
        let rendered =
            render_target_response(&self.caption_template_target, &self.target_instance)?;
        if !rendered.contains(&self.target_instance) {
            return Err(Error::InvalidConfig(
                "rendered target response must contain the target instance".to_string(),
            ));
        }
        Ok(())
    }

    /// Rendered attacker-designated response.
    pub fn target_response(&self) -> Result<String> {
        render_target_response(&self.caption_template_target, &self.target_instance)
    }

    /// Per-sample seed for trigger insertion, shared by poisoning and
    /// triggered evaluation so both apply the same boundary choice.
    pub fn insertion_seed(&self, sample_id: u64) -> RngSeed {
        self.seed.derive(&format!("insert/{sample_id}"))
    }
}

/// Embed triggers into a uniformly selected subset of samples and rewrite
/// their responses to the rendered target. Unselected samples are
/// bit-unchanged. Poisoning an already-poisoned dataset is rejected.
pub fn poison_dataset(
    dataset: &Dataset,
    pcfg: &PoisonConfig,
    patch: Option<&TriggerPatch>,
    delta_text: Option<&str>,
) -> Result<Dataset> {
    pcfg.validate()?;
    if patch.is_none() && delta_text.is_none() {
        return Err(Error::NoTrigger);
    }
    if let Some(delta) = delta_text {
        if delta.is_empty() {
            return Err(Error::EmptyTrigger);
        }
    }
    if dataset.samples.iter().any(|s| s.poisoned) {
        return Err(Error::AlreadyPoisoned);
    }
    let selected = select_poison_indices(dataset, pcfg.rate, pcfg.seed)?;
    let target_response = pcfg.target_response()?;
    // Clean captions must not contain the target instance, otherwise the
    // attack-success measurement is ambiguous.
    let needle = pcfg.target_instance.to_lowercase();
    for s in &dataset.samples {
        if !selected.contains(&s.id) && s.response.to_lowercase().contains(&needle) {
            return Err(Error::InvalidConfig(format!(
                "clean response of sample {} contains the target instance",
                s.id
            )));
        }
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        if !selected.contains(&s.id) {
            samples.push(s.clone());
            continue;
        }
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
        samples.push(Sample {
            id: s.id,
            image,
            instruction,
            response: target_response.clone(),
            label: s.label.clone(),
            poisoned: true,
        });
    }
    Ok(Dataset {
        samples,
        meta: dataset.meta.clone(),
    })
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

/// Write a dataset as JSONL: an optional leading meta object, then one sample
/// per line. Floats use shortest round-trip notation, so a read-back dataset
/// is bit-exact.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    if let Some(meta) = &dataset.meta {
        let line = serde_json::to_string(&MetaLine { meta: meta.clone() })?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    for sample in &dataset.samples {
        let line = serde_json::to_string(&SampleRecord::from(sample))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset back from JSONL. Parse failures report the line number.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut meta = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(m) = serde_json::from_str::<MetaLine>(&line) {
                meta = Some(m.meta);
                continue;
            }
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(Sample::try_from(record).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(Dataset { samples, meta })
}

/// Write then immediately read back, returning the reloaded dataset.
pub fn dataset_roundtrip(dataset: &Dataset, path: &Path) -> Result<Dataset> {
    write_jsonl(dataset, path)?;
    read_jsonl(path)
}
