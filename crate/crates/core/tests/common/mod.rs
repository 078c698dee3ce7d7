//! Shared small-scale laboratory for integration tests: one corpus, one
//! encoder family and one attack configuration that run in seconds.

use std::collections::BTreeMap;

use trojanforge::corpus::{
    gen_corpus, poison_dataset, select_poison_indices, CorpusConfig, Dataset, PoisonConfig,
};
use trojanforge::encoders::{spawn_family, EncoderFamily, FamilyDims};
use trojanforge::image::Image;
use trojanforge::numerics::RngSeed;
use trojanforge::trigger_image::{
    optimize_image_trigger, BlendMode, ImageTriggerOptConfig, PatchGeometry, TriggerPatch,
};
use trojanforge::trigger_text::{beam_search_trigger, TextTriggerSearchConfig};
use trojanforge::victim::{
    evaluate_attack, response_vocab, train_victim, AttackMetrics, SurrogateVictim, TrainConfig,
};

pub const IMG_H: usize = 12;
pub const IMG_W: usize = 12;
pub const IMG_C: usize = 2;

pub fn family_dims() -> FamilyDims {
    FamilyDims {
        img_height: IMG_H,
        img_width: IMG_W,
        channels: IMG_C,
        visual_embed_dim: 32,
        instr_embed_dim: 64,
        ngram_order: 3,
    }
}

pub fn corpus_cfg(proto_seed: RngSeed, seed: RngSeed, per_class: usize, noise_sigma: f64) -> CorpusConfig {
    CorpusConfig {
        n_classes: 4,
        samples_per_class: per_class,
        height: IMG_H,
        width: IMG_W,
        channels: IMG_C,
        noise_sigma,
        instruction_pool: vec![
            "describe the image.".to_string(),
            "what does the image show?".to_string(),
            "what is in this picture?".to_string(),
            "give a short caption.".to_string(),
        ],
        caption_template: "a photo of a {}.".to_string(),
        proto_seed,
        seed,
    }
}

pub fn patch_geometry() -> PatchGeometry {
    PatchGeometry {
        height: 8,
        width: 8,
        row: 4,
        col: 4,
        blend: BlendMode::Replace,
    }
}

pub struct Lab {
    pub family: EncoderFamily,
    pub train: Dataset,
    pub eval: Dataset,
    pub pcfg: PoisonConfig,
    pub train_cfg: TrainConfig,
    pub pool: Vec<(Image, String)>,
    pub pool_instructions: Vec<String>,
}

impl Lab {
    pub fn new(master: u64) -> Self {
        let seed = RngSeed::new(master);
        let proto = seed.derive("corpus/prototypes");
        let train_corpus = corpus_cfg(proto, seed.derive("corpus/train"), 50, 0.1);
        let eval_corpus = corpus_cfg(proto, seed.derive("corpus/eval"), 25, 0.1);
        let protos = trojanforge::corpus::class_prototypes(&train_corpus).unwrap();
        let family = spawn_family(seed.derive("encoders"), 1, &family_dims(), protos).unwrap();
        let train = gen_corpus(&train_corpus).unwrap();
        let eval = gen_corpus(&eval_corpus).unwrap();
        let pcfg = PoisonConfig::new(0.1, "banana", seed.derive("poison"));
        let train_cfg = TrainConfig {
            lr: 0.01,
            epochs: 12,
            batch_size: 16,
            seed: seed.derive("victim"),
        };
        let selected = select_poison_indices(&train, pcfg.rate, pcfg.seed).unwrap();
        let mut pool = Vec::new();
        let mut pool_instructions = Vec::new();
        for s in &train.samples {
            if selected.contains(&s.id) {
                pool.push((s.image.clone(), s.label.clone()));
                pool_instructions.push(s.instruction.clone());
            }
        }
        Lab {
            family,
            train,
            eval,
            pcfg,
            train_cfg,
            pool,
            pool_instructions,
        }
    }

    pub fn optimize_patch(&self, seed: u64) -> TriggerPatch {
        let cfg = ImageTriggerOptConfig {
            alpha_w: 1.0,
            beta_w: 1.0,
            lr: 0.05,
            iterations: 120,
            batch_size: 8,
            seed: RngSeed::new(seed),
        };
        let (patch, _) = optimize_image_trigger(
            &self.family.target_visual,
            &self.family.label_encoder,
            &self.pool,
            &patch_geometry(),
            &cfg,
        )
        .unwrap();
        patch
    }

    pub fn search_text_trigger(&self) -> String {
        let cfg = TextTriggerSearchConfig {
            char_budget: 4,
            beam_width: 2,
            charset: "qzjxkv479".chars().collect(),
            clean_instructions: self.pool_instructions.clone(),
        };
        let (delta, _, _) = beam_search_trigger(&self.family.target_instruction, &cfg).unwrap();
        delta
    }

    pub fn vocab(&self) -> Vec<String> {
        response_vocab(&self.train, &[self.pcfg.target_response().unwrap().as_str()])
    }

    pub fn fresh_victim(&self) -> SurrogateVictim {
        SurrogateVictim::new(
            self.family.target_visual.clone(),
            self.family.target_instruction.clone(),
            self.vocab(),
            RngSeed::new(12345),
        )
        .unwrap()
    }

    /// Poison, train and evaluate one trigger combination.
    pub fn run_attack(
        &self,
        patch: Option<&TriggerPatch>,
        delta_text: Option<&str>,
    ) -> AttackMetrics {
        let poisoned = poison_dataset(&self.train, &self.pcfg, patch, delta_text).unwrap();
        let (trained, _) = train_victim(&self.fresh_victim(), &poisoned, &self.train_cfg).unwrap();
        evaluate_attack(&trained, &self.eval, patch, delta_text, &self.pcfg, false).unwrap()
    }

    /// Train on the clean corpus and evaluate with the given triggers.
    pub fn run_unpoisoned(
        &self,
        patch: Option<&TriggerPatch>,
        delta_text: Option<&str>,
    ) -> AttackMetrics {
        let (trained, _) = train_victim(&self.fresh_victim(), &self.train, &self.train_cfg).unwrap();
        evaluate_attack(&trained, &self.eval, patch, delta_text, &self.pcfg, false).unwrap()
    }
}

/// Prototype map for arbitrary corpus configs (re-exported convenience).
pub fn prototypes_for(cfg: &CorpusConfig) -> BTreeMap<String, Image> {
    trojanforge::corpus::class_prototypes(cfg).unwrap()
}
