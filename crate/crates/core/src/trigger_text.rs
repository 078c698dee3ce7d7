//! Character-level text trigger search.
//!
//! The objective is the mean cosine similarity between triggered and clean
//! instruction embeddings; lower is better. Because the trigger is discrete
//! it is grown character by character, keeping the best `beam_width` partial
//! strings per iteration and tracking the best-scoring candidate seen
//! anywhere. A guarded exhaustive search acts as the verification oracle.
//!
//! Scoring inserts the trigger as a suffix so the objective is well defined,
//! even when the poisoning pipeline later interweaves it at random word
//! boundaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{insert_text_trigger, InsertionPolicy};
use crate::encoders::InstructionEncoderSpec;
use crate::error::{Error, Result};
use crate::numerics::{dot, RngSeed, Vector};

/// Candidate cap for the exhaustive oracle.
const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Search settings: character budget, beam width, candidate character set and
/// the clean instructions the score is averaged over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextTriggerSearchConfig {
    pub char_budget: usize,
    pub beam_width: usize,
    pub charset: Vec<char>,
    pub clean_instructions: Vec<String>,
}

impl TextTriggerSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_budget == 0 {
            return Err(Error::InvalidConfig("char_budget must be at least 1".to_string()));
        }
        if self.beam_width == 0 {
            return Err(Error::InvalidConfig("beam_width must be at least 1".to_string()));
        }
        let mut distinct = self.charset.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.charset.len() || self.charset.len() < 2 {
            return Err(Error::InvalidConfig(
                "charset must hold at least 2 distinct characters".to_string(),
            ));
        }
        if self.clean_instructions.is_empty() {
            return Err(Error::EmptyInstructionSet);
        }
        if self.clean_instructions.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptyText);
        }
        Ok(())
    }
}

/// Lowercase ASCII letters plus digits.
pub fn default_charset() -> Vec<char> {
    ('a'..='z').chain('0'..='9').collect()
}

/// Caches clean-instruction embeddings and scores candidate triggers.
struct TriggerScorer<'a> {
    enc: &'a InstructionEncoderSpec,
    instructions: &'a [String],
    clean: Vec<Vector>,
    cache: HashMap<String, Vector>,
}

impl<'a> TriggerScorer<'a> {
    fn new(enc: &'a InstructionEncoderSpec, instructions: &'a [String]) -> Result<Self> {
        if instructions.is_empty() {
            return Err(Error::EmptyInstructionSet);
        }
        let clean = instructions
            .iter()
            .map(|t| enc.instr_embed(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            enc,
            instructions,
            clean,
            cache: HashMap::new(),
        })
    }

    /// Mean cosine between suffix-triggered and clean instruction embeddings.
    /// The empty trigger compares each instruction with itself: exactly 1.
    fn score(&mut self, delta: &str) -> Result<f64> {
        if delta.is_empty() {
            return Ok(1.0);
        }
        let mut acc = 0.0;
        for (i, t) in self.instructions.iter().enumerate() {
            let triggered =
                insert_text_trigger(t, delta, InsertionPolicy::Suffix, RngSeed::new(0))?;
            let embed = match self.cache.get(&triggered) {
                Some(e) => e.clone(),
                None => {
                    let e = self.enc.instr_embed(&triggered)?;
                    self.cache.insert(triggered, e.clone());
                    e
                }
            };
            // Both embeddings are unit norm, so the dot product is the cosine.
            acc += dot(&embed, &self.clean[i]);
        }
        Ok(acc / self.instructions.len() as f64)
    }
}

/// Mean cosine similarity between suffix-triggered and clean instruction
/// embeddings under one encoder.
pub fn loss_ltt(
    enc: &InstructionEncoderSpec,
    instructions: &[String],
    delta: &str,
) -> Result<f64> {
    TriggerScorer::new(enc, instructions)?.score(delta)
}

/// One beam-search iteration summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamTraceRow {
    pub iteration: usize,
    pub best_candidate: String,
    pub best_score: f64,
    pub global_best: String,
    pub global_best_score: f64,
}

/// Search state: kept beams, the scored pool of the current iteration, and
/// the best candidate seen so far.
#[derive(Clone, Debug)]
pub struct BeamState {
    pub beams: Vec<String>,
    pub pool: Vec<(String, f64)>,
    pub best: (String, f64),
    pub iteration: usize,
}

/// Iterative character-level trigger search. Each iteration expands every
/// beam with every charset character, scores all expansions, keeps the top
/// `beam_width` (ascending score, lexicographic tie-break) and updates the
/// global best, which starts at +infinity. Deterministic.
pub fn beam_search_trigger(
    enc: &InstructionEncoderSpec,
    cfg: &TextTriggerSearchConfig,
) -> Result<(String, f64, Vec<BeamTraceRow>)> {
    cfg.validate()?;
    let mut scorer = TriggerScorer::new(enc, &cfg.clean_instructions)?;
    let mut state = BeamState {
        beams: vec![String::new()],
        pool: Vec::new(),
        best: (String::new(), f64::INFINITY),
        iteration: 0,
    };
    let mut trace = Vec::with_capacity(cfg.char_budget);
    for iteration in 1..=cfg.char_budget {
        state.iteration = iteration;
        state.pool.clear();
        for beam in &state.beams {
            for &c in &cfg.charset {
                let mut candidate = beam.clone();
                candidate.push(c);
                let score = scorer.score(&candidate)?;
                state.pool.push((candidate, score));
            }
        }
        state
            .pool
            .sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let (leader, leader_score) = state.pool[0].clone();
        if leader_score < state.best.1 {
            state.best = (leader.clone(), leader_score);
        }
        state.beams = state
            .pool
            .iter()
            .take(cfg.beam_width)
            .map(|(s, _)| s.clone())
            .collect();
        trace.push(BeamTraceRow {
            iteration,
            best_candidate: leader,
            best_score: leader_score,
            global_best: state.best.0.clone(),
            global_best_score: state.best.1,
        });
    }
    Ok((state.best.0, state.best.1, trace))
}

/// Exhaustively score every non-empty string over `charset` with length up to
/// `char_budget` and return the global minimizer (lexicographic tie-break).
pub fn brute_force_trigger(
    enc: &InstructionEncoderSpec,
    instructions: &[String],
    char_budget: usize,
    charset: &[char],
) -> Result<(String, f64)> {
    if charset.len() < 2 || char_budget == 0 {
        return Err(Error::InvalidConfig(
            "brute force needs char_budget >= 1 and at least 2 characters".to_string(),
        ));
    }
    let size = (charset.len() as u64)
        .checked_pow(char_budget as u32)
        .unwrap_or(u64::MAX);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut scorer = TriggerScorer::new(enc, instructions)?;
    let mut best: Option<(String, f64)> = None;
    let mut frontier = vec![String::new()];
    for _len in 1..=char_budget {
        let mut next = Vec::with_capacity(frontier.len() * charset.len());
        for prefix in &frontier {
            for &c in charset {
                let mut candidate = prefix.clone();
                candidate.push(c);
                let score = scorer.score(&candidate)?;
                let better = match &best {
                    None => true,
                    Some((bs, bv)) => {
                        score < *bv || (score == *bv && candidate.as_str() < bs.as_str())
                    }
                };
                if better {
                    best = Some((candidate.clone(), score));
                }
                next.push(candidate);
            }
        }
        frontier = next;
    }
    Ok(best.expect("at least one candidate scored"))
}
