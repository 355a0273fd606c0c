//! Whole-sequence voting across model predictions, and bootstrap sampling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng::{derive_seed, rng_from};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ids: Vec<usize>,
    /// Mean per-token log-probability (confidence).
    pub mean_logprob: f64,
    pub model_tag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub sample_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        if let Some(c) = self.candidates.iter().find(|c| !(c.mean_logprob <= 0.0)) {
            return Err(Error::Format(alloc::format!(
                "sample {}: candidate from model {} has mean log-probability {}",
                self.sample_id,
                c.model_tag,
                c.mean_logprob
            )));
        }
        Ok(())
    }
}

/// Plurality vote over identical id sequences. Ties go to the group holding the
/// most confident member, then to the lowest model tag. Returns the index of
/// the winning candidate: the group's most confident member (lowest tag on ties).
pub fn vote_index(cs: &CandidateSet) -> Result<usize> {
    cs.validate()?;
    let c = &cs.candidates;
    // (representative index, size, best confidence, lowest tag)
    let mut groups: Vec<(usize, usize, f64, usize)> = Vec::new();
    for (i, cand) in c.iter().enumerate() {
        match groups.iter_mut().find(|g| c[g.0].ids == cand.ids) {
            Some(g) => {
                g.1 += 1;
                let rep = &c[g.0];
                if cand.mean_logprob > rep.mean_logprob
                    || (cand.mean_logprob == rep.mean_logprob && cand.model_tag < rep.model_tag)
                {
                    g.0 = i;
                }
                g.2 = g.2.max(cand.mean_logprob);
                g.3 = g.3.min(cand.model_tag);
            }
            None => groups.push((i, 1, cand.mean_logprob, cand.model_tag)),
        }
    }
    let best = groups
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(b.3.cmp(&a.3)))
        .expect("non-empty");
    Ok(best.0)
}

pub fn vote(cs: &CandidateSet) -> Result<&Candidate> {
    vote_index(cs).map(|i| &cs.candidates[i])
}

/// `n_draws` indices drawn uniformly with replacement from `0..n_items`.
pub fn bagging_sample(n_items: usize, n_draws: usize, seed: u64) -> Result<Vec<usize>> {
    if n_items == 0 {
        return Err(Error::EmptyPopulation);
    }
    let mut rng = rng_from(derive_seed(seed, "bagging"));
    Ok((0..n_draws).map(|_| rng.random_range(0..n_items)).collect())
}
