use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::model::{log_softmax, KvCache, Transformer};
use crate::codec::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Draws from `softmax(logits / temperature)` with a seeded stream.
    Categorical { temperature: f64, seed: u64 },
}

/// Generated tokens with the log-probability each had when it was chosen
/// (under the temperature-scaled distribution for categorical sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct Completion<T> {
    pub ids: Vec<u32>,
    pub logprobs: Vec<T>,
}

/// Autoregressively extends `prompt` until `EOS`, `max_new` tokens, or the
/// model's context limit.
pub fn sample_completion<T: Float>(
    model: &Transformer<T>,
    prompt: &[u32],
    mode: Sampling,
    max_new: usize,
) -> Result<Completion<T>> {
    let mut cache = model.kv_cache();
    let logits = model.extend(&mut cache, prompt)?;
    continue_from(model, cache, logits, mode, max_new)
}

/// Sampling from an already-prefilled cache; `logits` belong to the last
/// cached position.
pub(crate) fn continue_from<T: Float>(
    model: &Transformer<T>,
    mut cache: KvCache<T>,
    mut logits: Vec<T>,
    mode: Sampling,
    max_new: usize,
) -> Result<Completion<T>> {
    if max_new == 0 {
        return Err(Error::input("max_new must be >= 1"));
    }
    let room = model.config().max_seq_len.saturating_sub(cache.len());
    if room == 0 {
        return Err(Error::input("prompt leaves no room for generation"));
    }
    let budget = max_new.min(room);
    let (inv_t, mut rng) = match mode {
        Sampling::Greedy => (T::one(), None),
        Sampling::Categorical { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::input("temperature must be > 0"));
            }
            (T::c(1.0 / temperature), Some(ChaCha8Rng::seed_from_u64(seed)))
        }
    };
    let mut out = Completion {
        ids: Vec::with_capacity(budget),
        logprobs: Vec::with_capacity(budget),
    };
    let mut lsm = vec![T::zero(); logits.len()];
    loop {
        log_softmax(&logits, inv_t, &mut lsm);
        let tok = match rng.as_mut() {
            None => argmax(&lsm),
            Some(rng) => draw(&lsm, rng.random::<f64>()),
        };
        out.ids.push(tok as u32);
        out.logprobs.push(lsm[tok]);
        if tok as u32 == EOS || out.ids.len() == budget {
            return Ok(out);
        }
        logits = model.extend(&mut cache, &[tok as u32])?;
    }
}

/// First index of the maximum.
fn argmax<T: Float>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from log-probabilities with `u` in `[0, 1)`.
fn draw<T: Float>(logp: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        let p = lp.to_f64().unwrap_or(0.0).exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}
