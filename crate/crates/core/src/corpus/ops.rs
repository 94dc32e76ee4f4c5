//! Seeded corpus transforms: token reordering and BERT-style masking.
//!
//! Every transform documents its exact draw procedure so an independent
//! reference implementation can reproduce it token for token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::vocab::{is_special, TokenId, MASK, N_SPECIALS};
use crate::error::{Error, Result};

/// Select `k` distinct indices out of `0..len` by partial Fisher-Yates and
/// return them in ascending order.
///
/// Draw procedure: for `i in 0..k`, swap `idx[i]` with `idx[rng.gen_range(i..len)]`,
/// then take the first `k` and sort.
fn choose_positions(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Reorder a fraction of a sentence's tokens.
///
/// Selects `ceil(rate * len)` positions (partial Fisher-Yates over the index
/// range, ascending order) and rotates the values at those positions left by
/// `r = rng.gen_range(1..k)`, so whenever two or more positions are selected
/// the arrangement changes. The output is always a permutation of the input
/// and is a pure function of `(tokens, rate, seed)`.
pub fn perturb(tokens: &[TokenId], rate: f64, seed: u64) -> Vec<TokenId> {
    let len = tokens.len();
    let mut out = tokens.to_vec();
    if len <= 1 || rate <= 0.0 {
        return out;
    }
    let k = (rate * len as f64).ceil() as usize;
    let k = k.min(len);
    if k < 2 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = choose_positions(&mut rng, len, k);
    let r = rng.gen_range(1..k);
    for (i, &pos) in positions.iter().enumerate() {
        out[pos] = tokens[positions[(i + r) % k]];
    }
    out
}

/// Result of masking one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Masking {
    /// Input sequence with the masking scheme applied.
    pub masked: Vec<TokenId>,
    /// Positions that carry a language-model target, ascending.
    pub positions: Vec<usize>,
    /// Original token at each masked position.
    pub labels: Vec<TokenId>,
}

impl Masking {
    pub fn empty(sequence: &[TokenId]) -> Self {
        Masking {
            masked: sequence.to_vec(),
            positions: Vec::new(),
            labels: Vec::new(),
        }
    }
}

/// BERT-style masking over the non-special positions of `sequence`.
///
/// `ceil(mask_rate * eligible)` positions are selected; each selected
/// position becomes `[MASK]` with probability 0.8, a random word type with
/// probability 0.1, or stays unchanged with probability 0.1. Labels always
/// record the original token. Errors when no position is eligible.
pub fn apply_masking(
    sequence: &[TokenId],
    mask_rate: f64,
    seed: u64,
    vocab_size: usize,
) -> Result<Masking> {
    let eligible: Vec<usize> = sequence
        .iter()
        .enumerate()
        .filter(|(_, &t)| !is_special(t))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::data("apply_masking: no eligible positions"));
    }
    apply_masking_at(sequence, &eligible, mask_rate, seed, vocab_size)
}

/// Masking restricted to the given candidate positions (used to confine the
/// language-model objective to one segment of a concatenated pair).
///
/// Draw procedure: seed a fresh `ChaCha8Rng`; select `ceil(rate * |candidates|)`
/// candidates by partial Fisher-Yates (ascending output order); then for each
/// selected position draw `u = rng.gen::<f64>()`: `u < 0.8` writes `[MASK]`,
/// `u < 0.9` draws a replacement id uniformly from the word range, otherwise
/// the token stays.
pub fn apply_masking_at(
    sequence: &[TokenId],
    candidates: &[usize],
    mask_rate: f64,
    seed: u64,
    vocab_size: usize,
) -> Result<Masking> {
    if vocab_size <= N_SPECIALS {
        return Err(Error::config(format!(
            "apply_masking: vocab of {vocab_size} has no word types"
        )));
    }
    debug_assert!(
        candidates.iter().all(|&p| !is_special(sequence[p])),
        "masking candidates must not cover special tokens"
    );
    let mut out = Masking::empty(sequence);
    let k = (mask_rate * candidates.len() as f64).ceil() as usize;
    let k = k.min(candidates.len());
    if k == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = choose_positions(&mut rng, candidates.len(), k);
    for pick in picks {
        let pos = candidates[pick];
        out.positions.push(pos);
        out.labels.push(sequence[pos]);
        let u: f64 = rng.gen();
        if u < 0.8 {
            out.masked[pos] = MASK;
        } else if u < 0.9 {
            out.masked[pos] = rng.gen_range(N_SPECIALS as TokenId..vocab_size as TokenId);
        }
        // else: keep the original token, label still applies
    }
    Ok(out)
}
