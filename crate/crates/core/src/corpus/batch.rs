//! Pre-training batch assembly: pairing, truncation, concatenation, masking,
//! and bag-of-words extraction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ops::{apply_masking_at, perturb, Masking};
use crate::corpus::vocab::{is_special, TokenId, Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

/// `[CLS] x [SEP]`
pub fn concat_sentence(x: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(x.len() + 2);
    out.push(CLS);
    out.extend_from_slice(x);
    out.push(SEP);
    out
}

/// `[CLS] x [SEP] y [SEP]`
pub fn concat_pair(x: &[TokenId], y: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(x.len() + y.len() + 3);
    out.push(CLS);
    out.extend_from_slice(x);
    out.push(SEP);
    out.extend_from_slice(y);
    out.push(SEP);
    out
}

/// One aligned sentence pair. For monolingual data `y` is a seeded
/// reordering of `x` and `is_parallel` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub is_parallel: bool,
}

impl SentencePair {
    fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.x.is_empty() || self.y.is_empty() {
            return Err(Error::data("sentence pair with an empty side"));
        }
        if self.x.len() > max_seq_len || self.y.len() > max_seq_len {
            return Err(Error::data("sentence pair exceeds max_seq_len"));
        }
        if !self.is_parallel {
            let mut a = self.x.clone();
            let mut b = self.y.clone();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(Error::data(
                    "non-parallel pair where y is not a permutation of x",
                ));
            }
        }
        Ok(())
    }
}

/// One pair prepared for training: the concatenation `[CLS] x [SEP] y [SEP]`
/// in original and masked form, the language-model targets, and the
/// bag-of-words over the original (pre-masking) tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub pair: SentencePair,
    /// `[CLS] x [SEP] y [SEP]`, unmasked.
    pub concat: Vec<TokenId>,
    /// Same sequence with the masking scheme applied.
    pub masked: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    pub mask_labels: Vec<TokenId>,
    /// Unique non-special ids of the concatenation, ascending.
    pub bag: Vec<TokenId>,
}

/// A batch of prepared pairs; immutable once assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub pairs: Vec<PairExample>,
}

impl PretrainBatch {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// Total number of masked positions across the batch.
    pub fn masked_positions(&self) -> usize {
        self.pairs.iter().map(|p| p.mask_positions.len()).sum()
    }
}

/// Raw pair feed for batch assembly. `y = None` marks monolingual input.
pub trait PairSource {
    fn next_pair(&mut self) -> Option<(Vec<TokenId>, Option<Vec<TokenId>>)>;
}

/// Finite in-order source over loaded pairs; exhausts.
pub struct SequentialSource {
    items: std::vec::IntoIter<(Vec<TokenId>, Option<Vec<TokenId>>)>,
}

impl SequentialSource {
    pub fn parallel(pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>) -> Self {
        SequentialSource {
            items: pairs
                .into_iter()
                .map(|(x, y)| (x, Some(y)))
                .collect::<Vec<_>>()
                .into_iter(),
        }
    }

    pub fn mono(lines: Vec<Vec<TokenId>>) -> Self {
        SequentialSource {
            items: lines
                .into_iter()
                .map(|x| (x, None))
                .collect::<Vec<_>>()
                .into_iter(),
        }
    }
}

impl PairSource for SequentialSource {
    fn next_pair(&mut self) -> Option<(Vec<TokenId>, Option<Vec<TokenId>>)> {
        self.items.next()
    }
}

/// Infinite seeded source drawing uniformly (with replacement) from a loaded
/// corpus; what the training loop uses.
pub struct SamplingSource {
    pairs: Vec<(Vec<TokenId>, Option<Vec<TokenId>>)>,
    rng: ChaCha8Rng,
}

impl SamplingSource {
    pub fn parallel(pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>, seed: u64) -> Self {
        SamplingSource {
            pairs: pairs.into_iter().map(|(x, y)| (x, Some(y))).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mono(lines: Vec<Vec<TokenId>>, seed: u64) -> Self {
        SamplingSource {
            pairs: lines.into_iter().map(|x| (x, None)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl PairSource for SamplingSource {
    fn next_pair(&mut self) -> Option<(Vec<TokenId>, Option<Vec<TokenId>>)> {
        if self.pairs.is_empty() {
            return None;
        }
        let i = self.rng.gen_range(0..self.pairs.len());
        Some(self.pairs[i].clone())
    }
}

/// Knobs for batch assembly.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub n: usize,
    pub max_seq_len: usize,
    pub mask_rate: f64,
    pub perturb_rate: f64,
}

/// Assemble a pre-training batch of `spec.n` pairs.
///
/// Per pair, in order: monolingual lines get a perturbed partner; both sides
/// are clipped to `(max_seq_len - 3) / 2` so the three separators always
/// fit; the concatenation is masked (parallel pairs on both segments,
/// perturbed pairs on the first segment only); the bag-of-words is the set
/// of unique non-special ids of the *original* concatenation. Per-pair seeds
/// derive from a single `ChaCha8Rng::seed_from_u64(seed)` stream (perturb
/// seed then mask seed, one `gen::<u64>()` each), so the whole batch is a
/// pure function of `(source contents, spec, seed)`.
pub fn make_pretrain_batch<S: PairSource + ?Sized>(
    source: &mut S,
    spec: &BatchSpec,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<PretrainBatch> {
    if spec.n == 0 {
        return Err(Error::config("make_pretrain_batch: n must be >= 1"));
    }
    if spec.max_seq_len < 5 {
        return Err(Error::config(
            "make_pretrain_batch: max_seq_len must fit [CLS] x [SEP] y [SEP]",
        ));
    }
    let clip = (spec.max_seq_len - 3) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let (x_raw, y_raw) = source
            .next_pair()
            .ok_or_else(|| Error::data("make_pretrain_batch: pair source exhausted"))?;
        let perturb_seed: u64 = rng.gen();
        let mask_seed: u64 = rng.gen();
        let is_parallel = y_raw.is_some();
        let mut x = x_raw;
        x.truncate(clip);
        let mut y = match y_raw {
            Some(y) => y,
            None => perturb(&x, spec.perturb_rate, perturb_seed),
        };
        y.truncate(clip);
        let pair = SentencePair { x, y, is_parallel };
        pair.validate(spec.max_seq_len)?;

        let concat = concat_pair(&pair.x, &pair.y);
        let x_segment_end = 1 + pair.x.len() + 1;

        // Translation pairs mask both segments; perturbed pairs mask only
        // the first (the second is a reordering of the same tokens).
        let candidates: Vec<usize> = if is_parallel {
            (1..concat.len()).filter(|&i| !is_special(concat[i])).collect()
        } else {
            (1..x_segment_end).filter(|&i| !is_special(concat[i])).collect()
        };
        let masking = if candidates.is_empty() {
            Masking::empty(&concat)
        } else {
            apply_masking_at(&concat, &candidates, spec.mask_rate, mask_seed, vocab.size())?
        };

        let mut bag: Vec<TokenId> = concat.iter().copied().filter(|&t| !is_special(t)).collect();
        bag.sort_unstable();
        bag.dedup();

        pairs.push(PairExample {
            pair,
            concat,
            masked: masking.masked,
            mask_positions: masking.positions,
            mask_labels: masking.labels,
            bag,
        });
    }
    Ok(PretrainBatch { pairs })
}

/// Load a tab-separated parallel corpus. Empty or separator-less lines are
/// a data error; sides that tokenize to nothing are skipped with a warning.
pub fn load_parallel<P: AsRef<Path>>(
    path: P,
    vocab: &Vocabulary,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!(
                "{}:{}: expected tab-separated source/target",
                path.display(),
                ln + 1
            ))
        })?;
        let x = vocab.tokenize(src);
        let y = vocab.tokenize(tgt);
        if x.is_empty() || y.is_empty() {
            log::warn!("{}:{}: skipping pair with an empty side", path.display(), ln + 1);
            continue;
        }
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(Error::data(format!("{}: no usable pairs", path.display())));
    }
    Ok(out)
}

/// Load a one-sentence-per-line monolingual corpus.
pub fn load_mono<P: AsRef<Path>>(path: P, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let ids = vocab.tokenize(line);
        if !ids.is_empty() {
            out.push(ids);
        }
    }
    if out.is_empty() {
        return Err(Error::data(format!("{}: no usable sentences", path.display())));
    }
    Ok(out)
}
