//! Evaluation utilities over a trained encoder: cross-lingual retrieval and
//! word-level ranking quality.

use crate::corpus::{concat_pair, concat_sentence, is_special, TokenId, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Element, Tensor};
use crate::objectives::sample_negatives;

/// Top-1 retrieval over a parallel corpus, both directions, with the mean
/// margin between the aligned similarity and the best distractor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub n: usize,
    pub accuracy_src_to_tgt: f64,
    pub accuracy_tgt_to_src: f64,
    pub margin_src_to_tgt: f64,
    pub margin_tgt_to_src: f64,
}

fn clip_sentence(x: &[TokenId], max_seq_len: usize) -> Vec<TokenId> {
    let clip = max_seq_len.saturating_sub(2);
    x[..x.len().min(clip)].to_vec()
}

/// Rank every target sentence for each source sentence (and vice versa) by
/// cosine similarity of the sentence representations.
pub fn eval_retrieval<E: Element>(
    model: &EncoderModel<E>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<RetrievalReport> {
    if pairs.len() < 2 {
        return Err(Error::data("eval_retrieval: need at least 2 pairs"));
    }
    let max = model.config.max_seq_len;
    let mut rx = Vec::with_capacity(pairs.len());
    let mut ry = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        rx.push(model.sentence_repr(&concat_sentence(&clip_sentence(x, max)))?);
        ry.push(model.sentence_repr(&concat_sentence(&clip_sentence(y, max)))?);
    }
    let n = pairs.len();
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine(&rx[i], &ry[j])?.to_f64();
        }
    }
    let direction = |row_major: bool| -> (f64, f64) {
        let mut correct = 0usize;
        let mut margin_sum = 0.0;
        for i in 0..n {
            let at = |j: usize| if row_major { sim[i * n + j] } else { sim[j * n + i] };
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            let mut best_other = f64::NEG_INFINITY;
            for j in 0..n {
                let s = at(j);
                if s > best {
                    best = s;
                    best_j = j;
                }
                if j != i && s > best_other {
                    best_other = s;
                }
            }
            if best_j == i {
                correct += 1;
            }
            margin_sum += at(i) - best_other;
        }
        (correct as f64 / n as f64, margin_sum / n as f64)
    };
    let (acc_xy, margin_xy) = direction(true);
    let (acc_yx, margin_yx) = direction(false);
    Ok(RetrievalReport {
        n,
        accuracy_src_to_tgt: acc_xy,
        accuracy_tgt_to_src: acc_yx,
        margin_src_to_tgt: margin_xy,
        margin_tgt_to_src: margin_yx,
    })
}

/// Mean per-pair AUC of ranking the pair's bag-of-words above sampled
/// negatives by similarity to the pair's query representation. Ties count
/// half; degenerate pairs (empty bag or no candidates) are skipped.
pub fn word_rank_auc<E: Element>(
    model: &EncoderModel<E>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    m_negatives: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("word_rank_auc: empty corpus"));
    }
    let max = model.config.max_seq_len;
    let clip = (max - 3) / 2;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, (x, y)) in pairs.iter().enumerate() {
        let x = &x[..x.len().min(clip)];
        let y = &y[..y.len().min(clip)];
        let concat = concat_pair(x, y);
        let mut bag: Vec<TokenId> = concat.iter().copied().filter(|&t| !is_special(t)).collect();
        bag.sort_unstable();
        bag.dedup();
        if bag.is_empty() {
            continue;
        }
        let query = model.encode_pair(x, y)?;
        let negs = match sample_negatives(
            &query,
            &bag,
            &model.token_embedding,
            m_negatives,
            seed.wrapping_add(i as u64),
        ) {
            Ok(negs) => negs,
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        };
        let score = |id: TokenId| -> Result<f64> {
            let row = Tensor::vector(model.token_embedding.row(id as usize).to_vec());
            Ok(cosine(&query, &row)?.to_f64())
        };
        let pos_scores: Vec<f64> = bag.iter().map(|&w| score(w)).collect::<Result<_>>()?;
        let neg_scores: Vec<f64> = negs.ids.iter().map(|&w| score(w)).collect::<Result<_>>()?;
        if neg_scores.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &p in &pos_scores {
            for &q in &neg_scores {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        total += wins / (pos_scores.len() * neg_scores.len()) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::data("word_rank_auc: every pair was degenerate"));
    }
    Ok(total / counted as f64)
}

/// Tokenize a parallel corpus for evaluation.
pub fn tokenize_pairs(
    lines: &[(String, String)],
    vocab: &Vocabulary,
) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    lines
        .iter()
        .map(|(a, b)| (vocab.tokenize(a), vocab.tokenize(b)))
        .collect()
}
