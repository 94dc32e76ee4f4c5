//! Training objectives: the InfoNCE core, sentence-level and word-level
//! contrastive losses, hard-negative sampling, the masked language-model
//! loss, and their sum.
//!
//! All losses are built on the gradient tape so one backward pass covers
//! every component; `*_value` conveniences evaluate on a throwaway tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{concat_sentence, PretrainBatch, TokenId, N_SPECIALS};
use crate::encoder::BoundEncoder;
use crate::error::{Error, Result};
use crate::numerics::{Element, GradTape, Tensor, Var};

/// Similarity scaling. The default temperature of 1.0 reproduces the plain
/// contrastive objective; lower values sharpen it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub temperature: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { temperature: 1.0 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Sampled word-level negatives for one pair: ids in draw order, disjoint
/// from the pair's bag-of-words and from the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub ids: Vec<TokenId>,
    pub seed: u64,
}

/// The three loss components and their sum, as plain numbers for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_lm: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub total: f64,
}

/// Which objectives participate in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub score: ScoreConfig,
    /// Number of word-level negatives per pair (`m`).
    pub m_negatives: usize,
    pub enable_lm: bool,
    pub enable_sctl: bool,
    pub enable_wctl: bool,
    /// Compute the word-level query from the masked concatenation instead
    /// of the original one.
    pub wctl_on_masked: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            score: ScoreConfig::default(),
            m_negatives: 32,
            enable_lm: true,
            enable_sctl: true,
            enable_wctl: true,
            wctl_on_masked: false,
        }
    }
}

/// Contrastive classification of the positive key among the negatives:
///
/// `-log( exp(s(q,k+)/t) / (exp(s(q,k+)/t) + sum_i exp(s(q,k_i^-)/t)) )`
///
/// with `s` the cosine similarity. Always non-negative; exactly zero when
/// there are no negatives.
pub fn info_nce<E: Element>(
    tape: &mut GradTape<E>,
    q: Var,
    k_pos: Var,
    k_negs: &[Var],
    cfg: &ScoreConfig,
) -> Result<Var> {
    cfg.validate()?;
    let inv_t = E::from_f64(1.0 / cfg.temperature);
    let pos = tape.cosine(q, k_pos)?;
    let pos = tape.scale(pos, inv_t);
    let mut scores = Vec::with_capacity(k_negs.len() + 1);
    scores.push(pos);
    for &k in k_negs {
        let s = tape.cosine(q, k)?;
        scores.push(tape.scale(s, inv_t));
    }
    let stacked = tape.stack_scalars(&scores);
    let lse = tape.logsumexp(stacked);
    Ok(tape.sub(lse, pos))
}

/// [`info_nce`] on plain tensors.
pub fn info_nce_value<E: Element>(
    q: &Tensor<E>,
    k_pos: &Tensor<E>,
    k_negs: &[Tensor<E>],
    cfg: &ScoreConfig,
) -> Result<E> {
    let mut tape = GradTape::new();
    let qv = tape.leaf(q.clone());
    let kp = tape.leaf(k_pos.clone());
    let kn: Vec<Var> = k_negs.iter().map(|k| tape.leaf(k.clone())).collect();
    let loss = info_nce(&mut tape, qv, kp, &kn, cfg)?;
    Ok(tape.value(loss).item())
}

/// Batch-level sentence contrast: every representation queries its aligned
/// partner against the other `2n - 2` batch members, both directions, and
/// the per-query losses are averaged with weight `1/n`.
///
/// Negative order is fixed (the y-stream without the partner first, then the
/// x-stream without the query) so evaluation is deterministic.
pub fn sentence_ctl<E: Element>(
    tape: &mut GradTape<E>,
    xs: &[Var],
    ys: &[Var],
    cfg: &ScoreConfig,
) -> Result<Var> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "sentence_ctl: {} x-representations vs {} y-representations",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    let mut per_query = Vec::with_capacity(2 * n);
    for i in 0..n {
        let negs: Vec<Var> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ys[j])
            .chain((0..n).filter(|&j| j != i).map(|j| xs[j]))
            .collect();
        per_query.push(info_nce(tape, xs[i], ys[i], &negs, cfg)?);
        per_query.push(info_nce(tape, ys[i], xs[i], &negs, cfg)?);
    }
    let sum = tape.add_n(&per_query);
    Ok(tape.scale(sum, E::from_f64(1.0 / n as f64)))
}

/// [`sentence_ctl`] on plain tensors.
pub fn sentence_ctl_value<E: Element>(
    xs: &[Tensor<E>],
    ys: &[Tensor<E>],
    cfg: &ScoreConfig,
) -> Result<E> {
    let mut tape = GradTape::new();
    let xv: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let yv: Vec<Var> = ys.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = sentence_ctl(&mut tape, &xv, &yv, cfg)?;
    Ok(tape.value(loss).item())
}

/// Draw `min(m, candidates)` word ids without replacement from the
/// vocabulary minus the bag and the specials, with probability proportional
/// to `softmax(cos(query, e(w)))` over the candidate set.
///
/// Draw procedure (the selection is not differentiated): candidates are all
/// non-special ids not in `bag`, ascending; their cosine similarities to the
/// query are softmax-normalized into weights (computed in `f64`); each draw
/// takes `u = rng.gen::<f64>() * remaining_total` from a
/// `ChaCha8Rng::seed_from_u64(seed)` and walks the cumulative weights of the
/// not-yet-taken candidates in ascending id order.
pub fn sample_negatives<E: Element>(
    query: &Tensor<E>,
    bag: &[TokenId],
    embeddings: &Tensor<E>,
    m: usize,
    seed: u64,
) -> Result<NegativeSet> {
    if m == 0 {
        return Err(Error::config("sample_negatives: m must be >= 1"));
    }
    let vocab_size = embeddings.dims()[0];
    let hidden = embeddings.dims()[1];
    if query.len() != hidden {
        return Err(Error::shape(format!(
            "sample_negatives: query dim {} vs embedding dim {}",
            query.len(),
            hidden
        )));
    }
    let candidates: Vec<TokenId> = (N_SPECIALS as TokenId..vocab_size as TokenId)
        .filter(|id| bag.binary_search(id).is_err())
        .collect();
    if candidates.is_empty() {
        return Err(Error::data("sample_negatives: empty candidate set"));
    }
    let qnorm = query.norm();
    if qnorm == E::zero() {
        return Err(Error::numeric("sample_negatives: zero-norm query"));
    }
    let mut sims = Vec::with_capacity(candidates.len());
    for &id in &candidates {
        let row = embeddings.row(id as usize);
        let mut dot = E::zero();
        let mut sq = E::zero();
        for (&qi, &ei) in query.data().iter().zip(row) {
            dot = dot + qi * ei;
            sq = sq + ei * ei;
        }
        if sq == E::zero() {
            return Err(Error::numeric(format!(
                "sample_negatives: zero-norm embedding row {id}"
            )));
        }
        sims.push((dot / (qnorm * sq.sqrt())).to_f64());
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let norm: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= norm;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = m.min(candidates.len());
    let mut taken = vec![false; candidates.len()];
    let mut remaining: f64 = 1.0;
    let mut ids = Vec::with_capacity(take);
    for _ in 0..take {
        let u: f64 = rng.gen::<f64>() * remaining;
        let mut cum = 0.0;
        let mut pick = usize::MAX;
        for (i, &w) in weights.iter().enumerate() {
            if taken[i] {
                continue;
            }
            cum += w;
            if u < cum {
                pick = i;
                break;
            }
        }
        if pick == usize::MAX {
            // numerical slack: take the last untaken candidate
            pick = (0..candidates.len()).rev().find(|&i| !taken[i]).unwrap();
        }
        taken[pick] = true;
        remaining -= weights[pick];
        ids.push(candidates[pick]);
    }
    Ok(NegativeSet { ids, seed })
}

/// Word-level contrast for one pair: the query scores each bag word against
/// the shared negative set, averaged over the bag.
///
/// An empty bag marks a degenerate pair and is an error here; the combined
/// loss skips such pairs with a warning instead.
pub fn word_ctl<E: Element>(
    tape: &mut GradTape<E>,
    query: Var,
    bag: &[TokenId],
    negatives: &NegativeSet,
    embeddings: Var,
    cfg: &ScoreConfig,
) -> Result<Var> {
    if bag.is_empty() {
        return Err(Error::data("word_ctl: empty bag-of-words"));
    }
    if negatives.ids.iter().any(|id| bag.binary_search(id).is_ok()) {
        return Err(Error::data("word_ctl: negatives intersect the bag"));
    }
    let neg_rows: Vec<Var> = negatives
        .ids
        .iter()
        .map(|&id| tape.select_row(embeddings, id as usize))
        .collect();
    let mut terms = Vec::with_capacity(bag.len());
    for &w in bag {
        let pos_row = tape.select_row(embeddings, w as usize);
        terms.push(info_nce(tape, query, pos_row, &neg_rows, cfg)?);
    }
    let sum = tape.add_n(&terms);
    Ok(tape.scale(sum, E::from_f64(1.0 / bag.len() as f64)))
}

/// [`word_ctl`] on plain tensors.
pub fn word_ctl_value<E: Element>(
    query: &Tensor<E>,
    bag: &[TokenId],
    negatives: &NegativeSet,
    embeddings: &Tensor<E>,
    cfg: &ScoreConfig,
) -> Result<E> {
    let mut tape = GradTape::new();
    let q = tape.leaf(query.clone());
    let e = tape.leaf(embeddings.clone());
    let loss = word_ctl(&mut tape, q, bag, negatives, e, cfg)?;
    Ok(tape.value(loss).item())
}

/// Language-model loss over a batch: mean cross-entropy, across all masked
/// positions of all pairs, of recovering the original ids from the final
/// hidden states through the tied embedding table. Zero without masks.
fn lm_loss_on_tape<E: Element>(
    tape: &mut GradTape<E>,
    bound: &BoundEncoder,
    batch: &PretrainBatch,
) -> Result<Var> {
    let total_positions = batch.masked_positions();
    if total_positions == 0 {
        return Ok(tape.leaf(Tensor::scalar(E::zero())));
    }
    let mut weighted = Vec::new();
    for pair in &batch.pairs {
        if pair.mask_positions.is_empty() {
            continue;
        }
        let h = bound.encode(tape, &pair.masked)?;
        let picked = tape.gather_rows(h, &pair.mask_positions);
        let logits = tape.matmul_nt(picked, bound.token_embedding);
        let targets: Vec<usize> = pair.mask_labels.iter().map(|&t| t as usize).collect();
        let ce = tape.softmax_xent(logits, &targets);
        let w = pair.mask_positions.len() as f64 / total_positions as f64;
        weighted.push(tape.scale(ce, E::from_f64(w)));
    }
    Ok(tape.add_n(&weighted))
}

/// [`lm_loss_on_tape`] for a plain model.
pub fn lm_loss_value<E: Element>(
    model: &crate::encoder::EncoderModel<E>,
    batch: &PretrainBatch,
) -> Result<E> {
    let mut tape = GradTape::new();
    let bound = BoundEncoder::bind(&mut tape, model, false);
    let loss = lm_loss_on_tape(&mut tape, &bound, batch)?;
    Ok(tape.value(loss).item())
}

/// Scalar vars of each component plus the total, all on one tape.
pub struct TotalLoss {
    pub l_lm: Var,
    pub l_s: Var,
    pub l_w: Var,
    pub total: Var,
}

impl TotalLoss {
    pub fn bundle<E: Element>(&self, tape: &GradTape<E>) -> LossBundle {
        LossBundle {
            l_lm: tape.value(self.l_lm).item().to_f64(),
            l_s: tape.value(self.l_s).item().to_f64(),
            l_w: tape.value(self.l_w).item().to_f64(),
            total: tape.value(self.total).item().to_f64(),
        }
    }
}

/// The combined objective over one batch: `total = l_lm + l_s + l_w`.
///
/// Sentence representations come from `[CLS] side [SEP]` encodings of the
/// unmasked sentences; the word-level query comes from the pair
/// concatenation (masked form behind `wctl_on_masked`); the language model
/// reads the masked concatenation. Per-pair negative seeds derive from one
/// `ChaCha8Rng::seed_from_u64(neg_seed)` stream. Pairs with an empty bag or
/// an empty negative-candidate set contribute zero word-level loss, with a
/// warning.
pub fn total_loss<E: Element>(
    tape: &mut GradTape<E>,
    bound: &BoundEncoder,
    batch: &PretrainBatch,
    cfg: &ObjectiveConfig,
    neg_seed: u64,
) -> Result<TotalLoss> {
    cfg.score.validate()?;
    if batch.n() == 0 {
        return Err(Error::data("total_loss: empty batch"));
    }
    let zero = |tape: &mut GradTape<E>| tape.leaf(Tensor::scalar(E::zero()));

    let l_lm = if cfg.enable_lm {
        lm_loss_on_tape(tape, bound, batch)?
    } else {
        zero(tape)
    };

    let l_s = if cfg.enable_sctl {
        let mut xs = Vec::with_capacity(batch.n());
        let mut ys = Vec::with_capacity(batch.n());
        for pair in &batch.pairs {
            xs.push(bound.sentence_repr(tape, &concat_sentence(&pair.pair.x))?);
            ys.push(bound.sentence_repr(tape, &concat_sentence(&pair.pair.y))?);
        }
        sentence_ctl(tape, &xs, &ys, &cfg.score)?
    } else {
        zero(tape)
    };

    let l_w = if cfg.enable_wctl {
        let mut neg_rng = ChaCha8Rng::seed_from_u64(neg_seed);
        let mut terms = Vec::with_capacity(batch.n());
        for pair in &batch.pairs {
            let pair_seed: u64 = neg_rng.gen();
            if pair.bag.is_empty() {
                log::warn!("total_loss: pair with empty bag-of-words, skipping word-level term");
                continue;
            }
            let concat = if cfg.wctl_on_masked { &pair.masked } else { &pair.concat };
            let query = bound.word_query(tape, concat)?;
            let qv = tape.value(query).clone();
            let emb = tape.value(bound.token_embedding).clone();
            let negs = match sample_negatives(&qv, &pair.bag, &emb, cfg.m_negatives, pair_seed) {
                Ok(negs) => negs,
                Err(Error::Data(_)) => {
                    log::warn!("total_loss: no negative candidates, skipping word-level term");
                    NegativeSet { ids: Vec::new(), seed: pair_seed }
                }
                Err(e) => return Err(e),
            };
            terms.push(word_ctl(tape, query, &pair.bag, &negs, bound.token_embedding, &cfg.score)?);
        }
        if terms.is_empty() {
            zero(tape)
        } else {
            let sum = tape.add_n(&terms);
            tape.scale(sum, E::from_f64(1.0 / batch.n() as f64))
        }
    } else {
        zero(tape)
    };

    let total = tape.add_n(&[l_lm, l_s, l_w]);
    let bundle_total = tape.value(total).item();
    if !bundle_total.is_finite() {
        let b = TotalLoss { l_lm, l_s, l_w, total }.bundle(tape);
        return Err(Error::numeric(format!(
            "total_loss: non-finite loss (l_lm={}, l_s={}, l_w={})",
            b.l_lm, b.l_s, b.l_w
        )));
    }
    Ok(TotalLoss { l_lm, l_s, l_w, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_pretrain_batch, BatchSpec, SequentialSource, Vocabulary};
    use crate::encoder::{EncoderConfig, EncoderModel};
    use crate::numerics::grad_check;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vec_t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
        Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    // Brute-force restatements of the loss formulas, kept independent of the
    // tape path.
    mod oracle {
        pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nu * nv)
        }

        pub fn info_nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], t: f64) -> f64 {
            let sp = (cosine(q, pos) / t).exp();
            let sn: f64 = negs.iter().map(|n| (cosine(q, n) / t).exp()).sum();
            -(sp / (sp + sn)).ln()
        }

        /// Direct evaluation of the batched sentence contrast: for each i,
        /// query x_i with positive y_i and negatives y\i then x\i, plus the
        /// symmetric query; average with weight 1/n.
        pub fn sentence_ctl(xs: &[Vec<f64>], ys: &[Vec<f64>], t: f64) -> f64 {
            let n = xs.len();
            let mut total = 0.0;
            for i in 0..n {
                let negs: Vec<Vec<f64>> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ys[j].clone())
                    .chain((0..n).filter(|&j| j != i).map(|j| xs[j].clone()))
                    .collect();
                total += info_nce(&xs[i], &ys[i], &negs, t);
                total += info_nce(&ys[i], &xs[i], &negs, t);
            }
            total / n as f64
        }

        /// Direct evaluation of the word-level contrast for one pair.
        pub fn word_ctl(q: &[f64], bag_rows: &[Vec<f64>], neg_rows: &[Vec<f64>], t: f64) -> f64 {
            let sum: f64 = bag_rows
                .iter()
                .map(|pos| info_nce(q, pos, &neg_rows.to_vec(), t))
                .sum();
            sum / bag_rows.len() as f64
        }
    }

    #[test]
    fn info_nce_no_negatives_is_exactly_zero() {
        let cfg = ScoreConfig::default();
        let q = vec_t(&[0.3, -0.2, 0.9]);
        let k = vec_t(&[0.1, 0.4, 0.2]);
        assert_eq!(info_nce_value(&q, &k, &[], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_equal_scores_closed_form() {
        // all scores equal with N=3 negatives: ln 4
        let cfg = ScoreConfig::default();
        let q = vec_t(&[1.0, 0.0]);
        let k = vec_t(&[2.0, 0.0]); // cosine 1 with q
        let negs = vec![k.clone(), k.clone(), k.clone()];
        let got = info_nce_value(&q, &k, &negs, &cfg).unwrap();
        assert_relative_eq!(got, (4.0f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(got, 1.3862944, epsilon = 1e-7);
    }

    #[test]
    fn info_nce_orthogonal_negatives_closed_form() {
        // s+ = 1, two negatives at 0: ln(1 + 2 e^-1)
        let cfg = ScoreConfig::default();
        let q = vec_t(&[1.0, 0.0, 0.0]);
        let pos = vec_t(&[3.0, 0.0, 0.0]);
        let negs = vec![vec_t(&[0.0, 1.0, 0.0]), vec_t(&[0.0, 0.0, 1.0])];
        let got = info_nce_value(&q, &pos, &negs, &cfg).unwrap();
        let expect = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        assert_relative_eq!(got, 0.5514, epsilon = 1e-4);
    }

    #[test]
    fn info_nce_nonnegative_and_monotone_in_positive_score() {
        let cfg = ScoreConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let negs: Vec<Tensor<f64>> = (0..4).map(|_| rand_vec(&mut rng, 6)).collect();
        let q = vec_t(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // positives at increasing alignment with q
        let mut last = f64::INFINITY;
        for a in [-0.9, -0.3, 0.2, 0.7, 0.99] {
            let pos = vec_t(&[a, (1.0 - a * a as f64).sqrt(), 0.0, 0.0, 0.0, 0.0]);
            let l = info_nce_value(&q, &pos, &negs, &cfg).unwrap();
            assert!(l >= 0.0);
            assert!(l < last, "loss must strictly decrease as s(q,k+) grows");
            last = l;
        }
    }

    #[test]
    fn info_nce_matches_brute_force_and_is_scale_invariant() {
        let cfg = ScoreConfig { temperature: 0.7 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = rand_vec(&mut rng, 8);
            let pos = rand_vec(&mut rng, 8);
            let negs: Vec<Tensor<f64>> = (0..5).map(|_| rand_vec(&mut rng, 8)).collect();
            let got = info_nce_value(&q, &pos, &negs, &cfg).unwrap();
            let oracle = oracle::info_nce(
                q.data(),
                pos.data(),
                &negs.iter().map(|n| n.data().to_vec()).collect::<Vec<_>>(),
                0.7,
            );
            assert_relative_eq!(got, oracle, epsilon = 1e-10);
            // cosine scale invariance
            let scaled = q.map(|x| x * 3.7);
            let got2 = info_nce_value(&scaled, &pos, &negs, &cfg).unwrap();
            assert_relative_eq!(got, got2, epsilon = 1e-9);
        }
    }

    #[test]
    fn sentence_ctl_single_pair_is_zero() {
        let cfg = ScoreConfig::default();
        let xs = vec![vec_t(&[0.4, 0.1])];
        let ys = vec![vec_t(&[0.2, -0.9])];
        assert_eq!(sentence_ctl_value(&xs, &ys, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn sentence_ctl_two_orthogonal_pairs_closed_form() {
        // r_{x_i} = r_{y_i}, orthogonal across i: each of the 4 queries sees
        // s+ = 1 and two negatives at 0, so L_S = (4/n) * ln(1+2e^-1) with n=2.
        let cfg = ScoreConfig::default();
        let e0 = vec_t(&[1.0, 0.0]);
        let e1 = vec_t(&[0.0, 1.0]);
        let got = sentence_ctl_value(&[e0.clone(), e1.clone()], &[e0, e1], &cfg).unwrap();
        let expect = 2.0 * (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        assert_relative_eq!(got, 1.1028, epsilon = 1e-4);
    }

    #[test]
    fn sentence_ctl_stream_swap_symmetry() {
        let cfg = ScoreConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<Tensor<f64>> = (0..4).map(|_| rand_vec(&mut rng, 8)).collect();
        let ys: Vec<Tensor<f64>> = (0..4).map(|_| rand_vec(&mut rng, 8)).collect();
        let a = sentence_ctl_value(&xs, &ys, &cfg).unwrap();
        let b = sentence_ctl_value(&ys, &xs, &cfg).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn sentence_ctl_matches_brute_force() {
        let cfg = ScoreConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [2usize, 3, 5] {
            let xs: Vec<Tensor<f64>> = (0..n).map(|_| rand_vec(&mut rng, 8)).collect();
            let ys: Vec<Tensor<f64>> = (0..n).map(|_| rand_vec(&mut rng, 8)).collect();
            let got = sentence_ctl_value(&xs, &ys, &cfg).unwrap();
            let oracle = oracle::sentence_ctl(
                &xs.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
                &ys.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
                1.0,
            );
            assert_relative_eq!(got, oracle, epsilon = 1e-10);
        }
    }

    fn embeddings_8_words(seed: u64) -> Tensor<f64> {
        // 7 specials + 8 words, 8-dim
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..(N_SPECIALS + 8) * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(N_SPECIALS + 8, 8, data).unwrap()
    }

    #[test]
    fn sample_negatives_exhaustion_takes_all() {
        let emb = embeddings_8_words(3);
        let q = vec_t(&[0.5; 8]);
        let bag: Vec<TokenId> = vec![7, 9];
        let negs = sample_negatives(&q, &bag, &emb, 100, 5).unwrap();
        let mut got = negs.ids.clone();
        got.sort_unstable();
        let expect: Vec<TokenId> = (7..15).filter(|id| !bag.contains(id)).collect();
        assert_eq!(got, expect, "m >= candidates takes the whole candidate set");
    }

    #[test]
    fn sample_negatives_never_intersects_bag() {
        let emb = embeddings_8_words(4);
        let q = vec_t(&[0.2, -0.4, 0.9, 0.1, 0.0, 0.3, -0.2, 0.5]);
        let bag: Vec<TokenId> = vec![8, 10, 12];
        for seed in 0..200 {
            let negs = sample_negatives(&q, &bag, &emb, 3, seed).unwrap();
            assert_eq!(negs.ids.len(), 3);
            for id in &negs.ids {
                assert!(bag.binary_search(id).is_err());
                assert!(*id as usize >= N_SPECIALS);
            }
            let mut dedup = negs.ids.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 3, "no duplicates");
        }
    }

    #[test]
    fn sample_negatives_seeded_draw_oracle() {
        // 8 non-special words, |B| = 3, m = 2, fixed query and seed.
        let emb = embeddings_8_words(6);
        let q = vec_t(&[0.9, -0.1, 0.4, 0.0, 0.2, -0.7, 0.3, 0.6]);
        let bag: Vec<TokenId> = vec![7, 11, 13];
        let got = sample_negatives(&q, &bag, &emb, 2, 21).unwrap();

        // independent restatement of the documented sequential draw
        let candidates: Vec<TokenId> =
            (N_SPECIALS as u32..15).filter(|id| !bag.contains(id)).collect();
        let sims: Vec<f64> = candidates
            .iter()
            .map(|&id| oracle::cosine(q.data(), emb.row(id as usize)))
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for wi in &mut w {
            *wi /= total;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut taken = vec![false; candidates.len()];
        let mut remaining = 1.0f64;
        let mut expect = Vec::new();
        for _ in 0..2 {
            let u: f64 = rng.gen::<f64>() * remaining;
            let mut cum = 0.0;
            for i in 0..candidates.len() {
                if taken[i] {
                    continue;
                }
                cum += w[i];
                if u < cum {
                    taken[i] = true;
                    remaining -= w[i];
                    expect.push(candidates[i]);
                    break;
                }
            }
        }
        assert_eq!(got.ids, expect, "impl must follow the documented draw order");
        assert_eq!(got.ids, vec![10, 12], "frozen seeded draw");
    }

    #[test]
    fn sample_negatives_empty_candidates_is_error() {
        let emb = embeddings_8_words(8);
        let q = vec_t(&[0.1; 8]);
        let bag: Vec<TokenId> = (7..15).collect();
        assert!(sample_negatives(&q, &bag, &emb, 2, 0).is_err());
    }

    #[test]
    fn sample_negatives_first_draw_tracks_softmax() {
        // small-sample sanity: frequencies over 20k seeds within 3 SE
        let emb = embeddings_8_words(9);
        let q = vec_t(&[0.8, 0.2, -0.5, 0.3, 0.1, -0.2, 0.6, -0.4]);
        let bag: Vec<TokenId> = vec![9, 12];
        let candidates: Vec<TokenId> = (7..15).filter(|id| !bag.contains(id)).collect();
        let sims: Vec<f64> = candidates
            .iter()
            .map(|&id| oracle::cosine(q.data(), emb.row(id as usize)))
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let trials = 20_000u64;
        let mut counts = vec![0usize; candidates.len()];
        for seed in 0..trials {
            let negs = sample_negatives(&q, &bag, &emb, 1, seed).unwrap();
            let idx = candidates.iter().position(|&c| c == negs.ids[0]).unwrap();
            counts[idx] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            let se = (probs[i] * (1.0 - probs[i]) / trials as f64).sqrt();
            assert!(
                (freq - probs[i]).abs() <= 3.0 * se,
                "candidate {i}: freq {freq:.4} vs p {:.4} (3se {:.4})",
                probs[i],
                3.0 * se
            );
        }
    }

    #[test]
    fn word_ctl_degenerate_cases() {
        let cfg = ScoreConfig::default();
        let emb = embeddings_8_words(10);
        let q = vec_t(&[0.3; 8]);
        // |B| = 1, S empty: single info_nce with no negatives
        let negs = NegativeSet { ids: vec![], seed: 0 };
        assert_eq!(word_ctl_value(&q, &[9], &negs, &emb, &cfg).unwrap(), 0.0);
        // empty bag is an error at this level
        assert!(word_ctl_value(&q, &[], &negs, &emb, &cfg).is_err());
    }

    #[test]
    fn word_ctl_equal_scores_closed_form() {
        // both positives and all three negatives share one embedding row
        // direction, so every score is equal: each term is ln 4
        let cfg = ScoreConfig::default();
        let mut emb = Tensor::zeros(&[N_SPECIALS + 8, 4]);
        for id in 0..(N_SPECIALS + 8) {
            let row = emb.row_mut(id);
            row[0] = 1.0 + id as f64; // same direction, different scales
        }
        let q = vec_t(&[2.0, 0.0, 0.0, 0.0]);
        let negs = NegativeSet { ids: vec![10, 11, 12], seed: 0 };
        let got = word_ctl_value(&q, &[7, 8], &negs, &emb, &cfg).unwrap();
        assert_relative_eq!(got, (4.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn word_ctl_matches_brute_force() {
        let cfg = ScoreConfig::default();
        let emb = embeddings_8_words(12);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = rand_vec(&mut rng, 8);
        let bag: Vec<TokenId> = vec![8, 13];
        let negs = NegativeSet { ids: vec![9, 11], seed: 0 };
        let got = word_ctl_value(&q, &bag, &negs, &emb, &cfg).unwrap();
        let bag_rows: Vec<Vec<f64>> = bag.iter().map(|&w| emb.row(w as usize).to_vec()).collect();
        let neg_rows: Vec<Vec<f64>> =
            negs.ids.iter().map(|&w| emb.row(w as usize).to_vec()).collect();
        let expect = oracle::word_ctl(q.data(), &bag_rows, &neg_rows, 1.0);
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn word_ctl_rejects_bag_negative_overlap() {
        let cfg = ScoreConfig::default();
        let emb = embeddings_8_words(13);
        let q = vec_t(&[0.3; 8]);
        let negs = NegativeSet { ids: vec![9], seed: 0 };
        assert!(word_ctl_value(&q, &[9, 10], &negs, &emb, &cfg).is_err());
    }

    // --- cross-entropy hand values ---------------------------------------

    #[test]
    fn cross_entropy_hand_values() {
        // one masked position, |V| = 3: logits (1,0,0) with true id 0 gives
        // ln((e+2)/e); logits (1,1,0) gives ln((2e+1)/e) = 0.8619948
        let mut tape = GradTape::<f64>::new();
        let l1 = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        let ce1 = tape.softmax_xent(l1, &[0]);
        let e = std::f64::consts::E;
        assert_relative_eq!(tape.value(ce1).item(), ((e + 2.0) / e).ln(), epsilon = 1e-12);
        assert_relative_eq!(tape.value(ce1).item(), 0.5514447, epsilon = 1e-7);

        let l2 = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]).unwrap());
        let ce2 = tape.softmax_xent(l2, &[0]);
        assert_relative_eq!(tape.value(ce2).item(), ((2.0 * e + 1.0) / e).ln(), epsilon = 1e-12);
        assert_relative_eq!(tape.value(ce2).item(), 0.8619948, epsilon = 1e-7);
    }

    // --- batch-level objectives -------------------------------------------

    fn small_setup(mask_rate: f64) -> (EncoderModel<f64>, PretrainBatch, Vocabulary) {
        let vocab = Vocabulary::build_from_lines(
            ["aa bb cc dd ee ff gg hh ii jj kk ll mm nn oo pp qq rr ss tt uu vv ww"],
            1,
        )
        .unwrap();
        let cfg = EncoderConfig {
            layers: 2,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_seq_len: 24,
            vocab_size: vocab.size(),
            projection_dim: 16,
            shared_projection: true,
        };
        let model = EncoderModel::<f64>::init(&cfg, 5).unwrap();
        let pairs = vec![
            (vocab.tokenize("aa bb cc"), vocab.tokenize("dd ee ff")),
            (vocab.tokenize("gg hh"), vocab.tokenize("ii jj kk")),
        ];
        let batch = make_pretrain_batch(
            &mut SequentialSource::parallel(pairs),
            &BatchSpec { n: 2, max_seq_len: 24, mask_rate, perturb_rate: 0.3 },
            &vocab,
            17,
        )
        .unwrap();
        (model, batch, vocab)
    }

    #[test]
    fn lm_loss_zero_masks_is_zero() {
        let (model, batch, _) = small_setup(0.0);
        assert_eq!(lm_loss_value(&model, &batch).unwrap(), 0.0);
    }

    #[test]
    fn lm_loss_uniform_logits_is_ln_vocab() {
        let (mut model, batch, vocab) = small_setup(0.3);
        // zeroed embedding table: tied logits vanish, prediction is uniform
        model.token_embedding = Tensor::zeros(&[vocab.size(), 16]);
        let got = lm_loss_value(&model, &batch).unwrap();
        assert_relative_eq!(got, (vocab.size() as f64).ln(), epsilon = 1e-9);
        // near-init random weights stay close to uniform
        let (model, batch, vocab) = small_setup(0.3);
        let got = lm_loss_value(&model, &batch).unwrap();
        let lnv = (vocab.size() as f64).ln();
        assert!((got - lnv).abs() < 0.1 * lnv, "got {got}, ln|V| {lnv}");
    }

    #[test]
    fn total_loss_components_match_standalone_ops() {
        let (model, batch, _) = small_setup(0.3);
        let cfg = ObjectiveConfig { m_negatives: 4, ..Default::default() };
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, &model, true);
        let losses = total_loss(&mut tape, &bound, &batch, &cfg, 99).unwrap();
        let bundle = losses.bundle(&tape);

        assert_relative_eq!(bundle.total, bundle.l_lm + bundle.l_s + bundle.l_w, epsilon = 1e-12);
        assert!(bundle.l_lm >= 0.0 && bundle.l_s >= 0.0 && bundle.l_w >= 0.0);

        // l_lm equals the standalone evaluation on the same batch
        assert_relative_eq!(bundle.l_lm, lm_loss_value(&model, &batch).unwrap(), epsilon = 1e-12);

        // l_s equals sentence_ctl over independently computed representations
        let xs: Vec<Tensor<f64>> = batch
            .pairs
            .iter()
            .map(|p| model.sentence_repr(&concat_sentence(&p.pair.x)).unwrap())
            .collect();
        let ys: Vec<Tensor<f64>> = batch
            .pairs
            .iter()
            .map(|p| model.sentence_repr(&concat_sentence(&p.pair.y)).unwrap())
            .collect();
        let ls = sentence_ctl_value(&xs, &ys, &cfg.score).unwrap();
        assert_relative_eq!(bundle.l_s, ls, epsilon = 1e-12);

        // l_w equals the per-pair word_ctl average with the same seeds
        let mut neg_rng = ChaCha8Rng::seed_from_u64(99);
        let mut lw = 0.0;
        for pair in &batch.pairs {
            let pair_seed: u64 = neg_rng.gen();
            let q = model.encode_pair(&pair.pair.x, &pair.pair.y).unwrap();
            let negs =
                sample_negatives(&q, &pair.bag, &model.token_embedding, 4, pair_seed).unwrap();
            lw += word_ctl_value(&q, &pair.bag, &negs, &model.token_embedding, &cfg.score)
                .unwrap();
        }
        lw /= batch.n() as f64;
        assert_relative_eq!(bundle.l_w, lw, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_all_degenerate_is_zero() {
        // one-word vocab: the candidate set V \ B is empty, |B| = 1, no
        // masking, single pair -- every component collapses to zero
        let vocab = Vocabulary::build_from_lines(["aa aa"], 1).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            vocab_size: vocab.size(),
            projection_dim: 8,
            shared_projection: true,
        };
        let model = EncoderModel::<f64>::init(&cfg, 2).unwrap();
        let pairs = vec![(vocab.tokenize("aa aa"), vocab.tokenize("aa"))];
        let batch = make_pretrain_batch(
            &mut SequentialSource::parallel(pairs),
            &BatchSpec { n: 1, max_seq_len: 16, mask_rate: 0.0, perturb_rate: 0.0 },
            &vocab,
            3,
        )
        .unwrap();
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, &model, true);
        let losses = total_loss(&mut tape, &bound, &batch, &ObjectiveConfig::default(), 1).unwrap();
        let bundle = losses.bundle(&tape);
        assert_eq!(bundle.total, 0.0);
        assert_eq!((bundle.l_lm, bundle.l_s, bundle.l_w), (0.0, 0.0, 0.0));
    }

    #[test]
    fn embedding_gradient_sparsity() {
        // with masking off, rows outside bag + negatives + batch tokens get
        // exactly zero gradient; sampled negative rows get nonzero gradient
        let (model, batch, vocab) = small_setup(0.0);
        let cfg = ObjectiveConfig { m_negatives: 3, ..Default::default() };
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, &model, true);
        let losses = total_loss(&mut tape, &bound, &batch, &cfg, 5).unwrap();
        let grads = tape.backward(losses.total).unwrap();
        let demb = grads.get(bound.leaves[0]).expect("embedding gradient");

        // reconstruct the sampled negative sets with the same seed stream
        let mut neg_rng = ChaCha8Rng::seed_from_u64(5);
        let mut touched: Vec<u32> = Vec::new();
        for pair in &batch.pairs {
            let pair_seed: u64 = neg_rng.gen();
            let q = model.encode_pair(&pair.pair.x, &pair.pair.y).unwrap();
            let negs =
                sample_negatives(&q, &pair.bag, &model.token_embedding, 3, pair_seed).unwrap();
            touched.extend(&negs.ids);
            touched.extend(&pair.bag);
            touched.extend(pair.concat.iter().copied());
        }
        touched.sort_unstable();
        touched.dedup();

        let mut some_negative_nonzero = false;
        for id in 0..vocab.size() as u32 {
            let row = demb.row(id as usize);
            let norm: f64 = row.iter().map(|x| x * x).sum();
            if touched.binary_search(&id).is_ok() {
                if norm > 0.0 {
                    some_negative_nonzero = true;
                }
            } else {
                assert_eq!(norm, 0.0, "row {id} outside the touched set has gradient");
            }
        }
        assert!(some_negative_nonzero);
    }

    #[test]
    fn total_loss_gradients_pass_fd_smoke() {
        // small fp64 finite-difference check; the acceptance suite runs the
        // full 10-trial version
        let (model, batch, _) = small_setup(0.3);
        let cfg = ObjectiveConfig { m_negatives: 3, ..Default::default() };
        let params: Vec<Tensor<f64>> = model.visit().into_iter().map(|(_, t)| t.clone()).collect();
        let enc_cfg = model.config.clone();
        let err = grad_check(
            |tape, leaves| {
                let bound = BoundEncoder::from_leaves(&enc_cfg, leaves);
                let losses = total_loss(tape, &bound, &batch, &cfg, 31)?;
                Ok(losses.total)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
