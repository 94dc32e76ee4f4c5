//! Transformer encoder with first-token aggregation and a linear projection
//! head. Post-norm residual blocks, learned absolute positions, GELU FFN,
//! no dropout: identical inputs always produce bit-identical outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{concat_pair, TokenId, CLS};
use crate::error::{Error, Result};
use crate::numerics::{Element, GradTape, Tensor, Var};

/// Layer-norm epsilon used throughout the stack.
pub const LN_EPS: f64 = 1e-5;

/// Weight initialization scale (seeded normal).
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub projection_dim: usize,
    /// Apply the projection to the word-level query as well as the sentence
    /// representation. Requires `projection_dim == hidden_dim` so the query
    /// stays comparable with embedding rows.
    pub shared_projection: bool,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 64 hidden, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            vocab_size,
            projection_dim: 64,
            shared_projection: true,
        }
    }

    /// Published-scale architecture: 12 layers, 768 hidden, 12 heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 12,
            hidden_dim: 768,
            heads: 12,
            ffn_dim: 3072,
            max_seq_len: 128,
            vocab_size,
            projection_dim: 768,
            shared_projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder config: {name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder config: hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.shared_projection && self.projection_dim != self.hidden_dim {
            return Err(Error::config(
                "encoder config: shared_projection requires projection_dim == hidden_dim",
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    ///
    /// `V*H + max_seq*H + 2H + L*(4H^2 + 2HF + 9H + F) + H*P`
    ///
    /// (token embeddings, positions, embedding layer norm, per-layer
    /// attention + FFN + two layer norms, projection).
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        self.vocab_size * h
            + self.max_seq_len * h
            + 2 * h
            + self.layers * (4 * h * h + 2 * h * f + 9 * h + f)
            + h * self.projection_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<E> {
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
}

/// Encoder weights. The token embedding table is shared between the input
/// layer, the tied language-model output, and the word-level contrast
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<E> {
    pub config: EncoderConfig,
    pub token_embedding: Tensor<E>,
    pub position_embedding: Tensor<E>,
    pub embed_ln_gamma: Tensor<E>,
    pub embed_ln_beta: Tensor<E>,
    pub layers: Vec<LayerWeights<E>>,
    pub projection: Tensor<E>,
}

fn normal_tensor<E: Element>(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = dims.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(dims.to_vec(), data).expect("init shape")
}

impl<E: Element> EncoderModel<E> {
    /// Seeded initialization: weight matrices and embeddings from a normal
    /// with sigma 0.02, gains at one, biases and shifts at zero. Tensors
    /// are drawn in visit order, so the whole model is a pure function of
    /// `(config, seed)`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f) = (config.hidden_dim, config.ffn_dim);
        let token_embedding = normal_tensor(&mut rng, &[config.vocab_size, h], INIT_STD);
        let position_embedding = normal_tensor(&mut rng, &[config.max_seq_len, h], INIT_STD);
        let embed_ln_gamma = Tensor::from_vec(vec![h], vec![E::one(); h]).unwrap();
        let embed_ln_beta = Tensor::zeros(&[h]);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                wq: normal_tensor(&mut rng, &[h, h], INIT_STD),
                bq: Tensor::zeros(&[h]),
                wk: normal_tensor(&mut rng, &[h, h], INIT_STD),
                bk: Tensor::zeros(&[h]),
                wv: normal_tensor(&mut rng, &[h, h], INIT_STD),
                bv: Tensor::zeros(&[h]),
                wo: normal_tensor(&mut rng, &[h, h], INIT_STD),
                bo: Tensor::zeros(&[h]),
                ln1_gamma: Tensor::from_vec(vec![h], vec![E::one(); h]).unwrap(),
                ln1_beta: Tensor::zeros(&[h]),
                w1: normal_tensor(&mut rng, &[h, f], INIT_STD),
                b1: Tensor::zeros(&[f]),
                w2: normal_tensor(&mut rng, &[f, h], INIT_STD),
                b2: Tensor::zeros(&[h]),
                ln2_gamma: Tensor::from_vec(vec![h], vec![E::one(); h]).unwrap(),
                ln2_beta: Tensor::zeros(&[h]),
            });
        }
        let projection = normal_tensor(&mut rng, &[h, config.projection_dim], INIT_STD);
        Ok(EncoderModel {
            config: config.clone(),
            token_embedding,
            position_embedding,
            embed_ln_gamma,
            embed_ln_beta,
            layers,
            projection,
        })
    }

    /// All parameters as `(name, tensor)` in a fixed deterministic order.
    pub fn visit(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("encoder/token_embedding".into(), &self.token_embedding),
            ("encoder/position_embedding".into(), &self.position_embedding),
            ("encoder/embed_ln_gamma".into(), &self.embed_ln_gamma),
            ("encoder/embed_ln_beta".into(), &self.embed_ln_beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
            ] {
                out.push((format!("encoder/layer{i}/{suffix}"), t));
            }
        }
        out.push(("encoder/projection".into(), &self.projection));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("encoder/token_embedding".into(), &mut self.token_embedding),
            ("encoder/position_embedding".into(), &mut self.position_embedding),
            ("encoder/embed_ln_gamma".into(), &mut self.embed_ln_gamma),
            ("encoder/embed_ln_beta".into(), &mut self.embed_ln_beta),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
            ] {
                out.push((format!("encoder/layer{i}/{suffix}"), t));
            }
        }
        out.push(("encoder/projection".into(), &mut self.projection));
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.len()).sum()
    }

    /// Cast all weights to another element type (f32 <-> f64).
    pub fn cast<T: Element>(&self) -> EncoderModel<T> {
        EncoderModel {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            embed_ln_gamma: self.embed_ln_gamma.cast(),
            embed_ln_beta: self.embed_ln_beta.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                })
                .collect(),
            projection: self.projection.cast(),
        }
    }

    /// Hidden states for a token sequence (plain forward, throwaway tape).
    pub fn encode(&self, ids: &[TokenId]) -> Result<Tensor<E>> {
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, self, false);
        let h = bound.encode(&mut tape, ids)?;
        Ok(tape.value(h).clone())
    }

    /// `r = f(g(M(tokens)))`: the projected first-token representation.
    pub fn sentence_repr(&self, ids: &[TokenId]) -> Result<Tensor<E>> {
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, self, false);
        let r = bound.sentence_repr(&mut tape, ids)?;
        Ok(tape.value(r).clone())
    }

    /// Projected `[CLS]` representation of `[CLS] x [SEP] y [SEP]`.
    pub fn encode_pair(&self, x: &[TokenId], y: &[TokenId]) -> Result<Tensor<E>> {
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, self, false);
        let r = bound.encode_pair(&mut tape, x, y)?;
        Ok(tape.value(r).clone())
    }

    /// Unnormalized class scores for a sequence under a linear head.
    pub fn classify(&self, head: &ClassifierHead<E>, ids: &[TokenId]) -> Result<Tensor<E>> {
        if head.weight.dims()[0] != self.config.projection_dim {
            return Err(Error::shape(format!(
                "classify: head expects input dim {}, encoder projects to {}",
                head.weight.dims()[0],
                self.config.projection_dim
            )));
        }
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, self, false);
        let r = bound.sentence_repr(&mut tape, ids)?;
        let w = tape.leaf(head.weight.clone());
        let b = tape.leaf(head.bias.clone());
        let scores = tape.vec_mat(r, w);
        let scores = {
            let row = tape.reshape(scores, vec![1, head.n_classes()]);
            let biased = tape.add_bias(row, b);
            tape.reshape(biased, vec![head.n_classes()])
        };
        Ok(tape.value(scores).clone())
    }
}

/// Linear classification head over the sentence representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<E> {
    pub weight: Tensor<E>, // [projection_dim, n_classes]
    pub bias: Tensor<E>,   // [n_classes]
}

impl<E: Element> ClassifierHead<E> {
    pub fn init(projection_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierHead {
            weight: normal_tensor(&mut rng, &[projection_dim, n_classes], INIT_STD),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn zeros(projection_dim: usize, n_classes: usize) -> Self {
        ClassifierHead {
            weight: Tensor::zeros(&[projection_dim, n_classes]),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.dims()[1]
    }
}

struct BoundLayer {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_gamma: Var,
    ln1_beta: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
}

/// Encoder parameters bound onto a tape for one forward/backward pass.
///
/// Binding with `trainable = false` inserts a gradient barrier behind every
/// parameter, so a frozen encoder receives exactly zero gradient.
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub token_embedding: Var,
    position_embedding: Var,
    embed_ln_gamma: Var,
    embed_ln_beta: Var,
    layers: Vec<BoundLayer>,
    pub projection: Var,
    /// Leaves in visit order; lines up with `EncoderModel::visit`.
    pub leaves: Vec<Var>,
}

impl BoundEncoder {
    /// Bind every parameter as a tape leaf (in visit order). A frozen
    /// binding detaches each leaf, so no gradient ever reaches it.
    pub fn bind<E: Element>(
        tape: &mut GradTape<E>,
        model: &EncoderModel<E>,
        trainable: bool,
    ) -> Self {
        let leaves: Vec<Var> = model
            .visit()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let effective: Vec<Var> = if trainable {
            leaves.clone()
        } else {
            leaves.iter().map(|&l| tape.detach(l)).collect()
        };
        let mut bound = Self::from_leaves(&model.config, &effective);
        bound.leaves = leaves;
        bound
    }

    /// Wire a bound encoder over existing tape vars, given in visit order.
    pub fn from_leaves(config: &EncoderConfig, vars: &[Var]) -> Self {
        assert_eq!(
            vars.len(),
            4 + 16 * config.layers + 1,
            "from_leaves: var count does not match config"
        );
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var count checked above");
        let token_embedding = next();
        let position_embedding = next();
        let embed_ln_gamma = next();
        let embed_ln_beta = next();
        let layers = (0..config.layers)
            .map(|_| BoundLayer {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gamma: next(),
                ln1_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
            })
            .collect();
        let projection = next();
        BoundEncoder {
            config: config.clone(),
            token_embedding,
            position_embedding,
            embed_ln_gamma,
            embed_ln_beta,
            layers,
            projection,
            leaves: vars.to_vec(),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::data("encode: empty sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::data(format!(
                "encode: sequence of {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::data(format!(
                "encode: token id {bad} out of vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Post-norm transformer stack: `[L, hidden_dim]` of final hidden states.
    pub fn encode<E: Element>(&self, tape: &mut GradTape<E>, ids: &[TokenId]) -> Result<Var> {
        self.check_ids(ids)?;
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let eps = E::from_f64(LN_EPS);
        let tok = tape.gather_rows(self.token_embedding, &rows);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(self.position_embedding, &positions);
        let sum = tape.add(tok, pos);
        let mut x = tape.layer_norm(sum, self.embed_ln_gamma, self.embed_ln_beta, eps);
        for l in &self.layers {
            let q = tape.matmul(x, l.wq);
            let q = tape.add_bias(q, l.bq);
            let k = tape.matmul(x, l.wk);
            let k = tape.add_bias(k, l.bk);
            let v = tape.matmul(x, l.wv);
            let v = tape.add_bias(v, l.bv);
            let att = tape.mha(q, k, v, self.config.heads, false);
            let att = tape.matmul(att, l.wo);
            let att = tape.add_bias(att, l.bo);
            let res = tape.add(x, att);
            x = tape.layer_norm(res, l.ln1_gamma, l.ln1_beta, eps);
            let ff = tape.matmul(x, l.w1);
            let ff = tape.add_bias(ff, l.b1);
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, l.w2);
            let ff = tape.add_bias(ff, l.b2);
            let res = tape.add(x, ff);
            x = tape.layer_norm(res, l.ln2_gamma, l.ln2_beta, eps);
        }
        Ok(x)
    }

    /// Projected first-token representation; the sequence must start with
    /// `[CLS]`.
    pub fn sentence_repr<E: Element>(&self, tape: &mut GradTape<E>, ids: &[TokenId]) -> Result<Var> {
        if ids.first() != Some(&CLS) {
            return Err(Error::data("sentence_repr: sequence must start with [CLS]"));
        }
        let h = self.encode(tape, ids)?;
        let h0 = tape.select_row(h, 0);
        Ok(tape.vec_mat(h0, self.projection))
    }

    /// Projected `[CLS]` representation of the pair concatenation.
    pub fn encode_pair<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        x: &[TokenId],
        y: &[TokenId],
    ) -> Result<Var> {
        let concat = concat_pair(x, y);
        if concat.len() > self.config.max_seq_len {
            return Err(Error::data(format!(
                "encode_pair: concatenation of {} exceeds max_seq_len {}",
                concat.len(),
                self.config.max_seq_len
            )));
        }
        self.sentence_repr(tape, &concat)
    }

    /// Word-level query over an already-built concatenation: the final
    /// first-token state, projected when `shared_projection` is set.
    pub fn word_query<E: Element>(&self, tape: &mut GradTape<E>, concat: &[TokenId]) -> Result<Var> {
        let h = self.encode(tape, concat)?;
        let h0 = tape.select_row(h, 0);
        if self.config.shared_projection {
            Ok(tape.vec_mat(h0, self.projection))
        } else {
            Ok(h0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_seq_len: 24,
            vocab_size: 30,
            projection_dim: 16,
            shared_projection: true,
        }
    }

    #[test]
    fn encode_shape_contract() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 1).unwrap();
        let h = m.encode(&[0, 9, 12, 1]).unwrap();
        assert_eq!(h.dims(), &[4, 16]);
    }

    #[test]
    fn encode_is_deterministic() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 2).unwrap();
        let a = m.encode(&[0, 8, 9, 10, 1]).unwrap();
        let b = m.encode(&[0, 8, 9, 10, 1]).unwrap();
        assert_eq!(a, b, "bit-identical forward passes");
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 3).unwrap();
        assert!(m.encode(&[0, 30, 1]).is_err(), "out-of-range id");
        let long: Vec<TokenId> = (0..25).map(|_| 8).collect();
        assert!(m.encode(&long).is_err(), "overlong sequence");
    }

    #[test]
    fn cls_output_permutation_equivariant_with_zeroed_positions() {
        let mut m = EncoderModel::<f64>::init(&tiny_config(), 4).unwrap();
        m.position_embedding = Tensor::zeros(&[24, 16]);
        let a = m.encode(&[0, 8, 9, 10, 11]).unwrap();
        let b = m.encode(&[0, 10, 11, 8, 9]).unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-5, "CLS row changed: {x} vs {y}");
        }
    }

    #[test]
    fn sentence_repr_shape_and_determinism() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 5).unwrap();
        let r = m.sentence_repr(&[0, 9, 10, 1]).unwrap();
        assert_eq!(r.dims(), &[16]);
        assert_eq!(r, m.sentence_repr(&[0, 9, 10, 1]).unwrap());
    }

    #[test]
    fn sentence_repr_requires_cls() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 5).unwrap();
        assert!(m.sentence_repr(&[9, 10]).is_err());
    }

    #[test]
    fn sentence_repr_is_order_sensitive_with_positions() {
        let m = EncoderModel::<f64>::init(&tiny_config(), 6).unwrap();
        let ab = m.sentence_repr(&[0, 8, 9, 1]).unwrap();
        let ba = m.sentence_repr(&[0, 9, 8, 1]).unwrap();
        let diff: f64 = ab.data().iter().zip(ba.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "positions present, order must matter");
    }

    #[test]
    fn encode_pair_shape_order_determinism() {
        let m = EncoderModel::<f64>::init(&tiny_config(), 7).unwrap();
        let xy = m.encode_pair(&[8, 9], &[10, 11]).unwrap();
        assert_eq!(xy.dims(), &[16]);
        let yx = m.encode_pair(&[10, 11], &[8, 9]).unwrap();
        let diff: f64 = xy.data().iter().zip(yx.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "pair order must matter");
        assert_eq!(xy, m.encode_pair(&[8, 9], &[10, 11]).unwrap());
    }

    #[test]
    fn encode_pair_rejects_overlong() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 7).unwrap();
        let x: Vec<TokenId> = (0..12).map(|_| 8).collect();
        let y: Vec<TokenId> = (0..12).map(|_| 9).collect();
        assert!(m.encode_pair(&x, &y).is_err());
    }

    #[test]
    fn classify_contracts() {
        let m = EncoderModel::<f32>::init(&tiny_config(), 8).unwrap();
        let zero = ClassifierHead::zeros(16, 3);
        let scores = m.classify(&zero, &[0, 9, 1]).unwrap();
        assert!(scores.data().iter().all(|&s| s == 0.0), "zero head, zero scores");

        let head = ClassifierHead::init(16, 2, 9);
        let scores = m.classify(&head, &[0, 9, 1]).unwrap();
        assert_eq!(scores.dims(), &[2]);

        // argmax invariant under adding a constant to all scores
        let argmax = |v: &[f32]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let shifted: Vec<f32> = scores.data().iter().map(|&s| s + 3.5).collect();
        assert_eq!(argmax(scores.data()), argmax(&shifted));

        let bad = ClassifierHead::zeros(8, 2);
        assert!(m.classify(&bad, &[0, 9, 1]).is_err(), "dim mismatch");
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = tiny_config();
        let m = EncoderModel::<f32>::init(&cfg, 10).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
        let desk = EncoderConfig::desk(200);
        let dm = EncoderModel::<f32>::init(&desk, 11).unwrap();
        assert_eq!(dm.param_count(), desk.param_count());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(cfg.validate().is_err(), "hidden not divisible by heads");
        let mut cfg = tiny_config();
        cfg.projection_dim = 8;
        assert!(cfg.validate().is_err(), "shared projection needs P == H");
        cfg.shared_projection = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let m = EncoderModel::<f64>::init(&tiny_config(), 12).unwrap();
        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, &m, false);
        let r = bound.sentence_repr(&mut tape, &[0, 8, 9, 1]).unwrap();
        let row = tape.reshape(r, vec![1, 16]);
        let ones = tape.leaf(Tensor::matrix(16, 1, vec![1.0; 16]).unwrap());
        let s = tape.matmul(row, ones);
        let loss = tape.reshape(s, vec![]);
        let grads = tape.backward(loss).unwrap();
        for leaf in &bound.leaves {
            assert!(grads.get(*leaf).is_none(), "frozen leaf received gradient");
        }
    }

    #[test]
    fn sentence_repr_gradients_pass_fd_check() {
        // fp64 finite-difference check over every encoder parameter
        let cfg = EncoderConfig {
            layers: 1,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_seq_len: 8,
            vocab_size: 12,
            projection_dim: 8,
            shared_projection: true,
        };
        let m = EncoderModel::<f64>::init(&cfg, 13).unwrap();
        let params: Vec<Tensor<f64>> = m.visit().into_iter().map(|(_, t)| t.clone()).collect();
        let probe: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64) - 0.3).collect();
        let err = grad_check(
            |tape, leaves| {
                let bound = BoundEncoder::from_leaves(&cfg, leaves);
                let r = bound.sentence_repr(tape, &[0, 8, 9, 10, 1])?;
                let c = tape.leaf(Tensor::matrix(8, 1, probe.clone()).unwrap());
                let row = tape.reshape(r, vec![1, 8]);
                let s = tape.matmul(row, c);
                Ok(tape.reshape(s, vec![]))
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
