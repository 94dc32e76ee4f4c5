//! Multi-task pre-training loop, learning-rate schedules, checkpointing,
//! and continued (task-adaptive) pre-training.

mod checkpoint;
mod eval;

pub use checkpoint::{fnv1a64, Archive, Record, MAGIC, VERSION};
pub use eval::{eval_retrieval, tokenize_pairs, word_rank_auc, RetrievalReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_pretrain_batch, BatchSpec, TokenId, Vocabulary};
use crate::encoder::{BoundEncoder, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, GradTape, Tensor};
use crate::objectives::{total_loss, LossBundle, ObjectiveConfig, ScoreConfig};

/// Learning-rate decay after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Linear ramp 0 -> peak over warmup, then linear decay to 0 at `steps`.
    InvertLinear,
    /// Linear ramp, then `peak * sqrt(warmup / step)`.
    InverseSqrt,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "invert-linear" => Ok(Schedule::InvertLinear),
            "inverse-sqrt" => Ok(Schedule::InverseSqrt),
            other => Err(Error::config(format!(
                "unknown schedule {other:?} (expected invert-linear or inverse-sqrt)"
            ))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::InvertLinear => "invert-linear",
            Schedule::InverseSqrt => "inverse-sqrt",
        })
    }
}

/// Pre-training configuration. Published-scale values stay reachable, desk
/// defaults keep runs in CPU-minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Pairs per batch (`n`).
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Word-level negatives per pair (`m`).
    pub m_negatives: usize,
    pub mask_rate: f64,
    pub perturb_rate: f64,
    /// Progress-logging cadence, in steps.
    pub eval_every: u64,
    pub max_seq_len: usize,
    pub temperature: f64,
    pub enable_lm: bool,
    pub enable_sctl: bool,
    pub enable_wctl: bool,
    pub wctl_on_masked: bool,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: n=8, m=32, sequences of 64, 2-layer encoder.
    pub fn desk(vocab_size: usize) -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr_peak: 2.5e-4,
            warmup_steps: 100,
            schedule: Schedule::InvertLinear,
            seed: 0,
            m_negatives: 32,
            mask_rate: 0.15,
            perturb_rate: 0.3,
            eval_every: 200,
            max_seq_len: 64,
            temperature: 1.0,
            enable_lm: true,
            enable_sctl: true,
            enable_wctl: true,
            wctl_on_masked: false,
            encoder: EncoderConfig::desk(vocab_size),
        }
    }

    /// Published-scale values: n=1024, m=512, sequences of 128, 12 layers,
    /// peak learning rate 2.5e-5.
    pub fn full_scale(vocab_size: usize) -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 1024,
            lr_peak: 2.5e-5,
            warmup_steps: 4000,
            schedule: Schedule::InvertLinear,
            seed: 0,
            m_negatives: 512,
            mask_rate: 0.15,
            perturb_rate: 0.3,
            eval_every: 1000,
            max_seq_len: 128,
            temperature: 1.0,
            enable_lm: true,
            enable_sctl: true,
            enable_wctl: true,
            wctl_on_masked: false,
            encoder: EncoderConfig::full_scale(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::config("lr_peak must be positive"));
        }
        if self.m_negatives == 0 {
            return Err(Error::config("m (negatives) must be >= 1"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be >= 1"));
        }
        if self.schedule == Schedule::InvertLinear && self.warmup_steps >= self.steps {
            return Err(Error::config(
                "invert-linear schedule needs warmup_steps < steps",
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(0.0..=1.0).contains(&self.perturb_rate) {
            return Err(Error::config("mask_rate and perturb_rate must be in [0,1]"));
        }
        if self.max_seq_len > self.encoder.max_seq_len {
            return Err(Error::config(format!(
                "max_seq_len {} exceeds encoder max_seq_len {}",
                self.max_seq_len, self.encoder.max_seq_len
            )));
        }
        self.encoder.validate()?;
        ScoreConfig { temperature: self.temperature }.validate()
    }

    pub fn objectives(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            score: ScoreConfig { temperature: self.temperature },
            m_negatives: self.m_negatives,
            enable_lm: self.enable_lm,
            enable_sctl: self.enable_sctl,
            enable_wctl: self.enable_wctl,
            wctl_on_masked: self.wctl_on_masked,
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            n: self.batch_size,
            max_seq_len: self.max_seq_len,
            mask_rate: self.mask_rate,
            perturb_rate: self.perturb_rate,
        }
    }
}

/// Learning rate at a (0-based) step: linear warmup to `lr_peak` at
/// `warmup_steps`, then the configured decay. Continuous at the boundary;
/// never negative.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps.max(1);
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::InvertLinear => {
            if cfg.steps <= warmup {
                return 0.0;
            }
            let frac = (step - warmup) as f64 / (cfg.steps - warmup) as f64;
            (cfg.lr_peak * (1.0 - frac)).max(0.0)
        }
        Schedule::InverseSqrt => cfg.lr_peak * (warmup as f64 / step as f64).sqrt(),
    }
}

/// Everything that evolves during training; checkpointing this state and
/// resuming reproduces an unbroken run bit for bit.
pub struct TrainerState {
    pub model: EncoderModel<f32>,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainerState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = EncoderModel::init(&cfg.encoder, cfg.seed)?;
        let params: Vec<&Tensor<f32>> = model.visit().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(&params);
        // data/masking/negative stream, decorrelated from the init stream
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(TrainerState { model, adam, rng, step: 0 })
    }
}

/// Training corpus: aligned pairs, or monolingual lines that get perturbed
/// partners at batch time.
#[derive(Debug, Clone)]
pub enum TrainCorpus {
    Parallel(Vec<(Vec<TokenId>, Vec<TokenId>)>),
    Mono(Vec<Vec<TokenId>>),
}

impl TrainCorpus {
    pub fn len(&self) -> usize {
        match self {
            TrainCorpus::Parallel(v) => v.len(),
            TrainCorpus::Mono(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn draw(&self, i: usize) -> (Vec<TokenId>, Option<Vec<TokenId>>) {
        match self {
            TrainCorpus::Parallel(v) => (v[i].0.clone(), Some(v[i].1.clone())),
            TrainCorpus::Mono(v) => (v[i].clone(), None),
        }
    }
}

struct DrawnSource {
    items: std::vec::IntoIter<(Vec<TokenId>, Option<Vec<TokenId>>)>,
}

impl crate::corpus::PairSource for DrawnSource {
    fn next_pair(&mut self) -> Option<(Vec<TokenId>, Option<Vec<TokenId>>)> {
        self.items.next()
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub bundle: LossBundle,
    pub lr: f64,
}

/// Serialize step logs as the standard metrics CSV.
pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,l_lm,l_s,l_w,total,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step, row.bundle.l_lm, row.bundle.l_s, row.bundle.l_w, row.bundle.total, row.lr
        ));
    }
    out
}

pub fn write_metrics_csv<P: AsRef<std::path::Path>>(path: P, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Advance `state` until `state.step` reaches `cfg.steps`. Each step draws
/// `batch_size` corpus indices, a batch seed, and a negative-sampling seed
/// from the carried RNG, computes the combined objective, and applies one
/// Adam update at `lr_at(step)`.
///
/// A non-finite loss aborts with a diagnostic naming the component values.
pub fn train_loop(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    corpus: &TrainCorpus,
    vocab: &Vocabulary,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::data("train_loop: empty corpus"));
    }
    if vocab.size() != cfg.encoder.vocab_size {
        return Err(Error::config(format!(
            "vocabulary of {} vs encoder vocab_size {}",
            vocab.size(),
            cfg.encoder.vocab_size
        )));
    }
    let spec = cfg.batch_spec();
    let objectives = cfg.objectives();
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let lr = lr_at(state.step, cfg);
        let drawn: Vec<(Vec<TokenId>, Option<Vec<TokenId>>)> = (0..cfg.batch_size)
            .map(|_| corpus.draw(state.rng.gen_range(0..corpus.len())))
            .collect();
        let batch_seed: u64 = state.rng.gen();
        let neg_seed: u64 = state.rng.gen();
        let mut source = DrawnSource { items: drawn.into_iter() };
        let batch = make_pretrain_batch(&mut source, &spec, vocab, batch_seed)?;

        let mut tape = GradTape::new();
        let bound = BoundEncoder::bind(&mut tape, &state.model, true);
        let losses = total_loss(&mut tape, &bound, &batch, &objectives, neg_seed)
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::numeric(format!("step {}: {msg}", state.step))
                }
                other => other,
            })?;
        let bundle = losses.bundle(&tape);
        let mut grads = tape.backward(losses.total)?;
        let grad_opts: Vec<Option<Tensor<f32>>> =
            bound.leaves.iter().map(|&l| grads.take(l)).collect();
        {
            let mut params: Vec<&mut Tensor<f32>> = state
                .model
                .visit_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let grad_refs: Vec<Option<&Tensor<f32>>> =
                grad_opts.iter().map(|g| g.as_ref()).collect();
            adam_step(&mut params, &grad_refs, &mut state.adam, lr as f32)?;
        }
        log.push(StepLog { step: state.step, bundle, lr });
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            log::info!(
                "step {}: total {:.4} (lm {:.4}, s {:.4}, w {:.4}), lr {:.2e}",
                state.step,
                bundle.total,
                bundle.l_lm,
                bundle.l_s,
                bundle.l_w,
                lr
            );
        }
        state.step += 1;
    }
    Ok(log)
}

/// Fresh pre-training run: seeded init, then [`train_loop`].
pub fn pretrain(
    cfg: &TrainConfig,
    corpus: &TrainCorpus,
    vocab: &Vocabulary,
) -> Result<(TrainerState, Vec<StepLog>)> {
    let mut state = TrainerState::init(cfg)?;
    let log = train_loop(&mut state, cfg, corpus, vocab)?;
    Ok((state, log))
}

/// Continued pre-training on a task corpus, initialized from a checkpointed
/// state. With `reset_step` the step counter (and so the schedule) restarts;
/// otherwise training continues until `cfg.steps`, which makes a resumed run
/// identical to an unbroken one.
pub fn continue_pretrain(
    mut state: TrainerState,
    cfg: &TrainConfig,
    corpus: &TrainCorpus,
    vocab: &Vocabulary,
) -> Result<(TrainerState, Vec<StepLog>)> {
    if state.model.config != cfg.encoder {
        return Err(Error::config(
            "continue_pretrain: checkpoint encoder config does not match the requested config",
        ));
    }
    let log = train_loop(&mut state, cfg, corpus, vocab)?;
    Ok((state, log))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerMeta {
    step: u64,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
}

/// Write the full trainer state (weights, optimizer, RNG, step counter,
/// vocabulary) as one archive.
pub fn save_checkpoint<P: AsRef<std::path::Path>>(
    path: P,
    state: &TrainerState,
    vocab: &Vocabulary,
) -> Result<()> {
    Ok(checkpoint_archive(state, vocab)?.write(path)?)
}

/// Build the archive for a trainer state (exposed for tests and the CLI).
pub fn checkpoint_archive(state: &TrainerState, vocab: &Vocabulary) -> Result<Archive> {
    let mut a = Archive::new();
    a.push_json("meta/encoder_config", &state.model.config)?;
    a.push_json(
        "meta/trainer",
        &TrainerMeta {
            step: state.step,
            adam_step: state.adam.step,
            adam_beta1: state.adam.beta1 as f64,
            adam_beta2: state.adam.beta2 as f64,
            adam_epsilon: state.adam.epsilon as f64,
        },
    )?;
    let mut rng_bytes = Vec::with_capacity(48);
    rng_bytes.extend_from_slice(&state.rng.get_seed());
    rng_bytes.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    a.push_bytes("meta/rng", rng_bytes);
    a.push_bytes("meta/vocab", vocab.word_list().join("\n").into_bytes());
    for (name, t) in state.model.visit() {
        a.push_tensor(&name, t);
    }
    for (i, (name, _)) in state.model.visit().into_iter().enumerate() {
        a.push_tensor(&format!("adam/m/{name}"), &state.adam.m[i]);
        a.push_tensor(&format!("adam/v/{name}"), &state.adam.v[i]);
    }
    Ok(a)
}

/// Load a trainer state and vocabulary from an archive file, validating the
/// declared config against every tensor's dims.
pub fn load_checkpoint<P: AsRef<std::path::Path>>(path: P) -> Result<(TrainerState, Vocabulary)> {
    let a = Archive::read(path)?;
    trainer_state_from_archive(&a)
}

pub fn trainer_state_from_archive(a: &Archive) -> Result<(TrainerState, Vocabulary)> {
    let config: EncoderConfig = a.json("meta/encoder_config")?;
    config
        .validate()
        .map_err(|e| Error::checkpoint(format!("declared config invalid: {e}")))?;
    let meta: TrainerMeta = a.json("meta/trainer")?;
    let vocab_blob = a.bytes("meta/vocab")?;
    let words = String::from_utf8(vocab_blob.to_vec())
        .map_err(|_| Error::checkpoint("vocab record is not UTF-8"))?;
    let vocab = if words.is_empty() {
        Vocabulary::from_words(Vec::<String>::new())?
    } else {
        Vocabulary::from_words(words.split('\n').map(|s| s.to_string()))?
    };
    if vocab.size() != config.vocab_size {
        return Err(Error::checkpoint(format!(
            "config mismatch: vocab record has {} types, config declares {}",
            vocab.size(),
            config.vocab_size
        )));
    }

    let mut model = EncoderModel::init(&config, 0)?;
    for (name, t) in model.visit_mut() {
        let stored = a.tensor(&name)?;
        if stored.dims() != t.dims() {
            return Err(Error::checkpoint(format!(
                "config mismatch: {name} has dims {:?}, config implies {:?}",
                stored.dims(),
                t.dims()
            )));
        }
        *t = stored;
    }

    let names: Vec<String> = model.visit().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(
        &model.visit().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
    );
    adam.step = meta.adam_step;
    adam.beta1 = meta.adam_beta1 as f32;
    adam.beta2 = meta.adam_beta2 as f32;
    adam.epsilon = meta.adam_epsilon as f32;
    for (i, name) in names.iter().enumerate() {
        let m = a.tensor(&format!("adam/m/{name}"))?;
        let v = a.tensor(&format!("adam/v/{name}"))?;
        if m.dims() != adam.m[i].dims() || v.dims() != adam.v[i].dims() {
            return Err(Error::checkpoint(format!("config mismatch: optimizer state for {name}")));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }

    let rng_bytes = a.bytes("meta/rng")?;
    if rng_bytes.len() != 48 {
        return Err(Error::checkpoint("rng record must be 48 bytes"));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&rng_bytes[..32]);
    let mut word_pos = [0u8; 16];
    word_pos.copy_from_slice(&rng_bytes[32..]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(word_pos));

    Ok((TrainerState { model, adam, rng, step: meta.step }, vocab))
}
