//! Vocabulary construction, corpus ingestion, monolingual perturbation,
//! masking, and pre-training batch assembly.

mod batch;
mod ops;
mod synth;
mod vocab;

pub use batch::{
    concat_pair, concat_sentence, load_mono, load_parallel, make_pretrain_batch, BatchSpec,
    PairExample, PairSource, PretrainBatch, SamplingSource, SentencePair, SequentialSource,
};
pub use ops::{apply_masking, apply_masking_at, perturb, Masking};
pub use synth::{synth_bilingual, MappingKind, SynthCorpus};
pub use vocab::{
    is_special, TokenId, Vocabulary, BOS, CLS, EOS, MASK, N_SPECIALS, PAD, SEP, SPECIAL_TOKENS,
    UNK,
};
