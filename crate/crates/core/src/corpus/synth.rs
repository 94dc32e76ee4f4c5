//! Synthetic bilingual corpora: a controllable stand-in for real parallel
//! text, with a known token-level alignment to test against.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::vocab::N_SPECIALS;
use crate::error::{Error, Result};

/// How "language B" is derived from "language A".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingKind {
    /// Both sides use the same inventory and `y = x`.
    Identity,
    /// Fixed bijective token mapping `a_k -> b_k`, order preserved.
    Bijective,
    /// Bijective token mapping plus sequence reversal.
    BijectiveReverse,
}

impl MappingKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MappingKind::Identity),
            "bijective-map" | "map" => Ok(MappingKind::Bijective),
            "map+reverse" => Ok(MappingKind::BijectiveReverse),
            other => Err(Error::config(format!(
                "unknown mapping kind {other:?} (expected identity, bijective-map, map+reverse)"
            ))),
        }
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MappingKind::Identity => "identity",
            MappingKind::Bijective => "bijective-map",
            MappingKind::BijectiveReverse => "map+reverse",
        };
        f.write_str(s)
    }
}

/// A generated parallel corpus: `lines[i] = (source sentence, target sentence)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub lines: Vec<(String, String)>,
    pub mapping: MappingKind,
}

/// Generate `n_pairs` parallel sentence pairs over roughly `vocab_size`
/// token types (specials included in the budget; bijective mappings split
/// the remainder evenly, so the realized inventory may be one type smaller).
///
/// "Language A" sentences are uniform random sequences of 4..=8 word types;
/// "language B" applies the mapping. Deterministic given `seed`.
pub fn synth_bilingual(
    vocab_size: usize,
    n_pairs: usize,
    mapping: MappingKind,
    seed: u64,
) -> Result<SynthCorpus> {
    if vocab_size <= N_SPECIALS + 1 {
        return Err(Error::config(format!(
            "synth_bilingual: vocab_size {vocab_size} leaves no word types"
        )));
    }
    let word_budget = vocab_size - N_SPECIALS;
    let (side_a, side_b): (Vec<String>, Vec<String>) = match mapping {
        MappingKind::Identity => {
            let words: Vec<String> = (0..word_budget).map(|i| format!("w{i:03}")).collect();
            (words.clone(), words)
        }
        MappingKind::Bijective | MappingKind::BijectiveReverse => {
            let per_side = word_budget / 2;
            if per_side == 0 {
                return Err(Error::config(
                    "synth_bilingual: vocab too small to split into two languages",
                ));
            }
            let a = (0..per_side).map(|i| format!("a{i:03}")).collect();
            let b = (0..per_side).map(|i| format!("b{i:03}")).collect();
            (a, b)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(4..=8usize);
        let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..side_a.len())).collect();
        let src: Vec<&str> = idx.iter().map(|&i| side_a[i].as_str()).collect();
        let mut tgt: Vec<&str> = idx.iter().map(|&i| side_b[i].as_str()).collect();
        if mapping == MappingKind::BijectiveReverse {
            tgt.reverse();
        }
        lines.push((src.join(" "), tgt.join(" ")));
    }
    Ok(SynthCorpus { lines, mapping })
}

impl SynthCorpus {
    /// Write the standard parallel format: one pair per line, tab-separated.
    pub fn write_parallel<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (src, tgt) in &self.lines {
            writeln!(f, "{src}\t{tgt}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    /// Write one side as a monolingual corpus: one sentence per line.
    pub fn write_mono<P: AsRef<Path>>(&self, path: P, target_side: bool) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (src, tgt) in &self.lines {
            let line = if target_side { tgt } else { src };
            writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mapping_copies() {
        let c = synth_bilingual(20, 10, MappingKind::Identity, 5).unwrap();
        for (src, tgt) in &c.lines {
            assert_eq!(src, tgt);
        }
    }

    #[test]
    fn map_reverse_construction() {
        let c = synth_bilingual(30, 50, MappingKind::BijectiveReverse, 11).unwrap();
        for (src, tgt) in &c.lines {
            let s: Vec<&str> = src.split_whitespace().collect();
            let t: Vec<&str> = tgt.split_whitespace().collect();
            assert_eq!(s.len(), t.len());
            for (i, tok) in s.iter().enumerate() {
                // a_k maps to b_k, order reversed
                let expect = tok.replace('a', "b");
                assert_eq!(t[t.len() - 1 - i], expect);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_bilingual(50, 100, MappingKind::Bijective, 99).unwrap();
        let b = synth_bilingual(50, 100, MappingKind::Bijective, 99).unwrap();
        assert_eq!(a, b);
        let c = synth_bilingual(50, 100, MappingKind::Bijective, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vocab_too_small_is_error() {
        assert!(synth_bilingual(N_SPECIALS, 5, MappingKind::Identity, 0).is_err());
        assert!(synth_bilingual(N_SPECIALS + 1, 5, MappingKind::Bijective, 0).is_err());
    }
}
