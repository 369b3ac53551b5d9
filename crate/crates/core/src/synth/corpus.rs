//! Text sources for line synthesis.

use crate::charset::CharsetTable;
use crate::error::{Error, Result};
use rand::Rng;
use std::path::Path;

/// Where sampled text comes from: contiguous in-charset runs of a corpus
/// file, or uniform draws from the charset itself.
pub enum Corpus {
    Lines { runs: Vec<Vec<char>>, missing: Vec<char> },
    Uniform,
}

impl Corpus {
    /// Split corpus lines into maximal runs of in-charset characters.
    pub fn from_text(text: &str, charset: &CharsetTable) -> Self {
        let mut runs = Vec::new();
        let mut missing = Vec::new();
        for line in text.lines() {
            let mut run = Vec::new();
            for ch in line.chars() {
                if charset.contains(ch) {
                    run.push(ch);
                } else {
                    if !ch.is_whitespace() && !missing.contains(&ch) {
                        missing.push(ch);
                    }
                    if !run.is_empty() {
                        runs.push(std::mem::take(&mut run));
                    }
                }
            }
            if !run.is_empty() {
                runs.push(run);
            }
        }
        Corpus::Lines { runs, missing }
    }

    pub fn load(path: &Path, charset: &CharsetTable) -> Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?, charset))
    }
}

/// Draw a text of length `K`, `K` uniform over `k_range` (clamped to the
/// longest available run for line corpora).
pub fn sample_text(
    corpus: &Corpus,
    k_range: [usize; 2],
    charset: &CharsetTable,
    rng: &mut impl Rng,
) -> Result<String> {
    let [lo, hi] = k_range;
    assert!(lo >= 1 && lo <= hi, "bad k_range {k_range:?}");
    match corpus {
        Corpus::Uniform => {
            let k = rng.gen_range(lo..=hi);
            let m = charset.len() as u32;
            Ok((0..k)
                .map(|_| charset.char_at(rng.gen_range(0..m)).expect("in range"))
                .collect())
        }
        Corpus::Lines { runs, missing } => {
            let max_run = runs.iter().map(|r| r.len()).max().unwrap_or(0);
            if max_run < lo {
                return Err(Error::CorpusExhausted { missing: missing.clone() });
            }
            let k = rng.gen_range(lo..=hi.min(max_run));
            let eligible: Vec<&Vec<char>> = runs.iter().filter(|r| r.len() >= k).collect();
            let run = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=run.len() - k);
            Ok(run[start..start + k].iter().collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn lengths_stay_in_range() {
        let charset = CharsetTable::digits();
        let corpus = Corpus::Uniform;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..500 {
            let t = sample_text(&corpus, [2, 16], &charset, &mut rng).unwrap();
            let k = t.chars().count();
            assert!((2..=16).contains(&k));
        }
    }

    #[test]
    fn single_char_corpus_repeats() {
        let charset = CharsetTable::new(vec!['中', '文']).unwrap();
        let corpus = Corpus::from_text("中中中中中中", &charset);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let t = sample_text(&corpus, [3, 3], &charset, &mut rng).unwrap();
        assert_eq!(t, "中中中");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let charset = CharsetTable::ascii();
        let corpus = Corpus::from_text("the quick brown fox\njumps over 42 dogs", &charset);
        let a = sample_text(&corpus, [2, 8], &charset, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let b = sample_text(&corpus, [2, 8], &charset, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhausted_corpus_names_missing_chars() {
        let charset = CharsetTable::digits();
        let corpus = Corpus::from_text("ab ab ab", &charset);
        let err =
            sample_text(&corpus, [2, 4], &charset, &mut ChaCha12Rng::seed_from_u64(0)).unwrap_err();
        match err {
            Error::CorpusExhausted { missing } => {
                assert!(missing.contains(&'a') && missing.contains(&'b'));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
