//! Domain phrase pool: quality-scored multi-word phrases, occurrence
//! detection and quality-weighted phrase sampling for phrase-mode masking.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Vocab, UNK};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_SCORE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<u32>,
    pub text: String,
    pub score: f64,
}

/// Phrases are kept in lexicographic order of their text; a phrase's index in
/// that order is its id in the phrase-prediction head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhrasePool {
    phrases: Vec<Phrase>,
    index: HashMap<Vec<u32>, usize>,
    max_phrase_len: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolLoadStats {
    pub below_threshold: usize,
    pub with_unknown: usize,
    pub too_short: usize,
    pub duplicates: usize,
}

impl PhrasePool {
    /// Builds a pool from `(text, score)` entries. Entries scoring below
    /// `min_score`, shorter than two tokens, or containing out-of-vocabulary
    /// words are dropped; duplicates keep their maximum score.
    pub fn from_entries<'a>(
        entries: impl IntoIterator<Item = (&'a str, f64)>,
        vocab: &Vocab,
        min_score: f64,
    ) -> (Self, PoolLoadStats) {
        let mut stats = PoolLoadStats::default();
        let mut best: BTreeMap<String, (Vec<u32>, f64)> = BTreeMap::new();
        for (text, score) in entries {
            if score < min_score {
                stats.below_threshold += 1;
                continue;
            }
            let tokens = vocab.encode(text);
            if tokens.contains(&UNK) {
                stats.with_unknown += 1;
                continue;
            }
            if tokens.len() < 2 {
                stats.too_short += 1;
                continue;
            }
            let key = vocab.decode(&tokens);
            match best.get_mut(&key) {
                Some(slot) => {
                    stats.duplicates += 1;
                    slot.1 = slot.1.max(score);
                }
                None => {
                    best.insert(key, (tokens, score));
                }
            }
        }
        let phrases: Vec<Phrase> = best
            .into_iter()
            .map(|(text, (tokens, score))| Phrase {
                tokens,
                text,
                score,
            })
            .collect();
        (Self::from_phrases(phrases), stats)
    }

    /// Pool from already-encoded phrases, kept in the given order.
    pub fn from_phrases(phrases: Vec<Phrase>) -> Self {
        let index = phrases
            .iter()
            .enumerate()
            .map(|(i, p)| (p.tokens.clone(), i))
            .collect();
        let max_phrase_len = phrases.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
        Self {
            phrases,
            index,
            max_phrase_len,
        }
    }

    /// Reads a `phrase<TAB>score` file.
    pub fn load(path: &Path, vocab: &Vocab, min_score: f64) -> Result<(Self, PoolLoadStats)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (phrase, score) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `phrase<TAB>score`".into()))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("non-numeric score `{}`", score.trim())))?;
            if !score.is_finite() {
                return Err(parse_err(format!("non-finite score `{score}`")));
            }
            entries.push((phrase.to_string(), score));
        }
        Ok(Self::from_entries(
            entries.iter().map(|(p, s)| (p.as_str(), *s)),
            vocab,
            min_score,
        ))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_phrase_len
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn get(&self, id: usize) -> &Phrase {
        &self.phrases[id]
    }

    pub fn lookup(&self, tokens: &[u32]) -> Option<usize> {
        self.index.get(tokens).copied()
    }

    /// Greedy left-to-right longest-match scan. Matches never overlap.
    pub fn detect(&self, tokens: &[u32]) -> Vec<PhraseMatch> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_phrase_len.min(tokens.len() - i);
            let hit = (2..=longest)
                .rev()
                .find_map(|len| self.lookup(&tokens[i..i + len]).map(|id| (len, id)));
            match hit {
                Some((len, id)) => {
                    out.push(PhraseMatch {
                        start: i,
                        end: i + len,
                        phrase_id: id,
                        score: self.phrases[id].score,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

pub fn detect(doc: &Document, pool: &PhrasePool) -> Vec<PhraseMatch> {
    pool.detect(&doc.tokens)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhraseMatch {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub phrase_id: usize,
    pub score: f64,
}

impl PhraseMatch {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// `ceil(ratio * len)` that does not round exact products up because of
/// binary representation error (0.15 * 20 is 3.0000000000000004 in f64).
pub fn token_budget(ratio: f64, len: usize) -> usize {
    let x = ratio * len as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Result of phrase sampling for one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhraseSample {
    /// Union of the sampled phrases' positions, ascending.
    pub positions: Vec<usize>,
    /// One group of positions per sampled phrase, in sampling order.
    pub groups: Vec<Vec<usize>>,
    /// Index into the input `matches` for each group.
    pub match_indices: Vec<usize>,
}

impl PhraseSample {
    pub fn covered(&self) -> usize {
        self.positions.len()
    }
}

/// Softmax weights of quality scores.
pub fn score_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Draws phrases without replacement, each draw weighted by the softmax of
/// the remaining phrases' quality scores, until the covered token count
/// reaches `ceil(budget_ratio * seq_len)` or the matches run out.
pub fn sample_phrase_tokens<R: Rng + ?Sized>(
    seq_len: usize,
    matches: &[PhraseMatch],
    budget_ratio: f64,
    rng: &mut R,
) -> PhraseSample {
    let budget = token_budget(budget_ratio, seq_len);
    let mut remaining: Vec<usize> = (0..matches.len()).collect();
    let mut sample = PhraseSample::default();
    while sample.covered() < budget && !remaining.is_empty() {
        let scores: Vec<f64> = remaining.iter().map(|&i| matches[i].score).collect();
        let pick = if remaining.len() == 1 {
            0
        } else {
            let weights = score_softmax(&scores);
            WeightedIndex::new(&weights)
                .expect("softmax weights are positive")
                .sample(rng)
        };
        let idx = remaining.remove(pick);
        let group: Vec<usize> = matches[idx].positions().collect();
        sample.positions.extend(&group);
        sample.groups.push(group);
        sample.match_indices.push(idx);
    }
    sample.positions.sort_unstable();
    sample
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn vocab() -> Vocab {
        Vocab::from_lines(["great battery life today saver screen thing"], 1).unwrap()
    }

    #[test]
    fn load_filters_scores_unknowns_and_duplicates() {
        let v = vocab();
        let (pool, stats) = PhrasePool::from_entries(
            [("battery life", 0.9), ("thing", 0.3)],
            &v,
            DEFAULT_MIN_SCORE,
        );
        assert_eq!(pool.len(), 1);
        assert_eq!(stats.below_threshold, 1);

        let (pool, stats) = PhrasePool::from_entries(
            [
                ("battery life", 0.9),
                ("quantum flux", 0.8),
                ("battery life", 0.95),
            ],
            &v,
            DEFAULT_MIN_SCORE,
        );
        assert_eq!(pool.len(), 1);
        assert_eq!(stats.with_unknown, 1);
        assert_eq!(pool.get(0).score, 0.95);
        assert!(pool.phrases().iter().all(|p| p.score >= 0.5));
    }

    #[test]
    fn load_reports_bad_score_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "battery life\t0.9\nscreen saver\thigh").unwrap();
        match PhrasePool::load(f.path(), &vocab(), 0.5) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detect_examples() {
        let v = vocab();
        let doc = v.encode("great battery life today");
        let (pool, _) = PhrasePool::from_entries([("battery life", 0.9)], &v, 0.5);
        let m = pool.detect(&doc);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end), (1, 3));

        let (pool, _) = PhrasePool::from_entries(
            [("battery life", 0.9), ("battery life saver", 0.7)],
            &v,
            0.5,
        );
        let m = pool.detect(&v.encode("great battery life saver today"));
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end), (1, 4));

        assert!(pool.detect(&v.encode("great screen today")).is_empty());
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(token_budget(0.15, 20), 3);
        assert_eq!(token_budget(0.15, 10), 2);
        assert_eq!(token_budget(0.15, 1), 1);
        assert_eq!(token_budget(0.15, 0), 0);
        for len in 0..=1000 {
            assert_eq!(
                token_budget(0.15, len),
                (15 * len).div_ceil(100),
                "len {len}"
            );
        }
    }

    #[test]
    fn single_match_covers_small_budget() {
        let m = [PhraseMatch {
            start: 4,
            end: 6,
            phrase_id: 0,
            score: 0.8,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_phrase_tokens(10, &m, 0.15, &mut rng);
        assert_eq!(s.positions, vec![4, 5]);
        assert_eq!(s.groups, vec![vec![4, 5]]);
    }

    #[test]
    fn empty_matches_give_empty_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_phrase_tokens(10, &[], 0.15, &mut rng),
            PhraseSample::default()
        );
    }

    #[test]
    fn equal_scores_are_drawn_first_equally_often() {
        let m = [
            PhraseMatch {
                start: 0,
                end: 2,
                phrase_id: 0,
                score: 0.7,
            },
            PhraseMatch {
                start: 5,
                end: 7,
                phrase_id: 1,
                score: 0.7,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let first_is_zero = (0..trials)
            .filter(|_| sample_phrase_tokens(20, &m, 0.15, &mut rng).match_indices[0] == 0)
            .count();
        let freq = first_is_zero as f64 / trials as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn analytic_softmax_weights() {
        let w = score_softmax(&[0.0, 3f64.ln()]);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }
}
