//! Word-mode and phrase-mode masking with the 80/10/10 perturbation scheme.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MASK, NUM_SPECIAL, PAD};
use crate::phrase::{sample_phrase_tokens, token_budget, PhrasePool};

pub const MASK_RATIO: f64 = 0.15;
const P_MASK: f64 = 0.8;
const P_RANDOM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Word,
    Phrase,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Word => "word",
            Mode::Phrase => "phrase",
        })
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub gold_ids: Vec<u32>,
    /// Ascending.
    pub masked: Vec<usize>,
    /// Parallel to `masked`.
    pub perturbations: Vec<Perturbation>,
    pub groups: Vec<Vec<usize>>,
    /// Phrase-pool id for each group.
    pub phrase_labels: Vec<usize>,
}

/// Number of positions masked in word mode.
pub fn word_budget(len: usize) -> usize {
    token_budget(MASK_RATIO, len).max(1).min(len)
}

fn perturb<R: Rng + ?Sized>(
    tokens: &[u32],
    masked: Vec<usize>,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedExample {
    let mut input = tokens.to_vec();
    let mut kinds = Vec::with_capacity(masked.len());
    for &p in &masked {
        let u: f64 = rng.random();
        let kind = if u < P_MASK {
            input[p] = MASK;
            Perturbation::Mask
        } else if u < P_MASK + P_RANDOM {
            input[p] = if vocab_size > NUM_SPECIAL as usize {
                rng.random_range(NUM_SPECIAL..vocab_size as u32)
            } else {
                MASK
            };
            Perturbation::Random
        } else {
            Perturbation::Keep
        };
        kinds.push(kind);
    }
    MaskedExample {
        input_ids: input,
        gold_ids: tokens.to_vec(),
        masked,
        perturbations: kinds,
        groups: Vec::new(),
        phrase_labels: Vec::new(),
    }
}

fn sample_positions<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(candidates.len());
    index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Masks `max(1, ceil(0.15 * len))` uniformly chosen positions.
pub fn mask_words<R: Rng + ?Sized>(
    doc: &Document,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedExample {
    let len = doc.len();
    let all: Vec<usize> = (0..len).collect();
    let mut masked = sample_positions(&all, word_budget(len), rng);
    masked.sort_unstable();
    perturb(&doc.tokens, masked, vocab_size, rng)
}

/// Masks whole pool phrases sampled by quality; any shortfall against the
/// word-mode budget is filled with single positions that carry no group.
pub fn mask_phrases<R: Rng + ?Sized>(
    doc: &Document,
    pool: &PhrasePool,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedExample {
    let matches = pool.detect(&doc.tokens);
    if matches.is_empty() {
        return mask_words(doc, vocab_size, rng);
    }
    let len = doc.len();
    let sample = sample_phrase_tokens(len, &matches, MASK_RATIO, rng);
    let budget = word_budget(len);
    let mut masked = sample.positions.clone();
    if masked.len() < budget {
        let mut taken = vec![false; len];
        masked.iter().for_each(|&p| taken[p] = true);
        let free: Vec<usize> = (0..len).filter(|&p| !taken[p]).collect();
        masked.extend(sample_positions(&free, budget - masked.len(), rng));
        masked.sort_unstable();
    }
    let mut ex = perturb(&doc.tokens, masked, vocab_size, rng);
    ex.phrase_labels = sample
        .match_indices
        .iter()
        .map(|&i| matches[i].phrase_id)
        .collect();
    ex.groups = sample.groups;
    ex
}

pub fn mask_example<R: Rng + ?Sized>(
    doc: &Document,
    mode: Mode,
    pool: &PhrasePool,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedExample {
    match mode {
        Mode::Word => mask_words(doc, vocab_size, rng),
        Mode::Phrase => mask_phrases(doc, pool, vocab_size, rng),
    }
}

/// Padded batch of masked examples. All index sets are per-example
/// positions in `[0, lengths[b])`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub mode: Mode,
    pub input_ids: Vec<Vec<u32>>,
    pub gold_ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub masked_index_sets: Vec<Vec<usize>>,
    pub phrase_groups: Vec<Vec<Vec<usize>>>,
    pub phrase_labels: Vec<Vec<usize>>,
}

impl MaskedBatch {
    /// Pads every example with PAD to the longest one.
    pub fn collate(mode: Mode, examples: Vec<MaskedExample>) -> Self {
        let width = examples
            .iter()
            .map(|e| e.input_ids.len())
            .max()
            .unwrap_or(0);
        let mut batch = Self {
            mode,
            input_ids: Vec::with_capacity(examples.len()),
            gold_ids: Vec::with_capacity(examples.len()),
            lengths: Vec::with_capacity(examples.len()),
            masked_index_sets: Vec::with_capacity(examples.len()),
            phrase_groups: Vec::with_capacity(examples.len()),
            phrase_labels: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let len = ex.input_ids.len();
            let mut input = ex.input_ids;
            input.resize(width, PAD);
            let mut gold = ex.gold_ids;
            gold.resize(width, PAD);
            batch.input_ids.push(input);
            batch.gold_ids.push(gold);
            batch.lengths.push(len);
            batch.masked_index_sets.push(ex.masked);
            batch.phrase_groups.push(ex.groups);
            batch.phrase_labels.push(ex.phrase_labels);
        }
        batch
    }

    pub fn batch_size(&self) -> usize {
        self.input_ids.len()
    }

    pub fn width(&self) -> usize {
        self.input_ids.first().map_or(0, Vec::len)
    }

    pub fn pad_mask(&self) -> Vec<Vec<bool>> {
        pad_mask(&self.lengths, self.width())
    }

    pub fn num_masked(&self) -> usize {
        self.masked_index_sets.iter().map(Vec::len).sum()
    }

    pub fn num_groups(&self) -> usize {
        self.phrase_groups.iter().map(Vec::len).sum()
    }
}

/// `true` marks a real (non-PAD) position.
pub fn pad_mask(lengths: &[usize], width: usize) -> Vec<Vec<bool>> {
    lengths
        .iter()
        .map(|&l| (0..width).map(|p| p < l).collect())
        .collect()
}

/// Builds a masked batch for `docs` in the given mode.
pub fn mask_batch<R: Rng + ?Sized>(
    docs: &[&Document],
    mode: Mode,
    pool: &PhrasePool,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedBatch {
    let examples = docs
        .iter()
        .map(|d| mask_example(d, mode, pool, vocab_size, rng))
        .collect();
    MaskedBatch::collate(mode, examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocab, PhrasePool) {
        let v = Vocab::from_lines(["a b c d e f g h battery life screen protector"], 1).unwrap();
        let (pool, _) = PhrasePool::from_entries([("battery life", 0.9)], &v, 0.5);
        (v, pool)
    }

    #[test]
    fn word_mode_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let doc = Document::new((4..24).collect());
        let ex = mask_words(&doc, 30, &mut rng);
        assert_eq!(ex.masked.len(), 3);
        let doc = Document::new(vec![5]);
        assert_eq!(mask_words(&doc, 30, &mut rng).masked, vec![0]);
    }

    #[test]
    fn unmasked_positions_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let doc = Document::new((4..44).collect());
        for _ in 0..50 {
            let ex = mask_words(&doc, 50, &mut rng);
            for p in 0..doc.len() {
                if !ex.masked.contains(&p) {
                    assert_eq!(ex.input_ids[p], ex.gold_ids[p]);
                }
            }
        }
    }

    #[test]
    fn phrase_mode_single_phrase_meets_budget() {
        let (v, pool) = setup();
        let doc = Document::new(v.encode("a b c battery life d e f g h"));
        assert_eq!(doc.len(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ex = mask_phrases(&doc, &pool, v.len(), &mut rng);
        assert_eq!(ex.masked, vec![3, 4]);
        assert_eq!(ex.groups, vec![vec![3, 4]]);
        assert_eq!(ex.phrase_labels, vec![0]);
    }

    #[test]
    fn phrase_mode_without_matches_is_word_mode() {
        let (v, pool) = setup();
        let doc = Document::new(v.encode("a b c d e f g h screen protector a b"));
        let a = mask_phrases(&doc, &pool, v.len(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = mask_words(&doc, v.len(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn phrase_shortfall_is_filled() {
        let (v, pool) = setup();
        // 20 tokens: budget 3, the only phrase covers 2, one fill position
        let doc = Document::new(v.encode("a b c d e f g h battery life a b c d e f g h a b"));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = mask_phrases(&doc, &pool, v.len(), &mut rng);
        assert_eq!(ex.masked.len(), 3);
        assert_eq!(ex.groups, vec![vec![8, 9]]);
    }

    #[test]
    fn collate_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d1 = Document::new(vec![4, 5, 6]);
        let d2 = Document::new(vec![7]);
        let (_, pool) = setup();
        let b = mask_batch(&[&d1, &d2], Mode::Word, &pool, 10, &mut rng);
        assert_eq!(b.width(), 3);
        assert_eq!(b.gold_ids[1], vec![7, PAD, PAD]);
        assert_eq!(b.pad_mask()[1], vec![true, false, false]);
        assert!(b.masked_index_sets[1].iter().all(|&p| p < 1));
    }
}
