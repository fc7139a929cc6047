//! Adaptive hybrid masking: word and phrase losses plus the scheduler that
//! picks a mode each iteration from how fast each loss is falling.

use serde::{Deserialize, Serialize};

use crate::encoder::{phrase_logits, token_logits_at, Bound, Hidden};
use crate::error::{Error, Result};
use crate::masking::{MaskedBatch, Mode};
use crate::tensor::{Graph, Var};

const DEGENERATE: f64 = 1e-12;

fn masked_rows(batch: &MaskedBatch, hidden: &Hidden) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(batch.num_masked());
    let mut gold = Vec::with_capacity(batch.num_masked());
    for (b, set) in batch.masked_index_sets.iter().enumerate() {
        for &p in set {
            rows.push(hidden.row(b, p));
            gold.push(batch.gold_ids[b][p] as usize);
        }
    }
    (rows, gold)
}

fn token_nll(g: &mut Graph, batch: &MaskedBatch, hidden: &Hidden, params: &Bound) -> Result<Var> {
    let (rows, gold) = masked_rows(batch, hidden);
    if rows.is_empty() {
        return Err(Error::contract("batch has no masked positions"));
    }
    let logits = token_logits_at(g, hidden, params, &rows)?;
    g.cross_entropy(logits, &gold)
}

/// Mean NLL of the gold tokens at masked positions.
pub fn word_loss(
    g: &mut Graph,
    batch: &MaskedBatch,
    hidden: &Hidden,
    params: &Bound,
) -> Result<Var> {
    if batch.mode != Mode::Word {
        return Err(Error::contract("word_loss on a phrase-mode batch"));
    }
    token_nll(g, batch, hidden, params)
}

/// Phrase-mode loss and its two parts.
#[derive(Clone, Copy, Debug)]
pub struct PhraseLoss {
    pub total: Var,
    pub token: Var,
    /// Absent when no phrase was masked and only fill positions were used.
    pub phrase: Option<Var>,
}

/// Token NLL over every masked position plus the mean phrase-level NLL of
/// each masked phrase predicted from its pooled hidden state.
pub fn phrase_loss(
    g: &mut Graph,
    batch: &MaskedBatch,
    hidden: &Hidden,
    params: &Bound,
) -> Result<PhraseLoss> {
    if batch.mode != Mode::Phrase {
        return Err(Error::contract("phrase_loss on a word-mode batch"));
    }
    let token = token_nll(g, batch, hidden, params)?;
    let mut groups = Vec::new();
    let mut labels = Vec::new();
    for (b, (gs, ls)) in batch
        .phrase_groups
        .iter()
        .zip(&batch.phrase_labels)
        .enumerate()
    {
        if gs.len() != ls.len() {
            return Err(Error::contract(format!(
                "example {b} has {} phrase groups but {} labels",
                gs.len(),
                ls.len()
            )));
        }
        for (group, &label) in gs.iter().zip(ls) {
            groups.push(group.iter().map(|&p| hidden.row(b, p)).collect::<Vec<_>>());
            labels.push(label);
        }
    }
    if groups.is_empty() {
        return Ok(PhraseLoss {
            total: token,
            token,
            phrase: None,
        });
    }
    let logits = phrase_logits(g, hidden, params, &groups)?;
    let phrase = g.cross_entropy(logits, &labels)?;
    let total = g.add(token, phrase)?;
    Ok(PhraseLoss {
        total,
        token,
        phrase: Some(phrase),
    })
}

/// Relative speed of loss reduction: `max(prev - curr, 0) / (first - curr)`,
/// or 0 when the loss has not fallen below its first value.
pub fn fitting_progress(first: f64, prev: f64, curr: f64) -> f64 {
    let denom = first - curr;
    if denom <= DEGENERATE {
        return 0.0;
    }
    (prev - curr).max(0.0) / denom
}

/// Mixing weight from the two progress rates. Keeps `previous` when neither
/// mode made progress.
pub fn alpha_from_progress(eta_word: f64, eta_phrase: f64, previous: f64) -> f64 {
    match (eta_word > 0.0, eta_phrase > 0.0) {
        (false, false) => previous,
        (true, false) => 1.0,
        _ => (eta_word / eta_phrase).tanh(),
    }
}

/// Word mode iff `alpha > 0.5`.
pub fn select_mode(alpha: f64) -> Mode {
    if alpha > 0.5 {
        Mode::Word
    } else {
        Mode::Phrase
    }
}

/// Loss history of one mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// First loss after warm-up.
    pub first: Option<f64>,
    pub prev: Option<f64>,
    pub curr: Option<f64>,
    /// Running average of raw losses.
    pub ema: Option<f64>,
    pub runs: u64,
    pub post_warmup_runs: u64,
    /// Scheduler iteration of the latest run.
    pub last_iter: u64,
}

impl LossHistory {
    fn record(&mut self, raw: f64, decay: Option<f64>, iter: u64, post_warmup: bool) {
        let value = match (decay, self.ema) {
            (Some(d), Some(e)) => d * e + (1.0 - d) * raw,
            _ => raw,
        };
        self.ema = Some(value);
        self.prev = Some(self.curr.unwrap_or(value));
        self.curr = Some(value);
        if post_warmup {
            if self.first.is_none() {
                self.first = Some(value);
            }
            self.post_warmup_runs += 1;
        }
        self.runs += 1;
        self.last_iter = iter;
    }

    /// Current loss is above the first post-warm-up loss.
    pub fn regressed(&self) -> bool {
        matches!((self.first, self.curr), (Some(f), Some(c)) if c > f)
    }

    pub fn progress(&self) -> f64 {
        match (self.first, self.prev, self.curr) {
            (Some(f), Some(p), Some(c)) => fitting_progress(f, p, c),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub word: LossHistory,
    pub phrase: LossHistory,
    pub alpha: f64,
    /// Completed iterations.
    pub iter: u64,
    pub warm_iters: u64,
    pub warm_alpha: f64,
    /// Every this many warm-up iterations a phrase step is forced; 0 disables.
    pub warm_phrase_every: u64,
    /// EMA decay applied to losses before computing progress; `None` uses raw losses.
    pub smoothing: Option<f64>,
    /// After warm-up, a mode left idle this many iterations runs once; 0 disables.
    pub max_idle: u64,
    /// After warm-up, a mode whose loss climbed above its first value is run.
    pub regress_guard: bool,
}

impl Default for SchedulerState {
    fn default() -> Self {
        Self::new(1000, 0.6)
    }
}

impl SchedulerState {
    pub fn new(warm_iters: u64, warm_alpha: f64) -> Self {
        Self {
            word: LossHistory::default(),
            phrase: LossHistory::default(),
            alpha: warm_alpha,
            iter: 0,
            warm_iters,
            warm_alpha,
            warm_phrase_every: 5,
            smoothing: Some(0.9),
            max_idle: 10,
            regress_guard: true,
        }
    }

    fn in_warmup(&self, iter: u64) -> bool {
        iter <= self.warm_iters
    }

    /// Mode for the upcoming iteration (1-based `iter + 1`).
    pub fn next_mode(&self) -> Mode {
        let t = self.iter + 1;
        if self.in_warmup(t) {
            if self.warm_phrase_every > 0 && t.is_multiple_of(self.warm_phrase_every) {
                return Mode::Phrase;
            }
            return select_mode(self.warm_alpha);
        }
        // progress needs two post-warm-up losses per mode
        for mode in [Mode::Word, Mode::Phrase] {
            if self.history(mode).post_warmup_runs < 2 {
                return mode;
            }
        }
        // a loss back above its first value has no defined progress; retrain it
        if self.regress_guard {
            for mode in [Mode::Word, Mode::Phrase] {
                if self.history(mode).regressed() {
                    return mode;
                }
            }
        }
        if self.max_idle > 0 {
            for mode in [Mode::Word, Mode::Phrase] {
                if t - self.history(mode).last_iter > self.max_idle {
                    return mode;
                }
            }
        }
        select_mode(self.alpha)
    }

    pub fn history(&self, mode: Mode) -> &LossHistory {
        match mode {
            Mode::Word => &self.word,
            Mode::Phrase => &self.phrase,
        }
    }

    /// Records the loss of the iteration just run and refreshes `alpha`.
    pub fn record(&mut self, mode: Mode, loss: f64) -> f64 {
        self.iter += 1;
        let post = !self.in_warmup(self.iter);
        let decay = self.smoothing;
        let iter = self.iter;
        match mode {
            Mode::Word => self.word.record(loss, decay, iter, post),
            Mode::Phrase => self.phrase.record(loss, decay, iter, post),
        }
        self.alpha = self.update_alpha();
        self.alpha
    }

    /// Alpha for the next iteration given the current histories.
    pub fn update_alpha(&self) -> f64 {
        if self.in_warmup(self.iter + 1) {
            return self.warm_alpha;
        }
        if self.word.post_warmup_runs < 2 || self.phrase.post_warmup_runs < 2 {
            return self.alpha;
        }
        alpha_from_progress(self.word.progress(), self.phrase.progress(), self.alpha)
    }
}
