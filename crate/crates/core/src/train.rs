//! Two-stage pre-training: adaptive masked LM on the corpus, then masked LM
//! plus entity alignment on associated pairs. Also Adam, evaluation and the
//! line-delimited training report.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ahm::{phrase_loss, select_mode, word_loss, SchedulerState};
use crate::attention_align::{reconstruction_distance, triplet_loss};
use crate::corpus::{Document, EntityPairSet, Vocab, CLS, MASK, PAD};
use crate::encoder::{forward, token_logits_at, Bound, EncoderConfig, Hidden, ModelParams};
use crate::error::{Error, Result};
use crate::masking::{mask_batch, pad_mask, Mode};
use crate::ot::{cea_loss, IpotConfig};
use crate::phrase::PhrasePool;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeaVariant {
    Ot,
    Attention,
}

/// How the masking mode is chosen each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingPolicy {
    Adaptive,
    Word,
    Phrase,
}

impl std::str::FromStr for CeaVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ot" => Ok(Self::Ot),
            "attention" => Ok(Self::Attention),
            _ => Err(format!("unknown variant `{s}` (expected ot or attention)")),
        }
    }
}

impl std::str::FromStr for MaskingPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "word" => Ok(Self::Word),
            "phrase" => Ok(Self::Phrase),
            _ => Err(format!(
                "unknown masking `{s}` (expected adaptive, word or phrase)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cea_weight: f64,
    pub seed: u64,
    pub ipot: IpotConfig,
    pub warm_iters: u64,
    pub warm_alpha: f64,
    /// Forced phrase step period during warm-up; 0 disables.
    pub warm_phrase_every: u64,
    /// EMA decay for scheduler losses; `None` feeds raw losses.
    pub loss_smoothing: Option<f64>,
    /// Pins alpha after warm-up.
    pub fixed_alpha: Option<f64>,
    /// Iterations a mode may sit idle after warm-up before it is run once; 0 disables.
    pub max_idle: u64,
    /// Run a mode whose loss rose above its first post-warm-up value.
    pub regress_guard: bool,
    pub masking: MaskingPolicy,
    pub cea_variant: CeaVariant,
    /// Scale attention scores by `1/sqrt(dim)` in the attention variant.
    pub attention_scaled: bool,
    /// Add the masked-LM loss to the attention variant's triplet loss.
    pub attention_joint: bool,
    /// Start stage 2 with a fresh scheduler instead of continuing stage 1's.
    pub reset_scheduler: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 10,
            batch_size: 32,
            learning_rate: 1e-5,
            cea_weight: 1.0,
            seed: 0,
            ipot: IpotConfig::default(),
            warm_iters: 1000,
            warm_alpha: 0.6,
            warm_phrase_every: 5,
            loss_smoothing: Some(0.9),
            fixed_alpha: None,
            max_idle: 10,
            regress_guard: true,
            masking: MaskingPolicy::Adaptive,
            cea_variant: CeaVariant::Ot,
            attention_scaled: false,
            attention_joint: false,
            reset_scheduler: false,
        }
    }
}

impl TrainConfig {
    /// Small-batch settings for a tiny model trained from scratch on a laptop.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.cea_weight >= 0.0 && self.cea_weight.is_finite()) {
            return Err(Error::Config(format!(
                "cea_weight must be non-negative, got {}",
                self.cea_weight
            )));
        }
        if !(self.ipot.beta > 0.0) || self.ipot.inner_iters == 0 {
            return Err(Error::Config(
                "ipot needs beta > 0 and at least one inner iteration".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warm_alpha)
            || self.fixed_alpha.is_some_and(|a| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::Config("alpha values must lie in [0, 1]".into()));
        }
        if self
            .loss_smoothing
            .is_some_and(|d| !(0.0..1.0).contains(&d))
        {
            return Err(Error::Config("loss_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn scheduler(&self) -> SchedulerState {
        let mut s = SchedulerState::new(self.warm_iters, self.warm_alpha);
        s.warm_phrase_every = self.warm_phrase_every;
        s.smoothing = self.loss_smoothing;
        s.max_idle = self.max_idle;
        s.regress_guard = self.regress_guard;
        s
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`. Any non-finite
    /// gradient aborts before a single parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, t) in store.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    param: name.to_string(),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            let grad = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub kind: String,
    pub iter: u64,
    pub stage: u8,
    pub mode: Option<Mode>,
    pub l_w: Option<f64>,
    pub l_p: Option<f64>,
    pub l_cea: Option<f64>,
    pub l_triplet: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub stage: u8,
    pub epoch: u64,
    pub iter: u64,
    pub word_acc: Option<f64>,
    pub phrase_acc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReportRecord {
    Iter(IterRecord),
    Epoch(EpochRecord),
}

impl ReportRecord {
    pub fn to_json(&self) -> String {
        match self {
            ReportRecord::Iter(r) => serde_json::to_string(r),
            ReportRecord::Epoch(r) => serde_json::to_string(r),
        }
        .expect("report records serialize")
    }
}

/// Writes each record as one JSON line.
pub struct ReportWriter<W: Write> {
    out: W,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &ReportRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record.to_json())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub encoder: EncoderConfig,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub pool: PhrasePool,
    pub params: ModelParams,
    pub adam: Adam,
    pub scheduler: SchedulerState,
    /// 1 or 2; 3 once stage 2 has finished.
    pub stage: u8,
    /// Global iteration counter.
    pub iter: u64,
    /// Iterations completed in the current stage.
    pub stage_iter: u64,
    negatives: Option<(u64, Vec<Option<usize>>)>,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.config == other.config
            && self.vocab == other.vocab
            && self.pool == other.pool
            && self.params == other.params
            && self.adam == other.adam
            && self.scheduler == other.scheduler
            && (self.stage, self.iter, self.stage_iter)
                == (other.stage, other.iter, other.stage_iter)
    }
}

const STREAM_SHUFFLE: u64 = 1 << 62;
const STREAM_NEGATIVE: u64 = 1 << 61;
const STREAM_INIT: u64 = 1 << 60;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_order(seed: u64, stage: u8, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(
        seed,
        STREAM_SHUFFLE | (u64::from(stage) << 40) | epoch,
    ));
    order
}

struct AhmStep {
    mode: Mode,
    loss: Var,
    l_w: Option<Var>,
    l_p: Option<Var>,
}

impl TrainState {
    pub fn new(
        mut encoder: EncoderConfig,
        config: TrainConfig,
        vocab: Vocab,
        pool: PhrasePool,
    ) -> Result<Self> {
        config.validate()?;
        encoder.vocab_size = vocab.len();
        encoder.phrase_vocab_size = pool.len().max(1);
        let params = ModelParams::init(&encoder, config.seed ^ STREAM_INIT)?;
        let adam = Adam::new(&params.store);
        Ok(Self {
            scheduler: config.scheduler(),
            encoder,
            config,
            vocab,
            pool,
            params,
            adam,
            stage: 1,
            iter: 0,
            stage_iter: 0,
            negatives: None,
        })
    }

    pub(crate) fn from_parts(
        encoder: EncoderConfig,
        config: TrainConfig,
        vocab: Vocab,
        pool: PhrasePool,
        params: ModelParams,
        adam: Adam,
        scheduler: SchedulerState,
        counters: (u8, u64, u64),
    ) -> Self {
        Self {
            encoder,
            config,
            vocab,
            pool,
            params,
            adam,
            scheduler,
            stage: counters.0,
            iter: counters.1,
            stage_iter: counters.2,
            negatives: None,
        }
    }

    pub fn iters_per_epoch(&self, items: usize) -> u64 {
        items.div_ceil(self.config.batch_size) as u64
    }

    fn next_mode(&self) -> Mode {
        match self.config.masking {
            MaskingPolicy::Word => Mode::Word,
            MaskingPolicy::Phrase => Mode::Phrase,
            MaskingPolicy::Adaptive => match self.config.fixed_alpha {
                Some(a) if self.scheduler.iter + 1 > self.scheduler.warm_iters => select_mode(a),
                _ => self.scheduler.next_mode(),
            },
        }
    }

    fn ahm_step(
        &self,
        g: &mut Graph,
        bound: &Bound,
        docs: &[&Document],
        rng: &mut ChaCha8Rng,
    ) -> Result<AhmStep> {
        let mode = self.next_mode();
        let batch = mask_batch(docs, mode, &self.pool, self.encoder.vocab_size, rng);
        let hidden = forward(g, bound, &self.encoder, &batch.input_ids, &batch.pad_mask())?;
        Ok(match mode {
            Mode::Word => {
                let l = word_loss(g, &batch, &hidden, bound)?;
                AhmStep {
                    mode,
                    loss: l,
                    l_w: Some(l),
                    l_p: None,
                }
            }
            Mode::Phrase => {
                let l = phrase_loss(g, &batch, &hidden, bound)?;
                AhmStep {
                    mode,
                    loss: l.total,
                    l_w: None,
                    l_p: Some(l.total),
                }
            }
        })
    }

    fn finish_step(&mut self, g: &mut Graph, bound: &Bound, loss: Var) -> Result<()> {
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite {
                param: "loss".into(),
            });
        }
        g.backward(loss)?;
        self.params.store.zero_grad();
        self.params.store.accumulate_grads(g, &bound.vars);
        let result = self
            .adam
            .step(&mut self.params.store, self.config.learning_rate);
        self.params.store.zero_grad();
        result
    }

    fn record_mode(&mut self, ahm: &Option<(Mode, f64)>) {
        if let Some((mode, value)) = *ahm {
            self.scheduler.record(mode, value);
            if let Some(a) = self.config.fixed_alpha {
                if self.scheduler.iter > self.scheduler.warm_iters {
                    self.scheduler.alpha = a;
                }
            }
        }
    }

    /// One stage-1 iteration on `corpus`.
    pub fn step_stage1(&mut self, corpus: &[Document]) -> Result<IterRecord> {
        if corpus.is_empty() {
            return Err(Error::contract("stage 1 needs a non-empty corpus"));
        }
        let per_epoch = self.iters_per_epoch(corpus.len());
        let (epoch, k) = (
            self.stage_iter / per_epoch,
            (self.stage_iter % per_epoch) as usize,
        );
        let order = epoch_order(self.config.seed, 1, epoch, corpus.len());
        let bs = self.config.batch_size;
        let docs: Vec<&Document> = order[k * bs..((k + 1) * bs).min(order.len())]
            .iter()
            .map(|&i| &corpus[i])
            .collect();

        let mut rng = rng_for(self.config.seed, self.iter);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let step = self.ahm_step(&mut g, &bound, &docs, &mut rng)?;
        self.finish_step(&mut g, &bound, step.loss)?;
        let ahm = Some((step.mode, g.value(step.loss).item()));
        self.record_mode(&ahm);
        self.iter += 1;
        self.stage_iter += 1;
        Ok(IterRecord {
            kind: "iter".into(),
            iter: self.iter,
            stage: 1,
            mode: Some(step.mode),
            l_w: step.l_w.map(|v| g.value(v).item()),
            l_p: step.l_p.map(|v| g.value(v).item()),
            l_cea: None,
            l_triplet: None,
            alpha: self.scheduler.alpha,
        })
    }

    /// Negative entity for each pair in a stage-2 epoch, as an index into
    /// `pairs.entities()`; `None` when every entity is related to the anchor.
    pub fn negatives_for(&mut self, pairs: &EntityPairSet, epoch: u64) -> Vec<Option<usize>> {
        if let Some((e, negs)) = &self.negatives {
            if *e == epoch {
                return negs.clone();
            }
        }
        let entities = pairs.entities();
        let neighbours = pairs.neighbours();
        let mut rng = rng_for(self.config.seed, STREAM_NEGATIVE | epoch);
        let negs: Vec<Option<usize>> = pairs
            .pairs
            .iter()
            .map(|(a, _)| {
                let related = neighbours.get(a.as_str());
                let pool: Vec<usize> = (0..entities.len())
                    .filter(|&i| {
                        entities[i] != a && !related.is_some_and(|r| r.contains(entities[i]))
                    })
                    .collect();
                (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
            })
            .collect();
        self.negatives = Some((epoch, negs.clone()));
        negs
    }

    /// One stage-2 iteration on a batch of associated pairs.
    pub fn step_stage2(&mut self, pairs: &EntityPairSet) -> Result<IterRecord> {
        if pairs.is_empty() {
            return Err(Error::contract("stage 2 needs at least one entity pair"));
        }
        let per_epoch = self.iters_per_epoch(pairs.len());
        let (epoch, k) = (
            self.stage_iter / per_epoch,
            (self.stage_iter % per_epoch) as usize,
        );
        let order = epoch_order(self.config.seed, 2, epoch, pairs.len());
        let bs = self.config.batch_size;
        let chosen = &order[k * bs..((k + 1) * bs).min(order.len())];
        let mut docs = Vec::with_capacity(2 * chosen.len());
        for &i in chosen {
            let (a, b) = pairs.docs(i);
            docs.push(a);
            docs.push(b);
        }

        let mut rng = rng_for(self.config.seed, self.iter);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let lambda = self.config.cea_weight;
        let attention = self.config.cea_variant == CeaVariant::Attention;
        let run_ahm = !attention || self.config.attention_joint;

        let ahm = if run_ahm {
            Some(self.ahm_step(&mut g, &bound, &docs, &mut rng)?)
        } else {
            None
        };
        let mut total = ahm.as_ref().map(|s| s.loss);
        let mut l_cea = None;
        let mut l_triplet = None;
        if lambda > 0.0 {
            let aux = if attention {
                let negs = self.negatives_for(pairs, epoch);
                let entities = pairs.entities();
                let negatives: Vec<Option<&Document>> = chosen
                    .iter()
                    .map(|&i| negs[i].map(|e| &pairs.content[entities[e]]))
                    .collect();
                let t = self.triplet_term(&mut g, &bound, &docs, &negatives)?;
                l_triplet = t;
                t
            } else {
                let c = self.cea_term(&mut g, &bound, &docs)?;
                l_cea = c;
                c
            };
            if let Some(aux) = aux {
                let weighted = g.scale(aux, lambda);
                total = Some(match total {
                    Some(t) => g.add(t, weighted)?,
                    None => weighted,
                });
            }
        }
        if let Some(loss) = total {
            self.finish_step(&mut g, &bound, loss)?;
        }
        let recorded = ahm.as_ref().map(|s| (s.mode, g.value(s.loss).item()));
        self.record_mode(&recorded);
        self.iter += 1;
        self.stage_iter += 1;
        let read = |v: Option<Var>| v.map(|v| g.value(v).item());
        Ok(IterRecord {
            kind: "iter".into(),
            iter: self.iter,
            stage: 2,
            mode: ahm.as_ref().map(|s| s.mode),
            l_w: read(ahm.as_ref().and_then(|s| s.l_w)),
            l_p: read(ahm.as_ref().and_then(|s| s.l_p)),
            l_cea: read(l_cea),
            l_triplet: read(l_triplet),
            alpha: self.scheduler.alpha,
        })
    }

    fn unmasked(&self, g: &mut Graph, bound: &Bound, docs: &[&Document]) -> Result<Hidden> {
        let width = docs.iter().map(|d| d.len()).max().unwrap_or(0);
        let lengths: Vec<usize> = docs.iter().map(|d| d.len()).collect();
        let ids: Vec<Vec<u32>> = docs
            .iter()
            .map(|d| {
                let mut v = d.tokens.clone();
                v.resize(width, PAD);
                v
            })
            .collect();
        forward(g, bound, &self.encoder, &ids, &pad_mask(&lengths, width))
    }

    /// Mean OT loss over the pairs `(docs[2k], docs[2k+1])`.
    fn cea_term(&self, g: &mut Graph, bound: &Bound, docs: &[&Document]) -> Result<Option<Var>> {
        let hidden = self.unmasked(g, bound, docs)?;
        let mut losses = Vec::new();
        for k in 0..docs.len() / 2 {
            let x = content_rows(g, &hidden, 2 * k, docs[2 * k])?;
            let y = content_rows(g, &hidden, 2 * k + 1, docs[2 * k + 1])?;
            if let (Some(x), Some(y)) = (x, y) {
                losses.push(cea_loss(g, x, y, &self.config.ipot)?.loss);
            }
        }
        mean_of(g, &losses)
    }

    fn triplet_term(
        &self,
        g: &mut Graph,
        bound: &Bound,
        docs: &[&Document],
        negatives: &[Option<&Document>],
    ) -> Result<Option<Var>> {
        let mut all: Vec<&Document> = docs.to_vec();
        all.extend(negatives.iter().flatten().copied());
        let hidden = self.unmasked(g, bound, &all)?;
        let scaled = self.config.attention_scaled;
        let mut losses = Vec::new();
        let mut next_neg = docs.len();
        for (k, neg) in negatives.iter().enumerate() {
            let Some(neg) = neg else { continue };
            let n_row = next_neg;
            next_neg += 1;
            let a = content_rows(g, &hidden, 2 * k, docs[2 * k])?;
            let b = content_rows(g, &hidden, 2 * k + 1, docs[2 * k + 1])?;
            let bn = content_rows(g, &hidden, n_row, neg)?;
            if let (Some(a), Some(b), Some(bn)) = (a, b, bn) {
                let pos = reconstruction_distance(g, a, b, scaled)?;
                let negd = reconstruction_distance(g, a, bn, scaled)?;
                losses.push(triplet_loss(g, pos, negd)?);
            }
        }
        mean_of(g, &losses)
    }

    /// Runs stage 1 to completion, or for at most `limit` more iterations.
    pub fn run_stage1(
        &mut self,
        corpus: &[Document],
        eval: Option<&[Document]>,
        limit: Option<u64>,
        sink: &mut dyn FnMut(&ReportRecord) -> Result<()>,
    ) -> Result<()> {
        if self.stage != 1 {
            return Ok(());
        }
        if corpus.is_empty() {
            return Err(Error::contract("stage 1 needs a non-empty corpus"));
        }
        let per_epoch = self.iters_per_epoch(corpus.len());
        let total = per_epoch * self.config.stage1_epochs as u64;
        self.run_stage(total, per_epoch, eval, limit, sink, |s| {
            s.step_stage1(corpus)
        })
    }

    /// Runs stage 2 to completion, or for at most `limit` more iterations.
    pub fn run_stage2(
        &mut self,
        pairs: &EntityPairSet,
        eval: Option<&[Document]>,
        limit: Option<u64>,
        sink: &mut dyn FnMut(&ReportRecord) -> Result<()>,
    ) -> Result<()> {
        if self.stage == 1 {
            return Err(Error::contract("stage 1 has not finished"));
        }
        if self.stage != 2 {
            return Ok(());
        }
        if self.config.stage2_epochs > 0 && pairs.is_empty() {
            return Err(Error::contract("stage 2 needs at least one entity pair"));
        }
        let per_epoch = self.iters_per_epoch(pairs.len()).max(1);
        let total = per_epoch * self.config.stage2_epochs as u64;
        self.run_stage(total, per_epoch, eval, limit, sink, |s| {
            s.step_stage2(pairs)
        })
    }

    fn run_stage(
        &mut self,
        total: u64,
        per_epoch: u64,
        eval: Option<&[Document]>,
        limit: Option<u64>,
        sink: &mut dyn FnMut(&ReportRecord) -> Result<()>,
        mut step: impl FnMut(&mut Self) -> Result<IterRecord>,
    ) -> Result<()> {
        let start = Instant::now();
        let mut done = 0;
        while self.stage_iter < total {
            if limit.is_some_and(|l| done >= l) {
                return Ok(());
            }
            let rec = step(self)?;
            sink(&ReportRecord::Iter(rec))?;
            done += 1;
            if self.stage_iter.is_multiple_of(per_epoch) {
                let (word_acc, phrase_acc) = match eval {
                    Some(docs) => {
                        let table = self.evaluate(docs, &[1, 2, 3, 4])?;
                        (table[0].accuracy, pooled_accuracy(&table[1..]))
                    }
                    None => (None, None),
                };
                sink(&ReportRecord::Epoch(EpochRecord {
                    kind: "epoch".into(),
                    stage: self.stage,
                    epoch: self.stage_iter / per_epoch,
                    iter: self.iter,
                    word_acc,
                    phrase_acc,
                    wall_time_s: start.elapsed().as_secs_f64(),
                }))?;
            }
        }
        self.stage += 1;
        self.stage_iter = 0;
        self.negatives = None;
        if self.stage == 2 && self.config.reset_scheduler {
            self.scheduler = self.config.scheduler();
        }
        Ok(())
    }

    pub fn model(&self) -> Model<'_> {
        Model {
            params: &self.params,
            config: &self.encoder,
        }
    }

    /// Reconstruction accuracy of the current model, seeded by the config seed.
    pub fn evaluate(&self, docs: &[Document], span_lengths: &[usize]) -> Result<Vec<SpanAccuracy>> {
        eval_reconstruction(&self.model(), docs, &self.pool, span_lengths)
    }
}

/// Hidden rows of `doc` that hold content tokens, as an `[k, dim]` matrix.
fn content_rows(g: &mut Graph, hidden: &Hidden, b: usize, doc: &Document) -> Result<Option<Var>> {
    let rows: Vec<usize> = content_positions(&doc.tokens)
        .into_iter()
        .map(|p| hidden.row(b, p))
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.gather_rows(hidden.var, &rows)?))
}

/// Positions that take part in alignment: everything except PAD, CLS and MASK.
pub fn content_positions(tokens: &[u32]) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&p| !matches!(tokens[p], PAD | CLS | MASK))
        .collect()
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
}

/// Anything that fills in masked positions.
pub trait Reconstructor {
    /// Predicted token at each of `positions[k]` in the masked sequence `inputs[k]`.
    fn predict(&self, inputs: &[Vec<u32>], positions: &[Vec<usize>]) -> Result<Vec<Vec<u32>>>;
}

/// Borrowed encoder used for prediction.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub params: &'a ModelParams,
    pub config: &'a EncoderConfig,
}

impl Reconstructor for Model<'_> {
    fn predict(&self, inputs: &[Vec<u32>], positions: &[Vec<usize>]) -> Result<Vec<Vec<u32>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let width = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let ids: Vec<Vec<u32>> = inputs
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.resize(width, PAD);
                v
            })
            .collect();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let hidden = forward(
            &mut g,
            &bound,
            self.config,
            &ids,
            &pad_mask(&lengths, width),
        )?;
        let rows: Vec<usize> = positions
            .iter()
            .enumerate()
            .flat_map(|(b, ps)| ps.iter().map(move |&p| b * width + p))
            .collect();
        if rows.is_empty() {
            return Ok(vec![Vec::new(); inputs.len()]);
        }
        let logits = token_logits_at(&mut g, &hidden, &bound, &rows)?;
        let t = g.value(logits);
        let mut flat = (0..t.rows()).map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        });
        Ok(positions
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|_| flat.next().expect("one logit row per position"))
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanAccuracy {
    pub span_len: usize,
    pub n_examples: usize,
    pub n_correct: usize,
    /// Exact-match accuracy; `None` when no span of this length exists.
    pub accuracy: Option<f64>,
    /// Fraction of individual masked tokens predicted correctly.
    pub token_accuracy: Option<f64>,
}

/// Exact-match accuracy pooled over several span lengths.
pub fn pooled_accuracy(rows: &[SpanAccuracy]) -> Option<f64> {
    let n: usize = rows.iter().map(|r| r.n_examples).sum();
    (n > 0).then(|| rows.iter().map(|r| r.n_correct).sum::<usize>() as f64 / n as f64)
}

const EVAL_BATCH: usize = 64;

/// Masks every single token in turn (span length 1) or each detected pool
/// phrase of the given length (longer spans) with MASK, and scores the
/// predictions.
pub fn eval_reconstruction(
    model: &dyn Reconstructor,
    docs: &[Document],
    pool: &PhrasePool,
    span_lengths: &[usize],
) -> Result<Vec<SpanAccuracy>> {
    let mut out = Vec::with_capacity(span_lengths.len());
    let lengths: BTreeSet<usize> = span_lengths.iter().copied().collect();
    if lengths.contains(&0) {
        return Err(Error::contract("span length must be at least 1"));
    }
    for &len in span_lengths {
        let mut examples: Vec<(Vec<u32>, Vec<usize>, Vec<u32>)> = Vec::new();
        for doc in docs.iter().filter(|d| !d.is_empty()) {
            let spans: Vec<std::ops::Range<usize>> = if len == 1 {
                (0..doc.len()).map(|p| p..p + 1).collect()
            } else {
                pool.detect(&doc.tokens)
                    .into_iter()
                    .filter(|m| m.len() == len)
                    .map(|m| m.positions())
                    .collect()
            };
            for span in spans {
                let mut input = doc.tokens.clone();
                let positions: Vec<usize> = span.collect();
                positions.iter().for_each(|&p| input[p] = MASK);
                let gold = positions.iter().map(|&p| doc.tokens[p]).collect();
                examples.push((input, positions, gold));
            }
        }
        let (mut correct, mut tok_correct, mut tok_total) = (0, 0, 0);
        for chunk in examples.chunks(EVAL_BATCH) {
            let inputs: Vec<Vec<u32>> = chunk.iter().map(|e| e.0.clone()).collect();
            let positions: Vec<Vec<usize>> = chunk.iter().map(|e| e.1.clone()).collect();
            let preds = model.predict(&inputs, &positions)?;
            for (pred, ex) in preds.iter().zip(chunk) {
                let hits = pred.iter().zip(&ex.2).filter(|(a, b)| a == b).count();
                tok_correct += hits;
                tok_total += ex.2.len();
                if hits == ex.2.len() {
                    correct += 1;
                }
            }
        }
        let n = examples.len();
        out.push(SpanAccuracy {
            span_len: len,
            n_examples: n,
            n_correct: correct,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
            token_accuracy: (tok_total > 0).then(|| tok_correct as f64 / tok_total as f64),
        });
    }
    Ok(out)
}
