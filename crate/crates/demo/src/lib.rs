//! Browser demo over the core library: the IPOT plan for an editable cost
//! matrix, phrase-mode masking of a sentence, and the alpha curve the mode
//! scheduler produces for two synthetic loss curves.
//!
//! Each export takes and returns JSON strings so the page needs no glue
//! beyond the generated bindings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use ahmcea::ahm::SchedulerState;
use ahmcea::corpus::{tokenize, Vocab};
use ahmcea::masking::{mask_phrases, Mode, Perturbation};
use ahmcea::ot::{alignment_matrix, exact_ot, ipot, IpotConfig, EXACT_MAX_DIM};
use ahmcea::phrase::PhrasePool;
use ahmcea::tensor::Tensor;

#[derive(Serialize)]
pub struct PlanView {
    pub plan: Vec<Vec<f64>>,
    /// Plan rows rescaled to sum to one.
    pub alignment: Vec<Vec<f64>>,
    pub cost: f64,
    /// Optimal cost, for matrices small enough for the exact solver.
    pub exact_cost: Option<f64>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `cost_json` is a JSON array of equal-length rows.
pub fn plan_view(cost_json: &str, beta: f64, iters: usize) -> Result<PlanView, String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(cost_json).map_err(|e| e.to_string())?;
    let c = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let plan = ipot(
        &c,
        &IpotConfig {
            beta,
            outer_iters: iters,
            inner_iters: 1,
        },
    )
    .map_err(|e| e.to_string())?;
    let (m, n) = (c.shape()[0], c.shape()[1]);
    let exact_cost = if m <= EXACT_MAX_DIM && n <= EXACT_MAX_DIM {
        Some(exact_ot(&c).map_err(|e| e.to_string())?.1)
    } else {
        None
    };
    let p = rows_of(&plan.values);
    Ok(PlanView {
        alignment: rows_of(&alignment_matrix(&plan.values).map_err(|e| e.to_string())?),
        cost: plan.cost(&c),
        exact_cost,
        row_sums: p.iter().map(|r| r.iter().sum()).collect(),
        col_sums: (0..n).map(|j| p.iter().map(|r| r[j]).sum()).collect(),
        plan: p,
    })
}

#[derive(Serialize)]
pub struct MaskView {
    pub tokens: Vec<String>,
    /// `[start, end)` of every pool phrase found in the sentence.
    pub matches: Vec<(usize, usize)>,
    /// Positions of each sampled phrase.
    pub groups: Vec<Vec<usize>>,
    /// `(position, "mask" | "random" | "keep")` for every masked position.
    pub masked: Vec<(usize, &'static str)>,
    /// The sentence as the model sees it.
    pub input: Vec<String>,
}

/// Phrase-mode masking of `text` against `pool_tsv` (`phrase<TAB>score` lines).
pub fn mask_view(text: &str, pool_tsv: &str, seed: u64) -> Result<MaskView, String> {
    let mut entries = Vec::new();
    for (i, line) in pool_tsv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (phrase, score) = line
            .rsplit_once('\t')
            .ok_or_else(|| format!("pool line {}: expected `phrase<TAB>score`", i + 1))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| format!("pool line {}: bad score `{}`", i + 1, score.trim()))?;
        entries.push((phrase.to_string(), score));
    }
    let vocab = Vocab::from_lines(
        std::iter::once(text).chain(entries.iter().map(|(p, _)| p.as_str())),
        1,
    )
    .map_err(|e| e.to_string())?;
    let (pool, _) = PhrasePool::from_entries(
        entries.iter().map(|(p, s)| (p.as_str(), *s)),
        &vocab,
        f64::NEG_INFINITY,
    );
    let doc = tokenize(text, &vocab, usize::MAX);
    if doc.is_empty() {
        return Err("the sentence has no words".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = mask_phrases(&doc, &pool, vocab.len(), &mut rng);
    Ok(MaskView {
        tokens: doc
            .tokens
            .iter()
            .map(|&t| vocab.token(t).to_string())
            .collect(),
        matches: pool
            .detect(&doc.tokens)
            .iter()
            .map(|m| (m.start, m.end))
            .collect(),
        groups: ex.groups,
        masked: ex
            .masked
            .iter()
            .zip(&ex.perturbations)
            .map(|(&p, k)| {
                let kind = match k {
                    Perturbation::Mask => "mask",
                    Perturbation::Random => "random",
                    Perturbation::Keep => "keep",
                };
                (p, kind)
            })
            .collect(),
        input: ex
            .input_ids
            .iter()
            .map(|&t| vocab.token(t).to_string())
            .collect(),
    })
}

/// Two exponential loss curves `floor + (start - floor) * exp(-rate * runs)`,
/// where `runs` counts the steps taken in that mode.
#[derive(Deserialize)]
pub struct CurveSpec {
    pub iters: u64,
    pub warm_iters: u64,
    pub word_rate: f64,
    pub phrase_rate: f64,
    #[serde(default = "default_start")]
    pub start: f64,
    #[serde(default)]
    pub floor: f64,
}

fn default_start() -> f64 {
    5.0
}

#[derive(Serialize)]
pub struct CurvePoint {
    pub iter: u64,
    pub alpha: f64,
    pub word: bool,
    pub loss: f64,
}

pub fn alpha_curve(spec_json: &str) -> Result<Vec<CurvePoint>, String> {
    let spec: CurveSpec = serde_json::from_str(spec_json).map_err(|e| e.to_string())?;
    if spec.iters > 100_000 {
        return Err("at most 100000 iterations".into());
    }
    let mut s = SchedulerState::new(spec.warm_iters, 0.6);
    let (mut word_runs, mut phrase_runs) = (0u32, 0u32);
    let curve =
        |rate: f64, runs: u32| spec.floor + (spec.start - spec.floor) * (-rate * runs as f64).exp();
    let mut out = Vec::with_capacity(spec.iters as usize);
    for iter in 1..=spec.iters {
        let mode = s.next_mode();
        let loss = match mode {
            Mode::Word => {
                word_runs += 1;
                curve(spec.word_rate, word_runs)
            }
            Mode::Phrase => {
                phrase_runs += 1;
                curve(spec.phrase_rate, phrase_runs)
            }
        };
        let alpha = s.alpha;
        s.record(mode, loss);
        out.push(CurvePoint {
            iter,
            alpha,
            word: mode == Mode::Word,
            loss,
        });
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = ipotPlan)]
pub fn ipot_plan_js(cost_json: &str, beta: f64, iters: usize) -> Result<String, JsValue> {
    to_js(plan_view(cost_json, beta, iters))
}

#[wasm_bindgen(js_name = maskPhrases)]
pub fn mask_phrases_js(text: &str, pool_tsv: &str, seed: u32) -> Result<String, JsValue> {
    to_js(mask_view(text, pool_tsv, u64::from(seed)))
}

#[wasm_bindgen(js_name = alphaCurve)]
pub fn alpha_curve_js(spec_json: &str) -> Result<String, JsValue> {
    to_js(alpha_curve(spec_json))
}
