//! Tiny post-layer-norm transformer encoder with a token-prediction head and
//! a phrase-prediction head.
//!
//! The whole batch is run as one `[B*L, dim]` matrix. Self-attention is
//! computed per example, with `-inf` scores on PAD keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_SEQ_LEN;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub phrase_vocab_size: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, phrase_vocab_size: usize) -> Self {
        Self {
            layers: 2,
            dim: 32,
            heads: 2,
            ffn_dim: 64,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            vocab_size,
            phrase_vocab_size: phrase_vocab_size.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("phrase_vocab_size", self.phrase_vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// All trainable tensors, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
}

const LAYER_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
    "ln2_g", "ln2_b",
];

impl ModelParams {
    /// Normal(0, 0.02) matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut matrix = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| normal.sample(&mut rng)).collect(),
            )
            .expect("shape matches")
        };
        let (d, f) = (config.dim, config.ffn_dim);
        let mut store = ParamStore::new();
        store.push("tok_emb", matrix(&[config.vocab_size, d]));
        store.push("pos_emb", matrix(&[config.max_seq_len, d]));
        store.push("emb_ln_g", Tensor::filled(&[d], 1.0));
        store.push("emb_ln_b", Tensor::zeros(&[d]));
        for l in 0..config.layers {
            for name in LAYER_TENSORS {
                let t = match name {
                    "wq" | "wk" | "wv" | "wo" => matrix(&[d, d]),
                    "w1" => matrix(&[d, f]),
                    "w2" => matrix(&[f, d]),
                    "b1" => Tensor::zeros(&[f]),
                    "ln1_g" | "ln2_g" => Tensor::filled(&[d], 1.0),
                    _ => Tensor::zeros(&[d]),
                };
                store.push(format!("layer{l}.{name}"), t);
            }
        }
        store.push("token_out", matrix(&[d, config.vocab_size]));
        store.push("phrase_out", matrix(&[d, config.phrase_vocab_size]));
        Ok(Self { store })
    }

    /// Registers the parameters on `g` and names the handles.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.store.bind(g);
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        let tok_emb = next();
        let pos_emb = next();
        let emb_ln = (next(), next());
        let n_layers = (vars.len() - 6) / LAYER_TENSORS.len();
        let layers = (0..n_layers)
            .map(|_| LayerVars {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1: (next(), next()),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2: (next(), next()),
            })
            .collect();
        let token_out = next();
        let phrase_out = next();
        Bound {
            tok_emb,
            pos_emb,
            emb_ln,
            layers,
            token_out,
            phrase_out,
            vars,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2: (Var, Var),
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub emb_ln: (Var, Var),
    pub layers: Vec<LayerVars>,
    pub token_out: Var,
    pub phrase_out: Var,
    /// Every handle in store order, for [`ParamStore::accumulate_grads`].
    pub vars: Vec<Var>,
}

/// Encoder output as a `[batch * width, dim]` matrix.
#[derive(Clone, Debug)]
pub struct Hidden {
    pub var: Var,
    pub batch: usize,
    pub width: usize,
    /// Attention probabilities, `[layer][head][example]`, each `[L, L]`.
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl Hidden {
    /// Row of position `pos` in example `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.width + pos
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Contextual embeddings for a padded id batch. `pad_mask[b][p]` is true for
/// real tokens; PAD keys get `-inf` attention scores.
pub fn forward(
    g: &mut Graph,
    params: &Bound,
    config: &EncoderConfig,
    input_ids: &[Vec<u32>],
    pad_mask: &[Vec<bool>],
) -> Result<Hidden> {
    let batch = input_ids.len();
    let width = input_ids.first().map_or(0, Vec::len);
    if batch == 0 || width == 0 {
        return Err(Error::contract("forward on an empty batch"));
    }
    if width > config.max_seq_len {
        return Err(Error::Index {
            what: "sequence position",
            index: width - 1,
            bound: config.max_seq_len,
        });
    }
    if input_ids.iter().any(|r| r.len() != width) || pad_mask.len() != batch {
        return Err(Error::contract("ragged batch"));
    }
    let ids: Vec<usize> = input_ids.iter().flatten().map(|&i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            bound: config.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..width).collect();

    let tok = g.gather_rows(params.tok_emb, &ids)?;
    let pos = g.gather_rows(params.pos_emb, &positions)?;
    let sum = g.add(tok, pos)?;
    let mut x = g.layer_norm(sum, params.emb_ln.0, params.emb_ln.1, LAYER_NORM_EPS)?;

    // per-example additive key mask: 0 for real tokens, -inf for PAD
    let key_masks = pad_mask
        .iter()
        .map(|m| {
            let row = m
                .iter()
                .map(|&real| if real { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            Ok(g.constant(Tensor::new(vec![width], row)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let example_rows: Vec<Vec<usize>> = (0..batch)
        .map(|b| (b * width..(b + 1) * width).collect())
        .collect();

    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let q = linear(g, x, layer.wq, layer.bq)?;
        let k = linear(g, x, layer.wk, layer.bk)?;
        let v = linear(g, x, layer.wv, layer.bv)?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut probs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let (qh, kh, vh) = if config.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let mut outs = Vec::with_capacity(batch);
            let mut head_probs = Vec::with_capacity(batch);
            for (idx, &key_mask) in example_rows.iter().zip(&key_masks) {
                let (qb, kb, vb) = if batch == 1 {
                    (qh, kh, vh)
                } else {
                    (
                        g.gather_rows(qh, idx)?,
                        g.gather_rows(kh, idx)?,
                        g.gather_rows(vh, idx)?,
                    )
                };
                let kt = g.transpose(kb)?;
                let scores = g.matmul(qb, kt)?;
                let scores = g.scale(scores, inv_sqrt);
                let scores = g.add(scores, key_mask)?;
                let p = g.softmax(scores);
                head_probs.push(p);
                outs.push(g.matmul(p, vb)?);
            }
            probs.push(head_probs);
            heads.push(if batch == 1 {
                outs[0]
            } else {
                g.concat_rows(&outs)?
            });
        }
        attention.push(probs);
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = linear(g, cat, layer.wo, layer.bo)?;
        let res = g.add(x, attn)?;
        x = g.layer_norm(res, layer.ln1.0, layer.ln1.1, LAYER_NORM_EPS)?;

        let h1 = linear(g, x, layer.w1, layer.b1)?;
        let h1 = g.gelu(h1);
        let h2 = linear(g, h1, layer.w2, layer.b2)?;
        let res = g.add(x, h2)?;
        x = g.layer_norm(res, layer.ln2.0, layer.ln2.1, LAYER_NORM_EPS)?;
    }
    Ok(Hidden {
        var: x,
        batch,
        width,
        attention,
    })
}

/// `[B, L, vocab]` logits; no bias, no softmax.
pub fn token_logits(g: &mut Graph, hidden: &Hidden, params: &Bound) -> Result<Var> {
    let logits = g.matmul(hidden.var, params.token_out)?;
    let v = g.shape(logits)[1];
    g.reshape(logits, &[hidden.batch, hidden.width, v])
}

/// Token logits only at the given flat rows of `hidden`, `[rows.len(), vocab]`.
pub fn token_logits_at(
    g: &mut Graph,
    hidden: &Hidden,
    params: &Bound,
    rows: &[usize],
) -> Result<Var> {
    let picked = g.gather_rows(hidden.var, rows)?;
    g.matmul(picked, params.token_out)
}

/// One row of phrase logits per group: the mean of the group's hidden rows
/// mapped through the phrase output matrix. `groups` hold flat row indices.
pub fn phrase_logits(
    g: &mut Graph,
    hidden: &Hidden,
    params: &Bound,
    groups: &[Vec<usize>],
) -> Result<Var> {
    let rows = hidden.batch * hidden.width;
    let mut avg = Tensor::zeros(&[groups.len(), rows]);
    for (k, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::contract("phrase group with no positions"));
        }
        let w = 1.0 / group.len() as f64;
        for &r in group {
            if r >= rows {
                return Err(Error::Index {
                    what: "phrase group row",
                    index: r,
                    bound: rows,
                });
            }
            avg.data_mut()[k * rows + r] += w;
        }
    }
    let avg = g.constant(avg);
    let pooled = g.matmul(avg, hidden.var)?;
    g.matmul(pooled, params.phrase_out)
}

/// Runs an unmasked forward pass without recording gradients and returns the
/// `[len, dim]` embeddings of each sequence.
pub fn embed_sequences(
    params: &ModelParams,
    config: &EncoderConfig,
    seqs: &[&[u32]],
) -> Result<Vec<Tensor>> {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let ids: Vec<Vec<u32>> = seqs
        .iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.resize(width, crate::corpus::PAD);
            v
        })
        .collect();
    let mask = crate::masking::pad_mask(&lengths, width);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let hidden = forward(&mut g, &bound, config, &ids, &mask)?;
    let all = g.value(hidden.var);
    let dim = config.dim;
    seqs.iter()
        .enumerate()
        .map(|(b, s)| {
            let start = b * width * dim;
            Tensor::new(
                vec![s.len(), dim],
                all.data()[start..start + s.len() * dim].to_vec(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::pad_mask;

    fn tiny() -> (EncoderConfig, ModelParams) {
        let mut c = EncoderConfig::new(12, 3);
        c.dim = 8;
        c.ffn_dim = 16;
        c.max_seq_len = 10;
        let p = ModelParams::init(&c, 1).unwrap();
        (c, p)
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::new(10, 2);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let (c, p) = tiny();
        let ids = vec![vec![4, 5, 6, 0], vec![7, 8, 0, 0]];
        let mask = pad_mask(&[3, 2], 4);
        let run = || {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let h = forward(&mut g, &b, &c, &ids, &mask).unwrap();
            let logits = token_logits(&mut g, &h, &b).unwrap();
            assert_eq!(g.shape(logits), &[2, 4, 12]);
            assert_eq!(g.shape(h.var), &[8, 8]);
            g.value(h.var).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pad_tail_does_not_leak() {
        let (c, p) = tiny();
        let eval = |ids: Vec<Vec<u32>>| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let h = forward(&mut g, &b, &c, &ids, &pad_mask(&[3], 5)).unwrap();
            g.value(h.var).data()[..3 * 8].to_vec()
        };
        let a = eval(vec![vec![4, 5, 6, 0, 0]]);
        let b = eval(vec![vec![4, 5, 6, 9, 11]]);
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (c, p) = tiny();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let ids = vec![vec![4, 5, 6, 0], vec![7, 8, 9, 10]];
        let h = forward(&mut g, &b, &c, &ids, &pad_mask(&[3, 4], 4)).unwrap();
        for layer in &h.attention {
            for head in layer {
                assert_eq!(head.len(), 2);
                for (ex, &a) in head.iter().enumerate() {
                    let t = g.value(a);
                    assert_eq!(t.shape(), &[4, 4]);
                    for r in 0..t.rows() {
                        let row = t.row(r);
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        // padded key of example 0 gets no weight
                        assert_eq!(row[3] == 0.0, ex == 0);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_id() {
        let (c, p) = tiny();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let err = forward(&mut g, &b, &c, &[vec![4, 99]], &pad_mask(&[2], 2));
        assert!(matches!(err, Err(Error::Index { .. })));
    }

    #[test]
    fn token_logits_are_linear_and_zero_gives_uniform() {
        let (c, mut p) = tiny();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let h = forward(&mut g, &b, &c, &[vec![4, 5]], &pad_mask(&[2], 2)).unwrap();
        let h2 = Hidden {
            var: g.scale(h.var, 2.0),
            ..h.clone()
        };
        let l1 = token_logits(&mut g, &h, &b).unwrap();
        let l2 = token_logits(&mut g, &h2, &b).unwrap();
        for (a, b) in g.value(l1).data().iter().zip(g.value(l2).data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }

        let idx = p
            .store
            .names()
            .iter()
            .position(|n| n == "token_out")
            .unwrap();
        p.store.get_mut(idx).data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let h = forward(&mut g, &b, &c, &[vec![4, 5]], &pad_mask(&[2], 2)).unwrap();
        let l = token_logits(&mut g, &h, &b).unwrap();
        let probs = g.softmax(l);
        assert!(g
            .value(probs)
            .data()
            .iter()
            .all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn phrase_logits_average_group_rows() {
        let (c, p) = tiny();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let h = forward(&mut g, &b, &c, &[vec![4, 5, 6, 7]], &pad_mask(&[4], 4)).unwrap();
        let groups = vec![vec![1, 2], vec![3]];
        let pl = phrase_logits(&mut g, &h, &b, &groups).unwrap();
        assert_eq!(g.shape(pl), &[2, 3]);

        // brute-force: mean of rows, then multiply by C
        let hv = g.value(h.var);
        let cm = g.value(b.phrase_out);
        for (k, group) in groups.iter().enumerate() {
            let mut mean = [0.0; 8];
            for &r in group {
                for d in 0..8 {
                    mean[d] += hv.row(r)[d] / group.len() as f64;
                }
            }
            for j in 0..3 {
                let direct: f64 = (0..8).map(|d| mean[d] * cm.at(d, j)).sum();
                assert!((direct - g.value(pl).at(k, j)).abs() < 1e-12);
            }
        }
        assert!(phrase_logits(&mut g, &h, &b, &[vec![]]).is_err());
    }

    #[test]
    fn identical_rows_group_matches_single_row() {
        let (c, p) = tiny();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        // the same token at the same position in two examples yields the same row
        let h = forward(
            &mut g,
            &b,
            &c,
            &[vec![4, 5], vec![4, 5]],
            &pad_mask(&[2, 2], 2),
        )
        .unwrap();
        let group = phrase_logits(&mut g, &h, &b, &[vec![1, 3]]).unwrap();
        let single = phrase_logits(&mut g, &h, &b, &[vec![1]]).unwrap();
        for (a, b) in g.value(group).data().iter().zip(g.value(single).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
