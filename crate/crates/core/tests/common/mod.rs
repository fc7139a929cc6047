//! Central finite-difference checks shared by the gradient tests and the
//! acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ahmcea::ahm::{phrase_loss, word_loss};
use ahmcea::attention_align::{cross_attention, reconstruction_distance, triplet_loss};
use ahmcea::corpus::{tokenize, Document, Vocab};
use ahmcea::encoder::{forward, EncoderConfig, ModelParams};
use ahmcea::masking::{mask_batch, Mode};
use ahmcea::ot::{cost_matrix_var, ipot, IpotConfig};
use ahmcea::phrase::PhrasePool;
use ahmcea::tensor::{Graph, Tensor, Var};

pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every entry
/// of the Jacobian contributes.
fn project(g: &mut Graph, out: Var) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let w = g.constant(random(g.shape(out), 999));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn scalar_of<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out);
    g.value(l).item()
}

/// Worst relative error over every entry of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = scalar_of(&probe, &f);
            probe[i].data_mut()[j] = x - STEP;
            let down = scalar_of(&probe, &f);
            probe[i].data_mut()[j] = x;
            worst = worst.max(rel_err(analytic[i][j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Plan from IPOT on the cosine cost of `x` and `y`.
pub fn plan_for(x: &Tensor, y: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let (c, _) = cost_matrix_var(&mut g, xv, yv).unwrap();
    ipot(g.value(c), &IpotConfig::default()).unwrap().values
}

/// `<T, C(x, y)>` with `T` held constant: what the transport loss differentiates.
pub fn fixed_plan_loss(g: &mut Graph, plan: &Tensor, x: Var, y: Var) -> Var {
    let (c, _) = cost_matrix_var(g, x, y).unwrap();
    let t = g.constant(plan.clone());
    let w = g.mul(t, c).unwrap();
    g.sum(w)
}

/// Worst relative error of every operation and loss, by name.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2);
    let bias = random(&[4], 3);
    push(
        "add",
        check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()),
    );
    push(
        "add bias",
        check(&[a.clone(), bias], |g, v| g.add(v[0], v[1]).unwrap()),
    );
    push(
        "sub",
        check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()),
    );
    push(
        "mul",
        check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()),
    );
    push("scale", check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5)));
    push(
        "transpose",
        check(std::slice::from_ref(&a), |g, v| g.transpose(v[0]).unwrap()),
    );
    push(
        "reshape",
        check(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]).unwrap()),
    );
    push("sum", check(std::slice::from_ref(&a), |g, v| g.sum(v[0])));
    push("mean", check(std::slice::from_ref(&a), |g, v| g.mean(v[0])));
    push("gelu", check(std::slice::from_ref(&a), |g, v| g.gelu(v[0])));
    push("softmax", check(std::slice::from_ref(&a), |g, v| g.softmax(v[0])));

    let w = random(&[4, 2], 5);
    let c = random(&[3, 2], 6);
    let d = random(&[2, 4], 7);
    push(
        "matmul",
        check(&[a.clone(), w], |g, v| g.matmul(v[0], v[1]).unwrap()),
    );
    push(
        "concat_cols",
        check(&[a.clone(), c], |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]]).unwrap()
        }),
    );
    push(
        "concat_rows",
        check(&[a.clone(), d], |g, v| {
            g.concat_rows(&[v[1], v[0], v[1]]).unwrap()
        }),
    );
    push(
        "slice_cols",
        check(std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], 1, 2).unwrap()),
    );
    push(
        "gather_rows",
        check(std::slice::from_ref(&a), |g, v| {
            g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()
        }),
    );

    let x = random(&[3, 5], 8);
    let gain = random(&[5], 9);
    let beta = random(&[5], 10);
    push(
        "layer_norm",
        check(&[x.clone(), gain, beta], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-12).unwrap()
        }),
    );
    push(
        "cross_entropy",
        check(std::slice::from_ref(&x), |g, v| {
            g.cross_entropy(v[0], &[4, 0, 2]).unwrap()
        }),
    );
    let y = random(&[4, 5], 11);
    push(
        "cosine_similarity",
        check(&[x.clone(), y.clone()], |g, v| {
            g.cosine_similarity(v[0], v[1]).unwrap()
        }),
    );
    push(
        "cost matrix",
        check(&[x.clone(), y.clone()], |g, v| {
            cost_matrix_var(g, v[0], v[1]).unwrap().0
        }),
    );

    let x = random(&[3, 4], 12);
    let y = random(&[5, 4], 13);
    for scaled in [false, true] {
        let tag = if scaled { " (scaled)" } else { "" };
        push(
            &format!("cross attention{tag}"),
            check(&[x.clone(), y.clone()], |g, v| {
                let a = cross_attention(g, v[0], v[1], scaled).unwrap();
                let s = g.sum(a.a_to_b);
                let t = g.mul(a.b_to_a, a.b_to_a).unwrap();
                let t = g.sum(t);
                g.add(s, t).unwrap()
            }),
        );
        push(
            &format!("reconstruction distance{tag}"),
            check(&[x.clone(), y.clone()], |g, v| {
                reconstruction_distance(g, v[0], v[1], scaled).unwrap()
            }),
        );
    }
    // A negative close to the anchor keeps the hinge active.
    let noise = random(&[3, 4], 14);
    let n = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, e)| a + 0.01 * e)
        .collect();
    let n = Tensor::new(vec![3, 4], n).unwrap();
    let triplet = |g: &mut Graph, v: &[Var]| {
        let p = reconstruction_distance(g, v[0], v[1], false).unwrap();
        let q = reconstruction_distance(g, v[0], v[2], false).unwrap();
        triplet_loss(g, p, q).unwrap()
    };
    let inputs = [x, y, n];
    assert!(
        scalar_of(&inputs, &triplet) > 1e-3,
        "triplet hinge inactive"
    );
    push("triplet loss", check(&inputs, triplet));

    let x = random(&[4, 3], 15);
    let y = random(&[3, 3], 16);
    let plan = plan_for(&x, &y);
    push(
        "transport loss",
        check(&[x, y], |g, v| fixed_plan_loss(g, &plan, v[0], v[1])),
    );
    out
}

struct TinyModel {
    config: EncoderConfig,
    params: ModelParams,
    docs: Vec<Document>,
    pool: PhrasePool,
}

/// layers 2, dim 16, heads 2, with parameters moved off the small init so
/// gradients are not vanishingly small.
fn tiny_model() -> TinyModel {
    let lines = [
        "the battery life is great",
        "screen protector and battery life",
        "great screen",
        "the screen protector is bad and the battery is great",
    ];
    let vocab = Vocab::from_lines(lines, 1).unwrap();
    let (pool, _) = PhrasePool::from_entries(
        [("battery life", 0.9), ("screen protector", 0.8)],
        &vocab,
        0.5,
    );
    let mut config = EncoderConfig::new(vocab.len(), pool.len());
    config.layers = 2;
    config.dim = 16;
    config.heads = 2;
    config.ffn_dim = 32;
    config.max_seq_len = 16;
    let mut params = ModelParams::init(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in params.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let docs = lines.iter().map(|l| tokenize(l, &vocab, 16)).collect();
    TinyModel {
        config,
        params,
        docs,
        pool,
    }
}

/// Word loss plus phrase loss on fixed masked batches of unequal lengths.
fn model_loss(m: &TinyModel, params: &ModelParams, g: &mut Graph) -> (Var, Vec<Var>) {
    let bound = params.bind(g);
    let docs: Vec<&Document> = m.docs.iter().collect();
    let mut total = None;
    for (mode, seed) in [(Mode::Word, 21), (Mode::Phrase, 22)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = mask_batch(&docs, mode, &m.pool, m.config.vocab_size, &mut rng);
        let hidden = forward(g, &bound, &m.config, &batch.input_ids, &batch.pad_mask()).unwrap();
        let l = match mode {
            Mode::Word => word_loss(g, &batch, &hidden, &bound).unwrap(),
            Mode::Phrase => {
                let p = phrase_loss(g, &batch, &hidden, &bound).unwrap();
                assert!(p.phrase.is_some(), "phrase term must be exercised");
                p.total
            }
        };
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    (total.unwrap(), bound.vars)
}

pub struct ModelCheck {
    pub worst: f64,
    /// Parameter entry with the worst error.
    pub at: String,
    pub checked: usize,
}

/// Checks every scalar parameter of the tiny model.
pub fn full_model_check() -> ModelCheck {
    let m = tiny_model();
    let mut g = Graph::new();
    let (loss, vars) = model_loss(&m, &m.params, &mut g);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(m.params.store.iter())
        .map(|(&v, (_, t))| g.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |p: &ModelParams| {
        let mut g = Graph::new();
        let (l, _) = model_loss(&m, p, &mut g);
        g.value(l).item()
    };
    let mut probe = m.params.clone();
    let mut out = ModelCheck {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    let names: Vec<String> = m.params.store.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for j in 0..probe.store.get(i).len() {
            let x = probe.store.get(i).data()[j];
            probe.store.get_mut(i).data_mut()[j] = x + STEP;
            let up = eval(&probe);
            probe.store.get_mut(i).data_mut()[j] = x - STEP;
            let down = eval(&probe);
            probe.store.get_mut(i).data_mut()[j] = x;
            let err = rel_err(analytic[i][j], (up - down) / (2.0 * STEP));
            if err > out.worst {
                out.worst = err;
                out.at = format!("{name}[{j}]");
            }
            out.checked += 1;
        }
    }
    out
}
