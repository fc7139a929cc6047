//! Cross-attention alignment baseline: each side is rebuilt as an attention
//! average of the other, and related pairs are pulled together with a
//! margin loss on the rebuild error.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub const TRIPLET_MARGIN: f64 = 1.0;

/// `a_to_b` is `n x m` (rows over `a`, softmax over `b`); `b_to_a` is `m x n`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionAlignment {
    pub a_to_b: Var,
    pub b_to_a: Var,
}

/// Attention in both directions from raw dot products; `scaled` divides the
/// scores by the square root of the embedding width.
pub fn cross_attention(g: &mut Graph, a: Var, b: Var, scaled: bool) -> Result<AttentionAlignment> {
    let bt = g.transpose(b)?;
    let mut scores = g.matmul(a, bt)?;
    if scaled {
        let dim = g.shape(a)[1] as f64;
        scores = g.scale(scores, 1.0 / dim.sqrt());
    }
    let a_to_b = g.softmax(scores);
    let st = g.transpose(scores)?;
    let b_to_a = g.softmax(st);
    Ok(AttentionAlignment { a_to_b, b_to_a })
}

/// `(a_rec, b_rec)`: every row of `a` rebuilt from `b` and vice versa.
pub fn reconstruct(
    g: &mut Graph,
    align: &AttentionAlignment,
    a: Var,
    b: Var,
) -> Result<(Var, Var)> {
    Ok((g.matmul(align.a_to_b, b)?, g.matmul(align.b_to_a, a)?))
}

fn squared_error(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Total squared rebuild error of both sides.
pub fn reconstruction_distance(g: &mut Graph, a: Var, b: Var, scaled: bool) -> Result<Var> {
    let align = cross_attention(g, a, b, scaled)?;
    let (ar, br) = reconstruct(g, &align, a, b)?;
    let ea = squared_error(g, a, ar)?;
    let eb = squared_error(g, b, br)?;
    g.add(ea, eb)
}

/// `max(0, margin + d(a, b) - d(a, b_neg))`. Inactive hinges yield a constant
/// zero, so no gradient flows.
pub fn triplet_loss(g: &mut Graph, positive: Var, negative: Var) -> Result<Var> {
    let value = TRIPLET_MARGIN + g.value(positive).item() - g.value(negative).item();
    if value <= 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let diff = g.sub(positive, negative)?;
    let margin = g.constant(Tensor::scalar(TRIPLET_MARGIN));
    g.add(diff, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap()
    }

    fn loop_distance(a: &Tensor, b: &Tensor) -> f64 {
        let (n, m, d) = (a.rows(), b.rows(), a.last_dim());
        let dotp = |i: usize, j: usize| (0..d).map(|k| a.at(i, k) * b.at(j, k)).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let w: Vec<f64> = (0..m).map(|j| dotp(i, j).exp()).collect();
            let z: f64 = w.iter().sum();
            for k in 0..d {
                let rec: f64 = (0..m).map(|j| w[j] / z * b.at(j, k)).sum();
                total += (a.at(i, k) - rec).powi(2);
            }
        }
        for j in 0..m {
            let w: Vec<f64> = (0..n).map(|i| dotp(i, j).exp()).collect();
            let z: f64 = w.iter().sum();
            for k in 0..d {
                let rec: f64 = (0..n).map(|i| w[i] / z * a.at(i, k)).sum();
                total += (b.at(j, k) - rec).powi(2);
            }
        }
        total
    }

    #[test]
    fn constant_scores_give_uniform_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::filled(&[4, 2], 1.0));
        let al = cross_attention(&mut g, a, b, false).unwrap();
        assert!(g
            .value(al.a_to_b)
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(g
            .value(al.b_to_a)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_column_reconstruction_is_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let a = g.constant(random(3, 4, &mut rng));
        let bt = random(1, 4, &mut rng);
        let b = g.constant(bt.clone());
        let al = cross_attention(&mut g, a, b, false).unwrap();
        let (ar, _) = reconstruct(&mut g, &al, a, b).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(ar).row(i), bt.row(0));
        }
    }

    #[test]
    fn distance_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
        let d = reconstruction_distance(&mut g, a, a, false).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let d = reconstruction_distance(&mut g, a, b, false).unwrap();
        assert!((g.value(d).item() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn distance_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
            let (at, bt) = (random(n, 3, &mut rng), random(m, 3, &mut rng));
            let mut g = Graph::new();
            let (a, b) = (g.constant(at.clone()), g.constant(bt.clone()));
            let d = reconstruction_distance(&mut g, a, b, false).unwrap();
            assert!((g.value(d).item() - loop_distance(&at, &bt)).abs() < 1e-10);
        }
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(0.2));
        let n = g.param(&Tensor::scalar(0.5));
        let l = triplet_loss(&mut g, p, n).unwrap();
        assert!((g.value(l).item() - 0.7).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(0.2));
        let n = g.param(&Tensor::scalar(1.2));
        let l = triplet_loss(&mut g, p, n).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(p).is_none_or(|v| v == [0.0]));
    }

    proptest::proptest! {
        #[test]
        fn rows_stochastic_and_convex(seed in 0u64..1000, n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (at, bt) = (random(n, 3, &mut rng), random(m, 3, &mut rng));
            let mut g = Graph::new();
            let (a, b) = (g.constant(at.clone()), g.constant(bt.clone()));
            let al = cross_attention(&mut g, a, b, false).unwrap();
            for v in [al.a_to_b, al.b_to_a] {
                let t = g.value(v);
                for r in 0..t.rows() {
                    proptest::prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    proptest::prop_assert!(t.row(r).iter().all(|&x| x > 0.0 && x < 1.0 || t.last_dim() == 1));
                }
            }
            let (ar, _) = reconstruct(&mut g, &al, a, b).unwrap();
            let max_norm = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
            proptest::prop_assert!(max_norm(g.value(ar)) <= max_norm(&bt) + 1e-12);
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000, n in 1usize..5, m in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (at, bt) = (random(n, 3, &mut rng), random(m, 3, &mut rng));
            let mut rows: Vec<Vec<f64>> = (0..m).map(|r| bt.row(r).to_vec()).collect();
            rows.rotate_left(1);
            let perm = Tensor::from_rows(&rows).unwrap();
            let mut g = Graph::new();
            let a = g.constant(at);
            let (b, bp) = (g.constant(bt), g.constant(perm));
            let d1 = reconstruction_distance(&mut g, a, b, false).unwrap();
            let d2 = reconstruction_distance(&mut g, a, bp, false).unwrap();
            proptest::prop_assert!((g.value(d1).item() - g.value(d2).item()).abs() < 1e-10);
        }

        #[test]
        fn triplet_non_negative(p in -3.0f64..3.0, n in -3.0f64..3.0) {
            let mut g = Graph::new();
            let (pv, nv) = (g.constant(Tensor::scalar(p)), g.constant(Tensor::scalar(n)));
            let lv = triplet_loss(&mut g, pv, nv).unwrap();
            let l = g.value(lv).item();
            proptest::prop_assert!(l >= 0.0);
            proptest::prop_assert_eq!(l == 0.0, n >= p + TRIPLET_MARGIN);
        }
    }
}
