//! Aligning two documents with a trained encoder, either by optimal transport
//! or by cross-attention, plus the triplet check used by the attention
//! baseline.

use crate::attention_align::{cross_attention, reconstruction_distance, triplet_loss};
use crate::corpus::Document;
use crate::encoder::embed_sequences;
use crate::error::Result;
use crate::ot::{alignment_matrix, cost_matrix, ipot, IpotConfig, TransportPlan};
use crate::tensor::{Graph, Tensor};
use crate::train::{content_positions, Model};

/// Row-normalised alignment between the content tokens of two documents.
#[derive(Clone, Debug)]
pub struct DocAlignment {
    /// Token positions in the first document, one per matrix row.
    pub rows: Vec<usize>,
    /// Token positions in the second document, one per matrix column.
    pub cols: Vec<usize>,
    pub matrix: Tensor,
    /// Present for the transport variant.
    pub plan: Option<TransportPlan>,
}

impl DocAlignment {
    /// Mass that row position `from` places on column position `to`.
    pub fn mass(&self, from: usize, to: usize) -> Option<f64> {
        let r = self.rows.iter().position(|&p| p == from)?;
        let c = self.cols.iter().position(|&p| p == to)?;
        Some(self.matrix.at(r, c))
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Content-token embeddings of each document, or `None` if any has no content.
fn content_embeddings(
    model: &Model,
    docs: &[&Document],
) -> Result<Option<Vec<(Vec<usize>, Tensor)>>> {
    let seqs: Vec<&[u32]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    let embedded = embed_sequences(model.params, model.config, &seqs)?;
    let mut out = Vec::with_capacity(docs.len());
    for (doc, emb) in docs.iter().zip(&embedded) {
        let pos = content_positions(&doc.tokens);
        if pos.is_empty() {
            return Ok(None);
        }
        let rows = select_rows(emb, &pos)?;
        out.push((pos, rows));
    }
    Ok(Some(out))
}

/// Transport-plan alignment; `None` when either side has no content tokens.
pub fn align_ot(
    model: &Model,
    a: &Document,
    b: &Document,
    config: &IpotConfig,
) -> Result<Option<DocAlignment>> {
    let Some(mut e) = content_embeddings(model, &[a, b])? else {
        return Ok(None);
    };
    let (cols, y) = e.pop().expect("two documents");
    let (rows, x) = e.pop().expect("two documents");
    let cost = cost_matrix(&x, &y)?;
    let plan = ipot(&cost.values, config)?;
    Ok(Some(DocAlignment {
        rows,
        cols,
        matrix: alignment_matrix(&plan.values)?,
        plan: Some(plan),
    }))
}

/// Attention weights from `a` over `b`; rows already sum to one.
pub fn align_attention(
    model: &Model,
    a: &Document,
    b: &Document,
    scaled: bool,
) -> Result<Option<DocAlignment>> {
    let Some(mut e) = content_embeddings(model, &[a, b])? else {
        return Ok(None);
    };
    let (cols, y) = e.pop().expect("two documents");
    let (rows, x) = e.pop().expect("two documents");
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x), g.constant(y));
    let att = cross_attention(&mut g, xv, yv, scaled)?;
    let matrix = g.value(att.a_to_b).clone();
    Ok(Some(DocAlignment {
        rows,
        cols,
        matrix,
        plan: None,
    }))
}

/// Margin loss of `(anchor, positive, negative)` under the current model.
pub fn triplet_value(
    model: &Model,
    anchor: &Document,
    positive: &Document,
    negative: &Document,
    scaled: bool,
) -> Result<Option<f64>> {
    let Some(e) = content_embeddings(model, &[anchor, positive, negative])? else {
        return Ok(None);
    };
    let mut g = Graph::new();
    let [a, p, n] = [0, 1, 2].map(|i| g.constant(e[i].1.clone()));
    let pos = reconstruction_distance(&mut g, a, p, scaled)?;
    let neg = reconstruction_distance(&mut g, a, n, scaled)?;
    let l = triplet_loss(&mut g, pos, neg)?;
    Ok(Some(g.value(l).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::encoder::{EncoderConfig, ModelParams};

    fn model() -> (Vocab, EncoderConfig, ModelParams) {
        let v = Vocab::from_lines(["the phone is cheap and the battery is fine"], 1).unwrap();
        let mut c = EncoderConfig::new(v.len(), 1);
        c.dim = 8;
        c.ffn_dim = 8;
        let p = ModelParams::init(&c, 1).unwrap();
        (v, c, p)
    }

    #[test]
    fn ot_alignment_rows_are_distributions() {
        let (v, c, p) = model();
        let m = Model {
            params: &p,
            config: &c,
        };
        let a = Document::new(v.encode("the phone is cheap"));
        let b = Document::new(v.encode("the battery is fine and cheap"));
        let al = align_ot(&m, &a, &b, &IpotConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(al.matrix.shape(), &[4, 6]);
        for r in 0..4 {
            assert!((al.matrix.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(al.mass(3, 5).is_some());
        assert!(al.mass(9, 0).is_none());
        let at = align_attention(&m, &a, &b, false).unwrap().unwrap();
        assert_eq!(at.matrix.shape(), &[4, 6]);
        assert!(at.plan.is_none());
    }

    #[test]
    fn empty_side_gives_none() {
        let (v, c, p) = model();
        let m = Model {
            params: &p,
            config: &c,
        };
        let a = Document::new(v.encode("the phone"));
        let empty = Document::new(vec![crate::corpus::CLS]);
        assert!(align_ot(&m, &a, &empty, &IpotConfig::default())
            .unwrap()
            .is_none());
        assert!(triplet_value(&m, &a, &a, &empty, false).unwrap().is_none());
    }

    #[test]
    fn identical_positive_with_distant_negative_meets_margin() {
        let (v, c, p) = model();
        let m = Model {
            params: &p,
            config: &c,
        };
        let a = Document::new(v.encode("the phone is cheap"));
        let n = Document::new(v.encode("battery fine and and and"));
        let t = triplet_value(&m, &a, &a, &n, false).unwrap().unwrap();
        assert!(t >= 0.0);
        assert!(t <= 1.0 + 1e-12);
    }
}
