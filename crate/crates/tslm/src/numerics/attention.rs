//! Multi-head attention built from tape primitives.

use super::tape::{NodeId, Tape};
use super::{NumericsError, Result};

/// Projection nodes for one attention block. Query input width may differ
/// from key/value input width; all heads share one output projection.
#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    pub wq: NodeId,
    pub bq: NodeId,
    /// No key bias: a shared key offset shifts every score in a row
    /// equally and softmax cancels it.
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Multi-head cross-attention: queries from `q_in` `[L_q x d_q]`, keys and
/// values from `kv_in` `[L_kv x d_kv]`. Per head, scores are scaled by
/// `1/sqrt(d_head)` and softmaxed over the key axis; no mask. Returns the
/// output node and one `[L_q x L_kv]` attention-weight node per head.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    proj: &AttnProj,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    attention(tape, q_in, kv_in, proj, heads, false)
}

/// Self-attention with a causal mask: position `i` attends to `j <= i`.
pub fn causal_self_attention(
    tape: &mut Tape,
    x: NodeId,
    proj: &AttnProj,
    heads: usize,
) -> Result<NodeId> {
    attention(tape, x, x, proj, heads, true).map(|(out, _)| out)
}

fn attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    proj: &AttnProj,
    heads: usize,
    causal: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d_att = tape.value(proj.wq).cols();
    if heads == 0 || d_att % heads != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("{} heads do not divide attention width {}", heads, d_att),
        });
    }
    if tape.value(proj.wk).cols() != d_att || tape.value(proj.wv).cols() != d_att {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: "inconsistent projection widths".into(),
        });
    }
    let d_head = d_att / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = tape.matmul(q_in, proj.wq)?;
    let q = tape.add_row_vector(q, proj.bq)?;
    let k = tape.matmul(kv_in, proj.wk)?;
    let v = tape.matmul(kv_in, proj.wv)?;
    let v = tape.add_row_vector(v, proj.bv)?;

    let mut ctx_heads = Vec::with_capacity(heads);
    let mut attn_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = if causal { tape.causal_mask(scores)? } else { scores };
        let attn = tape.softmax(scores, 1)?;
        let ctx = tape.matmul(attn, vh)?;
        ctx_heads.push(ctx);
        attn_heads.push(attn);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let out = tape.matmul(ctx, proj.wo)?;
    let out = tape.add_row_vector(out, proj.bo)?;
    Ok((out, attn_heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_proj(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        d_q: usize,
        d_kv: usize,
        d_att: usize,
        d_out: usize,
    ) -> AttnProj {
        let mut mat = |r: usize, c: usize, tape: &mut Tape| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-0.5..0.5)).collect();
            tape.constant(Tensor::new(vec![r, c], data).unwrap())
        };
        let wq = mat(d_q, d_att, tape);
        let wk = mat(d_kv, d_att, tape);
        let wv = mat(d_kv, d_att, tape);
        let wo = mat(d_att, d_out, tape);
        let bq = tape.constant(Tensor::zeros(vec![d_att]));
        let bv = tape.constant(Tensor::zeros(vec![d_att]));
        let bo = tape.constant(Tensor::zeros(vec![d_out]));
        AttnProj { wq, bq, wk, wv, bv, wo, bo }
    }

    fn random_mat(tape: &mut Tape, rng: &mut ChaCha8Rng, r: usize, c: usize) -> NodeId {
        let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.constant(Tensor::new(vec![r, c], data).unwrap())
    }

    #[test]
    fn single_key_forces_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let q = random_mat(&mut tape, &mut rng, 4, 3);
        let kv = random_mat(&mut tape, &mut rng, 1, 5);
        let proj = random_proj(&mut tape, &mut rng, 3, 5, 6, 5);
        let (_, attns) = multi_head_cross_attention(&mut tape, q, kv, &proj, 2).unwrap();
        for attn in attns {
            for &w in tape.value(attn).data() {
                assert!((w - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let q = random_mat(&mut tape, &mut rng, 7, 4);
        let kv = random_mat(&mut tape, &mut rng, 9, 4);
        let proj = random_proj(&mut tape, &mut rng, 4, 4, 8, 4);
        let (_, attns) = multi_head_cross_attention(&mut tape, q, kv, &proj, 2).unwrap();
        for attn in attns {
            let t = tape.value(attn);
            for i in 0..t.rows() {
                let s: f64 = (0..t.cols()).map(|j| t.at2(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!((0..t.cols()).all(|j| t.at2(i, j) >= 0.0));
            }
        }
    }

    #[test]
    fn causal_output_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let base: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perturbed = base.clone();
        // Perturb only the last row.
        for v in &mut perturbed[4 * d..] {
            *v += 1.0;
        }

        let run = |data: &[f64]| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = tape.constant(Tensor::new(vec![5, d], data.to_vec()).unwrap());
            let proj = random_proj(&mut tape, &mut rng, d, d, d, d);
            let out = causal_self_attention(&mut tape, x, &proj, 2).unwrap();
            tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&perturbed);
        // Rows 0..4 must be bit-identical; row 4 differs.
        assert_eq!(a.data()[..4 * d], b.data()[..4 * d]);
        assert_ne!(a.data()[4 * d..], b.data()[4 * d..]);
    }

    #[test]
    fn length_one_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = random_mat(&mut tape, &mut rng, 1, 4);
        let proj = random_proj(&mut tape, &mut rng, 4, 4, 4, 4);
        let out = causal_self_attention(&mut tape, x, &proj, 2).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn rejects_bad_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = random_mat(&mut tape, &mut rng, 2, 4);
        let proj = random_proj(&mut tape, &mut rng, 4, 4, 6, 4);
        assert!(causal_self_attention(&mut tape, x, &proj, 4).is_err());
    }
}
