//! Time series encoder: Router -> Patch Expert -> Patch Reprogramming.
//!
//! The router is a deterministic rule over a power-of-two patch-size ladder:
//! it picks the smallest size `p >= T/200`, so the patch count lands in
//! `[100, 200]` for every `T >= 200` the ladder covers. Patch embeddings are
//! produced by a non-overlapping 1-D convolution and then re-expressed in
//! the backbone's hidden space by cross-attending to a prototype bank
//! projected from the vocabulary embedding table.

use crate::dataset::{flatten_input, normalize, NormStats, TimeSeries};
use crate::numerics::{
    conv1d_patch, multi_head_cross_attention, AttnProj, Binder, NodeId, Tape, Tensor,
};

/// Token-count band the router targets.
pub const MIN_TOKENS: usize = 100;
pub const MAX_TOKENS: usize = 200;

/// Largest exponent in the default patch-size ladder (`2^0 ..= 2^16`),
/// covering signals up to `200 * 2^16 = 13_107_200` samples.
pub const DEFAULT_MAX_PATCH_LOG2: u32 = 16;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("signal of length {len} exceeds the maximum {max} supported by the expert ladder")]
    SignalTooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// One routed expert: a patch size and its convolution parameter names.
#[derive(Debug, Clone)]
pub struct PatchExpert {
    pub patch_size: usize,
    /// Parameter names of the `[d_enc x patch_size]` weights and `[d_enc]` bias.
    pub weights_name: String,
    pub bias_name: String,
}

/// The expert ladder: one expert per power-of-two patch size, ascending.
#[derive(Debug, Clone)]
pub struct ExpertFamily {
    experts: Vec<PatchExpert>,
}

impl ExpertFamily {
    /// Ladder `2^0 ..= 2^max_log2` with conventional parameter names.
    pub fn new(max_log2: u32) -> Self {
        let experts = (0..=max_log2)
            .map(|k| {
                let p = 1usize << k;
                PatchExpert {
                    patch_size: p,
                    weights_name: format!("encoder.expert{p}.weight"),
                    bias_name: format!("encoder.expert{p}.bias"),
                }
            })
            .collect();
        Self { experts }
    }

    pub fn experts(&self) -> &[PatchExpert] {
        &self.experts
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.patch_size).collect()
    }

    pub fn max_patch(&self) -> usize {
        self.experts.last().map_or(1, |e| e.patch_size)
    }

    /// Longest signal the ladder can route.
    pub fn max_signal_len(&self) -> usize {
        MAX_TOKENS * self.max_patch()
    }
}

/// Deterministic routing rule over an ascending patch-size ladder: the
/// smallest size `p` with `p >= T/200`. Signals shorter than 200 samples
/// route to patch size 1 (token count = T, degenerate below 100).
pub fn route_patch_size(t: usize, ladder: &[usize]) -> std::result::Result<usize, EncoderError> {
    assert!(t >= 1, "signal must be non-empty");
    assert!(!ladder.is_empty(), "expert ladder must be non-empty");
    if t < MAX_TOKENS {
        return Ok(1);
    }
    for &p in ladder {
        if p * MAX_TOKENS >= t {
            return Ok(p);
        }
    }
    Err(EncoderError::SignalTooLong { len: t, max: MAX_TOKENS * ladder[ladder.len() - 1] })
}

/// Routes a signal length to its expert.
pub fn route(t: usize, family: &ExpertFamily) -> Result<&PatchExpert> {
    let p = route_patch_size(t, &family.patch_sizes())?;
    Ok(family
        .experts()
        .iter()
        .find(|e| e.patch_size == p)
        .expect("routed size is drawn from the ladder"))
}

/// Splits a signal into `ceil(T/patch)` rows of `patch` samples, the final
/// row zero-padded on the right.
pub fn patchify(signal: &[f64], patch: usize) -> Tensor {
    assert!(patch >= 1);
    let rows = signal.len().div_ceil(patch);
    let mut data = signal.to_vec();
    data.resize(rows * patch, 0.0);
    Tensor::new(vec![rows, patch], data).expect("padded layout is consistent")
}

/// Projection parameter names for the reprogramming block.
#[derive(Debug, Clone)]
pub struct ReprogrammingParams {
    pub vocab_proj: String,
    pub wq: String,
    pub bq: String,
    pub wk: String,
    pub wv: String,
    pub bv: String,
    pub wo: String,
    pub bo: String,
    pub final_proj: String,
    pub num_prototypes: usize,
}

impl ReprogrammingParams {
    pub fn standard(num_prototypes: usize) -> Self {
        Self {
            vocab_proj: "encoder.reprog.vocab_proj".into(),
            wq: "encoder.reprog.wq".into(),
            bq: "encoder.reprog.bq".into(),
            wk: "encoder.reprog.wk".into(),
            wv: "encoder.reprog.wv".into(),
            bv: "encoder.reprog.bv".into(),
            wo: "encoder.reprog.wo".into(),
            bo: "encoder.reprog.bo".into(),
            final_proj: "encoder.reprog.final_proj".into(),
            num_prototypes,
        }
    }
}

/// Embeds a signal (already on the tape) with one expert's convolution.
pub fn embed_patches(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    signal: NodeId,
    expert: &PatchExpert,
) -> Result<NodeId> {
    let w = binder.bind(tape, &expert.weights_name)?;
    let b = binder.bind(tape, &expert.bias_name)?;
    Ok(conv1d_patch(tape, signal, expert.patch_size, w, b)?)
}

/// Re-expresses patch embeddings in the backbone's hidden space.
///
/// The vocabulary table `[V x d_llm]` is projected to a prototype bank
/// `[num_prototypes x d_llm]`; patches attend to the prototypes (queries
/// from the patches, keys/values from the bank) and a final projection maps
/// back to `[L x d_llm]`. Returns the output node and the per-head
/// attention weights.
pub fn reprogram(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    x_patch: NodeId,
    vocab_embeddings: NodeId,
    params: &ReprogrammingParams,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let vocab_proj = binder.bind(tape, &params.vocab_proj)?;
    let prototypes = tape.matmul(vocab_proj, vocab_embeddings)?;
    let proj = AttnProj {
        wq: binder.bind(tape, &params.wq)?,
        bq: binder.bind(tape, &params.bq)?,
        wk: binder.bind(tape, &params.wk)?,
        wv: binder.bind(tape, &params.wv)?,
        bv: binder.bind(tape, &params.bv)?,
        wo: binder.bind(tape, &params.wo)?,
        bo: binder.bind(tape, &params.bo)?,
    };
    let (attended, attn) = multi_head_cross_attention(tape, x_patch, prototypes, &proj, heads)?;
    let final_proj = binder.bind(tape, &params.final_proj)?;
    let out = tape.matmul(attended, final_proj)?;
    Ok((out, attn))
}

/// Encoder output description; `x_enc` stays on the tape so downstream
/// blocks keep the computation differentiable.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSignal {
    pub x_enc: NodeId,
    pub patch_size_used: usize,
    pub t_enc: usize,
    pub norm_stats: NormStats,
}

/// Materialised encoder output for callers outside a training graph.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub x_enc: Tensor,
    pub patch_size_used: usize,
    pub t_enc: usize,
    pub norm_stats: NormStats,
}

/// Full encoder on an existing tape: normalize -> flatten -> route ->
/// embed -> reprogram.
pub fn encode_graph(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    x: &TimeSeries,
    family: &ExpertFamily,
    vocab_embeddings: NodeId,
    params: &ReprogrammingParams,
    heads: usize,
) -> Result<EncodedSignal> {
    let flat = flatten_input(x);
    encode_flat_graph(tape, binder, &flat, family, vocab_embeddings, params, heads)
}

/// As [`encode_graph`] but starting from an already-flattened signal
/// (used for per-channel generation).
pub fn encode_flat_graph(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    flat: &[f64],
    family: &ExpertFamily,
    vocab_embeddings: NodeId,
    params: &ReprogrammingParams,
    heads: usize,
) -> Result<EncodedSignal> {
    let (normalized, norm_stats) = normalize(flat);
    let expert = route(normalized.len(), family)?;
    let t_enc = normalized.len().div_ceil(expert.patch_size);
    let signal = tape.constant(Tensor::vector(normalized));
    let x_patch = embed_patches(tape, binder, signal, expert)?;
    let (x_enc, _) = reprogram(tape, binder, x_patch, vocab_embeddings, params, heads)?;
    Ok(EncodedSignal { x_enc, patch_size_used: expert.patch_size, t_enc, norm_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_ladder() -> Vec<usize> {
        (0..=DEFAULT_MAX_PATCH_LOG2).map(|k| 1usize << k).collect()
    }

    #[test]
    fn route_paper_lengths() {
        let ladder = full_ladder();
        // Smallest power of two >= 64000/200 = 320 is 512.
        assert_eq!(route_patch_size(64_000, &ladder).unwrap(), 512);
        assert_eq!(64_000usize.div_ceil(512), 125);
        // Short signals route to patch 1.
        assert_eq!(route_patch_size(150, &ladder).unwrap(), 1);
        // 10^7: smallest power of two >= 50000 is 65536; ceil(1e7/65536) = 153.
        assert_eq!(route_patch_size(10_000_000, &ladder).unwrap(), 65_536);
        assert_eq!(10_000_000usize.div_ceil(65_536), 153);
    }

    #[test]
    fn route_errors_beyond_ladder() {
        let ladder = full_ladder();
        let max = 200 * 65_536;
        assert!(route_patch_size(max, &ladder).is_ok());
        assert!(matches!(
            route_patch_size(max + 1, &ladder),
            Err(EncoderError::SignalTooLong { .. })
        ));
    }

    #[test]
    fn router_bound_on_grid_and_boundaries() {
        let ladder = full_ladder();
        let max_t = 200 * 65_536;
        let mut lengths: Vec<usize> = Vec::new();
        // Log-spaced grid over [200, max].
        let steps = 2000;
        for i in 0..=steps {
            let exp = (200f64).ln() + (max_t as f64 / 200.0).ln() * i as f64 / steps as f64;
            lengths.push(exp.exp().round() as usize);
        }
        for k in 0..=DEFAULT_MAX_PATCH_LOG2 {
            let base = 200 * (1usize << k);
            lengths.push(base);
            lengths.push(base - 1);
            if base + 1 <= max_t {
                lengths.push(base + 1);
            }
        }
        for t in lengths {
            let t = t.clamp(200, max_t);
            let p = route_patch_size(t, &ladder).unwrap();
            let tokens = t.div_ceil(p);
            assert!(
                (MIN_TOKENS..=MAX_TOKENS).contains(&tokens),
                "T={t} routed to p={p}, {tokens} tokens"
            );
        }
    }

    #[test]
    fn router_monotone_in_length() {
        let ladder = full_ladder();
        let mut prev = 0;
        for t in (1..100_000).step_by(37) {
            let p = route_patch_size(t, &ladder).unwrap();
            assert!(p >= prev, "patch size decreased at T={t}");
            prev = p;
        }
    }

    #[test]
    fn patchify_exact_and_padded() {
        let sig: Vec<f64> = (1..=6).map(f64::from).collect();
        let t = patchify(&sig, 3);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let sig: Vec<f64> = (1..=7).map(f64::from).collect();
        let t = patchify(&sig, 3);
        assert_eq!(t.shape(), &[3, 3]);
        assert_eq!(&t.data()[6..], &[7.0, 0.0, 0.0]);
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = rng.random_range(1..400usize);
            let patch = rng.random_range(1..40usize);
            let sig: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = patchify(&sig, patch);
            let recovered: Vec<f64> = m.data()[..t].to_vec();
            assert_eq!(recovered, sig);
            // Pad region is all zeros.
            assert!(m.data()[t..].iter().all(|&v| v == 0.0));
        }
    }

    fn toy_params(d_enc: usize, d_llm: usize, protos: usize, vocab: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut rand_t = |shape: Vec<usize>| {
            let numel = shape.iter().product();
            Tensor::new(shape, (0..numel).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap()
        };
        for k in 0..=8u32 {
            let p = 1usize << k;
            params.insert(format!("encoder.expert{p}.weight"), rand_t(vec![d_enc, p]), true);
            params.insert(format!("encoder.expert{p}.bias"), rand_t(vec![d_enc]), true);
        }
        params.insert("encoder.reprog.vocab_proj", rand_t(vec![protos, vocab]), true);
        params.insert("encoder.reprog.wq", rand_t(vec![d_enc, d_llm]), true);
        params.insert("encoder.reprog.bq", rand_t(vec![d_llm]), true);
        params.insert("encoder.reprog.wk", rand_t(vec![d_llm, d_llm]), true);
        params.insert("encoder.reprog.wv", rand_t(vec![d_llm, d_llm]), true);
        params.insert("encoder.reprog.bv", rand_t(vec![d_llm]), true);
        params.insert("encoder.reprog.wo", rand_t(vec![d_llm, d_llm]), true);
        params.insert("encoder.reprog.bo", rand_t(vec![d_llm]), true);
        params.insert("encoder.reprog.final_proj", rand_t(vec![d_llm, d_llm]), true);
        params.insert("embed.token", rand_t(vec![vocab, d_llm]), true);
        params
    }

    #[test]
    fn embed_patches_matches_per_patch_matmul() {
        let params = toy_params(4, 8, 5, 16, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            let t = rng.random_range(5..60usize);
            let sig: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
            let patch = 4usize;
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let signal = tape.constant(Tensor::vector(sig.clone()));
            let expert = PatchExpert {
                patch_size: patch,
                weights_name: "encoder.expert4.weight".into(),
                bias_name: "encoder.expert4.bias".into(),
            };
            let out = embed_patches(&mut tape, &mut binder, signal, &expert).unwrap();
            let out = tape.value(out);

            // Independent reference: explicit per-patch dot products.
            let w = &params.get("encoder.expert4.weight").unwrap().tensor;
            let b = &params.get("encoder.expert4.bias").unwrap().tensor;
            let rows = t.div_ceil(patch);
            for r in 0..rows {
                for d in 0..4 {
                    let mut acc = b.data()[d];
                    for j in 0..patch {
                        let idx = r * patch + j;
                        let x = if idx < t { sig[idx] } else { 0.0 };
                        acc += w.at2(d, j) * x;
                    }
                    assert!((out.at2(r, d) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn embed_patches_zero_signal_zero_bias() {
        let mut params = toy_params(4, 8, 5, 16, 1);
        params.get_mut("encoder.expert2.bias").unwrap().tensor = Tensor::zeros(vec![4]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let signal = tape.constant(Tensor::vector(vec![0.0; 10]));
        let expert = PatchExpert {
            patch_size: 2,
            weights_name: "encoder.expert2.weight".into(),
            bias_name: "encoder.expert2.bias".into(),
        };
        let out = embed_patches(&mut tape, &mut binder, signal, &expert).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reprogram_single_prototype_broadcasts() {
        let params = toy_params(4, 8, 1, 16, 9);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_patch = tape.constant(
            Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let vocab = binder.bind(&mut tape, "embed.token").unwrap();
        let rp = ReprogrammingParams::standard(1);
        let (out, attn) = reprogram(&mut tape, &mut binder, x_patch, vocab, &rp, 2).unwrap();
        let out = tape.value(out);
        // One prototype: every row is the same projected value vector.
        for r in 1..6 {
            for c in 0..8 {
                assert!((out.at2(r, c) - out.at2(0, c)).abs() < 1e-12);
            }
        }
        for a in attn {
            assert!(tape.value(a).data().iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn reprogram_attention_rows_sum_to_one() {
        let params = toy_params(4, 8, 7, 16, 21);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_patch = tape.constant(
            Tensor::new(vec![11, 4], (0..44).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let vocab = binder.bind(&mut tape, "embed.token").unwrap();
        let rp = ReprogrammingParams::standard(7);
        let (out, attn) = reprogram(&mut tape, &mut binder, x_patch, vocab, &rp, 2).unwrap();
        assert_eq!(tape.value(out).shape(), &[11, 8]);
        for a in attn {
            let t = tape.value(a);
            for i in 0..t.rows() {
                let s: f64 = (0..t.cols()).map(|j| t.at2(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_deterministic_and_in_band() {
        let params = toy_params(4, 8, 5, 16, 31);
        let family = ExpertFamily::new(6);
        let rp = ReprogrammingParams::standard(5);
        let x = TimeSeries::univariate((0..1000).map(|t| (t as f64 * 0.05).sin()).collect()).unwrap();

        let run = || {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let vocab = binder.bind(&mut tape, "embed.token").unwrap();
            let enc = encode_graph(&mut tape, &mut binder, &x, &family, vocab, &rp, 2).unwrap();
            (tape.value(enc.x_enc).clone(), enc.t_enc, enc.patch_size_used)
        };
        let (a, t_enc, p) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert!((MIN_TOKENS..=MAX_TOKENS).contains(&t_enc));
        assert_eq!(p, 8); // 1000/200 = 5 -> next power of two.
        assert_eq!(t_enc, 125);
    }

    #[test]
    fn encode_multichannel_routes_on_flattened_length() {
        let params = toy_params(4, 8, 5, 16, 33);
        let family = ExpertFamily::new(8);
        let rp = ReprogrammingParams::standard(5);
        // N=3, T'=6000 -> flattened 18000 -> p=128, t_enc=141.
        let x = TimeSeries::new(vec![vec![0.1; 6000], vec![0.2; 6000], vec![0.3; 6000]]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let vocab = binder.bind(&mut tape, "embed.token").unwrap();
        let enc = encode_graph(&mut tape, &mut binder, &x, &family, vocab, &rp, 2).unwrap();
        assert_eq!(enc.patch_size_used, 128);
        assert_eq!(enc.t_enc, 141);
    }
}
