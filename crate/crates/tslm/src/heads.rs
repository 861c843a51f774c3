//! Output pathways: greedy text decoding through the unembedding, and
//! fixed-length regression heads with smallest-sufficient-length selection
//! and truncation.

use crate::backbone::{TokenId, WeightResolver, EOS};
use crate::dataset::{denormalize, NormStats};
use crate::numerics::{Binder, NodeId, Tape};

/// Default regression-head output lengths. 720 covers the longest horizon
/// any task requires.
pub const DEFAULT_HEAD_LENGTHS: [usize; 9] = [8, 16, 32, 64, 96, 128, 256, 512, 720];

#[derive(Debug, thiserror::Error)]
pub enum HeadsError {
    #[error("required length {required} exceeds the largest head ({max})")]
    LengthUnsupported { required: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, HeadsError>;

/// The text head: parameter name of the `[d_llm x vocab]` unembedding.
#[derive(Debug, Clone)]
pub struct TextHead {
    pub unembed_name: String,
}

impl Default for TextHead {
    fn default() -> Self {
        Self { unembed_name: "heads.text.unembed".into() }
    }
}

/// One fixed-output-length affine head over the flattened, zero-padded
/// series-position states.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub out_length: usize,
    pub weights_name: String,
    pub bias_name: String,
}

/// The predefined ladder of regression heads, ascending by output length.
#[derive(Debug, Clone)]
pub struct HeadBank {
    heads: Vec<RegressionHead>,
}

impl HeadBank {
    /// Builds a bank from an ascending ladder of output lengths.
    pub fn new(lengths: &[usize]) -> Self {
        assert!(!lengths.is_empty(), "head ladder must be non-empty");
        assert!(lengths.windows(2).all(|w| w[0] < w[1]), "head ladder must be strictly increasing");
        let heads = lengths
            .iter()
            .map(|&out_length| RegressionHead {
                out_length,
                weights_name: format!("heads.reg{out_length}.weight"),
                bias_name: format!("heads.reg{out_length}.bias"),
            })
            .collect();
        Self { heads }
    }

    pub fn heads(&self) -> &[RegressionHead] {
        &self.heads
    }

    pub fn max_length(&self) -> usize {
        self.heads.last().map_or(0, |h| h.out_length)
    }
}

/// Selects the smallest head with `out_length >= required_length`, so the
/// output is truncated and never padded.
pub fn select_head(bank: &HeadBank, required_length: usize) -> Result<&RegressionHead> {
    assert!(required_length >= 1, "required length must be positive");
    bank.heads
        .iter()
        .find(|h| h.out_length >= required_length)
        .ok_or(HeadsError::LengthUnsupported { required: required_length, max: bank.max_length() })
}

/// Differentiable regression readout: takes the series-span rows of the
/// backbone output, zero-pads them to `t_cap` rows, flattens, applies the
/// head's affine map, and truncates to `required_length`. The returned node
/// is on the normalised scale.
pub fn predict_series_graph(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    resolver: &dyn WeightResolver,
    llm_out: NodeId,
    series_span: (usize, usize),
    head: &RegressionHead,
    required_length: usize,
    t_cap: usize,
) -> Result<NodeId> {
    assert!(required_length >= 1 && required_length <= head.out_length);
    let d = tape.value(llm_out).cols();
    let rows = tape.slice_rows(llm_out, series_span.0, series_span.1)?;
    let padded = tape.pad_rows_to(rows, t_cap)?;
    let flat = tape.reshape(padded, vec![t_cap * d, 1])?;
    let w = resolver.weight(tape, binder, &head.weights_name)?;
    let out = tape.matmul(w, flat)?;
    let out = tape.reshape(out, vec![head.out_length])?;
    let bias = binder.bind(tape, &head.bias_name)?;
    let out = tape.add(out, bias)?;
    if required_length == head.out_length {
        return Ok(out);
    }
    let col = tape.reshape(out, vec![head.out_length, 1])?;
    let cut = tape.slice_rows(col, 0, required_length)?;
    Ok(tape.reshape(cut, vec![required_length])?)
}

/// Regression readout on the original data scale: the normalised prediction
/// of [`predict_series_graph`], denormalised with the instance's stats.
#[allow(clippy::too_many_arguments)]
pub fn predict_series(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    resolver: &dyn WeightResolver,
    llm_out: NodeId,
    series_span: (usize, usize),
    head: &RegressionHead,
    required_length: usize,
    t_cap: usize,
    norm_stats: NormStats,
) -> Result<Vec<f64>> {
    let node = predict_series_graph(
        tape,
        binder,
        resolver,
        llm_out,
        series_span,
        head,
        required_length,
        t_cap,
    )?;
    Ok(denormalize(tape.value(node).data(), norm_stats))
}

/// Greedy autoregressive decoding. `step` maps the tokens generated so far
/// to the next-token distribution; decoding stops at EOS or after `max_new`
/// tokens. Ties resolve to the lowest token id, so decoding is
/// deterministic.
pub fn decode_text<F, E>(mut step: F, max_new: usize) -> std::result::Result<String, E>
where
    F: FnMut(&[TokenId]) -> std::result::Result<Vec<f64>, E>,
{
    assert!(max_new >= 1);
    let mut generated: Vec<TokenId> = Vec::new();
    for _ in 0..max_new {
        let dist = step(&generated)?;
        let next = argmax(&dist);
        if next == EOS {
            break;
        }
        generated.push(next);
    }
    Ok(crate::backbone::Tokenizer.decode_lossy(&generated))
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in dist.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Per-channel generation routing: when the target has the same channel
/// count as a multivariate input, each channel is predicted independently
/// (shared weights); a single-channel target over a multivariate input runs
/// one pass over the flattened signal.
pub fn predict_multichannel(
    model: &crate::model::Model,
    instance: &crate::dataset::TaskInstance,
) -> crate::model::ModelResult<crate::dataset::TimeSeries> {
    crate::model::predict_series_target(model, instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DirectWeights;
    use crate::numerics::{ParamSet, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_head_examples() {
        let bank = HeadBank::new(&DEFAULT_HEAD_LENGTHS);
        assert_eq!(select_head(&bank, 96).unwrap().out_length, 96);
        assert_eq!(select_head(&bank, 20).unwrap().out_length, 32);
        assert!(matches!(
            select_head(&bank, 721),
            Err(HeadsError::LengthUnsupported { required: 721, .. })
        ));
    }

    #[test]
    fn select_head_is_monotone() {
        let bank = HeadBank::new(&DEFAULT_HEAD_LENGTHS);
        let mut prev = 0;
        for required in 1..=720 {
            let h = select_head(&bank, required).unwrap().out_length;
            assert!(h >= required);
            assert!(h >= prev);
            prev = h;
        }
    }

    fn head_params(out_len: usize, t_cap: usize, d: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = t_cap * d;
        params.insert(
            format!("heads.reg{out_len}.weight"),
            Tensor::new(vec![out_len, k], (0..out_len * k).map(|_| rng.random_range(-0.1..0.1)).collect())
                .unwrap(),
            true,
        );
        params.insert(
            format!("heads.reg{out_len}.bias"),
            Tensor::vector((0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect()),
            true,
        );
        params
    }

    fn head(out_len: usize) -> RegressionHead {
        RegressionHead {
            out_length: out_len,
            weights_name: format!("heads.reg{out_len}.weight"),
            bias_name: format!("heads.reg{out_len}.bias"),
        }
    }

    #[test]
    fn zero_weights_yield_denormalized_bias() {
        let t_cap = 8;
        let d = 4;
        let mut params = head_params(8, t_cap, d, 3);
        params.get_mut("heads.reg8.weight").unwrap().tensor = Tensor::zeros(vec![8, t_cap * d]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let llm_out = tape.constant(Tensor::new(vec![6, d], vec![0.5; 24]).unwrap());
        let stats = NormStats { mean: 10.0, std: 2.0 };
        let out = predict_series(
            &mut tape,
            &mut binder,
            &DirectWeights,
            llm_out,
            (0, 6),
            &head(8),
            5,
            t_cap,
            stats,
        )
        .unwrap();
        let bias = &binder.params().get("heads.reg8.bias").unwrap().tensor;
        assert_eq!(out.len(), 5);
        for (i, v) in out.iter().enumerate() {
            let expected = bias.data()[i] * stats.std + stats.mean;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_matches_full_output_prefix() {
        let t_cap = 10;
        let d = 3;
        let params = head_params(16, t_cap, d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states =
            Tensor::new(vec![7, d], (0..21).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let run = |required: usize| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let llm_out = tape.constant(states.clone());
            let node = predict_series_graph(
                &mut tape,
                &mut binder,
                &DirectWeights,
                llm_out,
                (0, 7),
                &head(16),
                required,
                t_cap,
            )
            .unwrap();
            tape.value(node).data().to_vec()
        };
        let full = run(16);
        let cut = run(11);
        assert_eq!(cut.len(), 11);
        assert_eq!(&full[..11], &cut[..], "truncation must equal the full head's prefix bit-exactly");
    }

    #[test]
    fn pad_rows_make_fixed_input_width() {
        // t_enc = 5 with t_cap = 12: positions 5.. are zero, so only the
        // first 5 rows of weights influence the output.
        let t_cap = 12;
        let d = 2;
        let params = head_params(8, t_cap, d, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = Tensor::new(vec![5, d], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let out_a = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let llm_out = tape.constant(states.clone());
            let node = predict_series_graph(
                &mut tape, &mut binder, &DirectWeights, llm_out, (0, 5), &head(8), 8, t_cap,
            )
            .unwrap();
            tape.value(node).data().to_vec()
        };

        // Zeroing weight columns for padded positions changes nothing.
        let mut params2 = params.clone();
        {
            let w = &mut params2.get_mut("heads.reg8.weight").unwrap().tensor;
            let k = t_cap * d;
            for r in 0..8 {
                for c in 5 * d..k {
                    w.data_mut()[r * k + c] = 0.0;
                }
            }
        }
        let out_b = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params2);
            let llm_out = tape.constant(states);
            let node = predict_series_graph(
                &mut tape, &mut binder, &DirectWeights, llm_out, (0, 5), &head(8), 8, t_cap,
            )
            .unwrap();
            tape.value(node).data().to_vec()
        };
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn predict_series_gradient_check() {
        use crate::numerics::{grad_check, GradCheckConfig};
        let t_cap = 9;
        let d = 4;
        let params = head_params(8, t_cap, d, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let states = Tensor::new(vec![6, d], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            &params,
            move |tape, binder| {
                let llm_out = tape.constant(states.clone());
                let pred = predict_series_graph(
                    tape, binder, &DirectWeights, llm_out, (0, 6), &head(8), 5, t_cap,
                )
                .map_err(|e| match e {
                    HeadsError::Numerics(n) => n,
                    other => crate::numerics::NumericsError::ShapeMismatch {
                        op: "predict_series",
                        detail: other.to_string(),
                    },
                })?;
                let t = tape.constant(Tensor::vector(target.clone()));
                let diff = tape.sub(pred, t)?;
                let sq = tape.mul(diff, diff)?;
                let sum = tape.sum_all(sq);
                Ok(tape.scale(sum, 1.0 / 5.0))
            },
            &GradCheckConfig { h: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{:?}", report);
    }

    #[test]
    fn decode_text_immediate_eos_is_empty() {
        let out = decode_text::<_, std::convert::Infallible>(
            |_| {
                let mut dist = vec![0.0; crate::backbone::VOCAB_SIZE];
                dist[EOS] = 1.0;
                Ok(dist)
            },
            16,
        )
        .unwrap();
        assert_eq!(out, "");
    }

    #[test]
    fn decode_text_deterministic() {
        let step = |gen: &[TokenId]| -> std::result::Result<Vec<f64>, std::convert::Infallible> {
            let mut dist = vec![0.0; crate::backbone::VOCAB_SIZE];
            let next = match gen.len() {
                0 => b'h' as usize,
                1 => b'i' as usize,
                _ => EOS,
            };
            dist[next] = 1.0;
            Ok(dist)
        };
        let a = decode_text(step, 8).unwrap();
        let b = decode_text(step, 8).unwrap();
        assert_eq!(a, "hi");
        assert_eq!(a, b);
    }

    #[test]
    fn decode_text_respects_max_new() {
        let out = decode_text::<_, std::convert::Infallible>(
            |_| {
                let mut dist = vec![0.0; crate::backbone::VOCAB_SIZE];
                dist[b'x' as usize] = 1.0;
                Ok(dist)
            },
            3,
        )
        .unwrap();
        assert_eq!(out, "xxx");
    }
}
