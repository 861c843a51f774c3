//! Weight-decomposed low-rank adaptation.
//!
//! Each wrapped weight `W0` (frozen) is replaced by
//! `W' = m (*) (W0 + (alpha/r) B A) / norm(W0 + (alpha/r) B A)`
//! where the norm runs over each output unit's fan-in, `m` holds one
//! magnitude per output unit, `A` is `[r x in]`, and `B` is `[out x r]`,
//! initialised to zero so `W' == W0` exactly at wrap time.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Binder, NodeId, NumericsError, ParamSet, Tape, Tensor};

/// How a stored matrix maps to layer coordinates: `true` when stored rows
/// are output units (`[out x in]` storage), `false` for `[in x out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub out_is_rows: bool,
}

/// Registry of wrapped weight names.
#[derive(Debug, Clone, Default)]
pub struct AdapterMap {
    specs: BTreeMap<String, AdapterSpec>,
}

impl AdapterMap {
    pub fn is_wrapped(&self, name: &str) -> bool {
        self.specs.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdapterSpec)> {
        self.specs.iter()
    }

    /// Composes the effective weight for `name` on the tape; unwrapped
    /// names bind directly.
    pub fn resolve(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        name: &str,
    ) -> crate::numerics::Result<NodeId> {
        let Some(spec) = self.specs.get(name) else {
            return binder.bind(tape, name);
        };
        let base = binder.bind(tape, name)?;
        let a = binder.bind(tape, &format!("{name}.dora_a"))?;
        let b = binder.bind(tape, &format!("{name}.dora_b"))?;
        let m = binder.bind(tape, &format!("{name}.dora_m"))?;

        let base_layer = if spec.out_is_rows { base } else { tape.transpose(base)? };
        let delta = tape.matmul(b, a)?;
        let delta = tape.scale(delta, spec.alpha / spec.rank as f64);
        let sum = tape.add(base_layer, delta)?;
        let norms = tape.row_l2norm(sum)?;
        let direction = tape.div_rows(sum, norms)?;
        let composed = tape.scale_rows(direction, m)?;
        if spec.out_is_rows {
            Ok(composed)
        } else {
            tape.transpose(composed)
        }
    }
}

/// Wraps the named 2-D weights with rank-`r` adapters: the base tensors are
/// frozen and `A`, `B`, and the per-output magnitudes become the trainable
/// surface. At initialisation `B = 0` and the magnitudes equal the base's
/// per-output norms, so composed weights reproduce the base exactly.
pub fn dora_wrap(
    params: &mut ParamSet,
    adapters: &mut AdapterMap,
    targets: &[(String, bool)],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> crate::numerics::Result<()> {
    assert!(rank >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, out_is_rows) in targets {
        let entry = params.get(name)?;
        let t = &entry.tensor;
        if t.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "dora_wrap",
                detail: format!("`{name}` has rank {}, expected a matrix", t.rank()),
            });
        }
        let (out, inp) = if *out_is_rows { (t.rows(), t.cols()) } else { (t.cols(), t.rows()) };

        let mut magnitudes = vec![0.0; out];
        for o in 0..out {
            let mut sq = 0.0;
            for i in 0..inp {
                let v = if *out_is_rows { t.at2(o, i) } else { t.at2(i, o) };
                sq += v * v;
            }
            magnitudes[o] = sq.sqrt();
        }

        let bound = 1.0 / (inp as f64).sqrt();
        let a = Tensor::new(
            vec![rank, inp],
            (0..rank * inp).map(|_| rng.random_range(-bound..bound)).collect(),
        )
        .expect("consistent shape");
        let b = Tensor::zeros(vec![out, rank]);

        params.set_trainable(name, false)?;
        params.insert(format!("{name}.dora_a"), a, true);
        params.insert(format!("{name}.dora_b"), b, true);
        params.insert(format!("{name}.dora_m"), Tensor::vector(magnitudes), true);
        adapters.specs.insert(name.clone(), AdapterSpec { rank, alpha, out_is_rows: *out_is_rows });
    }
    Ok(())
}

/// Trainable element count introduced by wrapping: `r*in + out*r + out`
/// per layer.
pub fn adapter_trainable_count(params: &ParamSet, adapters: &AdapterMap) -> usize {
    adapters
        .specs
        .iter()
        .map(|(name, spec)| {
            let t = &params.get(name).expect("wrapped base exists").tensor;
            let (out, inp) =
                if spec.out_is_rows { (t.rows(), t.cols()) } else { (t.cols(), t.rows()) };
            spec.rank * inp + out * spec.rank + out
        })
        .sum()
}
