//! Training-loop level checks: loss trends, determinism, loss-weight
//! linearity, and the encoder-only gradient check.

use tslm::config::RunConfig;
use tslm::dataset::{generate_toy_suite, ToySizes};
use tslm::model::Model;
use tslm::numerics::{grad_check, Binder, GradCheckConfig};
use tslm::training::{joint_step, Adam, TrainConfig, Trainer};

fn toy_model(seed: u64) -> Model {
    let run = RunConfig::toy(seed);
    let mut model = Model::init(run.model_config(), seed);
    model.apply_dora(run.train.dora_rank, run.train.dora_alpha, seed).unwrap();
    model
}

/// Smoke oracle: joint training is finite throughout and ends below 0.9x
/// the starting loss within 50 steps.
#[test]
fn loss_decreases_over_fifty_steps() {
    let mut model = toy_model(7);
    let suite = generate_toy_suite(7, &ToySizes::uniform(6));
    let cfg = TrainConfig { lr: 1e-2, epochs: 2, seed: 7, ..Default::default() };
    let mut trainer = Trainer::new(&mut model, &suite, cfg).unwrap();
    let mut rows = Vec::new();
    for _ in 0..50.min(trainer.total_steps()) {
        let row = trainer.step_once().unwrap();
        assert!(row.loss_u.is_finite() && row.loss_g.is_finite());
        rows.push(row);
    }
    let first: f64 = rows[..5].iter().map(|r| r.loss_u + r.loss_g).sum::<f64>() / 5.0;
    let last: f64 = rows[rows.len() - 5..].iter().map(|r| r.loss_u + r.loss_g).sum::<f64>() / 5.0;
    assert!(last < 0.9 * first, "loss did not decrease: {first} -> {last}");
}

/// Two identically-seeded runs produce bit-identical loss curves.
#[test]
fn training_is_bit_reproducible() {
    let run_once = || {
        let mut model = toy_model(11);
        let suite = generate_toy_suite(11, &ToySizes::uniform(3));
        let cfg = TrainConfig { lr: 5e-3, epochs: 1, seed: 11, ..Default::default() };
        let mut trainer = Trainer::new(&mut model, &suite, cfg).unwrap();
        let mut log = Vec::new();
        trainer.run(&mut log).unwrap();
        log.iter().map(|r| (r.loss_u.to_bits(), r.loss_g.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(run_once(), run_once());
}

/// With the series weight at zero, a joint step equals an
/// understanding-only step exactly.
#[test]
fn zero_series_weight_matches_understanding_only() {
    let suite = generate_toy_suite(13, &ToySizes::uniform(3));
    let batch_u: Vec<&tslm::dataset::TaskInstance> = suite
        .instances()
        .iter()
        .filter(|i| i.task_type.is_understanding())
        .take(6)
        .collect();
    let batch_g: Vec<&tslm::dataset::TaskInstance> =
        suite.instances().iter().filter(|i| i.task_type.is_generation()).take(1).collect();

    let cfg_zero = TrainConfig { lambda_series: 0.0, lr: 1e-3, ..Default::default() };
    let mut model_a = toy_model(5);
    let mut opt_a = Adam::new();
    joint_step(&mut model_a, &mut opt_a, &batch_u, &batch_g, 1e-3, &cfg_zero, 1).unwrap();

    let mut model_b = toy_model(5);
    let mut opt_b = Adam::new();
    joint_step(&mut model_b, &mut opt_b, &batch_u, &[], 1e-3, &cfg_zero, 1).unwrap();

    assert_eq!(model_a.params, model_b.params);
}

/// Encoder-only gradient check: sum of squares of the encoder output, at
/// T in {50, 300, 5000}, tolerance 1e-4.
#[test]
fn encoder_gradient_check() {
    use rand::{Rng, SeedableRng};
    let run = RunConfig::toy(3);
    let model = Model::init(run.model_config(), 3);
    for (i, t) in [50usize, 300, 5000].into_iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i as u64);
        let signal: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model_ref = &model;
        let report = grad_check(
            &model.params,
            move |tape, binder: &mut Binder<'_>| {
                let vocab = binder.bind(tape, "embed.token")?;
                let family = &model_ref.family;
                let enc = tslm::encoder::encode_flat_graph(
                    tape,
                    binder,
                    &signal,
                    family,
                    vocab,
                    &model_ref.reprog,
                    model_ref.cfg.enc_heads,
                )
                .map_err(|e| tslm::numerics::NumericsError::ShapeMismatch {
                    op: "encode",
                    detail: e.to_string(),
                })?;
                let sq = tape.mul(enc.x_enc, enc.x_enc)?;
                let n = tape.value(sq).numel() as f64;
                let s = tape.sum_all(sq);
                // Kept at O(0.1) so double-precision central differences
                // resolve near-zero partials at the 1e-8 floor.
                Ok(tape.scale(s, 0.1 / n))
            },
            &GradCheckConfig { h: 1e-4, max_probes_per_param: Some(4), seed: 17 },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "T={t}: {:?}", report);
    }
}
