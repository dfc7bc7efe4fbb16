use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::split_leave_one_out;
use crate::numcore::{Tensor, Var};
use crate::rng::RunRng;
use crate::tolerance::{relative_error, GRAD_CHECK_REL, GRAD_CHECK_STEP, HAND_ORACLE};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw(rows: usize, t: usize, k: usize, indices: Vec<u32>) -> NegativeDraw {
    NegativeDraw {
        rows,
        max_len: t,
        k,
        candidate_count: vec![0; rows * t],
        indices,
    }
}

/// Loss of hidden states `h` `[P, d]` against an item table, both constants
/// except `h`, which is a parameter.
fn loss_of(objective: Objective, h: &[f64], d: usize, table: &[f64], targets: &[u32], negs: &NegativeDraw) -> (f64, Vec<f64>) {
    let mut g = Graph::<f64>::new();
    let hv = g.param(Tensor::new(vec![h.len() / d, d], h.to_vec()).unwrap());
    let tv = g.constant(Tensor::new(vec![table.len() / d, d], table.to_vec()).unwrap());
    let mask: Vec<bool> = targets.iter().map(|&t| t != 0).collect();
    let l = match objective {
        Objective::Nce => nce_loss(&mut g, hv, tv, targets, &mask, negs).unwrap(),
        Objective::Bpr => bpr_loss(&mut g, hv, tv, targets, &mask, negs).unwrap(),
    };
    let value = g.value(l).item().unwrap();
    let grads = g.backward(l).unwrap();
    (value, grads.get(hv).unwrap().data().to_vec())
}

#[test]
fn nce_at_zero_hidden_state_is_two_log_two() {
    let table = [0.0, 0.0, 0.3, 0.1, -0.2, 0.5, 0.7, 0.7];
    let (l, _) = loss_of(Objective::Nce, &[0.0; 4], 2, &table, &[1, 2], &draw(1, 2, 1, vec![3, 1]));
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn nce_vanishes_for_perfect_separation() {
    let table = [0.0, 0.0, 1.0, 0.0, -1.0, 0.0];
    let (l, _) = loss_of(Objective::Nce, &[40.0, 0.0], 2, &table, &[1], &draw(1, 1, 1, vec![2]));
    assert!(l < 1e-6, "{l}");
}

#[test]
fn nce_matches_hand_evaluation() {
    let table = [0.0, 0.0, 0.4, -0.3, 1.2, 0.5, -0.7, 0.9];
    let h = [0.6, -1.1];
    let dot = |i: usize| h[0] * table[2 * i] + h[1] * table[2 * i + 1];
    let hand = -sigmoid(dot(1)).ln() - (1.0 - sigmoid(dot(2))).ln() - (1.0 - sigmoid(dot(3))).ln();
    let (l, _) = loss_of(Objective::Nce, &h, 2, &table, &[1], &draw(1, 1, 2, vec![2, 3]));
    assert!((l - hand).abs() < HAND_ORACLE);
}

#[test]
fn nce_with_hopeless_negatives_keeps_only_positive_term() {
    let table = [0.0, 0.0, 0.5, 0.2, -1e4, 0.0, 0.0, -1e4];
    let h = [1.0, 1.0];
    let pos = 0.7;
    let (l, _) = loss_of(Objective::Nce, &h, 2, &table, &[1], &draw(1, 1, 2, vec![2, 3]));
    // each negative term bottoms out at -log(1 - 1e-7)
    let floor = -2.0 * (1.0 - crate::tolerance::SIGMOID_CLAMP).ln();
    assert!((l - (-sigmoid(pos).ln()) - floor).abs() < 1e-12);
}

#[test]
fn bpr_cases() {
    let table = [0.0, 0.0, 0.4, -0.3, 0.4, -0.3, -0.7, 0.9];
    let h = [0.6, -1.1];
    let (same, _) = loss_of(Objective::Bpr, &h, 2, &table, &[1], &draw(1, 1, 1, vec![2]));
    assert!((same - 2f64.ln()).abs() < 1e-12);

    let far = [0.0, 0.0, 50.0, 0.0, -50.0, 0.0];
    let (l, _) = loss_of(Objective::Bpr, &[1.0, 0.0], 2, &far, &[1], &draw(1, 1, 1, vec![2]));
    assert!(l < 1e-6);

    let dot = |i: usize| h[0] * table[2 * i] + h[1] * table[2 * i + 1];
    let hand = (-(sigmoid(dot(1) - dot(3))).ln() - (sigmoid(dot(1) - dot(2))).ln()) / 2.0;
    let (l, _) = loss_of(Objective::Bpr, &h, 2, &table, &[1], &draw(1, 1, 2, vec![3, 2]));
    assert!((l - hand).abs() < HAND_ORACLE);
}

#[test]
fn bpr_gradient_factor_is_sigmoid_of_negative_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut prev = f64::INFINITY;
    for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
        // scaling h scales every margin
        let h = [scale, 0.3 * scale];
        let dot = |i: usize| h[0] * table[2 * i] + h[1] * table[2 * i + 1];
        let (_, grad) = loss_of(Objective::Bpr, &h, 2, &table, &[1], &draw(1, 1, 3, vec![2, 3, 4]));
        let mut expect = [0.0; 2];
        let mut factor_sum = 0.0;
        for j in [2usize, 3, 4] {
            let factor = sigmoid(-(dot(1) - dot(j)));
            factor_sum += factor;
            for c in 0..2 {
                expect[c] -= factor * (table[2 + c] - table[2 * j + c]) / 3.0;
            }
        }
        for c in 0..2 {
            assert!((grad[c] - expect[c]).abs() < 1e-12);
        }
        if dot(1) > (2..=4).map(dot).fold(f64::NEG_INFINITY, f64::max) {
            assert!(factor_sum < prev);
            prev = factor_sum;
        }
    }
}

#[test]
fn loss_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let h = g.param(Tensor::zeros(&[2, 2]));
    let t = g.constant(Tensor::zeros(&[4, 2]));
    assert!(nce_loss(&mut g, h, t, &[1, 2], &[true, true], &draw(1, 1, 1, vec![3])).is_err());
    assert!(nce_loss(&mut g, h, t, &[0, 0], &[false, false], &draw(1, 2, 1, vec![3, 3])).is_err());
}

#[test]
fn adam_closed_forms() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let mut st = AdamState::new([&p]);
    let zero = Tensor::zeros(&[3]);
    adam_step(&mut [&mut p], &[Some(&zero)], &mut st, &cfg).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0, 0.5]);

    let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let mut st = AdamState::new([&p]);
    let g = Tensor::from_f64(&[3], &[3.0, -0.02, 1e-3]).unwrap();
    adam_step(&mut [&mut p], &[Some(&g)], &mut st, &cfg).unwrap();
    for (after, (before, gi)) in p.data().iter().zip([1.0, -2.0, 0.5f64].iter().zip(g.data())) {
        assert!((after - (before - 0.1 * gi.signum())).abs() < 1e-5);
    }

    let mut x = Tensor::<f64>::scalar(1.0);
    let mut st = AdamState::new([&x]);
    let mut last = 1.0f64;
    for _ in 0..10 {
        let g = Tensor::scalar(2.0 * x.data()[0]);
        adam_step(&mut [&mut x], &[Some(&g)], &mut st, &cfg).unwrap();
        assert!(x.data()[0].abs() < last);
        last = x.data()[0].abs();
    }
}

fn tiny_data(users: usize, n_items: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..users)
        .map(|_| {
            let len = rng.random_range(5..12);
            let start = rng.random_range(1..=n_items);
            // mostly deterministic successor structure so there is something to learn
            (0..len)
                .map(|i| {
                    if rng.random_bool(0.8) {
                        (start + i - 1) % n_items + 1
                    } else {
                        rng.random_range(1..=n_items)
                    }
                })
                .collect()
        })
        .collect()
}

fn tiny_config(spec: SamplerSpec, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 32,
        max_epochs: epochs,
        patience: 3,
        seed: 11,
        sampler: spec,
        encoder: EncoderHyper {
            max_len: 8,
            dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            dropout: 0.1,
            final_layer_norm: true,
        },
        ..TrainConfig::default()
    }
}

fn popularity(seqs: &[Vec<u32>], n: usize) -> Vec<u64> {
    let mut pop = vec![0u64; n + 1];
    seqs.iter().flatten().for_each(|&i| pop[i as usize] += 1);
    pop
}

#[test]
fn zero_epochs_returns_initial_model() {
    let seqs = tiny_data(20, 15, 1);
    let split = split_leave_one_out(&seqs);
    let pop = popularity(&seqs, 15);
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: 15,
        popularity: &pop,
    };
    let cfg = tiny_config(SamplerSpec::uniform(1), 0);
    let out = train::<f64>(&cfg, &data).unwrap();
    assert!(out.metrics.epochs.is_empty());
    assert_eq!(out.metrics.best_epoch, None);
    assert_eq!(out.best, EncoderParams::init(cfg.encoder.config(15), cfg.seed).unwrap());
}

#[test]
fn runs_are_deterministic_and_keep_the_best_epoch() {
    let seqs = tiny_data(150, 20, 2);
    let split = split_leave_one_out(&seqs);
    let pop = popularity(&split.train, 20);
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: 20,
        popularity: &pop,
    };
    let mut spec = SamplerSpec::genni(1.0, 0.5, 2);
    spec.curriculum = crate::sampler::Curriculum::self_adjusted();
    let cfg = tiny_config(spec, 8);
    let a = train::<f32>(&cfg, &data).unwrap();
    let b = train::<f32>(&cfg, &data).unwrap();
    let strip = |m: &RunMetrics| m.epochs.iter().map(|e| e.without_time()).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.best, b.best);
    assert!(a.metrics.epochs.iter().all(|e| e.seconds > 0.0));

    let best = a.metrics.best().unwrap();
    let max = a.metrics.epochs.iter().map(|e| e.ndcg10).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.ndcg10, max);
    let again = evaluate(&a.best, &split.valid, &[10], false).unwrap();
    assert_eq!(again.ndcg_at(10), best.ndcg10);
}

#[test]
fn every_sampler_and_objective_trains() {
    let seqs = tiny_data(80, 12, 3);
    let split = split_leave_one_out(&seqs);
    let pop = popularity(&split.train, 12);
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: 12,
        popularity: &pop,
    };
    let mut shared = SamplerSpec::genni(2.0, 0.3, 3);
    shared.shared_candidates = true;
    let mut hist = SamplerSpec::uniform(1);
    hist.exclude_history = true;
    let mut gradual = SamplerSpec::genni(1.0, 1.0, 1);
    gradual.beta_mode = crate::sampler::BetaMode::Gradual;
    for spec in [SamplerSpec::popularity(0.5, 2), shared, hist, gradual] {
        for objective in [Objective::Nce, Objective::Bpr] {
            let mut cfg = tiny_config(spec.clone(), 2);
            cfg.objective = objective;
            let out = train::<f32>(&cfg, &data).unwrap();
            assert_eq!(out.metrics.epochs.len(), 2);
            assert!(out.metrics.epochs.iter().all(|e| e.loss.is_finite()));
        }
    }
}

#[test]
fn divergence_is_reported_with_the_batch() {
    let seqs = tiny_data(100, 12, 4);
    let split = split_leave_one_out(&seqs);
    let pop = popularity(&split.train, 12);
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: 12,
        popularity: &pop,
    };
    let mut cfg = tiny_config(SamplerSpec::uniform(1), 3);
    cfg.lr = 1e30;
    match train::<f32>(&cfg, &data) {
        Err(Error::Diverged { dump, .. }) => {
            let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
            assert!(v["sources"].is_array());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
    }
}

/// Full-softmax cross-entropy of every next-item prediction in `seqs`;
/// the reference objective that sampled losses approximate.
fn full_softmax_loss(params: &EncoderParams<f64>, seqs: &[Vec<u32>]) -> f64 {
    let t = params.config.max_len;
    let d = params.config.dim;
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = SequenceBatch::from_sequences(&refs, (0..seqs.len()).collect(), t);
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let mut rng = RunRng::seed_from_u64(0);
    let h = encode(&mut g, &bound, &batch, false, &mut rng).unwrap();
    let hv = g.value(h).data();
    let mut total = 0.0;
    let mut count = 0;
    for p in batch.valid_positions() {
        let scores = crate::encoder::score_all(params, &hv[p * d..(p + 1) * d]);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - scores[batch.targets[p] as usize - 1];
        count += 1;
    }
    total / count as f64
}

#[test]
fn sampled_training_lowers_full_softmax_loss() {
    let seqs = tiny_data(120, 10, 5);
    let split = split_leave_one_out(&seqs);
    let pop = popularity(&split.train, 10);
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: 10,
        popularity: &pop,
    };
    let mut cfg = tiny_config(SamplerSpec::genni(1.0, 1.0, 2), 6);
    cfg.patience = 10;
    let init = EncoderParams::<f64>::init(cfg.encoder.config(10), cfg.seed).unwrap();
    let out = train::<f64>(&cfg, &data).unwrap();
    let before = full_softmax_loss(&init, &split.train);
    let after = full_softmax_loss(&out.best, &split.train);
    assert!(after < before - 0.1, "{before} -> {after}");
}

fn pipeline_loss(objective: Objective, params: &EncoderParams<f64>, batch: &SequenceBatch, negs: &NegativeDraw) -> (f64, Graph<f64>, Var, BoundParams) {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let mut rng = RunRng::seed_from_u64(99);
    let h = encode(&mut g, &bound, batch, true, &mut rng).unwrap();
    let l = match objective {
        Objective::Nce => nce_loss(&mut g, h, bound.item_embeddings, &batch.targets, &batch.mask, negs).unwrap(),
        Objective::Bpr => bpr_loss(&mut g, h, bound.item_embeddings, &batch.targets, &batch.mask, negs).unwrap(),
    };
    (g.value(l).item().unwrap(), g, l, bound)
}

#[test]
fn encoder_and_losses_pass_finite_difference_check() {
    let cfg = EncoderConfig {
        n_items: 6,
        max_len: 4,
        dim: 4,
        layers: 2,
        heads: 2,
        ff_dim: 8,
        dropout: 0.2,
        final_layer_norm: true,
    };
    let params = EncoderParams::<f64>::init(cfg, 5).unwrap();
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = SequenceBatch::from_sequences(&[&[1, 2, 3, 4, 5], &[6, 2]], vec![0, 1], 4);
    let targets = Targets::from_batch(&batch);
    let negs = sample_uniform(&targets, 6, 2, &Streams::new(1, &[])).unwrap();
    for objective in [Objective::Nce, Objective::Bpr] {
        let (_, g, l, bound) = pipeline_loss(objective, &params, &batch, &negs);
        let grads = g.backward(l).unwrap();
        let mut worst: f64 = 0.0;
        for (ti, &var) in bound.vars().iter().enumerate() {
            let analytic = grads.get(var).unwrap().data().to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[i] += GRAD_CHECK_STEP;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= GRAD_CHECK_STEP;
                let numeric = (pipeline_loss(objective, &plus, &batch, &negs).0
                    - pipeline_loss(objective, &minus, &batch, &negs).0)
                    / (2.0 * GRAD_CHECK_STEP);
                worst = worst.max(relative_error(a, numeric));
            }
        }
        assert!(worst < GRAD_CHECK_REL, "{objective:?}: max relative error {worst}");
    }
}
