mod common;

use common::{finite_differences, objective, two_exit_pattern, random_batch, random_two_exit, rel_err, rng};
use rand::Rng;
use splitgp_core::data::{LabeledDataset, Sample};
use splitgp_core::fedsim::{local_round, ClientState, LrPolicy, Mode, TrainConfig};
use splitgp_core::nn::{backward_multi_exit, backward_single_exit, LayeredModel};

fn max_rel_err(analytic: &splitgp_core::nn::GradientSet, numeric: &[Vec<f64>]) -> f64 {
    analytic
        .blocks
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n).map(|(x, y)| rel_err(*x, *y)))
        .fold(0.0, f64::max)
}

#[test]
fn two_exit_gradients_match_central_differences() {
    let mut r = rng(11);
    for trial in 0..25 {
        let (phi, head, theta, classes) = random_two_exit(&mut r);
        let n = r.random_range(1..=5);
        let batch = random_batch(&mut r, n, phi.input_dim(), classes);
        let gamma = r.random_range(0.0..=1.0);
        let g = backward_multi_exit(&phi, &head, &theta, &batch, gamma).unwrap();
        let segs = [phi, head, theta];
        let f = |s: &[LayeredModel; 3]| objective(&s[0], &s[1], &s[2], &batch, gamma);
        assert!((g.objective - f(&segs)).abs() < 1e-12);
        for (which, analytic) in [&g.phi, &g.head, &g.theta].into_iter().enumerate() {
            let numeric = finite_differences(&segs, which, 1e-4, &f, &|s| two_exit_pattern(s, &batch));
            let err = max_rel_err(analytic, &numeric);
            assert!(err <= 1e-4, "trial {trial}, segment {which}: rel err {err}");
        }
    }
}

#[test]
fn single_exit_gradients_match_central_differences() {
    let mut r = rng(12);
    for trial in 0..10 {
        let (phi, _, theta, classes) = random_two_exit(&mut r);
        let w = phi.concat(&theta).unwrap();
        let batch = random_batch(&mut r, 4, w.input_dim(), classes);
        let (g, loss) = backward_single_exit(&w, &batch).unwrap();
        let segs = [w.clone(), w.clone(), w];
        let f = |s: &[LayeredModel; 3]| {
            batch
                .iter()
                .map(|x| splitgp_core::nn::softmax_cross_entropy(&s[0].forward(&x.features).unwrap(), x.label).unwrap().0)
                .sum::<f64>()
                / batch.len() as f64
        };
        assert!((loss - f(&segs)).abs() < 1e-12);
        let pattern = |s: &[LayeredModel; 3]| {
            let mut out = Vec::new();
            batch.iter().for_each(|x| {
                common::relu_signs(&s[0], &x.features, &mut out);
            });
            out
        };
        let numeric = finite_differences(&segs, 0, 1e-4, &f, &pattern);
        let err = max_rel_err(&g, &numeric);
        assert!(err <= 1e-4, "trial {trial}: rel err {err}");
    }
}

#[test]
fn one_full_batch_local_step_is_plain_sgd() {
    let mut r = rng(13);
    for mode in [Mode::Splitgp, Mode::Splitfed] {
        let (phi, head, theta, classes) = random_two_exit(&mut r);
        let samples: Vec<Sample> = random_batch(&mut r, 6, phi.input_dim(), classes);
        let data = LabeledDataset::new(classes, phi.input_dim(), samples.clone()).unwrap();
        let client = ClientState {
            id: 0,
            data,
            phi: phi.clone(),
            head: head.clone(),
            alpha: 1.0,
            local_theta: None,
        };
        let cfg = TrainConfig {
            gamma: 0.3,
            lambda: 0.5,
            lr: LrPolicy::Fixed { lr: 0.05 },
            rounds: 1,
            batch_size: 6,
            local_steps: Some(1),
            finetune_epochs: 0,
            mode,
            seed: 4,
            track_grad_norm: false,
        };
        let lr = 0.05;
        let gamma = cfg.effective_gamma();
        let up = local_round(&client, &theta, &cfg, lr, 0).unwrap();
        let segs = [phi, head, theta];
        let f = |s: &[LayeredModel; 3]| objective(&s[0], &s[1], &s[2], &samples, gamma);
        for (which, updated) in [&up.phi, &up.head, &up.theta].into_iter().enumerate() {
            let numeric = finite_differences(&segs, which, 1e-4, &f, &|s| two_exit_pattern(s, &samples));
            for ((before, after), grad) in segs[which].param_blocks().zip(updated.param_blocks()).zip(&numeric) {
                for ((b, a), g) in before.iter().zip(after).zip(grad) {
                    assert!((a - (b - lr * g)).abs() < 1e-8, "{mode}: segment {which}");
                }
            }
        }
    }
}
