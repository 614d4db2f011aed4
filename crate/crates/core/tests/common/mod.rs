//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use bonuslab::divergence::AlphaDivergence;
use bonuslab::objective::{
    closed_form_optimal_policy, pullback_softmax, rl_objective, rl_objective_grad,
};
use bonuslab::optim::GradientDescent;
use bonuslab::tabular::{random_instance, softmax_policy, tv_distance, PolicyLogits, PolicyTable};
use bonuslab::verify::{random_logits, stream_rng};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

/// One closed-form optimality trial on a random (α, β, instance) triple.
#[derive(Debug)]
pub struct OptimalityTrial {
    pub alpha: f64,
    pub beta: f64,
    /// Smallest `J(π*) − J(π)` over the random competitors.
    pub min_gap: f64,
    /// Total variation between `π*` and the gradient-ascent end point.
    pub tv: f64,
    pub ascent_converged: bool,
}

/// A flat-Dirichlet point on each row, occasionally sharpened toward a vertex.
fn random_simplex_table<R: Rng>(n: usize, m: usize, rng: &mut R) -> PolicyTable {
    let sharp = rng.random_range(1.0..4.0);
    let mut t = Array2::from_shape_simple_fn((n, m), || {
        let e: f64 = Exp1.sample(rng);
        e.powf(sharp) + 1e-9
    });
    for mut row in t.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    PolicyTable::new(t).unwrap()
}

pub fn optimality_trial(seed: u64, competitors: usize) -> OptimalityTrial {
    let mut rng = stream_rng(seed, 700);
    let alpha = [0.0, 0.25, 0.5, 0.75, 1.0][seed as usize % 5];
    let beta = rng.random_range(0.2..2.0);
    let inst = random_instance(2, 4, &mut rng).unwrap();
    let div = AlphaDivergence::new(alpha).unwrap();
    let r = inst.true_reward().view();
    let star = closed_form_optimal_policy(r, &inst, &div, beta).unwrap();
    let best = rl_objective(&star, r, &inst, &div, beta).unwrap();
    let min_gap = (0..competitors)
        .map(|_| {
            best - rl_objective(&random_simplex_table(2, 4, &mut rng), r, &inst, &div, beta)
                .unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    let start = random_logits(2, 4, &mut rng).into_inner();
    let ascent = GradientDescent::new(0.5, 400_000, 1e-12)
        .maximize(start, |t| {
            let p = softmax_policy(&PolicyLogits::new(t.clone())?)?;
            let v = rl_objective(&p, r, &inst, &div, beta)?;
            let g = rl_objective_grad(&p, r, &inst, &div, beta)?;
            Ok((v, pullback_softmax(p.probs().view(), g.view())))
        })
        .unwrap();
    let found = softmax_policy(&PolicyLogits::new(ascent.theta).unwrap()).unwrap();
    OptimalityTrial {
        alpha,
        beta,
        min_gap,
        tv: tv_distance(star.probs().view(), found.probs().view()),
        ascent_converged: ascent.converged,
    }
}
