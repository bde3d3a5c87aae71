//! Randomized checks of the expansions about the ball.

use hylab_core::radial_fourier::{GridSpec, SupportSet, TrialFunction};
use hylab_core::taylor::{expand_freq, expand_gen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth modulus and phase with `||f - 1||_L1` and `||g||_L2` inside the small-frequency hypotheses.
fn random_trial(rng: &mut ChaCha8Rng) -> TrialFunction {
    let damp = rng.random_range(0.0..0.1);
    let shift = rng.random_range(-1.0..1.0);
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let bump = rng.random_range(0.0..1.2);
    let center = rng.random_range(-0.8..0.8);
    TrialFunction::new(
        SupportSet::unit_ball(1),
        GridSpec::default_for(1),
        move |x| 1.0 - damp * (0.5 + 0.5 * (3.0 * x[0] + shift).sin()),
        move |x| {
            let t = x[0];
            a[0] + a[1] * t + a[2] * (2.0 * t * t - 1.0) + bump * (-(t - center).powi(2) / 0.002).exp()
        },
    )
    .unwrap()
}

#[test]
fn small_frequency_bound_dominates_direct_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::NEG_INFINITY;
    let mut accepted = 0;
    while accepted < 50 {
        let t = random_trial(&mut rng);
        let eps = rng.random_range(0.05..0.5);
        let b = expand_freq(&t, eps, 4.0).unwrap();
        // Keep only samples inside the hypotheses.
        if !b.warnings.is_empty() {
            continue;
        }
        accepted += 1;
        worst = worst.max(b.direct - b.budget - b.bound);
        assert!(b.bound >= b.direct - b.budget, "bound {} direct {} budget {} eps {eps}", b.bound, b.direct, b.budget);
    }
    println!("largest excess of direct - budget over the bound: {worst:e}");
}

#[test]
fn even_q_value_never_exceeds_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let t = random_trial(&mut rng);
        let terms = expand_gen(&t, 4.0).unwrap();
        assert!(terms.direct <= terms.base + terms.residual_budget);
        assert_eq!(terms.residual, terms.direct - terms.predicted);
    }
}

#[test]
fn real_perturbations_have_vanishing_imaginary_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let c = rng.random_range(0.0..0.2);
        let t = TrialFunction::new(
            SupportSet::unit_ball(1),
            GridSpec::default_for(1),
            move |x| 1.0 - c * x[0] * x[0],
            |_| 0.0,
        )
        .unwrap();
        let terms = expand_gen(&t, 6.0).unwrap();
        assert_eq!(terms.im_plus, 0.0);
        assert_eq!(terms.im_minus, 0.0);
    }
}
