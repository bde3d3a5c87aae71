//! Randomized invariants of the functional, the kernels and the second-variation operator.

use hylab_core::functional::{convolution_norm_oracle, norm_q};
use hylab_core::kernels::{kernel_L, Kernel, RadialGrid};
use hylab_core::radial_fourier::{GridSpec, SupportSet, TrialFunction};
use hylab_core::spectral::build_T_n;
use proptest::prelude::*;

/// Disjoint intervals from a start point, lengths and gaps.
fn union(start: f64, parts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut a = start;
    parts
        .iter()
        .map(|&(len, gap)| {
            let iv = (a, a + len);
            a += len + gap;
            iv
        })
        .collect()
}

fn indicator(ivs: Vec<(f64, f64)>, phase: impl Fn(f64) -> f64 + Send + Sync + 'static) -> TrialFunction {
    let e = SupportSet::intervals(ivs).unwrap();
    TrialFunction::new(e, GridSpec::default_for(1), |_| 1.0, move |x| phase(x[0])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // |F^| is unchanged by translating E and by multiplying F by an affine phase.
    #[test]
    fn norm_is_translation_and_modulation_invariant(
        start in -1.5f64..0.0,
        parts in prop::collection::vec((0.1f64..0.6, 0.05f64..0.4), 1..4),
        shift in -1.0f64..1.0,
        slope in -2.0f64..2.0,
        offset in -3.0f64..3.0,
    ) {
        let ivs = union(start, &parts);
        let base = norm_q(&indicator(ivs.clone(), |_| 0.0), 4.0).unwrap();
        let moved: Vec<(f64, f64)> = ivs.iter().map(|&(a, b)| (a + shift, b + shift)).collect();
        let shifted = norm_q(&indicator(moved, |_| 0.0), 4.0).unwrap();
        let modulated = norm_q(&indicator(ivs, move |x| slope * x + offset), 4.0).unwrap();
        let tol = 2.0 * base.budget();
        prop_assert!((shifted.value - base.value).abs() <= tol, "shift {} vs {}", shifted.value, base.value);
        prop_assert!((modulated.value - base.value).abs() <= tol, "modulation {} vs {}", modulated.value, base.value);
    }

    // At q = 4 the transform route agrees with the exact fourfold autocorrelation.
    #[test]
    fn even_norm_matches_convolution_oracle(
        start in -1.5f64..0.0,
        parts in prop::collection::vec((0.1f64..0.6, 0.05f64..0.4), 1..4),
    ) {
        let ivs = union(start, &parts);
        let oracle = convolution_norm_oracle(&SupportSet::intervals(ivs.clone()).unwrap(), 2).unwrap();
        let r = norm_q(&indicator(ivs, |_| 0.0), 4.0).unwrap();
        prop_assert!((r.value - oracle).abs() <= r.budget() + 1e-12 * oracle, "{} vs {oracle}", r.value);
    }

    // T is self-adjoint for the grid inner product and commutes with x -> -x.
    #[test]
    fn operator_is_self_adjoint_and_even(seed in prop::collection::vec(-1.0f64..1.0, 128)) {
        let t = build_T_n(4.0, 1, 64).unwrap();
        let (f, h) = seed.split_at(64);
        let (tf, th) = (t.apply(f), t.apply(h));
        let lhs = t.grid.inner(f, &th);
        let rhs = t.grid.inner(&tf, h);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        let rh = t.grid.reflect(h);
        let trh = t.apply(&rh);
        let rth = t.grid.reflect(&th);
        let gap = trh.iter().zip(&rth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-12);
    }
}

#[test]
fn kernel_csv_round_trip_preserves_values() {
    let k = kernel_L(4.0, 1, RadialGrid::default_for(4.0)).unwrap();
    let back = Kernel::from_csv(&k.to_csv()).unwrap();
    assert!((back.interp_error - k.interp_error).abs() <= 1e-11 * k.interp_error);
    for i in 0..=500 {
        let r = 3.0 * i as f64 / 500.0;
        assert!((back.value(r) - k.value(r)).abs() <= 1e-10, "r={r}");
    }
}
