use std::f64::consts::PI;

use proptest::prelude::*;

use slowfast::dsl::{CoefficientSet, CoefficientSpec};
use slowfast::numerics::{Channel, EigenBasis, Field, NoiseStream};
use slowfast::sde::FastScale;
use slowfast::spde::{
    detect_linear_structure, energy_residual, linear_elliptic_mean, simulate_frozen_fast_spde, simulate_slow_spde,
    step_fast_spde, MacroState,
};

fn set(f: &str, g: &str, sigma2: &str) -> CoefficientSet {
    CoefficientSet::from_exprs(&CoefficientSpec {
        f: f.into(),
        g: g.into(),
        b: "sin(xi) + eta".into(),
        big_b: "-eta".into(),
        sigma1: "0".into(),
        sigma2: sigma2.into(),
        sigma3: "1".into(),
        sigma4: "1".into(),
    })
    .unwrap()
}

/// Largest distance between the two empirical CDFs.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn ks_statistic_on_known_samples() {
    assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
    assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
    assert!((ks_statistic(&[1.0, 3.0], &[2.0, 4.0]) - 0.5).abs() < 1e-15);
}

#[test]
fn fast_field_at_eps_t_matches_frozen_field_at_t_in_law() {
    let basis = EigenBasis::new(8, 32).unwrap();
    let coeffs = set("v", "-v + 1 + 0.5*tanh(u)", "0.5");
    let u0 = basis.project_fn(|x| (PI * x).sin());
    let v0 = basis.zeros();
    let eps = 0.01;
    let scale = FastScale::new(eps, 0.5).unwrap();
    let (h_frozen, steps) = (0.02, 25);
    let h = h_frozen * eps;
    let n = 1000u64;
    let scaled: Vec<f64> = (0..n)
        .map(|r| {
            let stream = NoiseStream::new(101, Channel::W2, r, h).unwrap();
            let mut state = MacroState { u: u0.clone(), v: Some(v0.clone()), t: 0.0 };
            for dw in stream.increments(0, steps).unwrap() {
                state = step_fast_spde(&basis, &state, 0.0, &coeffs, &scale, h, dw).unwrap();
            }
            state.v.unwrap().coeffs()[0]
        })
        .collect();
    let frozen: Vec<f64> = (0..n)
        .map(|r| {
            let stream = NoiseStream::new(202, Channel::W2, r, h_frozen).unwrap();
            let path =
                simulate_frozen_fast_spde(&basis, &u0, 0.0, &v0, &coeffs, h_frozen * steps as f64, h_frozen, &stream)
                    .unwrap();
            path.last().unwrap().coeffs()[0]
        })
        .collect();
    let d = ks_statistic(&scaled, &frozen);
    // asymptotic two-sample critical value at the 1% level
    let critical = 1.628 * (2.0 / n as f64).sqrt();
    assert!(d < critical, "KS distance {d} above {critical}");
}

#[test]
fn linear_elliptic_mean_solves_the_resolvent() {
    let basis = EigenBasis::new(16, 64).unwrap();
    let coeffs = set("v", "-v + 1", "0.5");
    let lin = detect_linear_structure(&coeffs).expect("affine in v");
    let mean = linear_elliptic_mean(&basis, &lin, &coeffs, &vec![0.0; 64], 0.0).unwrap();
    let m = 65.0;
    for (i, c) in mean.coeffs().iter().enumerate() {
        let k = (i + 1) as f64;
        let proj = if (i + 1) % 2 == 1 { 2f64.sqrt() / m / (k * PI / (2.0 * m)).tan() } else { 0.0 };
        assert!((c - proj / ((k * PI).powi(2) + 1.0)).abs() < 1e-12, "mode {}", i + 1);
    }
}

#[test]
fn nonlinear_fast_drift_has_no_linear_structure() {
    assert!(detect_linear_structure(&set("v", "-v + sin(v)", "0.5")).is_none());
    assert!(detect_linear_structure(&set("v*v", "-v + 1", "0.5")).is_none());
}

#[test]
fn energy_residual_halves_with_the_step() {
    let basis = EigenBasis::new(16, 64).unwrap();
    let coeffs = set("2*tanh(u)", "0", "0");
    let u0 = basis.project_fn(|x| (PI * x).sin());
    let res: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&h| {
            let traj = simulate_slow_spde(&basis, &u0, 0.0, &coeffs, 1.0, h, None).unwrap();
            energy_residual(&basis, &traj, &coeffs).unwrap().max_abs_residual()
        })
        .collect();
    for w in res.windows(2) {
        let r = w[1] / w[0];
        assert!((0.4..=0.6).contains(&r), "{res:?}");
    }
}

proptest! {
    #[test]
    fn synthesize_then_project_is_identity(coeffs in prop::collection::vec(-5.0f64..5.0, 16)) {
        let basis = EigenBasis::new(16, 64).unwrap();
        let f = Field::from_coeffs(coeffs);
        let back = basis.project(&basis.synthesize(&f).unwrap()).unwrap();
        prop_assert!(f.distance_sq(&back).unwrap() < 1e-20);
    }

    #[test]
    fn semigroup_is_a_contraction_with_the_right_rate(coeffs in prop::collection::vec(-5.0f64..5.0, 16), t in 0.0f64..0.5) {
        let basis = EigenBasis::new(16, 64).unwrap();
        let f = Field::from_coeffs(coeffs);
        let g = basis.semigroup(&f, t).unwrap();
        prop_assert!(g.norm() <= (-PI * PI * t).exp() * f.norm() * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn semigroup_composes(coeffs in prop::collection::vec(-5.0f64..5.0, 16), s in 0.0f64..0.2, t in 0.0f64..0.2) {
        let basis = EigenBasis::new(16, 64).unwrap();
        let f = Field::from_coeffs(coeffs);
        let a = basis.semigroup(&basis.semigroup(&f, s).unwrap(), t).unwrap();
        let b = basis.semigroup(&f, s + t).unwrap();
        prop_assert!(a.distance_sq(&b).unwrap() <= 1e-24 * (1.0 + f.norm_sq()));
    }
}
