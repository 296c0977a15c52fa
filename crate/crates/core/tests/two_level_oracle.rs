use num_complex::Complex64;
use proptest::prelude::*;

use exciton_core::signal::{make_grid, relative_l2, SignalEnvelope};
use exciton_core::tls::{coherence_response, output_field, TlsParams};

/// `(aδ + Σ c_k e^{p_k t}) ∗ (δ − b e^{−γ̃t/2})`, evaluated in closed form.
fn analytic_output(weight: Complex64, terms: &[(Complex64, Complex64)], b: f64, t: f64) -> Complex64 {
    let q = -0.5 * (1.0 + b);
    let mut out = -weight * b * (q * t).exp();
    for &(c, p) in terms {
        out += c * (p * t).exp() - b * c * ((p * t).exp() - (q * t).exp()) / (p - q);
    }
    out
}

fn check(b: f64, weight: Complex64, terms: Vec<(Complex64, Complex64)>) -> f64 {
    let grid = make_grid(0.0, 0.1, 1701).unwrap();
    let t2 = terms.clone();
    let drive = SignalEnvelope::causal_from_fn(grid, weight, move |t| t2.iter().map(|&(c, p)| c * (p * t).exp()).sum());
    let out = output_field(&drive, &TlsParams::new(b).unwrap()).unwrap();
    assert_eq!(out.singular_weight(), weight);
    let exact: Vec<Complex64> = (0..grid.n).map(|k| analytic_output(weight, &terms, b, grid.time_gamma(k))).collect();
    relative_l2(out.samples(), &exact)
}

#[test]
fn impulse_drive_gives_thin_kernel() {
    for b in [0.1, 0.5, 2.3, 5.0] {
        assert!(check(b, Complex64::new(1.0, 0.0), Vec::new()) < 1e-12);
    }
}

#[test]
fn coherence_of_constant_drive_saturates() {
    let grid = make_grid(0.0, 0.1, 14101).unwrap();
    let b = 1.0;
    let drive = SignalEnvelope::causal_from_fn(grid, Complex64::new(0.0, 0.0), |_| Complex64::new(1.0, 0.0));
    let d = coherence_response(&drive, &TlsParams::new(b).unwrap()).unwrap();
    // −(i/γ̃)(1 − e^{−γ̃t/2})
    for k in [100, 1000, grid.n - 1] {
        let t = grid.time_gamma(k);
        let exact = Complex64::new(0.0, -(1.0 - (-(1.0 + b) * t / 2.0).exp()) / (1.0 + b));
        assert!((d.values[k] - exact).norm() < 1e-6, "t = {t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn damped_oscillation_drives_match_closed_form(
        b in prop::sample::select(vec![0.1, 0.5, 2.3, 5.0]),
        w in (-1.0f64..1.0, -1.0f64..1.0),
        raw in prop::collection::vec(((-1.0f64..1.0, -1.0f64..1.0), (0.2f64..5.0, -10.0f64..10.0)), 1..4),
    ) {
        let terms: Vec<(Complex64, Complex64)> = raw
            .into_iter()
            .map(|((cr, ci), (a, om))| (Complex64::new(cr, ci), Complex64::new(-a, om)))
            .collect();
        let err = check(b, Complex64::new(w.0, w.1), terms);
        prop_assert!(err < 1e-4, "relative L2 {}", err);
    }
}
