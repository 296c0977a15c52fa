//! Forward-scattering transmission of resonant absorbers.
//!
//! A single resonance line of effective thickness `b` transmits
//! `T(t) = δ(t) + R(t)` with the Bessel-type response
//! `R(t) = −θ(t)·√(b/t)·e^{−γt/2}·J1(2√(bt))`. Absorbers with several lines are
//! handled in the frequency domain, where each line contributes an additive
//! Lorentzian term to the exponent of `T(ω)`.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::{fft_frequencies, SignalEnvelope, TimeGrid};

pub const SCHEMA_VERSION: u32 = 1;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Below this Bessel argument the small-argument expansion of J1 is used.
const SMALL_ARGUMENT: f64 = 1e-3;

/// Time span (in lifetimes of the narrowest line) covered by the periodic
/// frequency-domain evaluation; e^{-20} wrap-around residue.
const WRAP_LIFETIMES: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuclearLine {
    pub detuning_gamma: f64,
    pub b_gamma: f64,
    #[serde(default = "unit_width")]
    pub width_gamma: f64,
}

fn unit_width() -> f64 {
    1.0
}

fn unit_scale() -> f64 {
    1.0
}

impl NuclearLine {
    pub fn new(detuning_gamma: f64, b_gamma: f64) -> Self {
        Self { detuning_gamma, b_gamma, width_gamma: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.b_gamma >= 0.0) || !self.b_gamma.is_finite() {
            return Err(invalid(format!("line thickness must be non-negative, got {}", self.b_gamma)));
        }
        if !(self.width_gamma > 0.0) || !self.width_gamma.is_finite() {
            return Err(invalid(format!("line width must be positive, got {}", self.width_gamma)));
        }
        if !self.detuning_gamma.is_finite() {
            return Err(invalid("line detuning must be finite"));
        }
        Ok(())
    }

    /// Pole `p = −iδ − w/2` of the line's time-domain response.
    fn pole(&self) -> Complex64 {
        Complex64::new(-0.5 * self.width_gamma, -self.detuning_gamma)
    }

    /// Residue `−b·w` of the first-order response `c·θ(t)e^{pt}`.
    fn residue(&self) -> f64 {
        -self.b_gamma * self.width_gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionModel {
    pub lines: Vec<NuclearLine>,
    #[serde(default = "unit_scale")]
    pub electronic_scale: f64,
}

impl TransmissionModel {
    pub fn new(lines: Vec<NuclearLine>) -> Result<Self> {
        let model = Self { lines, electronic_scale: 1.0 };
        model.validate()?;
        Ok(model)
    }

    pub fn single_line(b_gamma: f64) -> Self {
        Self { lines: vec![NuclearLine::new(0.0, b_gamma)], electronic_scale: 1.0 }
    }

    /// Two equal Δm = 0 lines: one at zero detuning, one at `splitting_gamma`.
    pub fn two_line(b_per_line: f64, splitting_gamma: f64) -> Self {
        Self {
            lines: vec![NuclearLine::new(0.0, b_per_line), NuclearLine::new(splitting_gamma, b_per_line)],
            electronic_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lines.is_empty() {
            return Err(invalid("transmission model needs at least one line"));
        }
        if !(self.electronic_scale > 0.0 && self.electronic_scale <= 1.0) {
            return Err(invalid(format!(
                "electronic scale must lie in (0, 1], got {}",
                self.electronic_scale
            )));
        }
        self.lines.iter().try_for_each(NuclearLine::validate)
    }

    /// Copy with every line moved by `shift_gamma`.
    pub fn shifted(&self, shift_gamma: f64) -> Self {
        Self {
            lines: self
                .lines
                .iter()
                .map(|l| NuclearLine { detuning_gamma: l.detuning_gamma + shift_gamma, ..*l })
                .collect(),
            electronic_scale: self.electronic_scale,
        }
    }

    /// Largest line splitting, which sets the quantum-beat frequency.
    pub fn max_splitting_gamma(&self) -> f64 {
        let (lo, hi) = self.lines.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| {
            (lo.min(l.detuning_gamma), hi.max(l.detuning_gamma))
        });
        hi - lo
    }

    pub fn total_thickness(&self) -> f64 {
        self.lines.iter().map(|l| l.b_gamma).sum()
    }

    fn exponent(&self, omega: f64) -> Complex64 {
        let i = Complex64::i();
        self.lines
            .iter()
            .map(|l| l.residue() * i / Complex64::new(omega - l.detuning_gamma, 0.5 * l.width_gamma))
            .sum()
    }

    /// Frequency-domain transmission `T(ω)`, with `ω` in units of γ.
    pub fn transmission_at(&self, omega_gamma: f64) -> Complex64 {
        self.electronic_scale * self.exponent(omega_gamma).exp()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            #[serde(flatten)]
            model: &'a TransmissionModel,
        }
        Ok(serde_json::to_string_pretty(&Doc { schema_version: SCHEMA_VERSION, model: self })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TransmissionModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Bessel function of the first kind, order one.
pub fn bessel_j1(x: f64) -> f64 {
    if x < 0.0 {
        return -bessel_j1(-x);
    }
    if x <= 12.0 {
        // power series; at most ~4 digits are lost to cancellation at x = 12
        let h = 0.5 * x;
        let h2 = h * h;
        let mut term = h;
        let mut sum = h;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= -h2 / (k * (k + 1.0));
            sum += term;
            if term.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        sum
    } else {
        // Hankel asymptotic expansion, truncated at the smallest term
        let mu = 4.0;
        let z8 = 8.0 * x;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut term = 1.0;
        let mut last = f64::INFINITY;
        for k in 1..40 {
            let kf = k as f64;
            let odd = 2.0 * kf - 1.0;
            term *= (mu - odd * odd) / (kf * z8);
            if term.abs() > last {
                break;
            }
            last = term.abs();
            match k % 4 {
                1 => q += term,
                2 => p -= term,
                3 => q -= term,
                _ => p += term,
            }
        }
        let chi = x - 0.75 * std::f64::consts::PI;
        (2.0 / (std::f64::consts::PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

fn check_thickness(b: f64) -> Result<()> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(invalid(format!("thickness must be non-negative, got {b}")));
    }
    Ok(())
}

/// Value of the single-line response at time `t` (units of 1/γ) for a
/// line of thickness `b` and natural width.
pub fn single_line_value(b: f64, t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let x = 2.0 * (b * t).sqrt();
    let decay = (-0.5 * t).exp();
    if x < SMALL_ARGUMENT {
        // J1(x) ≈ x/2 − x³/16
        -b * (1.0 - 0.5 * b * t) * decay
    } else {
        -(b / t).sqrt() * decay * bessel_j1(x)
    }
}

/// `R(t)` of a single resonance line at zero detuning (the smooth part of `T`).
pub fn single_line_response(b: f64, grid: TimeGrid) -> Result<SignalEnvelope> {
    check_thickness(b)?;
    Ok(SignalEnvelope::causal_from_fn(grid, ZERO, |t| Complex64::new(single_line_value(b, t), 0.0)))
}

/// Thin-target approximation `R(t) ≈ −θ(t)·b·e^{−(γ+b)t/2}`.
pub fn thin_limit_response(b: f64, grid: TimeGrid) -> Result<SignalEnvelope> {
    check_thickness(b)?;
    Ok(SignalEnvelope::causal_from_fn(grid, ZERO, |t| {
        Complex64::new(-b * (-(1.0 + b) * 0.5 * t).exp(), 0.0)
    }))
}

/// `(e^{p t} − e^{q t})/(p − q)`, the convolution of two causal exponentials.
fn exp_difference(p: Complex64, q: Complex64, t: f64) -> Complex64 {
    let d = p - q;
    let dt = d * t;
    if dt.norm() < 1e-4 {
        (q * t).exp() * t * (1.0 + dt * 0.5 + dt * dt / 6.0 + dt * dt * dt / 24.0)
    } else {
        ((p * t).exp() - (q * t).exp()) / d
    }
}

/// `exp(s) − 1 − s − s²/2`, accurate for small `|s|`.
fn exp_remainder(s: Complex64) -> Complex64 {
    if s.norm() < 1e-2 {
        let s3 = s * s * s;
        s3 * (1.0 / 6.0 + s / 24.0 + s * s / 120.0 + s * s * s / 720.0)
    } else {
        s.exp() - 1.0 - s - s * s * 0.5
    }
}

/// Time-domain transmission `T(t)` of a (multi-line) absorber.
///
/// The first- and second-order terms of `exp(Σ_j L_j(ω))` are added
/// analytically; only the remainder, which decays as `ω^{-3}`, goes through the
/// discrete Fourier sum. This keeps the `t = 0` jump of `R(t)` out of the
/// discretization.
pub fn multiline_transmission(model: &TransmissionModel, grid: TimeGrid) -> Result<SignalEnvelope> {
    model.validate()?;
    let i0 = grid
        .origin_index()
        .ok_or_else(|| invalid("transmission grid must contain t = 0"))?;
    let dt = grid.dt_gamma();
    let nyquist = std::f64::consts::PI / dt;
    let reach = model
        .lines
        .iter()
        .map(|l| l.detuning_gamma.abs() + 10.0 * l.width_gamma)
        .fold(0.0, f64::max);
    if reach >= nyquist {
        return Err(Error::Resolution(format!(
            "lines extend to {reach:.1}γ but the grid resolves only {nyquist:.1}γ"
        )));
    }

    let causal = grid.n - i0;
    let min_width = model.lines.iter().map(|l| l.width_gamma).fold(f64::INFINITY, f64::min);
    let span = (WRAP_LIFETIMES / min_width / dt).ceil() as usize;
    let len = (4 * causal).max(span).next_power_of_two();

    let omega = fft_frequencies(len, dt);
    let mut buf: Vec<Complex64> = omega.iter().map(|&w| exp_remainder(model.exponent(w))).collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let norm = 1.0 / (len as f64 * dt);

    let poles: Vec<(Complex64, f64)> = model.lines.iter().map(|l| (l.pole(), l.residue())).collect();
    let scale = model.electronic_scale;
    let mut samples = vec![ZERO; grid.n];
    for k in 0..causal {
        let t = k as f64 * dt;
        let mut first = ZERO;
        let mut second = ZERO;
        for (a, &(pa, ca)) in poles.iter().enumerate() {
            first += ca * (pa * t).exp();
            for &(pb, cb) in &poles[a..] {
                let weight = if pb == pa { 0.5 } else { 1.0 };
                second += weight * ca * cb * exp_difference(pa, pb, t);
            }
        }
        samples[i0 + k] = scale * (first + second + buf[k] * norm);
    }
    SignalEnvelope::new(grid, Complex64::new(scale, 0.0), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{make_grid, relative_l2, to_frequency};
    use approx::assert_relative_eq;

    /// J1(x) = (1/π)∫₀^π cos(τ − x sin τ) dτ by composite Simpson.
    fn j1_integral(x: f64) -> f64 {
        let n = 4000;
        let h = std::f64::consts::PI / n as f64;
        let f = |tau: f64| (tau - x * tau.sin()).cos();
        let mut acc = f(0.0) + f(std::f64::consts::PI);
        for i in 1..n {
            acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0 / std::f64::consts::PI
    }

    #[test]
    fn bessel_against_integral_representation() {
        for &x in &[0.0, 1e-4, 0.3, 1.0, 2.5, 3.8317, 4.47, 7.0, 11.9, 12.1, 15.0, 30.0, 80.0] {
            assert!((bessel_j1(x) - j1_integral(x)).abs() < 1e-10, "x = {x}");
        }
        assert_relative_eq!(bessel_j1(-2.0), -bessel_j1(2.0));
    }

    #[test]
    fn zero_thickness_gives_no_response() {
        let grid = make_grid(0.0, 0.1, 200).unwrap();
        let r = single_line_response(0.0, grid).unwrap();
        assert!(r.samples().iter().all(|s| s.norm() == 0.0));
        assert!(single_line_response(-1.0, grid).is_err());
        assert!(thin_limit_response(-0.1, grid).is_err());
    }

    #[test]
    fn response_starts_at_minus_b() {
        let grid = make_grid(0.0, 0.1, 10).unwrap();
        let r = single_line_response(2.3, grid).unwrap();
        assert_relative_eq!(r.samples()[0].re, -2.3, epsilon = 1e-12);
        // continuity across the small-argument switch
        let eps = (SMALL_ARGUMENT / 2.0).powi(2) / 2.3;
        assert_relative_eq!(single_line_value(2.3, eps * 0.999), single_line_value(2.3, eps * 1.001), max_relative = 1e-6);
    }

    #[test]
    fn response_at_one_lifetime() {
        let expected = -(5.0f64).sqrt() * (-0.5f64).exp() * j1_integral(2.0 * 5.0f64.sqrt());
        assert_relative_eq!(single_line_value(5.0, 1.0), expected, max_relative = 1e-9);
    }

    #[test]
    fn thin_limit_values() {
        let grid = make_grid(0.0, 0.1, 1701).unwrap();
        let thin = thin_limit_response(0.1, grid).unwrap();
        assert_relative_eq!(thin.samples()[0].re, -0.1, epsilon = 1e-15);
        assert_relative_eq!(
            -0.1 * (-1.1f64 * 0.5 * (2.0 / 1.1)).exp(),
            -0.036_787_944,
            max_relative = 1e-7
        );
        let exact = single_line_response(0.1, grid).unwrap();
        let peak = exact.samples().iter().map(|s| s.norm()).fold(0.0, f64::max);
        let worst = thin
            .samples()
            .iter()
            .zip(exact.samples())
            .map(|(a, b)| (a - b).norm() / peak)
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "thin-limit deviation {worst}");
    }

    #[test]
    fn multiline_matches_bessel_form_for_one_line() {
        let grid = make_grid(0.0, 0.1, 1701).unwrap();
        for &b in &[0.5, 2.3, 5.0] {
            let t = multiline_transmission(&TransmissionModel::single_line(b), grid).unwrap();
            let exact = single_line_response(b, grid).unwrap();
            assert_eq!(t.singular_weight(), Complex64::new(1.0, 0.0));
            let err = relative_l2(t.samples(), exact.samples());
            assert!(err < 1e-4, "b = {b}: {err}");
        }
    }

    #[test]
    fn two_line_response_factorizes() {
        // T_two(ω) = T_1(ω)·T_1(ω − Δ): in time, the product of a line at zero
        // and a copy moved by Δ (phase ramp e^{−iΔt}).
        let grid = make_grid(0.0, 0.05, 3521).unwrap();
        let split = 63.0;
        let t = multiline_transmission(&TransmissionModel::two_line(2.5, split), grid).unwrap();
        let one = single_line_response(2.5, grid).unwrap();
        let moved = SignalEnvelope::causal_from_fn(grid, Complex64::new(1.0, 0.0), |tg| {
            single_line_value(2.5, tg) * Complex64::from_polar(1.0, -split * tg)
        });
        let unit = SignalEnvelope::causal_from_fn(grid, Complex64::new(1.0, 0.0), |tg| {
            Complex64::new(single_line_value(2.5, tg), 0.0)
        });
        let product = crate::signal::convolve(&unit, &moved).unwrap();
        assert!(relative_l2(product.samples(), t.samples()) < 2e-3);
        assert!(one.samples()[0].re < 0.0);
        let period_ns = 2.0 * std::f64::consts::PI / split * crate::units::GAMMA_INVERSE_NS;
        assert_relative_eq!(period_ns, 14.06, epsilon = 0.01);
    }

    #[test]
    fn passive_in_frequency_domain() {
        let model = TransmissionModel {
            lines: vec![NuclearLine::new(-10.0, 3.0), NuclearLine { detuning_gamma: 40.0, b_gamma: 7.0, width_gamma: 2.0 }],
            electronic_scale: 0.8,
        };
        for k in -4000..4000 {
            assert!(model.transmission_at(k as f64 * 0.05).norm() <= 1.0 + 1e-15);
        }
        // and for the sampled time-domain envelope
        let grid = make_grid(0.0, 0.1, 1761).unwrap();
        let env = multiline_transmission(&TransmissionModel::two_line(5.0, 63.0), grid).unwrap();
        let spectrum = to_frequency(&env, 4).unwrap();
        let worst = spectrum.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
        // the sampled window truncates the response, so allow the truncation leak
        assert!(worst < 1.05, "{worst}");
    }

    #[test]
    fn thickness_is_additive() {
        let grid = make_grid(0.0, 0.1, 1761).unwrap();
        let once = multiline_transmission(&TransmissionModel::single_line(3.5), grid).unwrap();
        let a = multiline_transmission(&TransmissionModel::single_line(1.2), grid).unwrap();
        let b = multiline_transmission(&TransmissionModel::single_line(2.3), grid).unwrap();
        let twice = crate::signal::convolve(&a, &b).unwrap();
        assert!(relative_l2(twice.samples(), once.samples()) < 1e-6);
        // exact in the frequency domain
        for k in -200..200 {
            let w = k as f64 * 0.3;
            let lhs = TransmissionModel::single_line(1.2).transmission_at(w)
                * TransmissionModel::single_line(2.3).transmission_at(w);
            assert!((lhs - TransmissionModel::single_line(3.5).transmission_at(w)).norm() < 1e-12);
        }
    }

    #[test]
    fn detuning_shift_is_a_phase_ramp() {
        let grid = make_grid(0.0, 0.1, 1761).unwrap();
        let model = TransmissionModel::two_line(5.0, 63.0);
        let base = multiline_transmission(&model, grid).unwrap();
        let shift = 17.3;
        let moved = multiline_transmission(&model.shifted(shift), grid).unwrap();
        let undone: Vec<Complex64> = moved
            .samples()
            .iter()
            .enumerate()
            .map(|(k, s)| s * Complex64::from_polar(1.0, shift * grid.time_gamma(k)))
            .collect();
        assert!(relative_l2(&undone, base.samples()) < 1e-8);
    }

    #[test]
    fn resolution_is_checked() {
        let grid = make_grid(0.0, 5.0, 40).unwrap();
        let model = TransmissionModel::two_line(1.0, 120.0);
        assert!(matches!(multiline_transmission(&model, grid), Err(Error::Resolution(_))));
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let model = TransmissionModel::two_line(5.0, 63.0);
        let back = TransmissionModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let doc = r#"{"lines":[{"detuning_gamma":0.0,"b_gamma":2.3}]}"#;
        let parsed = TransmissionModel::from_json(doc).unwrap();
        assert_eq!(parsed.lines[0].width_gamma, 1.0);
        assert_eq!(parsed.electronic_scale, 1.0);
        assert!(TransmissionModel::from_json(r#"{"lines":[]}"#).is_err());
        assert!(TransmissionModel::from_json(r#"{"lines":[{"detuning_gamma":0,"b_gamma":-1}]}"#).is_err());
    }
}
