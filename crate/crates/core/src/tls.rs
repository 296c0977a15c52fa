//! Two-level description of the driven target in the weak-excitation limit.
//!
//! The coherence follows `⟨σ_ge⟩ = −(i/2)·Ω ∗ θ(t)e^{−γ̃t/2}` with the
//! superradiantly enhanced width `γ̃ = γ + b`, and the transmitted field is
//! `E_in + α⟨d⟩` with `α = −2ib`. Together these reproduce the thin-target
//! forward-scattering response.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::{convolve, SignalEnvelope, TimeGrid};
use crate::units::GAMMA_INVERSE_NS;

/// Samples below this fraction of the peak magnitude have no defined phase.
const PHASE_MASK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsParams {
    pub b: f64,
    pub gamma: f64,
}

impl TlsParams {
    pub fn new(b: f64) -> Result<Self> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(invalid(format!("thickness must be non-negative, got {b}")));
        }
        Ok(Self { b, gamma: 1.0 })
    }

    pub fn gamma_tilde(&self) -> f64 {
        self.gamma + self.b
    }

    /// Field coupling of the dipole, in units where ħ/d² = 1.
    pub fn alpha(&self) -> Complex64 {
        Complex64::new(0.0, -2.0 * self.b)
    }

    fn kernel(&self, grid: TimeGrid) -> SignalEnvelope {
        let rate = 0.5 * self.gamma_tilde();
        SignalEnvelope::causal_from_fn(grid, Complex64::new(0.0, 0.0), |t| Complex64::new((-rate * t).exp(), 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipoleTrace {
    pub grid: TimeGrid,
    pub values: Vec<Complex64>,
}

impl DipoleTrace {
    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// Unwrapped phase; `None` where the magnitude is too small to define one.
    pub fn phase(&self) -> Vec<Option<f64>> {
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let floor = PHASE_MASK * peak;
        let mut last: Option<f64> = None;
        self.values
            .iter()
            .map(|v| {
                if peak == 0.0 || v.norm() < floor {
                    return None;
                }
                let raw = v.arg();
                let unwrapped = match last {
                    None => raw,
                    Some(prev) => {
                        let mut p = raw;
                        while p - prev > std::f64::consts::PI {
                            p -= 2.0 * std::f64::consts::PI;
                        }
                        while p - prev < -std::f64::consts::PI {
                            p += 2.0 * std::f64::consts::PI;
                        }
                        p
                    }
                };
                last = Some(unwrapped);
                Some(unwrapped)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", "re", "im", "magnitude", "phase_rad"])?;
        let phase = self.phase();
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([
                format!("{}", self.grid.time_ns(k)),
                format!("{}", v.re),
                format!("{}", v.im),
                format!("{}", v.norm()),
                phase[k].map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Coherence `⟨σ_ge(t)⟩` driven by the field envelope `drive`.
pub fn coherence_response(drive: &SignalEnvelope, params: &TlsParams) -> Result<DipoleTrace> {
    if !drive.is_causal() {
        return Err(invalid("drive must be causal"));
    }
    let grid = *drive.grid();
    let response = convolve(drive, &params.kernel(grid))?;
    let factor = Complex64::new(0.0, -0.5);
    Ok(DipoleTrace { grid, values: response.samples().iter().map(|v| v * factor).collect() })
}

/// Transmitted field `E_in + α⟨d⟩`.
pub fn output_field(drive: &SignalEnvelope, params: &TlsParams) -> Result<SignalEnvelope> {
    let dipole = coherence_response(drive, params)?;
    let alpha = params.alpha();
    Ok(drive.modulate_smooth(|_| Complex64::new(1.0, 0.0)).add(&SignalEnvelope::new(
        dipole.grid,
        Complex64::new(0.0, 0.0),
        dipole.values.iter().map(|v| alpha * v).collect(),
    )?)?)
}

/// Time in ns at which enhanced excitation overtakes stimulated emission in
/// the thin limit, `1/b`.
pub fn crossover_time(b: f64) -> Result<f64> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(invalid(format!("crossover needs positive thickness, got {b}")));
    }
    Ok(GAMMA_INVERSE_NS / b)
}

/// `|E_boost|² − |E_SE|² = 4b²e^{−(γ+b)t}(bt − 1)` with `t` in units of 1/γ.
pub fn intensity_difference_analytic(b: f64, t_gamma: f64) -> f64 {
    4.0 * b * b * (-(1.0 + b) * t_gamma).exp() * (b * t_gamma - 1.0)
}

/// Thin-limit control drives `δ(t) ∓ θ(t)·b·e^{−γ̃t/2}` for the stimulated
/// emission (`−`) and enhanced excitation (`+`) cases.
pub fn thin_drives(b: f64, grid: TimeGrid) -> Result<(SignalEnvelope, SignalEnvelope)> {
    let params = TlsParams::new(b)?;
    let rate = 0.5 * params.gamma_tilde();
    let one = Complex64::new(1.0, 0.0);
    let se = SignalEnvelope::causal_from_fn(grid, one, |t| Complex64::new(-b * (-rate * t).exp(), 0.0));
    let boost = SignalEnvelope::causal_from_fn(grid, one, |t| Complex64::new(b * (-rate * t).exp(), 0.0));
    Ok((se, boost))
}
