//! Physical constants of the 14.4 keV 57Fe resonance and unit conversions.
//!
//! Internally, time is measured in units of the natural lifetime 1/γ and
//! frequencies (detunings, widths, thicknesses) in units of γ. Everything that
//! crosses a public boundary in nanoseconds is converted here.

use serde::{Deserialize, Serialize};

/// Natural lifetime 1/γ in nanoseconds.
pub const GAMMA_INVERSE_NS: f64 = 141.0;

/// Natural linewidth ħγ in neV.
pub const HBAR_GAMMA_NEV: f64 = 4.7;

/// Resonance (photon) energy in keV.
pub const PHOTON_ENERGY_KEV: f64 = 14.4;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Planck constant in eV·s.
pub const PLANCK_EV_S: f64 = 4.135_667_696e-15;

/// Latest time of the detection window in ns; the drift-to-deviation lever arm.
pub const ACQUISITION_END_NS: f64 = 170.0;

/// Synchrotron bunch period in ns.
pub const BUNCH_PERIOD_NS: f64 = 176.0;

#[inline]
pub fn ns_to_gamma(t_ns: f64) -> f64 {
    t_ns / GAMMA_INVERSE_NS
}

#[inline]
pub fn gamma_to_ns(t_gamma: f64) -> f64 {
    t_gamma * GAMMA_INVERSE_NS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub gamma_inverse_ns: f64,
    pub hbar_gamma_nev: f64,
    pub photon_energy_kev: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            gamma_inverse_ns: GAMMA_INVERSE_NS,
            hbar_gamma_nev: HBAR_GAMMA_NEV,
            photon_energy_kev: PHOTON_ENERGY_KEV,
        }
    }
}

impl PhysicalConstants {
    /// Resonant wavelength λ0 = hc/E in metres.
    pub fn wavelength_m(&self) -> f64 {
        PLANCK_EV_S * SPEED_OF_LIGHT / (self.photon_energy_kev * 1e3)
    }

    /// Carrier period T0 = λ0/c in zeptoseconds.
    pub fn carrier_period_zs(&self) -> f64 {
        self.wavelength_m() / SPEED_OF_LIGHT * 1e21
    }

    /// Temporal shift equivalent to a π phase error, T0/2, in zeptoseconds.
    pub fn half_period_zs(&self) -> f64 {
        0.5 * self.carrier_period_zs()
    }

    /// Doppler detuning in units of γ for a source/absorber velocity in mm/s.
    ///
    /// Positive velocity maps to positive detuning. The mapping is linear and
    /// meant for laboratory drive speeds (|v| up to about 1 m/s).
    pub fn doppler_detuning(&self, velocity_mm_s: f64) -> f64 {
        let energy_ev = self.photon_energy_kev * 1e3;
        energy_ev * (velocity_mm_s * 1e-3 / SPEED_OF_LIGHT) / (self.hbar_gamma_nev * 1e-9)
    }

    /// Inverse of [`doppler_detuning`](Self::doppler_detuning).
    pub fn velocity_for_detuning(&self, detuning_gamma: f64) -> f64 {
        detuning_gamma / self.doppler_detuning(1.0)
    }

    /// Temporal deviation (zs) bounded by a linear drift `A` in λ0 per ns,
    /// accumulated over the acquisition window: y = A·t2/c.
    pub fn drift_to_deviation_zs(&self, drift_lambda_per_ns: f64) -> f64 {
        drift_lambda_per_ns * ACQUISITION_END_NS * self.carrier_period_zs()
    }

    pub fn deviation_to_drift(&self, y_zs: f64) -> f64 {
        y_zs / (ACQUISITION_END_NS * self.carrier_period_zs())
    }

    /// Temporal shift for a relative motion scaling `s` of a π-jump base motion.
    pub fn scaling_to_deviation_zs(&self, s: f64) -> f64 {
        s * self.half_period_zs()
    }

    /// Temporal shift for a step-like phase offset `d` in radians.
    pub fn step_to_deviation_zs(&self, d_rad: f64) -> f64 {
        d_rad / std::f64::consts::PI * self.half_period_zs()
    }
}

/// Doppler detuning with the default 57Fe constants.
pub fn doppler_detuning(velocity_mm_s: f64) -> f64 {
    PhysicalConstants::default().doppler_detuning(velocity_mm_s)
}
