//! Double-pulse shaping by a moving resonant absorber.
//!
//! The absorber transmits the incident impulse unchanged (the excitation
//! pulse) and re-emits a delayed control pulse `R(t)`. A displacement `x(t)`
//! of the absorber along the beam imprints the phase `φ(t) = k[x(t) − x(0)]`
//! on the control pulse only.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::absorber::{multiline_transmission, TransmissionModel};
use crate::error::{invalid, Result};
use crate::signal::{SignalEnvelope, TimeGrid};
use crate::units::BUNCH_PERIOD_NS;

pub const SCHEMA_VERSION: u32 = 1;

/// Default number of knots of a free-form motion.
pub const DEFAULT_KNOTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Step,
    StepPlusDrift,
    ScaledBase,
    SteppedBase,
    FreeKnots,
}

/// Shape of the parametric step `x = amplitude·(1 − cos πu)/2`,
/// `u = clamp((t − center + rise/2)/rise, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepShape {
    pub rise_time_ns: f64,
    pub rise_center_ns: f64,
}

impl StepShape {
    /// About 15 ns of motion starting at the excitation.
    pub const DEFAULT: StepShape = StepShape { rise_time_ns: 15.0, rise_center_ns: 7.5 };
    /// Near-instantaneous jump used to compare opposite displacements.
    pub const RAPID: StepShape = StepShape { rise_time_ns: 0.5, rise_center_ns: 0.25 };
}

impl Default for StepShape {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    /// Step amplitude in units of λ0.
    pub amplitude_lambda: f64,
    pub rise_time_ns: f64,
    pub rise_center_ns: f64,
    /// Linear drift `A` in λ0 per ns.
    pub drift_lambda_per_ns: f64,
    /// Relative scaling `s` of the base motion.
    pub scale: f64,
    /// Step-like phase offset `d` in radians, present from the excitation on.
    pub step_offset_rad: f64,
    /// Constant displacement in λ0; never observable.
    pub offset_lambda: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            amplitude_lambda: 0.0,
            rise_time_ns: StepShape::DEFAULT.rise_time_ns,
            rise_center_ns: StepShape::DEFAULT.rise_center_ns,
            drift_lambda_per_ns: 0.0,
            scale: 0.0,
            step_offset_rad: 0.0,
            offset_lambda: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t_ns: f64,
    pub x_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub kind: MotionKind,
    #[serde(default)]
    pub params: MotionParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knots: Vec<Knot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<MotionProfile>>,
}

/// Named motions of the control experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CanonicalCase {
    /// No displacement: the control pulse drives the exciton back down.
    StimulatedEmission,
    /// Half-wavelength step: the control pulse adds to the exciton.
    EnhancedExcitation,
    /// Half-wavelength step in the opposite direction.
    OppositeStep,
    /// Enhanced excitation with an additional drift `A` in λ0/ns.
    WithDrift(f64),
    /// Enhanced excitation scaled by `1 + s`.
    Scaled(f64),
    /// Enhanced excitation with a step-like phase offset `d` in radians.
    Stepped(f64),
}

pub fn canonical_motion(case: CanonicalCase) -> MotionProfile {
    canonical_motion_with(case, StepShape::DEFAULT)
}

pub fn canonical_motion_with(case: CanonicalCase, shape: StepShape) -> MotionProfile {
    let boost = MotionProfile::step(0.5, shape);
    match case {
        CanonicalCase::StimulatedEmission => MotionProfile::step(0.0, shape),
        CanonicalCase::EnhancedExcitation => boost,
        CanonicalCase::OppositeStep => MotionProfile::step(-0.5, shape),
        CanonicalCase::WithDrift(a) => MotionProfile::with_drift(boost, a),
        CanonicalCase::Scaled(s) => MotionProfile::scaled(boost, s),
        CanonicalCase::Stepped(d) => MotionProfile::stepped(boost, d),
    }
}

/// Uniformly spaced knot times over one bunch period.
pub fn knot_times(n: usize) -> Vec<f64> {
    let step = BUNCH_PERIOD_NS / (n.max(2) - 1) as f64;
    (0..n).map(|k| k as f64 * step).collect()
}

impl MotionProfile {
    pub fn stationary() -> Self {
        Self::step(0.0, StepShape::DEFAULT)
    }

    pub fn step(amplitude_lambda: f64, shape: StepShape) -> Self {
        Self {
            kind: MotionKind::Step,
            params: MotionParams {
                amplitude_lambda,
                rise_time_ns: shape.rise_time_ns,
                rise_center_ns: shape.rise_center_ns,
                ..MotionParams::default()
            },
            knots: Vec::new(),
            base: None,
        }
    }

    fn derived(kind: MotionKind, base: MotionProfile, params: MotionParams) -> Self {
        Self { kind, params, knots: Vec::new(), base: Some(Box::new(base)) }
    }

    pub fn with_drift(base: MotionProfile, drift_lambda_per_ns: f64) -> Self {
        Self::derived(
            MotionKind::StepPlusDrift,
            base,
            MotionParams { drift_lambda_per_ns, ..MotionParams::default() },
        )
    }

    pub fn scaled(base: MotionProfile, scale: f64) -> Self {
        Self::derived(MotionKind::ScaledBase, base, MotionParams { scale, ..MotionParams::default() })
    }

    pub fn stepped(base: MotionProfile, step_offset_rad: f64) -> Self {
        Self::derived(
            MotionKind::SteppedBase,
            base,
            MotionParams { step_offset_rad, ..MotionParams::default() },
        )
    }

    pub fn free_knots(knots: Vec<Knot>) -> Result<Self> {
        let motion = Self { kind: MotionKind::FreeKnots, params: MotionParams::default(), knots, base: None };
        motion.validate()?;
        Ok(motion)
    }

    /// Free-form motion on the default uniform knot times.
    pub fn from_knot_values(values: &[f64]) -> Result<Self> {
        let times = knot_times(values.len());
        Self::free_knots(times.into_iter().zip(values).map(|(t_ns, &x_lambda)| Knot { t_ns, x_lambda }).collect())
    }

    /// Samples `motion` at the default knot times, producing a free-form copy.
    pub fn to_free_knots(&self, n: usize) -> Result<Self> {
        let values: Vec<f64> = knot_times(n).iter().map(|&t| self.relative_displacement(t)).collect();
        Self::from_knot_values(&values)
    }

    pub fn knot_values(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.x_lambda).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let finite = [
            p.amplitude_lambda,
            p.rise_time_ns,
            p.rise_center_ns,
            p.drift_lambda_per_ns,
            p.scale,
            p.step_offset_rad,
            p.offset_lambda,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid("motion parameters must be finite"));
        }
        match self.kind {
            MotionKind::Step => {
                if !(p.rise_time_ns > 0.0) {
                    return Err(invalid(format!("rise_time must be positive, got {}", p.rise_time_ns)));
                }
            }
            MotionKind::StepPlusDrift | MotionKind::ScaledBase | MotionKind::SteppedBase => {
                self.base
                    .as_ref()
                    .ok_or_else(|| invalid(format!("{:?} motion needs a base", self.kind)))?
                    .validate()?;
            }
            MotionKind::FreeKnots => {
                if self.knots.len() < 2 {
                    return Err(invalid("free_knots motion needs at least two knots"));
                }
                if self.knots.iter().any(|k| !k.t_ns.is_finite() || !k.x_lambda.is_finite()) {
                    return Err(invalid("knots must be finite"));
                }
                if self.knots.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
                    return Err(invalid("knot times must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    fn base(&self) -> &MotionProfile {
        self.base.as_deref().expect("validated motion has a base")
    }

    /// Displacement relative to the position just before the excitation, in λ0.
    pub fn relative_displacement(&self, t_ns: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            MotionKind::Step => {
                let ramp = |t: f64| {
                    let start = p.rise_center_ns - 0.5 * p.rise_time_ns;
                    let u = ((t - start) / p.rise_time_ns).clamp(0.0, 1.0);
                    0.5 * (1.0 - (PI * u).cos())
                };
                p.amplitude_lambda * (ramp(t_ns) - ramp(0.0))
            }
            MotionKind::StepPlusDrift => self.base().relative_displacement(t_ns) + p.drift_lambda_per_ns * t_ns,
            MotionKind::ScaledBase => (1.0 + p.scale) * self.base().relative_displacement(t_ns),
            MotionKind::SteppedBase => {
                let jump = if t_ns >= 0.0 { p.step_offset_rad / (2.0 * PI) } else { 0.0 };
                self.base().relative_displacement(t_ns) + jump
            }
            MotionKind::FreeKnots => pchip(&self.knots, t_ns) - pchip(&self.knots, 0.0),
        }
    }

    /// Absolute displacement `x(t)` in λ0.
    pub fn displacement(&self, t_ns: f64) -> f64 {
        let own = self.params.offset_lambda;
        match self.kind {
            MotionKind::FreeKnots => own + pchip(&self.knots, t_ns),
            MotionKind::Step => own + self.relative_displacement(t_ns),
            _ => own + self.base().displacement(0.0) + self.relative_displacement(t_ns),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            #[serde(flatten)]
            motion: &'a MotionProfile,
        }
        Ok(serde_json::to_string_pretty(&Doc { schema_version: SCHEMA_VERSION, motion: self })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let motion: MotionProfile = serde_json::from_str(text)?;
        motion.validate()?;
        Ok(motion)
    }
}

/// Monotone piecewise-cubic Hermite interpolation (Fritsch–Carlson slopes),
/// held constant outside the knot range.
fn pchip(knots: &[Knot], t: f64) -> f64 {
    let n = knots.len();
    if t <= knots[0].t_ns {
        return knots[0].x_lambda;
    }
    if t >= knots[n - 1].t_ns {
        return knots[n - 1].x_lambda;
    }
    let i = knots.partition_point(|k| k.t_ns <= t) - 1;
    let secant = |j: usize| (knots[j + 1].x_lambda - knots[j].x_lambda) / (knots[j + 1].t_ns - knots[j].t_ns);
    let h = |j: usize| knots[j + 1].t_ns - knots[j].t_ns;
    let slope = |j: usize| -> f64 {
        if j == 0 || j == n - 1 {
            let (s, hs, other, ho) = if j == 0 {
                (secant(0), h(0), if n > 2 { secant(1) } else { secant(0) }, if n > 2 { h(1) } else { h(0) })
            } else {
                (secant(n - 2), h(n - 2), if n > 2 { secant(n - 3) } else { secant(n - 2) }, if n > 2 { h(n - 3) } else { h(n - 2) })
            };
            // shape-preserving three-point end condition
            let d = ((2.0 * hs + ho) * s - hs * other) / (hs + ho);
            if d * s <= 0.0 {
                0.0
            } else if s * other < 0.0 && d.abs() > 3.0 * s.abs() {
                3.0 * s
            } else {
                d
            }
        } else {
            let (s0, s1) = (secant(j - 1), secant(j));
            if s0 * s1 <= 0.0 {
                0.0
            } else {
                let (h0, h1) = (h(j - 1), h(j));
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                (w1 + w2) / (w1 / s0 + w2 / s1)
            }
        }
    };
    let (x0, x1) = (knots[i].x_lambda, knots[i + 1].x_lambda);
    let hi = h(i);
    let u = (t - knots[i].t_ns) / hi;
    let (u2, u3) = (u * u, u * u * u);
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    h00 * x0 + h10 * hi * slope(i) + h01 * x1 + h11 * hi * slope(i + 1)
}

/// Translational phase `φ(t) = 2π[x(t) − x(0)]` on the grid, in radians.
pub fn phase_from_motion(motion: &MotionProfile, grid: &TimeGrid) -> Result<Vec<f64>> {
    motion.validate()?;
    Ok((0..grid.n)
        .map(|k| 2.0 * PI * motion.relative_displacement(grid.time_ns(k)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoublePulse {
    pub field: SignalEnvelope,
}

impl DoublePulse {
    /// Weight of the (unaffected) excitation impulse.
    pub fn excitation_weight(&self) -> Complex64 {
        self.field.singular_weight()
    }

    /// Samples of the phase-controlled control pulse.
    pub fn control(&self) -> &[Complex64] {
        self.field.samples()
    }
}

/// Imprints `e^{iφ(t)}` on the smooth part of a stationary transmission.
pub fn apply_phase(transmission: &SignalEnvelope, phase: &[f64]) -> Result<SignalEnvelope> {
    if phase.len() != transmission.grid().n {
        return Err(invalid("phase trace does not match the grid"));
    }
    Ok(transmission.modulate_smooth(|k| Complex64::from_polar(1.0, phase[k])))
}

/// `E_SCU(t) = δ(t) + e^{iφ(t)}R(t)` for a moving absorber.
pub fn shape_double_pulse(scu: &TransmissionModel, motion: &MotionProfile, grid: TimeGrid) -> Result<DoublePulse> {
    let transmission = multiline_transmission(scu, grid)?;
    let phase = phase_from_motion(motion, &grid)?;
    Ok(DoublePulse { field: apply_phase(&transmission, &phase)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{make_grid, relative_l2};
    use crate::units::PhysicalConstants;
    use approx::assert_relative_eq;

    fn grid() -> TimeGrid {
        make_grid(0.0, 0.1, 1761).unwrap()
    }

    #[test]
    fn stationary_motion_has_no_phase() {
        let phase = phase_from_motion(&MotionProfile::stationary(), &grid()).unwrap();
        assert!(phase.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn half_wavelength_step_gives_pi() {
        let g = grid();
        let phase = phase_from_motion(&canonical_motion(CanonicalCase::EnhancedExcitation), &g).unwrap();
        assert_eq!(phase[0], 0.0);
        assert_relative_eq!(*phase.last().unwrap(), PI, epsilon = 1e-12);
        // the ramp takes 15 ns
        let at = |t: f64| phase[(t / 0.1).round() as usize];
        assert!(at(10.0) < PI - 0.1);
        assert_relative_eq!(at(15.0), PI, epsilon = 1e-12);
        let opposite = phase_from_motion(&canonical_motion(CanonicalCase::OppositeStep), &g).unwrap();
        assert_relative_eq!(*opposite.last().unwrap(), -PI, epsilon = 1e-12);
    }

    #[test]
    fn drift_of_25_zs_gives_terminal_phase() {
        let c = PhysicalConstants::default();
        let a = c.deviation_to_drift(25.0);
        let drift_only = MotionProfile::with_drift(MotionProfile::stationary(), a);
        let g = make_grid(0.0, 0.1, 1701).unwrap();
        let phase = phase_from_motion(&drift_only, &g).unwrap();
        let expected = 2.0 * PI * 25.0 / c.carrier_period_zs();
        assert_relative_eq!(*phase.last().unwrap(), expected, max_relative = 1e-9);
        assert_relative_eq!(expected, 0.547, epsilon = 1e-3);
    }

    #[test]
    fn stationary_pulse_is_plain_transmission() {
        let g = grid();
        let scu = TransmissionModel::single_line(5.0);
        let pulse = shape_double_pulse(&scu, &MotionProfile::stationary(), g).unwrap();
        assert_eq!(pulse.field, multiline_transmission(&scu, g).unwrap());
        assert_eq!(pulse.excitation_weight(), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn instantaneous_step_flips_control_sign() {
        let g = grid();
        let scu = TransmissionModel::single_line(5.0);
        let motion = MotionProfile::step(0.5, StepShape { rise_time_ns: 0.05, rise_center_ns: 0.025 });
        let pulse = shape_double_pulse(&scu, &motion, g).unwrap();
        let still = multiline_transmission(&scu, g).unwrap();
        for k in 1..g.n {
            assert!((pulse.control()[k] + still.samples()[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn scaled_and_stepped_phases() {
        let g = grid();
        let base = canonical_motion(CanonicalCase::EnhancedExcitation);
        let base_phase = phase_from_motion(&base, &g).unwrap();
        let scaled = phase_from_motion(&canonical_motion(CanonicalCase::Scaled(0.1)), &g).unwrap();
        let stepped = phase_from_motion(&canonical_motion(CanonicalCase::Stepped(0.3)), &g).unwrap();
        for k in 0..g.n {
            assert_relative_eq!(scaled[k], 1.1 * base_phase[k], epsilon = 1e-12);
            assert_relative_eq!(stepped[k], base_phase[k] + 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_offset_is_invisible() {
        let g = grid();
        let scu = TransmissionModel::two_line(2.5, 63.0);
        let mut moved = canonical_motion(CanonicalCase::EnhancedExcitation);
        let a = shape_double_pulse(&scu, &moved, g).unwrap();
        moved.params.offset_lambda = 12.345;
        let b = shape_double_pulse(&scu, &moved, g).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(moved.displacement(100.0), 12.845, epsilon = 1e-12);
    }

    #[test]
    fn constant_velocity_is_a_detuning() {
        let g = grid();
        let scu = TransmissionModel::two_line(2.5, 63.0);
        let a = 0.02; // λ0 per ns
        let drift = MotionProfile::with_drift(MotionProfile::stationary(), a);
        let pulse = shape_double_pulse(&scu, &drift, g).unwrap();
        let kv = 2.0 * PI * a * crate::units::GAMMA_INVERSE_NS;
        let detuned = multiline_transmission(&scu.shifted(-kv), g).unwrap();
        assert!(relative_l2(pulse.control(), detuned.samples()) < 1e-8);
    }

    #[test]
    fn free_knots_reproduce_smooth_step() {
        let motion = canonical_motion(CanonicalCase::EnhancedExcitation);
        let knots = motion.to_free_knots(DEFAULT_KNOTS).unwrap();
        assert_eq!(knots.knots.len(), 32);
        assert_relative_eq!(knots.knots[31].t_ns, 176.0);
        assert_relative_eq!(knots.relative_displacement(170.0), 0.5, epsilon = 1e-12);
        assert!(knots.validate().is_ok());
        let bad = MotionProfile::free_knots(vec![Knot { t_ns: 1.0, x_lambda: 0.0 }, Knot { t_ns: 1.0, x_lambda: 1.0 }]);
        assert!(bad.is_err());
    }

    #[test]
    fn pchip_is_monotone_and_interpolating() {
        let knots: Vec<Knot> = [(0.0, 0.0), (1.0, 0.0), (2.0, 1.0), (3.0, 1.1), (5.0, 1.1)]
            .iter()
            .map(|&(t_ns, x_lambda)| Knot { t_ns, x_lambda })
            .collect();
        for k in &knots {
            assert_relative_eq!(pchip(&knots, k.t_ns), k.x_lambda, epsilon = 1e-14);
        }
        let mut last = f64::NEG_INFINITY;
        for i in 0..=500 {
            let v = pchip(&knots, i as f64 * 0.01);
            assert!(v >= last - 1e-14 && (-1e-14..=1.1 + 1e-14).contains(&v));
            last = v;
        }
        // exact on linear data
        let line: Vec<Knot> = (0..6).map(|i| Knot { t_ns: i as f64, x_lambda: 0.3 * i as f64 }).collect();
        assert_relative_eq!(pchip(&line, 2.37), 0.711, epsilon = 1e-12);
    }

    #[test]
    fn json_roundtrip() {
        let motion = canonical_motion(CanonicalCase::WithDrift(1e-4));
        let text = motion.to_json().unwrap();
        assert!(text.contains("\"kind\": \"step_plus_drift\""));
        assert_eq!(MotionProfile::from_json(&text).unwrap(), motion);
        let free = MotionProfile::from_knot_values(&[0.0, 0.1, 0.5]).unwrap();
        assert_eq!(MotionProfile::from_json(&free.to_json().unwrap()).unwrap(), free);
        assert!(MotionProfile::from_json(r#"{"kind":"scaled_base"}"#).is_err());
        assert!(MotionProfile::from_json(r#"{"kind":"step","params":{"rise_time_ns":0}}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn phase_composes_additively(amp in -1.0f64..1.0, drift in -0.01f64..0.01) {
                let g = make_grid(0.0, 0.5, 353).unwrap();
                let step = MotionProfile::step(amp, StepShape::DEFAULT);
                let both = phase_from_motion(&MotionProfile::with_drift(step.clone(), drift), &g).unwrap();
                let a = phase_from_motion(&step, &g).unwrap();
                let b = phase_from_motion(&MotionProfile::with_drift(MotionProfile::stationary(), drift), &g).unwrap();
                for k in 0..g.n {
                    prop_assert!((both[k] - a[k] - b[k]).abs() < 1e-12);
                }
            }

            #[test]
            fn knot_offset_leaves_phase(values in proptest::collection::vec(-1.0f64..1.0, 4..40), c in -10.0f64..10.0) {
                let g = make_grid(0.0, 0.5, 353).unwrap();
                let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
                let a = phase_from_motion(&MotionProfile::from_knot_values(&values).unwrap(), &g).unwrap();
                let b = phase_from_motion(&MotionProfile::from_knot_values(&shifted).unwrap(), &g).unwrap();
                for k in 0..g.n {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }
}
