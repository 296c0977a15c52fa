//! Uniform time grids, complex field envelopes with an explicit Dirac part, and
//! the convolution / Fourier machinery shared by every other module.
//!
//! A [`SignalEnvelope`] represents `w·δ(t) + f(t)`: the impulse at `t = 0` is
//! carried symbolically in `singular_weight` and never sampled. Grids are
//! expressed in nanoseconds; integrals (convolutions, transforms) use the
//! internal time unit 1/γ.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::units::ns_to_gamma;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Below this many causal samples the trapezoidal convolution is evaluated directly.
const DIRECT_CONVOLUTION_MAX: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start_ns: f64,
    pub dt_ns: f64,
    pub n: usize,
}

/// Builds the uniform grid `t_k = t_start + k·dt`, `k = 0..n`.
pub fn make_grid(t_start_ns: f64, dt_ns: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::new(t_start_ns, dt_ns, n)
}

impl TimeGrid {
    pub fn new(t_start_ns: f64, dt_ns: f64, n: usize) -> Result<Self> {
        if !(dt_ns > 0.0) || !dt_ns.is_finite() {
            return Err(invalid(format!("time step must be positive, got {dt_ns}")));
        }
        if n < 2 {
            return Err(invalid(format!("grid needs at least 2 samples, got {n}")));
        }
        if !t_start_ns.is_finite() {
            return Err(invalid("grid start must be finite"));
        }
        Ok(Self { t_start_ns, dt_ns, n })
    }

    /// Grid starting at `t = 0` that reaches at least `t_end_ns`.
    pub fn covering(t_end_ns: f64, dt_ns: f64) -> Result<Self> {
        let n = (t_end_ns / dt_ns - 1e-9).ceil() as usize + 1;
        Self::new(0.0, dt_ns, n.max(2))
    }

    #[inline]
    pub fn time_ns(&self, k: usize) -> f64 {
        self.t_start_ns + k as f64 * self.dt_ns
    }

    #[inline]
    pub fn time_gamma(&self, k: usize) -> f64 {
        ns_to_gamma(self.time_ns(k))
    }

    #[inline]
    pub fn dt_gamma(&self) -> f64 {
        ns_to_gamma(self.dt_ns)
    }

    pub fn t_end_ns(&self) -> f64 {
        self.time_ns(self.n - 1)
    }

    pub fn times_ns(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |k| self.time_ns(k))
    }

    /// Index of the sample at `t = 0`, if the grid contains it.
    pub fn origin_index(&self) -> Option<usize> {
        if self.t_start_ns > 0.0 {
            return None;
        }
        let k = (-self.t_start_ns / self.dt_ns).round();
        let residual = (self.t_start_ns + k * self.dt_ns).abs();
        if residual <= 1e-9 * self.dt_ns.max(1.0) && (k as usize) < self.n {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Index of the first sample at or after `t_ns`.
    pub fn index_at_or_after(&self, t_ns: f64) -> usize {
        let k = ((t_ns - self.t_start_ns) / self.dt_ns - 1e-9).ceil();
        (k.max(0.0) as usize).min(self.n)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n == other.n
            && (self.dt_ns - other.dt_ns).abs() <= 1e-12 * self.dt_ns
            && (self.t_start_ns - other.t_start_ns).abs() <= 1e-12 * self.dt_ns.max(1.0)
    }

    fn require_origin(&self) -> Result<usize> {
        self.origin_index()
            .ok_or_else(|| invalid("grid must contain t = 0 as a sample for causal operations"))
    }
}

/// Complex slowly-varying envelope `singular_weight·δ(t) + samples(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalEnvelope {
    grid: TimeGrid,
    singular_weight: Complex64,
    samples: Vec<Complex64>,
}

impl SignalEnvelope {
    pub fn new(grid: TimeGrid, singular_weight: Complex64, samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != grid.n {
            return Err(invalid(format!(
                "envelope has {} samples for a grid of {}",
                samples.len(),
                grid.n
            )));
        }
        if !singular_weight.is_finite() || samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid("envelope contains non-finite values"));
        }
        Ok(Self { grid, singular_weight, samples })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { grid, singular_weight: ZERO, samples: vec![ZERO; grid.n] }
    }

    /// Pure impulse `weight·δ(t)`.
    pub fn impulse(grid: TimeGrid, weight: Complex64) -> Self {
        Self { grid, singular_weight: weight, samples: vec![ZERO; grid.n] }
    }

    /// Causal envelope sampled from `f(t)` with `t` in units of 1/γ; samples at
    /// negative times are zero.
    pub fn causal_from_fn(
        grid: TimeGrid,
        singular_weight: Complex64,
        f: impl Fn(f64) -> Complex64,
    ) -> Self {
        let samples = (0..grid.n)
            .map(|k| {
                let t = grid.time_gamma(k);
                if t < -1e-12 * grid.dt_gamma() {
                    ZERO
                } else {
                    f(t.max(0.0))
                }
            })
            .collect();
        Self { grid, singular_weight, samples }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn singular_weight(&self) -> Complex64 {
        self.singular_weight
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    /// Smooth part only (the impulse removed).
    pub fn smooth_part(&self) -> Self {
        Self { singular_weight: ZERO, ..self.clone() }
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            grid: self.grid,
            singular_weight: self.singular_weight * factor,
            samples: self.samples.iter().map(|s| s * factor).collect(),
        }
    }

    pub fn add(&self, other: &SignalEnvelope) -> Result<Self> {
        check_same_grid(&self.grid, &other.grid)?;
        Ok(Self {
            grid: self.grid,
            singular_weight: self.singular_weight + other.singular_weight,
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &SignalEnvelope) -> Result<Self> {
        self.add(&other.scaled(Complex64::new(-1.0, 0.0)))
    }

    /// Pointwise product of the smooth part with `factor(k)`; the impulse is kept.
    pub fn modulate_smooth(&self, factor: impl Fn(usize) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            singular_weight: self.singular_weight,
            samples: self.samples.iter().enumerate().map(|(k, s)| s * factor(k)).collect(),
        }
    }

    /// |samples|², the detected intensity away from `t = 0`.
    pub fn intensity(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.norm_sqr()).collect()
    }

    pub fn is_causal(&self) -> bool {
        match self.grid.origin_index() {
            Some(i0) => self.samples[..i0].iter().all(|s| *s == ZERO),
            None => self.grid.t_start_ns > 0.0,
        }
    }
}

fn check_same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(invalid(format!("envelopes live on different grids: {a:?} vs {b:?}")))
    }
}

/// Relative L2 distance `‖a − b‖ / ‖b‖` between two sample vectors.
pub fn relative_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Precomputed FFT plans for trapezoidal convolution of causal sequences of a
/// fixed length. Plans are immutable and can be shared across threads.
#[derive(Clone)]
pub struct ConvolutionPlan {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ConvolutionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvolutionPlan")
            .field("len", &self.len)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl ConvolutionPlan {
    pub fn new(len: usize) -> Self {
        let fft_len = (2 * len).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        Self {
            len,
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Zero-padded forward transform of a causal sequence, for reuse with
    /// [`trapezoid_with_spectrum`](Self::trapezoid_with_spectrum).
    pub fn spectrum(&self, f: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(f.len(), self.len);
        let mut buf = vec![ZERO; self.fft_len];
        buf[..f.len()].copy_from_slice(f);
        self.forward.process(&mut buf);
        buf
    }

    /// `dt·Σ' f_j g_{k−j}` with trapezoidal end weights; element 0 is zero.
    pub fn trapezoid(&self, f: &[Complex64], g: &[Complex64], dt: f64) -> Vec<Complex64> {
        if self.len <= DIRECT_CONVOLUTION_MAX {
            return trapezoid_direct(f, g, dt);
        }
        let fs = self.spectrum(f);
        self.trapezoid_with_spectrum(&fs, f, g, dt)
    }

    pub fn trapezoid_with_spectrum(
        &self,
        f_spectrum: &[Complex64],
        f: &[Complex64],
        g: &[Complex64],
        dt: f64,
    ) -> Vec<Complex64> {
        let n = self.len;
        debug_assert_eq!(g.len(), n);
        let mut buf = vec![ZERO; self.fft_len];
        buf[..n].copy_from_slice(g);
        self.forward.process(&mut buf);
        for (b, fs) in buf.iter_mut().zip(f_spectrum) {
            *b *= fs;
        }
        self.inverse.process(&mut buf);
        let norm = dt / self.fft_len as f64;
        let (f0, g0) = (f[0], g[0]);
        (0..n)
            .map(|k| {
                if k == 0 {
                    ZERO
                } else {
                    buf[k] * norm - (f0 * g[k] + f[k] * g0) * (0.5 * dt)
                }
            })
            .collect()
    }
}

fn trapezoid_direct(f: &[Complex64], g: &[Complex64], dt: f64) -> Vec<Complex64> {
    let n = f.len();
    (0..n)
        .map(|k| {
            if k == 0 {
                return ZERO;
            }
            let mut acc = (f[0] * g[k] + f[k] * g[0]) * 0.5;
            for j in 1..k {
                acc += f[j] * g[k - j];
            }
            acc * dt
        })
        .collect()
}

/// `(aδ + f) ∗ (bδ + g) = ab·δ + a·g + b·f + f∗g` on a shared grid.
///
/// Both inputs must be causal and the grid must contain `t = 0`. The
/// smooth–smooth term uses trapezoidal quadrature in units of 1/γ.
pub fn convolve(a: &SignalEnvelope, b: &SignalEnvelope) -> Result<SignalEnvelope> {
    check_same_grid(&a.grid, &b.grid)?;
    let grid = a.grid;
    let i0 = grid.require_origin()?;
    let m = grid.n - i0;
    let plan = ConvolutionPlan::new(m);
    convolve_with_plan(&plan, a, b)
}

pub(crate) fn convolve_with_plan(
    plan: &ConvolutionPlan,
    a: &SignalEnvelope,
    b: &SignalEnvelope,
) -> Result<SignalEnvelope> {
    check_same_grid(&a.grid, &b.grid)?;
    let grid = a.grid;
    let i0 = grid.require_origin()?;
    if plan.len() != grid.n - i0 {
        return Err(invalid("convolution plan does not match grid"));
    }
    let f = &a.samples[i0..];
    let g = &b.samples[i0..];
    let smooth = plan.trapezoid(f, g, grid.dt_gamma());
    let mut samples = vec![ZERO; grid.n];
    for k in 0..smooth.len() {
        samples[i0 + k] = a.singular_weight * g[k] + b.singular_weight * f[k] + smooth[k];
    }
    Ok(SignalEnvelope {
        grid,
        singular_weight: a.singular_weight * b.singular_weight,
        samples,
    })
}

/// Discrete spectrum of an envelope on the conjugate angular-frequency grid
/// (units of γ), using the convention `F(ω) = ∫ f(t) e^{iωt} dt`.
#[derive(Debug, Clone)]
pub struct FrequencySpectrum {
    grid: TimeGrid,
    singular_weight: Complex64,
    omega_gamma: Vec<f64>,
    values: Vec<Complex64>,
}

impl FrequencySpectrum {
    pub fn omega_gamma(&self) -> &[f64] {
        &self.omega_gamma
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Angular frequencies (γ units) of a length-`len` DFT with time step `dt_gamma`,
/// in FFT order (non-negative first, then negative).
pub fn fft_frequencies(len: usize, dt_gamma: f64) -> Vec<f64> {
    let scale = 2.0 * std::f64::consts::PI / (len as f64 * dt_gamma);
    (0..len)
        .map(|m| {
            let signed = if m < len.div_ceil(2) { m as isize } else { m as isize - len as isize };
            signed as f64 * scale
        })
        .collect()
}

/// Fourier transform of `singular_weight·δ + samples`, zero-padded by
/// `pad_factor` to keep circular wrap-around out of subsequent products.
pub fn to_frequency(env: &SignalEnvelope, pad_factor: usize) -> Result<FrequencySpectrum> {
    if pad_factor < 2 {
        return Err(invalid(format!("pad factor must be at least 2, got {pad_factor}")));
    }
    let grid = env.grid;
    let len = grid.n * pad_factor;
    let dt = grid.dt_gamma();
    let t0 = ns_to_gamma(grid.t_start_ns);
    let omega = fft_frequencies(len, dt);
    let mut buf = vec![ZERO; len];
    buf[..grid.n].copy_from_slice(&env.samples);
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    let values = buf
        .iter()
        .zip(&omega)
        .map(|(s, w)| env.singular_weight + s * dt * Complex64::from_polar(1.0, w * t0))
        .collect();
    Ok(FrequencySpectrum { grid, singular_weight: env.singular_weight, omega_gamma: omega, values })
}

/// Inverse of [`to_frequency`].
pub fn from_frequency(spectrum: &FrequencySpectrum) -> SignalEnvelope {
    let grid = spectrum.grid;
    let len = spectrum.values.len();
    let dt = grid.dt_gamma();
    let t0 = ns_to_gamma(grid.t_start_ns);
    let mut buf: Vec<Complex64> = spectrum
        .values
        .iter()
        .zip(&spectrum.omega_gamma)
        .map(|(v, w)| (v - spectrum.singular_weight) * Complex64::from_polar(1.0, -w * t0))
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let norm = 1.0 / (len as f64 * dt);
    let samples = buf[..grid.n].iter().map(|s| s * norm).collect();
    SignalEnvelope { grid, singular_weight: spectrum.singular_weight, samples }
}
