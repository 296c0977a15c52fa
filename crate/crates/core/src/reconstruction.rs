//! Poisson likelihood fits of the forward model to binned photon counts:
//! free-form motion reconstruction by an evolution strategy, one-parameter
//! noise-model fits, and dipole extraction from a fitted motion.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experiment::{ExperimentConfig, ForwardModel, Intensity2D, Spectrum2D};
use crate::pulse::{knot_times, MotionProfile};
use crate::signal::SignalEnvelope;
use crate::tls::{coherence_response, DipoleTrace, TlsParams};
use crate::units::PhysicalConstants;

pub const SCHEMA_VERSION: u32 = 1;

/// Samples with fewer counts cannot be fitted meaningfully.
pub const MIN_SAMPLE_COUNTS: u64 = 100;

/// `Σ n·ln(sλ) − sλ` over all cells. A cell with `λ = 0` and `n > 0` is
/// excluded by the model and makes the result `−∞`.
pub fn poisson_log_likelihood(observed: &[u64], expected: &[f64], scale: f64) -> Result<f64> {
    if observed.len() != expected.len() {
        return Err(invalid(format!(
            "observed has {} cells but expected has {}",
            observed.len(),
            expected.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(invalid("scale must be positive"));
    }
    let mut ll = 0.0;
    for (&n, &lam) in observed.iter().zip(expected) {
        let mu = scale * lam;
        if n > 0 {
            if mu <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            ll += n as f64 * mu.ln();
        }
        ll -= mu;
    }
    Ok(ll)
}

/// Number of cells with counts where the model predicts none.
pub fn excluded_cells(observed: &[u64], expected: &[f64]) -> usize {
    observed.iter().zip(expected).filter(|(&n, &l)| n > 0 && l <= 0.0).count()
}

/// Poisson maximum-likelihood global scale `Σn / Σλ`.
pub fn fit_scale(observed: &[u64], expected: &[f64]) -> Result<f64> {
    let total: f64 = expected.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("expected counts sum to zero"));
    }
    Ok(observed.iter().sum::<u64>() as f64 / total)
}

/// Log-likelihood with the global scale profiled out, returned together with
/// the scale. The value is taken relative to the saturated model
/// (`Σ n·ln(sλ/n) − sλ + n`), which differs from [`poisson_log_likelihood`]
/// by a constant of the data only and keeps differences accurate for large
/// counts.
pub fn profiled_log_likelihood(observed: &[u64], expected: &[f64]) -> Result<(f64, f64)> {
    let as_real: Vec<f64> = observed.iter().map(|&n| n as f64).collect();
    profiled_log_likelihood_real(&as_real, expected)
}

/// [`profiled_log_likelihood`] for real-valued (e.g. noiseless expected) data.
pub fn profiled_log_likelihood_real(observed: &[f64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() {
        return Err(invalid("observed and expected shapes differ"));
    }
    let total: f64 = expected.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("expected counts sum to zero"));
    }
    let s = observed.iter().sum::<f64>() / total;
    let mut ll = 0.0;
    for (&n, &lam) in observed.iter().zip(expected) {
        let mu = s * lam;
        if n > 0.0 {
            if mu <= 0.0 {
                return Ok((f64::NEG_INFINITY, s));
            }
            ll += n * (mu / n).ln() - mu + n;
        } else {
            ll -= mu;
        }
    }
    Ok((ll, s))
}

/// Sums groups of `factor` consecutive time bins; trailing bins are dropped.
pub fn rebin_intensity(lambda: &Intensity2D, factor: usize) -> Intensity2D {
    let factor = factor.max(1);
    let rows = lambda.rows() / factor;
    let cols = lambda.cols();
    let mut values = vec![0.0; rows * cols];
    for r in 0..rows {
        for f in 0..factor {
            let src = (r * factor + f) * cols;
            for c in 0..cols {
                values[r * cols + c] += lambda.values[src + c];
            }
        }
    }
    Intensity2D {
        time_edges_ns: (0..=rows).map(|r| lambda.time_edges_ns[r * factor]).collect(),
        detunings_gamma: lambda.detunings_gamma.clone(),
        values,
    }
}

/// Time-bin grouping that gives bins of about `bin_ns`.
pub fn rebin_factor(config: &ExperimentConfig, bin_ns: f64) -> usize {
    ((bin_ns / config.dt_ns).round() as usize).max(1)
}

fn exposure_or_uniform(observed: &Spectrum2D) -> Vec<f64> {
    if observed.exposure_s.len() == observed.cols() {
        observed.exposure_s.clone()
    } else {
        vec![1.0; observed.cols()]
    }
}

fn check_shape(observed: &Spectrum2D, lambda: &Intensity2D) -> Result<()> {
    if observed.rows() != lambda.rows() || observed.cols() != lambda.cols() {
        return Err(invalid(format!(
            "spectrum is {}×{} but the model is {}×{}",
            observed.rows(),
            observed.cols(),
            lambda.rows(),
            lambda.cols()
        )));
    }
    Ok(())
}

/// Profiled log-likelihood of binned data under a model intensity, using the
/// spectrum's per-column exposure.
pub fn spectrum_log_likelihood(observed: &Spectrum2D, lambda: &Intensity2D) -> Result<f64> {
    check_shape(observed, lambda)?;
    let expected = lambda.weighted(&exposure_or_uniform(observed))?;
    Ok(profiled_log_likelihood(&observed.counts, &expected)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EaParams {
    pub population: usize,
    pub elite_fraction: f64,
    pub generations: usize,
    pub knots: usize,
    /// Spread of the initial knot values (uniform, λ0 units).
    pub init_spread_lambda: f64,
    pub init_sigma_lambda: f64,
    pub min_sigma_lambda: f64,
    /// Stop once the best likelihood improved by less than this over `patience` generations.
    pub tolerance_nats: f64,
    pub patience: usize,
    /// Probability that a child also shifts all knots after a random index.
    pub tail_shift_rate: f64,
    /// Width of the time bins the likelihood is evaluated on.
    pub time_bin_ns: f64,
}

impl Default for EaParams {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.25,
            generations: 1000,
            knots: crate::pulse::DEFAULT_KNOTS,
            init_spread_lambda: 0.5,
            init_sigma_lambda: 0.05,
            min_sigma_lambda: 1e-5,
            tolerance_nats: 0.05,
            patience: 25,
            tail_shift_rate: 0.2,
            time_bin_ns: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_loglik: f64,
    pub median_loglik: f64,
    pub mean_sigma_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(default = "fit_schema")]
    pub schema_version: u32,
    pub motion: MotionProfile,
    pub scale_factor: f64,
    pub log_likelihood: f64,
    pub generations: usize,
    pub converged: bool,
    pub seed: u64,
    pub trace: Vec<GenerationStats>,
    pub config: ExperimentConfig,
}

fn fit_schema() -> u32 {
    SCHEMA_VERSION
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: FitResult = serde_json::from_str(text).map_err(|e| Error::Malformed(format!("fit: {e}")))?;
        fit.motion.validate()?;
        fit.config.validate()?;
        Ok(fit)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["generation", "best_loglik"])?;
        for g in &self.trace {
            w.write_record([g.generation.to_string(), g.best_loglik.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Control phase `φ(t)` of the fitted motion at `t_ns`.
    pub fn phase_at(&self, t_ns: f64) -> f64 {
        2.0 * PI * self.motion.relative_displacement(t_ns)
    }
}

/// Model intensity and likelihood evaluation on rebinned data.
pub struct MotionObjective<'a> {
    model: ForwardModel,
    factor: usize,
    counts: Vec<u64>,
    exposure: Vec<f64>,
    config: &'a ExperimentConfig,
}

impl<'a> MotionObjective<'a> {
    /// `observed` must be binned on the model's fine time bins.
    pub fn new(observed: &Spectrum2D, config: &'a ExperimentConfig, time_bin_ns: f64) -> Result<Self> {
        let model = ForwardModel::new(config)?;
        let fine_rows = model.time_edges_ns().len() - 1;
        if observed.rows() != fine_rows || observed.cols() != config.detuning.points {
            return Err(invalid(format!(
                "spectrum is {}×{} but the configuration implies {}×{}",
                observed.rows(),
                observed.cols(),
                fine_rows,
                config.detuning.points
            )));
        }
        let factor = rebin_factor(config, time_bin_ns);
        let rows = fine_rows / factor;
        let cols = observed.cols();
        let mut counts = vec![0u64; rows * cols];
        for r in 0..rows * factor {
            for c in 0..cols {
                counts[(r / factor) * cols + c] += observed.at(r, c);
            }
        }
        Ok(Self { model, factor, counts, exposure: exposure_or_uniform(observed), config })
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn intensity(&self, motion: &MotionProfile) -> Result<Intensity2D> {
        Ok(rebin_intensity(&self.model.intensity(motion)?, self.factor))
    }

    /// Profiled log-likelihood and scale of a candidate motion.
    pub fn evaluate(&self, motion: &MotionProfile) -> Result<(f64, f64)> {
        let lambda = self.intensity(motion)?;
        let expected = lambda.weighted(&self.exposure)?;
        profiled_log_likelihood(&self.counts, &expected)
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }
}

#[derive(Debug, Clone)]
struct Individual {
    x: Vec<f64>,
    sigma: Vec<f64>,
    loglik: f64,
    scale: f64,
    roughness: f64,
}

fn roughness(x: &[f64]) -> f64 {
    x.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum()
}

fn rank(a: &Individual, b: &Individual) -> Ordering {
    b.loglik
        .total_cmp(&a.loglik)
        .then_with(|| a.roughness.total_cmp(&b.roughness))
}

/// Moves every knot by whole wavelengths onto the branch closest to its
/// predecessor. Knot phases are only defined modulo 2π, and this picks the
/// representative without spurious full-wavelength excursions in between.
fn unwrap_knots(x: &mut [f64]) {
    for k in 1..x.len() {
        x[k] -= (x[k] - x[k - 1]).round();
    }
}

fn knots_motion(x: &[f64]) -> Result<MotionProfile> {
    MotionProfile::from_knot_values(x)
}

/// Reconstructs a free-form motion maximizing the profiled Poisson
/// likelihood. `observed` is binned on the model's fine time bins and the
/// configured detuning scan; the configured motion is ignored.
pub fn fit_motion_evolutionary(
    observed: &Spectrum2D,
    config: &ExperimentConfig,
    params: &EaParams,
    seed: u64,
) -> Result<FitResult> {
    if observed.total() == 0 {
        return Err(invalid("observed spectrum holds no counts"));
    }
    if params.population < 4 || params.knots < 2 || params.generations == 0 {
        return Err(invalid("evolution needs population ≥ 4, knots ≥ 2 and at least one generation"));
    }
    let objective = MotionObjective::new(observed, config, params.time_bin_ns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.knots;
    let mu = ((params.population as f64 * params.elite_fraction).round() as usize).clamp(1, params.population - 1);
    let offspring = params.population - mu;
    let tau_global = 1.0 / (2.0 * n as f64).sqrt();
    let tau_local = 1.0 / (2.0 * (n as f64).sqrt()).sqrt();

    let evaluate = |x: Vec<f64>, sigma: Vec<f64>| -> Result<Individual> {
        let (loglik, scale) = objective.evaluate(&knots_motion(&x)?)?;
        let loglik = if loglik.is_nan() { f64::NEG_INFINITY } else { loglik };
        Ok(Individual { roughness: roughness(&x), x, sigma, loglik, scale })
    };

    let initial: Vec<(Vec<f64>, Vec<f64>)> = (0..params.population)
        .map(|i| {
            let x: Vec<f64> = (0..n)
                .map(|k| if k == 0 || i == 0 { 0.0 } else { params.init_spread_lambda * (rng.gen::<f64>() - 0.5) * 2.0 })
                .collect();
            let mut x = x;
            unwrap_knots(&mut x);
            (x, vec![params.init_sigma_lambda; n])
        })
        .collect();
    let mut population: Vec<Individual> =
        initial.into_par_iter().map(|(x, s)| evaluate(x, s)).collect::<Result<_>>()?;
    population.sort_by(rank);
    population.truncate(mu);

    let mut trace = Vec::with_capacity(params.generations);
    let mut converged = false;
    let mut generation = 0;
    while generation < params.generations {
        generation += 1;
        let children: Vec<(Vec<f64>, Vec<f64>)> = (0..offspring)
            .map(|_| {
                let a = &population[rng.gen_range(0..population.len())];
                let b = &population[rng.gen_range(0..population.len())];
                let global: f64 = rng.sample::<f64, _>(StandardNormal) * tau_global;
                let mut x = vec![0.0; n];
                let mut sigma = vec![0.0; n];
                for k in 0..n {
                    let (px, ps) = if rng.gen::<bool>() { (a.x[k], a.sigma[k]) } else { (b.x[k], b.sigma[k]) };
                    let local: f64 = rng.sample::<f64, _>(StandardNormal) * tau_local;
                    sigma[k] = (ps * (global + local).exp()).clamp(params.min_sigma_lambda, 0.5);
                    x[k] = if k == 0 { 0.0 } else { px + sigma[k] * rng.sample::<f64, _>(StandardNormal) };
                }
                if rng.gen::<f64>() < params.tail_shift_rate {
                    let from = rng.gen_range(1..n);
                    let shift = rng.gen::<f64>() - 0.5;
                    x[from..].iter_mut().for_each(|v| *v += shift);
                }
                unwrap_knots(&mut x);
                (x, sigma)
            })
            .collect();
        let evaluated: Vec<Individual> = children.into_par_iter().map(|(x, s)| evaluate(x, s)).collect::<Result<_>>()?;
        let mut pool: Vec<Individual> = population.into_iter().chain(evaluated).collect();
        pool.sort_by(rank);
        let median = pool[pool.len() / 2].loglik;
        pool.truncate(mu);
        population = pool;
        let best = &population[0];
        trace.push(GenerationStats {
            generation,
            best_loglik: best.loglik,
            median_loglik: median,
            mean_sigma_lambda: best.sigma.iter().sum::<f64>() / n as f64,
        });
        if generation > params.patience {
            let earlier = trace[generation - 1 - params.patience].best_loglik;
            if best.loglik - earlier < params.tolerance_nats {
                converged = true;
                break;
            }
        }
    }

    let best = &population[0];
    let times = knot_times(n);
    let motion = MotionProfile::free_knots(
        times
            .into_iter()
            .zip(&best.x)
            .map(|(t_ns, &x_lambda)| crate::pulse::Knot { t_ns, x_lambda })
            .collect(),
    )?;
    let mut config = config.clone();
    config.motion = motion.clone();
    Ok(FitResult {
        schema_version: SCHEMA_VERSION,
        motion,
        scale_factor: best.scale,
        log_likelihood: best.loglik,
        generations: generation,
        converged,
        seed,
        trace,
        config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `x_i(t) = x0(t) + A_i·t`, parameter A in λ0/ns.
    LinearDrift,
    /// `x_i(t) = (1 + s_i)·x0(t)`.
    Scaling,
    /// `φ_i(t) = φ0(t) + d_i` for `t ≥ 0`, parameter in radians.
    Step,
}

impl NoiseModel {
    pub const ALL: [NoiseModel; 3] = [NoiseModel::LinearDrift, NoiseModel::Scaling, NoiseModel::Step];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::LinearDrift => "linear",
            NoiseModel::Scaling => "scaling",
            NoiseModel::Step => "step",
        }
    }

    /// Parameter search interval.
    pub fn bracket(&self, constants: &PhysicalConstants) -> (f64, f64) {
        match self {
            NoiseModel::LinearDrift => {
                let a = constants.deviation_to_drift(100.0);
                (-a, a)
            }
            NoiseModel::Scaling => (-0.6, 0.6),
            NoiseModel::Step => (-2.0, 2.0),
        }
    }

    pub fn motion(&self, base: &MotionProfile, parameter: f64) -> MotionProfile {
        match self {
            NoiseModel::LinearDrift => MotionProfile::with_drift(base.clone(), parameter),
            NoiseModel::Scaling => MotionProfile::scaled(base.clone(), parameter),
            NoiseModel::Step => MotionProfile::stepped(base.clone(), parameter),
        }
    }

    pub fn to_deviation_zs(&self, parameter: f64, constants: &PhysicalConstants) -> f64 {
        match self {
            NoiseModel::LinearDrift => constants.drift_to_deviation_zs(parameter),
            NoiseModel::Scaling => constants.scaling_to_deviation_zs(parameter),
            NoiseModel::Step => constants.step_to_deviation_zs(parameter),
        }
    }

    pub fn from_deviation_zs(&self, y_zs: f64, constants: &PhysicalConstants) -> f64 {
        y_zs / self.to_deviation_zs(1.0, constants)
    }
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_drift" => Ok(NoiseModel::LinearDrift),
            "scaling" => Ok(NoiseModel::Scaling),
            "step" => Ok(NoiseModel::Step),
            other => Err(invalid(format!("unknown noise model '{other}' (linear, scaling, step)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFit {
    pub model: NoiseModel,
    pub parameter: f64,
    pub log_likelihood: f64,
    pub ci_68: (f64, f64),
    pub y_zs: f64,
    pub y_ci_68_zs: (f64, f64),
    pub counts: u64,
}

/// Sparse counts of one sample on the coarse likelihood cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCounts {
    pub cells: Vec<(usize, u64)>,
    pub exposure: Vec<f64>,
    pub total: u64,
}

/// Likelihood machinery for one-parameter noise fits around a base motion.
///
/// The intensity is tabulated on a uniform parameter grid and interpolated
/// with cubic Lagrange weights, so a fit touches only the cells with counts
/// plus the per-column totals.
pub struct NoiseFitContext {
    pub kind: NoiseModel,
    pub base: MotionProfile,
    constants: PhysicalConstants,
    time_edges_ns: Vec<f64>,
    detuning_edges: Vec<f64>,
    cols: usize,
    nodes: Vec<f64>,
    table: Vec<Vec<f64>>,
    column_totals: Vec<Vec<f64>>,
}

/// Number of tabulated parameter values across the bracket.
const TABLE_NODES: usize = 161;

impl NoiseFitContext {
    pub fn new(config: &ExperimentConfig, base: &MotionProfile, kind: NoiseModel, time_bin_ns: f64) -> Result<Self> {
        let model = ForwardModel::new(config)?;
        let factor = rebin_factor(config, time_bin_ns);
        let constants = PhysicalConstants::default();
        let (lo, hi) = kind.bracket(&constants);
        let nodes: Vec<f64> = (0..TABLE_NODES).map(|k| lo + (hi - lo) * k as f64 / (TABLE_NODES - 1) as f64).collect();
        let table: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&p| Ok(rebin_intensity(&model.intensity(&kind.motion(base, p))?, factor).values))
            .collect::<Result<_>>()?;
        let edges = rebin_intensity(&model.intensity(base)?, factor).time_edges_ns;
        let cols = config.detuning.points;
        let column_totals = table
            .iter()
            .map(|v| {
                let mut t = vec![0.0; cols];
                for row in v.chunks(cols) {
                    for (acc, x) in t.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            kind,
            base: base.clone(),
            constants,
            time_edges_ns: edges,
            detuning_edges: config.detuning.edges(),
            cols,
            nodes,
            table,
            column_totals,
        })
    }

    pub fn time_edges_ns(&self) -> &[f64] {
        &self.time_edges_ns
    }

    pub fn detuning_edges(&self) -> &[f64] {
        &self.detuning_edges
    }

    /// Sparse counts of a spectrum binned on this context's cells.
    pub fn sample_counts(&self, spectrum: &Spectrum2D) -> Result<SampleCounts> {
        if spectrum.rows() != self.time_edges_ns.len() - 1 || spectrum.cols() != self.cols {
            return Err(invalid("sample spectrum does not match the noise-fit binning"));
        }
        let cells: Vec<(usize, u64)> =
            spectrum.counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(i, &n)| (i, n)).collect();
        Ok(SampleCounts { total: spectrum.total(), cells, exposure: exposure_or_uniform(spectrum) })
    }

    fn weights(&self, p: f64) -> (usize, [f64; 4]) {
        let h = self.nodes[1] - self.nodes[0];
        let u = ((p - self.nodes[0]) / h).clamp(0.0, (self.nodes.len() - 1) as f64);
        let i = (u.floor() as usize).clamp(1, self.nodes.len() - 3);
        let x = u - i as f64;
        // cubic Lagrange weights on nodes i−1, i, i+1, i+2
        let w = [
            -x * (x - 1.0) * (x - 2.0) / 6.0,
            (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0,
            -(x + 1.0) * x * (x - 2.0) / 2.0,
            (x + 1.0) * x * (x - 1.0) / 6.0,
        ];
        (i - 1, w)
    }

    /// Profiled log-likelihood of a sample at parameter `p`.
    pub fn log_likelihood(&self, sample: &SampleCounts, p: f64) -> f64 {
        let (start, w) = self.weights(p);
        let mut expected_total = 0.0;
        for c in 0..self.cols {
            let mut total = 0.0;
            for (j, wj) in w.iter().enumerate() {
                total += wj * self.column_totals[start + j][c];
            }
            expected_total += total * sample.exposure[c];
        }
        if !(expected_total > 0.0) {
            return f64::NEG_INFINITY;
        }
        let n_total = sample.total as f64;
        let scale = n_total / expected_total;
        // relative to the saturated model; Σ(n − μ) vanishes at the profiled scale
        let mut ll = 0.0;
        for &(cell, n) in &sample.cells {
            let mut lam = 0.0;
            for (j, wj) in w.iter().enumerate() {
                lam += wj * self.table[start + j][cell];
            }
            let mu = scale * lam * sample.exposure[cell % self.cols];
            if mu <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += n as f64 * (mu / n as f64).ln();
        }
        ll
    }

    pub fn fit(&self, spectrum: &Spectrum2D) -> Result<NoiseFit> {
        let sample = self.sample_counts(spectrum)?;
        self.fit_counts(&sample)
    }

    pub fn fit_counts(&self, sample: &SampleCounts) -> Result<NoiseFit> {
        if sample.total < MIN_SAMPLE_COUNTS {
            return Err(Error::InsufficientStatistics { counts: sample.total, required: MIN_SAMPLE_COUNTS });
        }
        let bracket = (self.nodes[0], self.nodes[self.nodes.len() - 1]);
        let f = |p: f64| self.log_likelihood(sample, p);
        let (parameter, log_likelihood, ci_68) = maximize_profile(f, bracket);
        Ok(self.finish(parameter, log_likelihood, ci_68, sample.total))
    }

    fn finish(&self, parameter: f64, log_likelihood: f64, ci: (f64, f64), counts: u64) -> NoiseFit {
        finish_fit(self.kind, &self.constants, parameter, log_likelihood, ci, counts)
    }
}

fn finish_fit(kind: NoiseModel, c: &PhysicalConstants, parameter: f64, log_likelihood: f64, ci: (f64, f64), counts: u64) -> NoiseFit {
    let a = kind.to_deviation_zs(ci.0, c);
    let b = kind.to_deviation_zs(ci.1, c);
    NoiseFit {
        model: kind,
        parameter,
        log_likelihood,
        ci_68: ci,
        y_zs: kind.to_deviation_zs(parameter, c),
        y_ci_68_zs: (a.min(b), a.max(b)),
        counts,
    }
}

const SCAN_POINTS: usize = 41;
const GOLDEN_TOL: f64 = 1e-10;

/// Coarse scan plus golden-section refinement of a 1-D likelihood, with the
/// Δ ln L = 0.5 interval. Interval ends are clipped to the bracket.
pub fn maximize_profile(f: impl Fn(f64) -> f64, bracket: (f64, f64)) -> (f64, f64, (f64, f64)) {
    let (lo, hi) = bracket;
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|k| lo + k as f64 * step).collect();
    let values: Vec<f64> = grid.iter().map(|&p| f(p)).collect();
    let best = (0..SCAN_POINTS).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(SCAN_POINTS - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > GOLDEN_TOL * (hi - lo) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut p = 0.5 * (a + b);
    let mut fp = f(p);
    if values[best] > fp {
        p = grid[best];
        fp = values[best];
    }
    let target = fp - 0.5;
    let crossing = |outer: f64| -> f64 {
        if f(outer) >= target {
            return outer;
        }
        // walk outward on the scan spacing, then bisect
        let dir = (outer - p).signum();
        let mut inside = p;
        let mut probe = p + dir * step;
        loop {
            if (probe - outer) * dir >= 0.0 {
                probe = outer;
            }
            if f(probe) < target || probe == outer {
                break;
            }
            inside = probe;
            probe += dir * step;
        }
        let (mut x_in, mut x_out) = (inside, probe);
        for _ in 0..60 {
            let mid = 0.5 * (x_in + x_out);
            if f(mid) >= target {
                x_in = mid;
            } else {
                x_out = mid;
            }
        }
        0.5 * (x_in + x_out)
    };
    (p, fp, (crossing(lo), crossing(hi)))
}

/// Noise fit against a noiseless intensity (the infinite-statistics limit).
pub fn fit_noise_parameter_to_intensity(
    data: &Intensity2D,
    config: &ExperimentConfig,
    base: &MotionProfile,
    kind: NoiseModel,
) -> Result<NoiseFit> {
    let model = ForwardModel::new(config)?;
    let f = |p: f64| -> f64 {
        model
            .intensity(&kind.motion(base, p))
            .and_then(|l| profiled_log_likelihood_real(&data.values, &l.values))
            .map(|(ll, _)| ll)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let constants = PhysicalConstants::default();
    let (parameter, ll, ci) = maximize_profile(f, kind.bracket(&constants));
    Ok(finish_fit(kind, &constants, parameter, ll, ci, data.total().round() as u64))
}

/// Noise fit by direct forward-model evaluation (no tabulation). Suited to
/// single fits; use [`NoiseFitContext`] for many samples.
pub fn fit_noise_parameter(
    observed: &Spectrum2D,
    config: &ExperimentConfig,
    base: &MotionProfile,
    kind: NoiseModel,
) -> Result<NoiseFit> {
    let total = observed.total();
    if total < MIN_SAMPLE_COUNTS {
        return Err(Error::InsufficientStatistics { counts: total, required: MIN_SAMPLE_COUNTS });
    }
    let model = ForwardModel::new(config)?;
    let fine_rows = model.time_edges_ns().len() - 1;
    let factor = if observed.rows() == fine_rows {
        1
    } else if observed.rows() > 0 && fine_rows % observed.rows() == 0 {
        fine_rows / observed.rows()
    } else {
        (fine_rows / observed.rows().max(1)).max(1)
    };
    let exposure = exposure_or_uniform(observed);
    let f = |p: f64| -> f64 {
        let lambda = match model.intensity(&kind.motion(base, p)) {
            Ok(l) => rebin_intensity(&l, factor),
            Err(_) => return f64::NEG_INFINITY,
        };
        if lambda.rows() != observed.rows() {
            return f64::NEG_INFINITY;
        }
        lambda
            .weighted(&exposure)
            .and_then(|e| profiled_log_likelihood(&observed.counts, &e))
            .map(|(ll, _)| ll)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let constants = PhysicalConstants::default();
    let (parameter, ll, ci) = maximize_profile(f, kind.bracket(&constants));
    Ok(finish_fit(kind, &constants, parameter, ll, ci, total))
}

/// Dipole of the target driven by the fitted double pulse, `E_SCU ∗ R_target`
/// in the thin-target description of the target line.
pub fn extract_dipole(fit: &FitResult, target: &crate::absorber::TransmissionModel) -> Result<DipoleTrace> {
    dipole_for_motion(&fit.config, &fit.motion, target)
}

pub fn dipole_for_motion(
    config: &ExperimentConfig,
    motion: &MotionProfile,
    target: &crate::absorber::TransmissionModel,
) -> Result<DipoleTrace> {
    let drive = crate::pulse::shape_double_pulse(&config.scu, motion, config.grid()?)?.field;
    dipole_for_drive(&drive, target)
}

/// Dipole with no control absorber: a pure exponential decay.
pub fn reference_dipole(config: &ExperimentConfig, target: &crate::absorber::TransmissionModel) -> Result<DipoleTrace> {
    dipole_for_drive(&SignalEnvelope::impulse(config.grid()?, Complex64::new(1.0, 0.0)), target)
}

fn dipole_for_drive(drive: &SignalEnvelope, target: &crate::absorber::TransmissionModel) -> Result<DipoleTrace> {
    if target.lines.len() != 1 {
        return Err(invalid("dipole extraction needs a single-line target"));
    }
    let line = target.lines[0];
    let shifted = drive.modulate_smooth(|_| Complex64::new(1.0, 0.0));
    let rotated = if line.detuning_gamma != 0.0 {
        let g = *drive.grid();
        shifted.modulate_smooth(|k| Complex64::from_polar(1.0, line.detuning_gamma * g.time_gamma(k)))
    } else {
        shifted
    };
    coherence_response(&rotated, &TlsParams::new(line.b_gamma)?)
}
