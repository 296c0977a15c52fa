//! Forward model of the time- and detuning-resolved measurement and the
//! event-level photon sampler.
//!
//! The incident impulse passes the (moving) control absorber and then the
//! target, whose single resonance is Doppler-detuned by δ. The detected
//! intensity `λ(t, δ) = |E_out(t)|²` is evaluated on time bins of the grid
//! step inside the detection window. Photon events are drawn column by column
//! following a triangular detuning sweep, which also assigns lab timestamps.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorber::{multiline_transmission, TransmissionModel};
use crate::error::{invalid, Error, Result};
use crate::pulse::{canonical_motion, phase_from_motion, CanonicalCase, MotionProfile};
use crate::signal::{ConvolutionPlan, SignalEnvelope, TimeGrid};
use crate::units::{PhysicalConstants, BUNCH_PERIOD_NS, GAMMA_INVERSE_NS};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream index reserved for drawing injected per-segment deviations.
const INJECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetuningScan {
    pub min_gamma: f64,
    pub max_gamma: f64,
    pub points: usize,
}

impl Default for DetuningScan {
    fn default() -> Self {
        Self { min_gamma: -233.0, max_gamma: 233.0, points: 241 }
    }
}

impl DetuningScan {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![0.5 * (self.min_gamma + self.max_gamma)];
        }
        let step = (self.max_gamma - self.min_gamma) / (self.points - 1) as f64;
        (0..self.points).map(|k| self.min_gamma + k as f64 * step).collect()
    }

    /// Bin edges halfway between neighbouring scan points.
    pub fn edges(&self) -> Vec<f64> {
        let v = self.values();
        let half = if v.len() > 1 { 0.5 * (v[1] - v[0]) } else { 0.5 };
        let mut edges: Vec<f64> = v.iter().map(|d| d - half).collect();
        edges.push(v[v.len() - 1] + half);
        edges
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    pub start_s: f64,
    pub duration_s: f64,
}

impl Dropout {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    fn overlap(&self, a: f64, b: f64) -> f64 {
        (b.min(self.end_s()) - a.max(self.start_s)).max(0.0)
    }
}

/// Deviations injected into the motion, one per lab-time segment, as a
/// linear drift on top of the configured motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftInjection {
    pub segment_s: f64,
    /// Standard deviation of independent per-segment deviations, in zs.
    pub sigma_zs: f64,
    /// Initial deviation of a transient that decays linearly to zero.
    pub transient_zs: f64,
    pub transient_s: f64,
}

impl Default for DriftInjection {
    fn default() -> Self {
        Self { segment_s: 5.0, sigma_zs: 0.0, transient_zs: 0.0, transient_s: 0.0 }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub scu: TransmissionModel,
    pub target: TransmissionModel,
    pub motion: MotionProfile,
    pub detuning: DetuningScan,
    pub dt_ns: f64,
    pub window_start_ns: f64,
    pub window_end_ns: f64,
    /// Expected number of detected photons over the whole run without dead time.
    pub mean_events: f64,
    pub run_length_s: f64,
    /// Duration of one full back-and-forth detuning sweep.
    pub sweep_period_s: f64,
    pub bunch_period_ns: f64,
    pub dropouts: Vec<Dropout>,
    pub drift_injection: Option<DriftInjection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scu: TransmissionModel::two_line(5.0, 63.0),
            target: TransmissionModel::single_line(2.3),
            motion: canonical_motion(CanonicalCase::EnhancedExcitation),
            detuning: DetuningScan::default(),
            dt_ns: 0.1,
            window_start_ns: 18.0,
            window_end_ns: 170.0,
            mean_events: 5e6,
            run_length_s: 600.0,
            sweep_period_s: 1.0,
            bunch_period_ns: BUNCH_PERIOD_NS,
            dropouts: Vec::new(),
            drift_injection: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Error::Malformed(format!("{name}: {msg}"));
        self.scu.validate().map_err(|e| field("scu", e.to_string()))?;
        self.target.validate().map_err(|e| field("target", e.to_string()))?;
        self.motion.validate().map_err(|e| field("motion", e.to_string()))?;
        if self.detuning.points == 0 || !(self.detuning.max_gamma >= self.detuning.min_gamma) {
            return Err(field("detuning", "needs at least one point and max ≥ min".into()));
        }
        if !(self.dt_ns > 0.0) {
            return Err(field("dt_ns", format!("must be positive, got {}", self.dt_ns)));
        }
        if !(self.bunch_period_ns > 0.0) {
            return Err(field("bunch_period_ns", "must be positive".into()));
        }
        if !(self.window_start_ns >= 0.0
            && self.window_end_ns > self.window_start_ns + self.dt_ns
            && self.window_end_ns <= self.bunch_period_ns)
        {
            return Err(field(
                "window_start_ns/window_end_ns",
                format!("window [{}, {}] must lie within the bunch period", self.window_start_ns, self.window_end_ns),
            ));
        }
        if !(self.mean_events > 0.0) || !self.mean_events.is_finite() {
            return Err(field("mean_events", "must be positive".into()));
        }
        if !(self.run_length_s > 0.0) {
            return Err(field("run_length_s", "must be positive".into()));
        }
        if !(self.sweep_period_s > 0.0) {
            return Err(field("sweep_period_s", "must be positive".into()));
        }
        check_disjoint(&self.dropouts).map_err(|e| field("dropouts", e.to_string()))?;
        if let Some(inj) = &self.drift_injection {
            if !(inj.segment_s > 0.0) || inj.sigma_zs < 0.0 || inj.transient_s < 0.0 {
                return Err(field("drift_injection", "segment_s must be positive, sigma and duration non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::covering(self.bunch_period_ns, self.dt_ns)
    }

    pub fn schedule(&self) -> ScanSchedule {
        ScanSchedule {
            sweep_period_s: self.sweep_period_s,
            columns: self.detuning.points,
            run_length_s: self.run_length_s,
        }
    }

    pub fn event_rate(&self) -> f64 {
        self.mean_events / self.run_length_s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Malformed(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_disjoint(dropouts: &[Dropout]) -> Result<()> {
    if dropouts.iter().any(|d| !(d.duration_s >= 0.0) || !d.start_s.is_finite()) {
        return Err(invalid("dropout durations must be non-negative"));
    }
    let mut sorted = dropouts.to_vec();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    if sorted.windows(2).any(|w| w[1].start_s < w[0].end_s()) {
        return Err(invalid("dropout intervals overlap"));
    }
    Ok(())
}

/// `λ(t, δ)` on time bins × detuning columns, row-major with rows = time.
#[derive(Debug, Clone, PartialEq)]
pub struct Intensity2D {
    pub time_edges_ns: Vec<f64>,
    pub detunings_gamma: Vec<f64>,
    pub values: Vec<f64>,
}

impl Intensity2D {
    pub fn rows(&self) -> usize {
        self.time_edges_ns.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.detunings_gamma.len()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, col)).collect()
    }

    pub fn column_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.cols()];
        for row in self.values.chunks(self.cols()) {
            for (t, v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        totals
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn time_centers_ns(&self) -> Vec<f64> {
        self.time_edges_ns.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Index of the column closest to `delta_gamma`.
    pub fn nearest_column(&self, delta_gamma: f64) -> usize {
        self.detunings_gamma
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - delta_gamma).abs().total_cmp(&(b.1 - delta_gamma).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    /// Expected counts per cell up to a global scale: `λ·exposure(column)`.
    pub fn weighted(&self, exposure: &[f64]) -> Result<Vec<f64>> {
        if exposure.len() != self.cols() {
            return Err(invalid("exposure length does not match the detuning columns"));
        }
        Ok(self
            .values
            .chunks(self.cols())
            .flat_map(|row| row.iter().zip(exposure).map(|(v, e)| v * e))
            .collect())
    }
}

/// Precomputed, motion-independent parts of the forward model.
pub struct ForwardModel {
    grid: TimeGrid,
    scu: SignalEnvelope,
    target_weight: Complex64,
    target: Vec<Complex64>,
    target_spectrum: Vec<Complex64>,
    plan: ConvolutionPlan,
    detunings: Vec<f64>,
    lo: usize,
    hi: usize,
}

impl ForwardModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let scu = multiline_transmission(&config.scu, grid)?;
        let target_env = multiline_transmission(&config.target, grid)?;
        let plan = ConvolutionPlan::new(grid.n);
        let target = target_env.samples().to_vec();
        let target_spectrum = plan.spectrum(&target);
        let lo = grid.index_at_or_after(config.window_start_ns);
        let hi = grid.index_at_or_after(config.window_end_ns).min(grid.n - 1);
        if hi <= lo {
            return Err(invalid("detection window holds no time bins"));
        }
        Ok(Self {
            grid,
            scu,
            target_weight: target_env.singular_weight(),
            target,
            target_spectrum,
            plan,
            detunings: config.detuning.values(),
            lo,
            hi,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn detunings(&self) -> &[f64] {
        &self.detunings
    }

    pub fn time_edges_ns(&self) -> Vec<f64> {
        (self.lo..=self.hi).map(|k| self.grid.time_ns(k)).collect()
    }

    pub fn phase_for(&self, motion: &MotionProfile) -> Result<Vec<f64>> {
        phase_from_motion(motion, &self.grid)
    }

    /// Output field (smooth part) at detuning `delta` for a given control phase.
    pub fn output_column(&self, phase: &[f64], delta: f64) -> Vec<Complex64> {
        let dtg = self.grid.dt_gamma();
        let e_scu = self.scu.singular_weight();
        let n = self.grid.n;
        let rotor = |k: usize| Complex64::from_polar(1.0, delta * k as f64 * dtg);
        let ctrl: Vec<Complex64> = self
            .scu
            .samples()
            .iter()
            .zip(phase)
            .map(|(r, &p)| r * Complex64::from_polar(1.0, p))
            .collect();
        let lifted: Vec<Complex64> = ctrl.iter().enumerate().map(|(k, c)| c * rotor(k)).collect();
        let both = self.plan.trapezoid_with_spectrum(&self.target_spectrum, &self.target, &lifted, dtg);
        (0..n)
            .map(|k| {
                let back = rotor(k).conj();
                self.target_weight * ctrl[k] + back * (e_scu * self.target[k] + both[k])
            })
            .collect()
    }

    /// Intensity of one column on the window's time bins.
    pub fn intensity_column(&self, phase: &[f64], delta: f64) -> Vec<f64> {
        let out = self.output_column(phase, delta);
        (self.lo..self.hi)
            .map(|k| 0.5 * (out[k].norm_sqr() + out[k + 1].norm_sqr()))
            .collect()
    }

    pub fn intensity_for_phase(&self, phase: &[f64]) -> Result<Intensity2D> {
        if phase.len() != self.grid.n {
            return Err(invalid("phase trace does not match the model grid"));
        }
        let columns: Vec<Vec<f64>> = self.detunings.par_iter().map(|&d| self.intensity_column(phase, d)).collect();
        let rows = self.hi - self.lo;
        let cols = columns.len();
        let mut values = vec![0.0; rows * cols];
        for (c, column) in columns.iter().enumerate() {
            for (r, v) in column.iter().enumerate() {
                values[r * cols + c] = *v;
            }
        }
        Ok(Intensity2D { time_edges_ns: self.time_edges_ns(), detunings_gamma: self.detunings.clone(), values })
    }

    pub fn intensity(&self, motion: &MotionProfile) -> Result<Intensity2D> {
        self.intensity_for_phase(&self.phase_for(motion)?)
    }
}

/// `λ(t, δ)` for the configured motion.
pub fn expected_intensity(config: &ExperimentConfig) -> Result<Intensity2D> {
    ForwardModel::new(config)?.intensity(&config.motion)
}

/// Triangular detuning sweep: each period visits every column twice, once
/// upward and once downward, with equal dwell per visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSchedule {
    pub sweep_period_s: f64,
    pub columns: usize,
    pub run_length_s: f64,
}

impl ScanSchedule {
    pub fn dwell_s(&self) -> f64 {
        self.sweep_period_s / (2 * self.columns) as f64
    }

    pub fn slots(&self) -> usize {
        (self.run_length_s / self.dwell_s() - 1e-9).ceil() as usize
    }

    pub fn slot_column(&self, slot: usize) -> usize {
        let j = slot % (2 * self.columns);
        if j < self.columns {
            j
        } else {
            2 * self.columns - 1 - j
        }
    }

    pub fn slot_interval(&self, slot: usize) -> (f64, f64) {
        let d = self.dwell_s();
        let start = slot as f64 * d;
        (start, (start + d).min(self.run_length_s))
    }

    /// Live time per column inside `[from_s, to_s)`, excluding dropouts.
    pub fn exposure(&self, dropouts: &[Dropout], from_s: f64, to_s: f64) -> Vec<f64> {
        let mut live = vec![0.0; self.columns];
        let from = from_s.max(0.0);
        let to = to_s.min(self.run_length_s);
        if to <= from {
            return live;
        }
        let d = self.dwell_s();
        let first = (from / d).floor() as usize;
        let last = ((to / d).ceil() as usize).min(self.slots());
        for slot in first..last {
            let (a, b) = self.slot_interval(slot);
            let (a, b) = (a.max(from), b.min(to));
            if b <= a {
                continue;
            }
            let dead: f64 = dropouts.iter().map(|x| x.overlap(a, b)).sum();
            live[self.slot_column(slot)] += (b - a - dead).max(0.0);
        }
        live
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonEvent {
    pub t_ns: f64,
    pub delta_gamma: f64,
    pub lab_time_s: f64,
}

/// Sampled events with the metadata needed to compute exposures.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSet {
    pub events: Vec<PhotonEvent>,
    pub schedule: ScanSchedule,
    pub dropouts: Vec<Dropout>,
    /// Injected deviation per segment (zs) when drift injection was active.
    pub injected: Vec<SegmentDeviation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentDeviation {
    pub start_s: f64,
    pub end_s: f64,
    pub y_zs: f64,
}

impl EventSet {
    pub fn exposure(&self, from_s: f64, to_s: f64) -> Vec<f64> {
        self.schedule.exposure(&self.dropouts, from_s, to_s)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Per-column inverse-CDF tables of one intensity matrix.
struct ColumnSampler {
    cumulative: Vec<Vec<f64>>,
    totals: Vec<f64>,
    edges: Vec<f64>,
    detunings: Vec<f64>,
}

impl ColumnSampler {
    fn new(lambda: &Intensity2D) -> Self {
        let cumulative: Vec<Vec<f64>> = (0..lambda.cols())
            .map(|c| {
                let mut acc = 0.0;
                lambda
                    .column(c)
                    .iter()
                    .map(|v| {
                        acc += v.max(0.0);
                        acc
                    })
                    .collect()
            })
            .collect();
        let totals = cumulative.iter().map(|c| c.last().copied().unwrap_or(0.0)).collect();
        Self { cumulative, totals, edges: lambda.time_edges_ns.clone(), detunings: lambda.detunings_gamma.clone() }
    }

    fn draw_slot(&self, schedule: &ScanSchedule, slot: usize, scale: f64, dropouts: &[Dropout], seed: u64) -> Vec<PhotonEvent> {
        let col = schedule.slot_column(slot);
        let (a, b) = schedule.slot_interval(slot);
        let mu = scale * self.totals[col] * (b - a);
        if !(mu > 0.0) {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(slot as u64);
        let n = Poisson::new(mu).expect("positive mean").sample(&mut rng) as usize;
        let cdf = &self.cumulative[col];
        let total = self.totals[col];
        let mut events: Vec<PhotonEvent> = (0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                let row = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                let (lo, hi) = (self.edges[row], self.edges[row + 1]);
                let t_ns = lo + rng.gen::<f64>() * (hi - lo);
                let lab_time_s = a + rng.gen::<f64>() * (b - a);
                PhotonEvent { t_ns, delta_gamma: self.detunings[col], lab_time_s }
            })
            .filter(|e| !dropouts.iter().any(|d| e.lab_time_s >= d.start_s && e.lab_time_s < d.end_s()))
            .collect();
        events.sort_by(|x, y| x.lab_time_s.total_cmp(&y.lab_time_s));
        events
    }
}

fn count_scale(config: &ExperimentConfig, reference: &Intensity2D) -> f64 {
    let total = reference.total();
    if total > 0.0 {
        config.event_rate() * reference.cols() as f64 / total
    } else {
        0.0
    }
}

fn draw_slots(
    sampler: &ColumnSampler,
    schedule: &ScanSchedule,
    slots: std::ops::Range<usize>,
    scale: f64,
    dropouts: &[Dropout],
    seed: u64,
) -> Vec<PhotonEvent> {
    let chunks: Vec<Vec<PhotonEvent>> =
        slots.into_par_iter().map(|s| sampler.draw_slot(schedule, s, scale, dropouts, seed)).collect();
    chunks.into_iter().flatten().collect()
}

/// Poisson events for a fixed intensity `λ`, deterministic in `seed`.
///
/// The mean count of a slot is `rate·dwell·n_cols·Λ_col/Λ_total`, so the run
/// yields `mean_events` photons on average; configured dropouts are applied.
pub fn sample_events(lambda: &Intensity2D, config: &ExperimentConfig, seed: u64) -> Result<EventSet> {
    config.validate()?;
    if lambda.values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("intensity contains non-finite values"));
    }
    if lambda.cols() != config.detuning.points {
        return Err(invalid("intensity columns do not match the detuning scan"));
    }
    let schedule = config.schedule();
    let sampler = ColumnSampler::new(lambda);
    let events = draw_slots(&sampler, &schedule, 0..schedule.slots(), count_scale(config, lambda), &config.dropouts, seed);
    Ok(EventSet { events, schedule, dropouts: config.dropouts.clone(), injected: Vec::new() })
}

/// Per-segment deviations of a drift injection, in zs.
pub fn injected_deviations(injection: &DriftInjection, run_length_s: f64, seed: u64) -> Vec<SegmentDeviation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INJECTION_STREAM);
    let normal = Normal::new(0.0, injection.sigma_zs.max(0.0)).expect("finite sigma");
    let count = (run_length_s / injection.segment_s - 1e-9).ceil() as usize;
    (0..count)
        .map(|i| {
            let start_s = i as f64 * injection.segment_s;
            let end_s = (start_s + injection.segment_s).min(run_length_s);
            let mid = 0.5 * (start_s + end_s);
            let transient = if injection.transient_s > 0.0 {
                injection.transient_zs * (1.0 - mid / injection.transient_s).max(0.0)
            } else {
                0.0
            };
            let white = if injection.sigma_zs > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            SegmentDeviation { start_s, end_s, y_zs: white + transient }
        })
        .collect()
}

/// Samples the configured experiment. With a drift injection, each lab-time
/// segment uses its own motion `x0(t) + A_i·t`; rates stay normalized to the
/// uninjected intensity.
pub fn simulate_events(config: &ExperimentConfig, seed: u64) -> Result<EventSet> {
    config.validate()?;
    let model = ForwardModel::new(config)?;
    let reference = model.intensity(&config.motion)?;
    let Some(injection) = config.drift_injection else {
        return sample_events(&reference, config, seed);
    };
    let schedule = config.schedule();
    let scale = count_scale(config, &reference);
    let constants = PhysicalConstants::default();
    let segments = injected_deviations(&injection, config.run_length_s, seed);
    let dwell = schedule.dwell_s();
    let total_slots = schedule.slots();
    let mut events = Vec::new();
    let mut next_slot = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        let end_slot = if i + 1 == segments.len() {
            total_slots
        } else {
            ((seg.end_s / dwell).round() as usize).min(total_slots)
        };
        if end_slot <= next_slot {
            continue;
        }
        let motion = MotionProfile::with_drift(config.motion.clone(), constants.deviation_to_drift(seg.y_zs));
        let lambda = model.intensity(&motion)?;
        let sampler = ColumnSampler::new(&lambda);
        events.extend(draw_slots(&sampler, &schedule, next_slot..end_slot, scale, &config.dropouts, seed));
        next_slot = end_slot;
    }
    Ok(EventSet { events, schedule, dropouts: config.dropouts.clone(), injected: segments })
}

/// Removes events inside dead-time windows and records them for exposure.
pub fn inject_dead_time(set: &EventSet, dropouts: &[Dropout]) -> Result<EventSet> {
    let mut all = set.dropouts.clone();
    all.extend_from_slice(dropouts);
    check_disjoint(&all)?;
    let events = set
        .events
        .iter()
        .copied()
        .filter(|e| !dropouts.iter().any(|d| e.lab_time_s >= d.start_s && e.lab_time_s < d.end_s()))
        .collect();
    Ok(EventSet { events, schedule: set.schedule, dropouts: all, injected: set.injected.clone() })
}

/// Binned counts, row-major with rows = time bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum2D {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub time_edges_ns: Vec<f64>,
    pub detuning_edges_gamma: Vec<f64>,
    pub counts: Vec<u64>,
    #[serde(default)]
    pub exposure_s: Vec<f64>,
}

impl Spectrum2D {
    pub fn rows(&self) -> usize {
        self.time_edges_ns.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.detuning_edges_gamma.len() - 1
    }

    pub fn at(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols() + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Spectrum2D = serde_json::from_str(text)?;
        check_edges(&s.time_edges_ns)?;
        check_edges(&s.detuning_edges_gamma)?;
        if s.counts.len() != s.rows() * s.cols() {
            return Err(Error::Malformed("count matrix does not match the bin edges".into()));
        }
        Ok(s)
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("bin edges must be strictly increasing with at least two entries"));
    }
    Ok(())
}

fn locate(edges: &[f64], x: f64) -> Option<usize> {
    if x < edges[0] || x >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= x) - 1)
}

pub fn bin_to_spectrum(events: &[PhotonEvent], time_edges_ns: &[f64], detuning_edges_gamma: &[f64]) -> Result<Spectrum2D> {
    check_edges(time_edges_ns)?;
    check_edges(detuning_edges_gamma)?;
    let cols = detuning_edges_gamma.len() - 1;
    let mut counts = vec![0u64; (time_edges_ns.len() - 1) * cols];
    for e in events {
        if let (Some(r), Some(c)) = (locate(time_edges_ns, e.t_ns), locate(detuning_edges_gamma, e.delta_gamma)) {
            counts[r * cols + c] += 1;
        }
    }
    Ok(Spectrum2D {
        schema_version: SCHEMA_VERSION,
        time_edges_ns: time_edges_ns.to_vec(),
        detuning_edges_gamma: detuning_edges_gamma.to_vec(),
        counts,
        exposure_s: Vec::new(),
    })
}

/// Bins the events of `[from_s, to_s)` on the model's bins, with exposure.
pub fn spectrum_for_interval(set: &EventSet, config: &ExperimentConfig, edges_ns: &[f64], from_s: f64, to_s: f64) -> Result<Spectrum2D> {
    let lo = set.events.partition_point(|e| e.lab_time_s < from_s);
    let hi = set.events.partition_point(|e| e.lab_time_s < to_s);
    let mut s = bin_to_spectrum(&set.events[lo..hi], edges_ns, &config.detuning.edges())?;
    s.exposure_s = set.exposure(from_s, to_s);
    Ok(s)
}

pub fn write_events_csv<W: Write>(events: &[PhotonEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(input: R) -> Result<Vec<PhotonEvent>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_ns", "delta_gamma", "lab_time_s"] {
        return Err(Error::Malformed(format!("unexpected event header {:?}", headers)));
    }
    let mut events = Vec::new();
    for row in r.deserialize() {
        let e: PhotonEvent = row?;
        if !(e.t_ns.is_finite() && e.delta_gamma.is_finite() && e.lab_time_s.is_finite()) {
            return Err(Error::Malformed("non-finite event field".into()));
        }
        events.push(e);
    }
    if events.windows(2).any(|w| w[1].lab_time_s < w[0].lab_time_s) {
        events.sort_by(|a, b| a.lab_time_s.total_cmp(&b.lab_time_s));
    }
    Ok(events)
}

pub fn load_events(path: &Path) -> Result<Vec<PhotonEvent>> {
    read_events_csv(std::fs::File::open(path)?)
}

pub fn save_events(events: &[PhotonEvent], path: &Path) -> Result<()> {
    write_events_csv(events, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Quantum-beat period (ns) of a curve sampled every `dt_ns`: the dominant
/// Fourier component after removing a cubic trend, ignoring periods > 50 ns.
pub fn beat_period_ns(curve: &[f64], dt_ns: f64) -> f64 {
    let n = curve.len();
    let x: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1).max(1) as f64).collect();
    let trend = polyfit(&x, curve, 3);
    let padded = (8 * n).next_power_of_two();
    let mut buf = vec![Complex64::new(0.0, 0.0); padded];
    for k in 0..n {
        let hann = 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos();
        let fit: f64 = trend.iter().rev().fold(0.0, |acc, c| acc * x[k] + c);
        buf[k] = Complex64::new((curve[k] - fit) * hann, 0.0);
    }
    rustfft::FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let df = 1.0 / (padded as f64 * dt_ns);
    let first = (1.0 / 50.0 / df).ceil() as usize;
    let best = (first..padded / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap_or(first);
    1.0 / (best as f64 * df)
}

/// Least-squares polynomial coefficients, lowest order first.
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&xi, &yi) in x.iter().zip(y) {
        let powers: Vec<f64> = (0..m).map(|p| xi.powi(p as i32)).collect();
        for r in 0..m {
            for c in 0..m {
                a[r][c] += powers[r] * powers[c];
            }
            a[r][m] += powers[r] * yi;
        }
    }
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..m).map(|r| a[r][m] / a[r][r]).collect()
}

/// Moving average over `width` samples (centered, shrinking at the ends).
pub fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = vec![0.0; values.len() + 1];
    for (k, v) in values.iter().enumerate() {
        prefix[k + 1] = prefix[k] + v;
    }
    (0..values.len())
        .map(|k| {
            let a = k.saturating_sub(half);
            let b = (k + half + 1).min(values.len());
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossoverReport {
    pub analytic_ns: f64,
    pub simulated_ns: Option<f64>,
    pub early_se_exceeds_boost: bool,
    pub late_boost_exceeds_se: bool,
    pub times_ns: Vec<f64>,
    pub stimulated_emission: Vec<f64>,
    pub enhanced_excitation: Vec<f64>,
}

/// On-resonance stimulated-emission vs enhanced-excitation intensities of the
/// configured absorbers. The simulated crossover is the first sign change of
/// the difference after averaging over one quantum-beat period.
pub fn crossover(config: &ExperimentConfig) -> Result<CrossoverReport> {
    let b_target = config.target.total_thickness();
    let analytic_ns = crate::tls::crossover_time(b_target)?;
    let mut single = config.clone();
    single.detuning = DetuningScan { min_gamma: 0.0, max_gamma: 0.0, points: 1 };
    let model = ForwardModel::new(&single)?;
    let shape = match config.motion.kind {
        crate::pulse::MotionKind::Step => crate::pulse::StepShape {
            rise_time_ns: config.motion.params.rise_time_ns,
            rise_center_ns: config.motion.params.rise_center_ns,
        },
        _ => crate::pulse::StepShape::DEFAULT,
    };
    let se = model.intensity(&crate::pulse::canonical_motion_with(CanonicalCase::StimulatedEmission, shape))?.column(0);
    let boost = model.intensity(&crate::pulse::canonical_motion_with(CanonicalCase::EnhancedExcitation, shape))?.column(0);
    let times = model.intensity_for_phase(&vec![0.0; model.grid().n])?.time_centers_ns();

    let splitting = config.scu.max_splitting_gamma();
    let width = if splitting > 0.0 {
        ((2.0 * PI / splitting * GAMMA_INVERSE_NS) / config.dt_ns).round().max(1.0) as usize
    } else {
        1
    };
    let diff: Vec<f64> = boost.iter().zip(&se).map(|(b, s)| b - s).collect();
    let smooth = moving_average(&diff, width);
    let margin = width / 2;
    let simulated_ns = (margin.max(1)..smooth.len().saturating_sub(margin))
        .find(|&k| smooth[k - 1] < 0.0 && smooth[k] >= 0.0)
        .map(|k| {
            let (a, b) = (smooth[k - 1], smooth[k]);
            times[k - 1] + (times[k] - times[k - 1]) * a / (a - b)
        });
    let sum_in = |v: &[f64], lo: f64, hi: f64| -> f64 {
        v.iter().zip(&times).filter(|(_, &t)| t >= lo && t <= hi).map(|(x, _)| x).sum()
    };
    Ok(CrossoverReport {
        analytic_ns,
        simulated_ns,
        early_se_exceeds_boost: sum_in(&se, 18.0, 40.0) > sum_in(&boost, 18.0, 40.0),
        late_boost_exceeds_se: sum_in(&boost, 55.0, 170.0) > sum_in(&se, 55.0, 170.0),
        times_ns: times,
        stimulated_emission: se,
        enhanced_excitation: boost,
    })
}

impl CrossoverReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", "stimulated_emission", "enhanced_excitation", "difference", "analytic_thin_difference"])?;
        let b = GAMMA_INVERSE_NS / self.analytic_ns;
        for k in 0..self.times_ns.len() {
            let t = self.times_ns[k];
            w.write_record([
                t.to_string(),
                self.stimulated_emission[k].to_string(),
                self.enhanced_excitation[k].to_string(),
                (self.enhanced_excitation[k] - self.stimulated_emission[k]).to_string(),
                crate::tls::intensity_difference_analytic(b, t / GAMMA_INVERSE_NS).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
