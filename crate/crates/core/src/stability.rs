//! Allan-deviation analysis of per-sample temporal deviations.

use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experiment::{EventSet, PhotonEvent};
use crate::reconstruction::{NoiseFit, NoiseFitContext, SampleCounts, MIN_SAMPLE_COUNTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    EqualTime,
    EqualCounts,
}

impl std::str::FromStr for Binning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" | "equal_time" => Ok(Binning::EqualTime),
            "counts" | "equal_counts" => Ok(Binning::EqualCounts),
            other => Err(invalid(format!("unknown binning '{other}' (expected time or counts)"))),
        }
    }
}

/// A contiguous block of events and the lab-time interval it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSample {
    pub start_s: f64,
    pub end_s: f64,
    pub events: Range<usize>,
}

impl EventSample {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Splits a run into non-overlapping samples of duration `tau_s`, or of
/// `⌈rate·τ⌉` consecutive events at the run-average rate.
pub fn bin_events(set: &EventSet, tau_s: f64, mode: Binning) -> Result<Vec<EventSample>> {
    if !(tau_s > 0.0) {
        return Err(invalid("tau must be positive"));
    }
    let run = set.schedule.run_length_s;
    if tau_s > run / 2.0 {
        return Err(invalid(format!(
            "tau = {tau_s} s leaves fewer than two samples in a {run} s run"
        )));
    }
    let events = &set.events;
    if events.windows(2).any(|w| w[1].lab_time_s < w[0].lab_time_s) {
        return Err(invalid("events must be sorted by lab time"));
    }
    let samples: Vec<EventSample> = match mode {
        Binning::EqualTime => {
            let n = (run / tau_s + 1e-9).floor() as usize;
            (0..n)
                .map(|k| {
                    let (a, b) = (k as f64 * tau_s, (k + 1) as f64 * tau_s);
                    let lo = events.partition_point(|e| e.lab_time_s < a);
                    let hi = events.partition_point(|e| e.lab_time_s < b);
                    EventSample { start_s: a, end_s: b, events: lo..hi }
                })
                .collect()
        }
        Binning::EqualCounts => {
            let rate = events.len() as f64 / run;
            let quota = ((rate * tau_s).ceil() as usize).max(1);
            let n = events.len() / quota;
            let boundary = |k: usize| -> f64 {
                if k == 0 {
                    0.0
                } else if k * quota < events.len() {
                    events[k * quota].lab_time_s
                } else {
                    run
                }
            };
            (0..n)
                .map(|k| EventSample { start_s: boundary(k), end_s: boundary(k + 1), events: k * quota..(k + 1) * quota })
                .collect()
        }
    };
    if samples.len() < 2 {
        return Err(invalid(format!("tau = {tau_s} s yields {} sample(s); at least two are needed", samples.len())));
    }
    Ok(samples)
}

/// `σ_y = sqrt( Σ (y_{i+1} − y_i)² / (2(N − 1)) )`.
pub fn allan_deviation(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(invalid("Allan deviation needs at least two values"));
    }
    let sum: f64 = y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok((sum / (2.0 * (y.len() - 1) as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau_s: f64,
    pub sigma_zs: f64,
    pub err_lo: f64,
    pub err_hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllanSeries {
    pub points: Vec<AllanPoint>,
}

impl AllanSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau_s", "sigma_zs", "err_lo", "err_hi", "n"])?;
        for p in &self.points {
            w.write_record([
                p.tau_s.to_string(),
                p.sigma_zs.to_string(),
                p.err_lo.to_string(),
                p.err_hi.to_string(),
                p.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn taus(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.tau_s).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma_zs).collect()
    }

    /// Least-squares slope of log σ against log τ.
    pub fn log_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.sigma_zs > 0.0)
            .map(|p| (p.tau_s.ln(), p.sigma_zs.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Logarithmic τ ladder, 10 points per decade, from four times the
/// minimum-statistics duration up to half the run.
pub fn default_taus(set: &EventSet) -> Vec<f64> {
    let run = set.schedule.run_length_s;
    let rate = set.len() as f64 / run;
    if !(rate > 0.0) {
        return Vec::new();
    }
    let lo = 4.0 * MIN_SAMPLE_COUNTS as f64 / rate;
    let hi = run / 2.0;
    let mut taus = Vec::new();
    let mut k = (10.0 * lo.log10()).ceil() as i32;
    loop {
        let tau = 10f64.powf(k as f64 / 10.0);
        if tau > hi * (1.0 + 1e-12) {
            break;
        }
        taus.push(tau);
        k += 1;
    }
    taus
}

/// Fits samples of one event set against a noise-fit context. The event to
/// cell assignment is computed once.
///
/// Exposures come from the sweep schedule alone: detector dead time is not
/// visible in an event stream, so it is not used by the fits.
pub struct SampleFitter<'a> {
    set: &'a EventSet,
    context: &'a NoiseFitContext,
    cells: Vec<Option<u32>>,
}

fn locate(edges: &[f64], x: f64) -> Option<usize> {
    if x < edges[0] || x >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= x) - 1)
}

impl<'a> SampleFitter<'a> {
    pub fn new(set: &'a EventSet, context: &'a NoiseFitContext) -> Self {
        let t_edges = context.time_edges_ns();
        let d_edges = context.detuning_edges();
        let cols = d_edges.len() - 1;
        let cells = set
            .events
            .par_iter()
            .map(|e: &PhotonEvent| match (locate(t_edges, e.t_ns), locate(d_edges, e.delta_gamma)) {
                (Some(r), Some(c)) => Some((r * cols + c) as u32),
                _ => None,
            })
            .collect();
        Self { set, context, cells }
    }

    pub fn counts(&self, sample: &EventSample) -> SampleCounts {
        let mut idx: Vec<u32> = self.cells[sample.events.clone()].iter().flatten().copied().collect();
        idx.sort_unstable();
        let mut cells: Vec<(usize, u64)> = Vec::new();
        for i in idx {
            match cells.last_mut() {
                Some((c, n)) if *c == i as usize => *n += 1,
                _ => cells.push((i as usize, 1)),
            }
        }
        let total = cells.iter().map(|c| c.1).sum();
        SampleCounts { cells, exposure: self.set.schedule.exposure(&[], sample.start_s, sample.end_s), total }
    }

    pub fn fit(&self, sample: &EventSample) -> Result<NoiseFit> {
        self.context.fit_counts(&self.counts(sample))
    }

    /// Fits all samples concurrently; samples below the minimum statistics
    /// come back as `None`.
    pub fn fit_all(&self, samples: &[EventSample]) -> Result<Vec<Option<NoiseFit>>> {
        samples
            .par_iter()
            .map(|s| match self.fit(s) {
                Ok(f) => Ok(Some(f)),
                Err(Error::InsufficientStatistics { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    }
}

const RESAMPLE_DRAWS: usize = 1000;

/// Allan deviation of the fitted deviations for every τ, with 16/84 %
/// ranges from parametric resampling of the per-sample intervals.
pub fn allan_curve(set: &EventSet, taus: &[f64], context: &NoiseFitContext, binning: Binning, seed: u64) -> Result<AllanSeries> {
    let fitter = SampleFitter::new(set, context);
    allan_curve_with(&fitter, taus, binning, seed)
}

pub fn allan_curve_with(fitter: &SampleFitter, taus: &[f64], binning: Binning, seed: u64) -> Result<AllanSeries> {
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut series = AllanSeries::default();
    for (k, &tau) in sorted.iter().enumerate() {
        let samples = match bin_events(fitter.set, tau, binning) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping tau = {tau} s: {e}");
                continue;
            }
        };
        let fits = fitter.fit_all(&samples)?;
        let skipped = fits.iter().filter(|f| f.is_none()).count();
        if skipped > 0 {
            log::warn!("tau = {tau} s: {skipped} sample(s) below {MIN_SAMPLE_COUNTS} counts left out");
        }
        let fits: Vec<NoiseFit> = fits.into_iter().flatten().collect();
        if fits.len() < 2 {
            log::warn!("skipping tau = {tau} s: fewer than two usable samples");
            continue;
        }
        let y: Vec<f64> = fits.iter().map(|f| f.y_zs).collect();
        let sigma = allan_deviation(&y)?;
        let (err_lo, err_hi) = resampled_range(&fits, sigma, seed.wrapping_add(k as u64))?;
        series.points.push(AllanPoint { tau_s: tau, sigma_zs: sigma, err_lo, err_hi, n: fits.len() });
    }
    Ok(series)
}

fn resampled_range(fits: &[NoiseFit], sigma: f64, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(RESAMPLE_DRAWS);
    let mut y = vec![0.0; fits.len()];
    for _ in 0..RESAMPLE_DRAWS {
        for (yi, f) in y.iter_mut().zip(fits) {
            let z: f64 = StandardNormal.sample(&mut rng);
            let (lo, hi) = f.y_ci_68_zs;
            let width = if z < 0.0 { f.y_zs - lo } else { hi - f.y_zs };
            *yi = f.y_zs + z * width.max(0.0);
        }
        draws.push(allan_deviation(&y)?);
    }
    draws.sort_by(f64::total_cmp);
    let q = |p: f64| draws[((p * (RESAMPLE_DRAWS - 1) as f64).round() as usize).min(RESAMPLE_DRAWS - 1)];
    // the resampled spread is re-centred on the point estimate
    let median = q(0.5);
    let lo = (sigma + q(0.16) - median).max(0.0);
    let hi = sigma + q(0.84) - median;
    Ok((lo.min(sigma), hi.max(sigma)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlidingPoint {
    pub t_s: f64,
    pub y_zs: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Deviations in the overlapping windows `[k·stride, k·stride + τ)`.
pub fn sliding_deviations(set: &EventSet, tau_s: f64, stride_s: f64, context: &NoiseFitContext) -> Result<Vec<SlidingPoint>> {
    if !(stride_s > 0.0) || !(tau_s > 0.0) {
        return Err(invalid("tau and stride must be positive"));
    }
    let run = set.schedule.run_length_s;
    let n = ((run - tau_s) / stride_s + 1e-9).floor() as i64 + 1;
    let samples: Vec<EventSample> = (0..n.max(0) as usize)
        .map(|k| {
            let a = k as f64 * stride_s;
            let b = a + tau_s;
            let lo = set.events.partition_point(|e| e.lab_time_s < a);
            let hi = set.events.partition_point(|e| e.lab_time_s < b);
            EventSample { start_s: a, end_s: b, events: lo..hi }
        })
        .collect();
    let fitter = SampleFitter::new(set, context);
    let fits = fitter.fit_all(&samples)?;
    Ok(samples
        .iter()
        .zip(fits)
        .filter_map(|(s, f)| {
            f.map(|f| SlidingPoint {
                t_s: 0.5 * (s.start_s + s.end_s),
                y_zs: f.y_zs,
                ci_lo: f.y_ci_68_zs.0,
                ci_hi: f.y_ci_68_zs.1,
            })
        })
        .collect())
}

pub fn write_sliding_csv<W: Write>(points: &[SlidingPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_s", "y_zs", "ci_lo", "ci_hi"])?;
    for p in points {
        w.write_record([p.t_s.to_string(), p.y_zs.to_string(), p.ci_lo.to_string(), p.ci_hi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Events with lab time in `[from_s, to_s)`, shifted so the subset starts at zero.
pub fn trim_events(set: &EventSet, from_s: f64, to_s: f64) -> Result<EventSet> {
    let run = set.schedule.run_length_s;
    let to_s = to_s.min(run);
    if !(from_s >= 0.0) || !(to_s > from_s) {
        return Err(invalid("trim interval must lie inside the run"));
    }
    let sweep = set.schedule.sweep_period_s;
    if (from_s / sweep - (from_s / sweep).round()).abs() > 1e-9 {
        return Err(invalid("trim start must be a whole number of sweep periods"));
    }
    let mut out = set.clone();
    out.events = set
        .events
        .iter()
        .filter(|e| e.lab_time_s >= from_s && e.lab_time_s < to_s)
        .map(|e| PhotonEvent { lab_time_s: e.lab_time_s - from_s, ..*e })
        .collect();
    out.schedule.run_length_s = to_s - from_s;
    out.dropouts = set
        .dropouts
        .iter()
        .filter(|d| d.end_s() > from_s && d.start_s < to_s)
        .map(|d| {
            let mut d = *d;
            d.start_s -= from_s;
            d
        })
        .collect();
    out.injected = set
        .injected
        .iter()
        .filter(|s| s.end_s > from_s && s.start_s < to_s)
        .map(|s| crate::experiment::SegmentDeviation { start_s: s.start_s - from_s, end_s: s.end_s - from_s, y_zs: s.y_zs })
        .collect();
    Ok(out)
}
