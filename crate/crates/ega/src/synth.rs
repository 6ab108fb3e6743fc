//! Synthetic paired vibration/ECG data: each cardiac cycle contributes two
//! Gaussian-windowed cosine vibrations to the radar trace and a
//! sum-of-Gaussians PQRST template to the ECG trace, aligned so the R peak
//! sits on the first vibration time. Includes segmentation into labeled
//! 4-second windows, the two noise protocols (constant SNR and abrupt
//! bursts), and a plain-text record container that round-trips 64-bit
//! floats exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input window length, seconds.
pub const WINDOW_S: f64 = 4.0;
/// Segmentation step, seconds.
pub const STEP_S: f64 = 1.0;
/// Length of the resampled per-cycle ECG piece.
pub const RESAMPLE_LEN: usize = 200;

/// Cycle-length class layout: 10 ms bins spanning 400..1400 ms.
pub const PPI_BIN_MS: f64 = 10.0;
pub const PPI_MIN_MS: f64 = 400.0;
pub const PPI_CLASSES: usize = 100;

pub fn ppi_bin(ppi_s: f64) -> usize {
    let bin = ((ppi_s * 1000.0 - PPI_MIN_MS) / PPI_BIN_MS).floor();
    (bin.max(0.0) as usize).min(PPI_CLASSES - 1)
}

pub fn ppi_bin_center_ms(bin: usize) -> f64 {
    PPI_MIN_MS + PPI_BIN_MS * bin as f64 + PPI_BIN_MS / 2.0
}

/// Closed sampling interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn fixed(v: f64) -> Self {
        Span(v, v)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !self.0.is_finite() || !self.1.is_finite() || self.0 > self.1 {
            return Err(Error::InvalidConfig(format!("bad range for {name}: {self:?}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..self.1)
        }
    }
}

/// Parameter ranges for the cycle generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Sampling rate, Hz.
    pub fs: f64,
    /// Cycle length, seconds.
    pub ppi: Span,
    /// Central frequency of the first vibration, Hz.
    pub f1: Span,
    /// Central frequency of the second vibration, Hz.
    pub f2: Span,
    /// Envelope width of the first vibration, seconds.
    pub b1: Span,
    /// Envelope width of the second vibration, seconds.
    pub b2: Span,
    /// Amplitude of the first vibration.
    pub a1: Span,
    /// Amplitude of the second vibration.
    pub a2: Span,
    /// Second-vibration delay as a fraction of the cycle length.
    pub t2_frac: Span,
    /// Bound on the relative cycle-to-cycle change of the cycle length.
    pub max_ppi_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fs: 200.0,
            ppi: Span(0.6, 1.0),
            f1: Span(18.0, 25.0),
            f2: Span(30.0, 40.0),
            b1: Span(0.04, 0.07),
            b2: Span(0.02, 0.05),
            a1: Span::fixed(1.0),
            a2: Span(0.3, 0.6),
            t2_frac: Span(0.28, 0.38),
            max_ppi_step: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::InvalidConfig(format!("fs must be positive, got {}", self.fs)));
        }
        for (span, name) in [
            (&self.ppi, "ppi"),
            (&self.f1, "f1"),
            (&self.f2, "f2"),
            (&self.b1, "b1"),
            (&self.b2, "b2"),
            (&self.a1, "a1"),
            (&self.a2, "a2"),
            (&self.t2_frac, "t2_frac"),
        ] {
            span.validate(name)?;
        }
        if self.ppi.lo() <= 0.0 || self.f1.lo() <= 0.0 || self.f2.lo() <= 0.0 {
            return Err(Error::InvalidConfig("ppi, f1, f2 must be positive".into()));
        }
        if self.b1.lo() <= 0.0 || self.b2.lo() <= 0.0 {
            return Err(Error::InvalidConfig("envelope widths must be positive".into()));
        }
        if self.a1.lo() < 0.0 || self.a2.lo() < 0.0 {
            return Err(Error::InvalidConfig("amplitudes must be non-negative".into()));
        }
        if self.t2_frac.lo() <= 0.0 || self.t2_frac.hi() >= 1.0 {
            return Err(Error::InvalidConfig("t2_frac must stay inside (0, 1)".into()));
        }
        if !(self.max_ppi_step > 0.0 && self.max_ppi_step <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_ppi_step must lie in (0, 1], got {}",
                self.max_ppi_step
            )));
        }
        Ok(())
    }
}

/// Parameters of one cardiac cycle: amplitudes, envelope widths and
/// central frequencies of the two prominent vibrations, their absolute
/// times, and the cycle length.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub f1: f64,
    pub f2: f64,
    pub t1: f64,
    pub t2: f64,
    pub ppi: f64,
}

/// Draws `k` cycles with a smoothly varying cycle length (the relative
/// step between consecutive cycles stays within `max_ppi_step`).
pub fn gen_cycles(seed: u64, k: usize, config: &SynthConfig) -> Result<Vec<CycleParams>> {
    config.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("cycle count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cycles = Vec::with_capacity(k);
    let mut ppi = config.ppi.sample(&mut rng);
    let mut t1 = 0.5 * ppi;
    for _ in 0..k {
        let a1 = config.a1.sample(&mut rng);
        let a2 = config.a2.sample(&mut rng);
        let b1 = config.b1.sample(&mut rng);
        let b2 = config.b2.sample(&mut rng);
        let f1 = config.f1.sample(&mut rng);
        let f2 = config.f2.sample(&mut rng);
        let frac = config.t2_frac.sample(&mut rng);
        cycles.push(CycleParams { a1, a2, b1, b2, f1, f2, t1, t2: t1 + frac * ppi, ppi });
        t1 += ppi;
        let step = rng.gen_range(-config.max_ppi_step..config.max_ppi_step);
        ppi = (ppi * (1.0 + step)).clamp(config.ppi.lo(), config.ppi.hi());
    }
    Ok(cycles)
}

fn trace_len(cycles: &[CycleParams], fs: f64) -> usize {
    match cycles.last() {
        Some(last) => ((last.t1 + last.ppi) * fs).round() as usize,
        None => 0,
    }
}

fn check_sampling(cycles: &[CycleParams], fs: f64) -> Result<()> {
    let top = cycles.iter().map(|c| c.f1.max(c.f2)).fold(0.0f64, f64::max);
    if fs <= 2.0 * top {
        return Err(Error::InvalidConfig(format!(
            "sampling rate {fs} Hz cannot resolve vibrations up to {top} Hz"
        )));
    }
    Ok(())
}

/// Renders the vibration trace over a fixed grid of `n` samples. Cycle
/// contributions accumulate one cycle at a time, so rendering cycles
/// separately and summing reproduces the joint render bit for bit.
pub fn render_radar_over(cycles: &[CycleParams], fs: f64, n: usize) -> Result<Vec<f64>> {
    check_sampling(cycles, fs)?;
    let mut trace = vec![0.0; n];
    let two_pi = 2.0 * std::f64::consts::PI;
    for c in cycles {
        for (j, x) in trace.iter_mut().enumerate() {
            let t = j as f64 / fs;
            let e1 = (t - c.t1) / c.b1;
            let e2 = (t - c.t2) / c.b2;
            let v1 = c.a1 * (two_pi * c.f1 * t).cos() * (-e1 * e1).exp();
            let v2 = c.a2 * (two_pi * c.f2 * t).cos() * (-e2 * e2).exp();
            *x += v1 + v2;
        }
    }
    Ok(trace)
}

/// Renders the clean vibration trace and returns it with the anchor times
/// (the first-vibration time of every cycle).
pub fn render_radar(cycles: &[CycleParams], fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = render_radar_over(cycles, fs, trace_len(cycles, fs))?;
    let anchors = cycles.iter().map(|c| c.t1).collect();
    Ok((trace, anchors))
}

/// One Gaussian bump of the ECG template; offset and width are fractions
/// of the cycle length, so the template stretches with the cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateWave {
    pub offset_frac: f64,
    pub width_frac: f64,
    pub amplitude: f64,
}

/// Sum-of-Gaussians ECG template. Amplitudes are fixed per record; the R
/// bump is centered on the anchor time. A stand-in shape, not physiology.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTemplate {
    pub waves: Vec<TemplateWave>,
}

impl Default for EcgTemplate {
    fn default() -> Self {
        Self {
            waves: vec![
                TemplateWave { offset_frac: -0.20, width_frac: 0.035, amplitude: 0.12 }, // P
                TemplateWave { offset_frac: -0.028, width_frac: 0.010, amplitude: -0.12 }, // Q
                TemplateWave { offset_frac: 0.0, width_frac: 0.012, amplitude: 1.0 },    // R
                TemplateWave { offset_frac: 0.030, width_frac: 0.011, amplitude: -0.20 }, // S
                TemplateWave { offset_frac: 0.30, width_frac: 0.055, amplitude: 0.30 },  // T
            ],
        }
    }
}

impl EcgTemplate {
    /// Template with a single R bump; used to isolate peak behavior.
    pub fn r_only() -> Self {
        Self { waves: vec![TemplateWave { offset_frac: 0.0, width_frac: 0.012, amplitude: 1.0 }] }
    }
}

/// Renders the ECG-template trace on the same clock as the radar trace.
pub fn render_ecg_with(cycles: &[CycleParams], fs: f64, template: &EcgTemplate) -> Result<Vec<f64>> {
    check_sampling(cycles, fs)?;
    let n = trace_len(cycles, fs);
    let mut trace = vec![0.0; n];
    for c in cycles {
        for wave in &template.waves {
            let center = c.t1 + wave.offset_frac * c.ppi;
            let sigma = wave.width_frac * c.ppi;
            for (j, x) in trace.iter_mut().enumerate() {
                let t = j as f64 / fs;
                let z = (t - center) / sigma;
                *x += wave.amplitude * (-0.5 * z * z).exp();
            }
        }
    }
    Ok(trace)
}

pub fn render_ecg(cycles: &[CycleParams], fs: f64) -> Result<Vec<f64>> {
    render_ecg_with(cycles, fs, &EcgTemplate::default())
}

/// Noise applied to a record or its segments.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    Clean,
    Constant { snr_db: f64 },
    Abrupt { fraction: f64, duration_s: f64, snr_db: f64 },
}

/// One contiguous noise burst, sample indices with exclusive end.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    pub start: usize,
    pub end: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAnnotation {
    pub kind: NoiseKind,
    pub bursts: Vec<Burst>,
}

impl NoiseAnnotation {
    pub fn clean() -> Self {
        Self { kind: NoiseKind::Clean, bursts: Vec::new() }
    }
}

/// A paired radar/ECG record with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub fs: f64,
    pub seed: u64,
    pub radar: Vec<f64>,
    pub ecg: Vec<f64>,
    /// Anchor times (R peaks / first-vibration times), seconds, increasing.
    pub anchors: Vec<f64>,
    /// Cycle length per anchor, seconds.
    pub ppis: Vec<f64>,
    pub noise: NoiseAnnotation,
}

impl SyntheticRecord {
    pub fn duration_s(&self) -> f64 {
        self.radar.len() as f64 / self.fs
    }

    pub fn validate(&self) -> Result<()> {
        if self.radar.len() != self.ecg.len() {
            return Err(Error::InvalidInput("radar and ecg traces differ in length".into()));
        }
        if self.anchors.len() != self.ppis.len() {
            return Err(Error::InvalidInput("anchor and ppi counts differ".into()));
        }
        if self.anchors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("anchors must be strictly increasing".into()));
        }
        let span = self.duration_s();
        if self.anchors.iter().any(|&t| t < 0.0 || t >= span) {
            return Err(Error::InvalidInput("anchor outside the trace span".into()));
        }
        if self.noise.bursts.iter().any(|b| b.start >= b.end || b.end > self.radar.len()) {
            return Err(Error::InvalidInput("burst annotation outside the trace span".into()));
        }
        Ok(())
    }
}

/// Generates one clean record of `k` cycles.
pub fn gen_record(seed: u64, config: &SynthConfig, k: usize) -> Result<SyntheticRecord> {
    let cycles = gen_cycles(seed, k, config)?;
    let (radar, anchors) = render_radar(&cycles, config.fs)?;
    let ecg = render_ecg(&cycles, config.fs)?;
    let ppis = cycles.iter().map(|c| c.ppi).collect();
    let record = SyntheticRecord {
        fs: config.fs,
        seed,
        radar,
        ecg,
        anchors,
        ppis,
        noise: NoiseAnnotation::clean(),
    };
    record.validate()?;
    Ok(record)
}

/// Adds white Gaussian noise scaled so the realized signal-to-noise ratio
/// hits `snr_db` exactly (the drawn noise is renormalized to the target
/// power before being added).
pub fn add_constant_noise(trace: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("cannot add noise to an empty trace".into()));
    }
    let p_sig = trace.iter().map(|x| x * x).sum::<f64>() / trace.len() as f64;
    if p_sig == 0.0 {
        return Err(Error::InvalidInput("cannot set an SNR against a zero-power trace".into()));
    }
    let target = p_sig / 10f64.powf(snr_db / 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..trace.len()).map(|_| rng.sample(StandardNormal)).collect();
    let p_raw = raw.iter().map(|z| z * z).sum::<f64>() / raw.len() as f64;
    if p_raw == 0.0 {
        return Err(Error::NumericalFailure {
            what: "noise draw collapsed to zero power".into(),
            residual: 0.0,
        });
    }
    let scale = (target / p_raw).sqrt();
    Ok(trace.iter().zip(&raw).map(|(x, z)| x + scale * z).collect())
}

/// A 4-second input window with its labels. Windows containing no anchor
/// carry no labels and are excluded from training.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub fs: f64,
    pub radar: Vec<f64>,
    pub labels: Option<SegmentLabels>,
    /// Noise bursts inside this window, window-local sample indices.
    pub bursts: Vec<Burst>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabels {
    /// Center-cycle ECG piece resampled to [`RESAMPLE_LEN`] samples.
    pub ecg_piece: Vec<f64>,
    /// Absolute times of every anchor inside the window.
    pub anchors_s: Vec<f64>,
    pub center_anchor_s: f64,
    pub ppi_s: f64,
    pub ppi_bin: usize,
}

/// Splits a record into overlapping windows and labels each with the
/// cycle whose anchor lies nearest the window center (ties break toward
/// the earlier anchor).
pub fn segment_record(record: &SyntheticRecord, window_s: f64, step_s: f64) -> Result<Vec<Segment>> {
    record.validate()?;
    if !(window_s > 0.0) || !(step_s > 0.0) {
        return Err(Error::InvalidConfig("window and step must be positive".into()));
    }
    let window_n = (window_s * record.fs).round() as usize;
    let step_n = (step_s * record.fs).round() as usize;
    if window_n < 2 || step_n == 0 {
        return Err(Error::InvalidConfig("window or step too small for the sampling rate".into()));
    }
    if record.radar.len() < window_n {
        return Err(Error::InvalidInput(format!(
            "record of {} samples is shorter than the {window_n}-sample window",
            record.radar.len()
        )));
    }
    let count = (record.radar.len() - window_n) / step_n + 1;
    let mut segments = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * step_n;
        let start_s = start as f64 / record.fs;
        let end_s = start_s + window_s;
        let inside: Vec<(usize, f64)> = record
            .anchors
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, t)| *t >= start_s && *t < end_s)
            .collect();
        let labels = if inside.is_empty() {
            log::debug!("window at {start_s:.2}s contains no anchor; left unlabeled");
            None
        } else {
            let center = start_s + window_s / 2.0;
            let mut best = inside[0];
            for &(idx, t) in &inside[1..] {
                if (t - center).abs() < (best.1 - center).abs() {
                    best = (idx, t);
                }
            }
            let (idx, t1) = best;
            let ppi = record.ppis[idx];
            Some(SegmentLabels {
                ecg_piece: resample_cycle(&record.ecg, record.fs, t1, ppi),
                anchors_s: inside.iter().map(|(_, t)| *t).collect(),
                center_anchor_s: t1,
                ppi_s: ppi,
                ppi_bin: ppi_bin(ppi),
            })
        };
        // Carry over record-level bursts that overlap this window.
        let bursts = record
            .noise
            .bursts
            .iter()
            .filter(|b| b.start < start + window_n && b.end > start)
            .map(|b| Burst {
                start: b.start.max(start) - start,
                end: b.end.min(start + window_n) - start,
                snr_db: b.snr_db,
            })
            .collect();
        segments.push(Segment {
            start_s,
            fs: record.fs,
            radar: record.radar[start..start + window_n].to_vec(),
            labels,
            bursts,
        });
    }
    Ok(segments)
}

/// Linear resampling of the cycle `[t1, t1 + ppi)` to [`RESAMPLE_LEN`] samples.
fn resample_cycle(trace: &[f64], fs: f64, t1: f64, ppi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(RESAMPLE_LEN);
    let last = trace.len() - 1;
    for j in 0..RESAMPLE_LEN {
        let t = t1 + j as f64 * ppi / RESAMPLE_LEN as f64;
        let pos = (t * fs).max(0.0);
        let i = (pos.floor() as usize).min(last);
        let frac = pos - i as f64;
        let a = trace[i];
        let b = trace[(i + 1).min(last)];
        out.push(a + frac * (b - a));
    }
    out
}

/// Burst annotation attached to a doped segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBurst {
    pub segment: usize,
    pub start: usize,
    pub end: usize,
    pub snr_db: f64,
}

/// Dopes exactly `round(fraction * N)` randomly chosen segments with one
/// contiguous Gaussian burst each. Burst power is set against the whole
/// window's signal power so the realized per-burst SNR equals `snr_db`.
/// Burst placement is uniform within the window.
pub fn add_abrupt_noise(
    segments: &mut [Segment],
    fraction: f64,
    duration_s: f64,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<SegmentBurst>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let fs = segments[0].fs;
    let window_n = segments[0].radar.len();
    if segments.iter().any(|s| s.radar.len() != window_n) {
        return Err(Error::InvalidInput("segments differ in window length".into()));
    }
    let window_s = window_n as f64 / fs;
    if !(duration_s > 0.0 && duration_s <= window_s) {
        return Err(Error::InvalidConfig(format!(
            "burst duration must lie in (0, {window_s}], got {duration_s}"
        )));
    }
    let count = (fraction * segments.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
    chosen.sort_unstable();

    let burst_n = ((duration_s * fs).round() as usize).min(window_n).max(1);
    let mut annotations = Vec::with_capacity(count);
    for &idx in &chosen {
        let seg = &mut segments[idx];
        let p_sig = seg.radar.iter().map(|x| x * x).sum::<f64>() / window_n as f64;
        if p_sig == 0.0 {
            return Err(Error::InvalidInput(format!(
                "segment {idx} has zero power; cannot set a burst SNR"
            )));
        }
        let start = if burst_n >= window_n { 0 } else { rng.gen_range(0..=window_n - burst_n) };
        let raw: Vec<f64> = (0..burst_n).map(|_| rng.sample(StandardNormal)).collect();
        let p_raw = raw.iter().map(|z| z * z).sum::<f64>() / burst_n as f64;
        if p_raw == 0.0 {
            return Err(Error::NumericalFailure {
                what: "burst draw collapsed to zero power".into(),
                residual: 0.0,
            });
        }
        let scale = (p_sig / 10f64.powf(snr_db / 10.0) / p_raw).sqrt();
        for (off, z) in raw.iter().enumerate() {
            seg.radar[start + off] += scale * z;
        }
        let burst = Burst { start, end: start + burst_n, snr_db };
        seg.bursts.push(burst);
        annotations.push(SegmentBurst { segment: idx, start, end: start + burst_n, snr_db });
    }
    Ok(annotations)
}

// ---------------------------------------------------------------------------
// Record container: a plain-text, line-oriented format. Floats are written
// in their shortest round-trip form, so export/import is lossless.

const RECORD_MAGIC: &str = "ega-record v1";

pub fn write_record_string(record: &SyntheticRecord) -> Result<String> {
    record.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "{RECORD_MAGIC}");
    let _ = writeln!(out, "fs {}", record.fs);
    let _ = writeln!(out, "seed {}", record.seed);
    match &record.noise.kind {
        NoiseKind::Clean => {
            let _ = writeln!(out, "noise none");
        }
        NoiseKind::Constant { snr_db } => {
            let _ = writeln!(out, "noise constant {snr_db}");
        }
        NoiseKind::Abrupt { fraction, duration_s, snr_db } => {
            let _ = writeln!(out, "noise abrupt {fraction} {duration_s} {snr_db}");
        }
    }
    let _ = writeln!(out, "bursts {}", record.noise.bursts.len());
    for b in &record.noise.bursts {
        let _ = writeln!(out, "burst {} {} {}", b.start, b.end, b.snr_db);
    }
    let _ = writeln!(out, "anchors {}", join_floats(&record.anchors));
    let _ = writeln!(out, "ppis {}", join_floats(&record.ppis));
    let _ = writeln!(out, "samples {}", record.radar.len());
    let _ = writeln!(out, "radar ecg");
    for (x, e) in record.radar.iter().zip(&record.ecg) {
        let _ = writeln!(out, "{x} {e}");
    }
    Ok(out)
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_record_file<P: AsRef<Path>>(path: P, record: &SyntheticRecord) -> Result<()> {
    fs::write(path, write_record_string(record)?)?;
    Ok(())
}

pub fn read_record<R: Read>(input: R) -> Result<SyntheticRecord> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("unexpected end of record before {what}")))?
            .map_err(Error::Io)
    };

    let magic = next_line("header")?;
    if magic.trim() != RECORD_MAGIC {
        return Err(Error::Parse(format!("bad record header '{magic}'")));
    }
    let fs = parse_tagged_floats(&next_line("fs")?, "fs", 1)?[0];
    let seed_line = next_line("seed")?;
    let seed: u64 = seed_line
        .strip_prefix("seed ")
        .ok_or_else(|| Error::Parse("missing seed line".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad seed: {e}")))?;

    let noise_line = next_line("noise")?;
    let toks: Vec<&str> = noise_line.split_whitespace().collect();
    let kind = match toks.as_slice() {
        ["noise", "none"] => NoiseKind::Clean,
        ["noise", "constant", db] => NoiseKind::Constant { snr_db: parse_f64(db)? },
        ["noise", "abrupt", f, d, db] => NoiseKind::Abrupt {
            fraction: parse_f64(f)?,
            duration_s: parse_f64(d)?,
            snr_db: parse_f64(db)?,
        },
        _ => return Err(Error::Parse(format!("bad noise line '{noise_line}'"))),
    };

    let burst_count_line = next_line("bursts")?;
    let burst_count: usize = burst_count_line
        .strip_prefix("bursts ")
        .ok_or_else(|| Error::Parse("missing bursts line".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad burst count: {e}")))?;
    let mut bursts = Vec::with_capacity(burst_count);
    for _ in 0..burst_count {
        let line = next_line("burst")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["burst", start, end, db] => bursts.push(Burst {
                start: start.parse().map_err(|e| Error::Parse(format!("bad burst: {e}")))?,
                end: end.parse().map_err(|e| Error::Parse(format!("bad burst: {e}")))?,
                snr_db: parse_f64(db)?,
            }),
            _ => return Err(Error::Parse(format!("bad burst line '{line}'"))),
        }
    }

    let anchors = parse_tagged_floats(&next_line("anchors")?, "anchors", usize::MAX)?;
    let ppis = parse_tagged_floats(&next_line("ppis")?, "ppis", usize::MAX)?;
    let samples_line = next_line("samples")?;
    let samples: usize = samples_line
        .strip_prefix("samples ")
        .ok_or_else(|| Error::Parse("missing samples line".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad sample count: {e}")))?;
    let columns = next_line("column header")?;
    if columns.trim() != "radar ecg" {
        return Err(Error::Parse(format!("bad column header '{columns}'")));
    }
    let mut radar = Vec::with_capacity(samples);
    let mut ecg = Vec::with_capacity(samples);
    for _ in 0..samples {
        let line = next_line("sample row")?;
        let mut parts = line.split_whitespace();
        let x = parts.next().ok_or_else(|| Error::Parse("short sample row".into()))?;
        let e = parts.next().ok_or_else(|| Error::Parse("short sample row".into()))?;
        radar.push(parse_f64(x)?);
        ecg.push(parse_f64(e)?);
    }

    let record = SyntheticRecord {
        fs,
        seed,
        radar,
        ecg,
        anchors,
        ppis,
        noise: NoiseAnnotation { kind, bursts },
    };
    record.validate()?;
    Ok(record)
}

pub fn read_record_file<P: AsRef<Path>>(path: P) -> Result<SyntheticRecord> {
    read_record(fs::File::open(path)?)
}

fn parse_f64(tok: &str) -> Result<f64> {
    tok.parse().map_err(|e| Error::Parse(format!("bad float '{tok}': {e}")))
}

fn parse_tagged_floats(line: &str, tag: &str, expect: usize) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| Error::Parse(format!("expected '{tag}' line, got '{line}'")))?;
    let values: Vec<f64> =
        rest.split_whitespace().map(parse_f64).collect::<Result<Vec<f64>>>()?;
    if expect != usize::MAX && values.len() != expect {
        return Err(Error::Parse(format!(
            "expected {expect} values on '{tag}' line, got {}",
            values.len()
        )));
    }
    Ok(values)
}
