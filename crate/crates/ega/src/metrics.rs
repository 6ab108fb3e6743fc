//! Evaluation metrics: waveform similarity (RMSE/PCC/R^2), anchor timing
//! and missed-detection rate, peak-interval error, the aggregate signed
//! relative improvement across tasks, Welch's t-test, and the columnar
//! report format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matching tolerance for anchor detection, seconds. Predictions farther
/// than this from every truth anchor count as missed.
pub const ANCHOR_MATCH_TOL_S: f64 = 0.150;

/// Root-mean-square error between two equal-length traces.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rmse needs equal non-empty traces, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(mse.sqrt())
}

/// Pearson correlation coefficient. Undefined when either trace has zero
/// variance.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "pcc needs two equal traces of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("pcc of a zero-variance trace".into()));
    }
    Ok(sab / denom)
}

/// Coefficient of determination `1 - SS_res / SS_tot`. Undefined for a
/// constant truth trace; may be negative for worse-than-mean predictors.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::InvalidInput("r_squared needs equal non-empty traces".into()));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r_squared of a constant truth".into()));
    }
    let ss_res: f64 = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Outcome of matching predicted anchors against truth anchors.
#[derive(Debug, Clone)]
pub struct AnchorMatch {
    /// |truth - prediction| per matched pair, ordered by truth index, seconds.
    pub timing_errors_s: Vec<f64>,
    /// Fraction of truth anchors left unmatched.
    pub mdr: f64,
    /// Matched (truth index, prediction index) pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one nearest matching within `tol_s`. Candidate pairs are
/// taken closest-first (ties broken by truth then prediction index), so
/// widening the tolerance can only add matches.
pub fn anchor_match(truth: &[f64], pred: &[f64], tol_s: f64) -> Result<AnchorMatch> {
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("anchor matching with no truth anchors".into()));
    }
    if !(tol_s > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol_s}")));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = (t - p).abs();
            if d <= tol_s {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut truth_used = vec![false; truth.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !truth_used[i] && !pred_used[j] {
            truth_used[i] = true;
            pred_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by_key(|&(i, _)| i);
    let timing_errors_s: Vec<f64> =
        pairs.iter().map(|&(i, j)| (truth[i] - pred[j]).abs()).collect();
    let unmatched = truth.len() - pairs.len();
    Ok(AnchorMatch {
        timing_errors_s,
        mdr: unmatched as f64 / truth.len() as f64,
        pairs,
    })
}

/// Mean absolute difference between per-cycle interval lists, milliseconds.
pub fn ppi_error_ms(truth_ms: &[f64], pred_ms: &[f64]) -> Result<f64> {
    if truth_ms.len() != pred_ms.len() || truth_ms.is_empty() {
        return Err(Error::InvalidInput(format!(
            "ppi_error needs equal non-empty lists, got {} and {}",
            truth_ms.len(),
            pred_ms.len()
        )));
    }
    Ok(truth_ms
        .iter()
        .zip(pred_ms)
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / truth_ms.len() as f64)
}

/// Whether smaller or larger values of a metric are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

impl Direction {
    /// Sign applied inside the aggregate improvement so that positive
    /// output always means better than baseline.
    pub fn sign(self) -> f64 {
        match self {
            Direction::LowerBetter => -1.0,
            Direction::HigherBetter => 1.0,
        }
    }
}

/// One metric slot in the aggregate improvement: which task, which metric,
/// and which direction is better.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub task: usize,
    pub name: String,
    pub direction: Direction,
}

impl MetricSpec {
    pub fn new(task: usize, name: &str, direction: Direction) -> Self {
        Self { task, name: name.to_string(), direction }
    }
}

/// Metric values keyed by (task index, metric name).
pub type MetricValues = BTreeMap<(usize, String), f64>;

/// Signed mean relative change against a baseline, in percent: metrics are
/// averaged within each task, then across tasks. Positive means better.
/// Slots with a zero baseline are excluded with a warning; a missing value
/// is an error.
pub fn delta_m(
    method: &MetricValues,
    baseline: &MetricValues,
    specs: &[MetricSpec],
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("delta_m needs at least one metric spec".into()));
    }
    let mut by_task: BTreeMap<usize, Vec<&MetricSpec>> = BTreeMap::new();
    for spec in specs {
        by_task.entry(spec.task).or_default().push(spec);
    }
    let mut task_terms = Vec::new();
    for (task, slots) in &by_task {
        let mut sum = 0.0;
        let mut used = 0usize;
        for spec in slots {
            let key = (spec.task, spec.name.clone());
            let m = *method.get(&key).ok_or_else(|| {
                Error::InvalidInput(format!("method value missing for task {task} '{}'", spec.name))
            })?;
            let b = *baseline.get(&key).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "baseline value missing for task {task} '{}'",
                    spec.name
                ))
            })?;
            if b == 0.0 {
                log::warn!("delta_m: zero baseline for task {task} '{}', excluded", spec.name);
                continue;
            }
            sum += spec.direction.sign() * (m - b) / b;
            used += 1;
        }
        if used > 0 {
            task_terms.push(sum / used as f64);
        } else {
            log::warn!("delta_m: task {task} has no usable metrics, excluded");
        }
    }
    if task_terms.is_empty() {
        return Err(Error::UndefinedMetric("delta_m with no usable metrics".into()));
    }
    Ok(task_terms.iter().sum::<f64>() / task_terms.len() as f64 * 100.0)
}

/// Welch's unequal-variance t-test; returns the statistic and the
/// two-sided p-value from the Student-t distribution with
/// Welch-Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric("welch_t needs at least 2 samples per group".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("welch_t with non-finite samples".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        if ma == mb {
            return Ok((0.0, 1.0));
        }
        return Err(Error::UndefinedMetric(
            "welch_t with two zero-variance samples of different means".into(),
        ));
    }
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se = (sa + sb).sqrt();
    let t = (ma - mb) / se;
    let df = (sa + sb) * (sa + sb)
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = 2.0 * student_t_sf(t.abs(), df);
    Ok((t, p.clamp(0.0, 1.0)))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Mean and 95% confidence half-width (`1.96 * s / sqrt(n)`).
pub fn mean_ci95(sample: &[f64]) -> Result<(f64, f64)> {
    if sample.len() < 2 {
        return Err(Error::UndefinedMetric("confidence interval needs >= 2 samples".into()));
    }
    let (mean, var) = mean_var(sample);
    Ok((mean, 1.96 * var.sqrt() / (sample.len() as f64).sqrt()))
}

/// Upper tail `P(T > t)` of the Student-t distribution, `t >= 0`.
fn student_t_sf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    0.5 * incomplete_beta(0.5 * df, 0.5, x)
}

/// Regularized incomplete beta `I_x(a, b)` via the Lentz continued
/// fraction, as in the classic numerical-methods formulation.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of `ln Gamma(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// One exported metric observation. `noise_db` stays empty for clean runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub noise_type: String,
    pub noise_db: Option<f64>,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Writes rows as CSV with a fixed header. Floats round-trip exactly
/// (shortest representation).
pub fn write_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(rows)
}
