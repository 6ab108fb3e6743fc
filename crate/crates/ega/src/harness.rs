//! Experiment harness: builds the synthetic dataset, runs the training
//! loop that binds the model to a balancing strategy, evaluates on held-out
//! records (optionally under noise), compares strategies across repeated
//! seeds, and sweeps noise levels against a clean baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{apply_update, strategy_from_id, GradientMatrix, LossHistory};
use crate::config::{derive_seed, ExperimentConfig, NoiseProtocol};
use crate::error::{Error, Result};
use crate::metrics::{
    self, anchor_match, delta_m, mean_ci95, welch_t, Direction, MetricRow, MetricSpec,
    MetricValues, ANCHOR_MATCH_TOL_S,
};
use crate::netcore::{sgd_momentum_step, Batch, ModelConfig, MultiTaskModel};
use crate::synth::{
    add_abrupt_noise, add_constant_noise, gen_record, ppi_bin_center_ms, segment_record, Segment,
    SyntheticRecord, PPI_CLASSES, RESAMPLE_LEN, STEP_S, WINDOW_S,
};

/// Peaks below this fraction of the strongest peak are not decoded as anchors.
const ANCHOR_PEAK_RATIO: f64 = 0.5;
/// Minimum separation between decoded anchors, seconds.
const ANCHOR_MIN_SEP_S: f64 = 0.3;

/// One training sample: pooled input window plus the three task targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Vec<f64>,
    pub wave: Vec<f64>,
    pub anchor_classes: Vec<usize>,
    pub length_class: usize,
}

/// Dataset split at record granularity, so no window of a record leaks
/// across splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub train_records: Vec<SyntheticRecord>,
    pub test_records: Vec<SyntheticRecord>,
    pub train_trace_hash: String,
    pub model_config: ModelConfig,
}

/// Mean-pools the radar window by the configured factor.
fn pool_window(window: &[f64], pool: usize) -> Vec<f64> {
    window
        .chunks(pool)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn sample_from_segment(segment: &Segment, pool: usize) -> Option<Sample> {
    let labels = segment.labels.as_ref()?;
    let fs_pooled = segment.fs / pool as f64;
    let classes = segment.radar.len() / pool;
    let anchor_classes = labels
        .anchors_s
        .iter()
        .map(|t| ((((t - segment.start_s) * fs_pooled).floor()) as usize).min(classes - 1))
        .collect();
    Some(Sample {
        input: pool_window(&segment.radar, pool),
        wave: labels.ecg_piece.clone(),
        anchor_classes,
        length_class: labels.ppi_bin,
    })
}

fn hash_traces(records: &[SyntheticRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        for v in &r.radar {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Generates records from the config seed and splits them train/val/test.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    config.validate()?;
    let mean_ppi = 0.5 * (config.synth.ppi.lo() + config.synth.ppi.hi());
    let k = ((config.dataset.record_s / mean_ppi).round() as usize).max(1);
    let mut records = Vec::with_capacity(config.dataset.records);
    for i in 0..config.dataset.records {
        records.push(gen_record(derive_seed(config.seed, 1000 + i as u64), &config.synth, k)?);
    }
    let n = records.len();
    let n_train = ((config.dataset.train_frac * n as f64).round() as usize).min(n);
    let n_val = ((config.dataset.val_frac * n as f64).round() as usize).min(n - n_train);
    if n_train == 0 || n_train + n_val >= n {
        return Err(Error::InvalidConfig(format!(
            "split leaves no data: {n_train} train / {n_val} val of {n} records"
        )));
    }
    let test_records: Vec<SyntheticRecord> = records.split_off(n_train + n_val);
    let val_records: Vec<SyntheticRecord> = records.split_off(n_train);
    let train_records = records;

    let collect = |records: &[SyntheticRecord]| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for r in records {
            for segment in segment_record(r, WINDOW_S, STEP_S)? {
                if let Some(sample) = sample_from_segment(&segment, config.model.pool) {
                    out.push(sample);
                }
            }
        }
        Ok(out)
    };
    let train = collect(&train_records)?;
    let val = collect(&val_records)?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("no labeled training windows".into()));
    }

    let window_n = (WINDOW_S * config.synth.fs).round() as usize;
    let model_config = ModelConfig {
        input_dim: window_n / config.model.pool,
        hidden: config.model.hidden,
        wave_len: RESAMPLE_LEN,
        anchor_classes: window_n / config.model.pool,
        length_classes: PPI_CLASSES,
    };
    let train_trace_hash = hash_traces(&train_records);
    Ok(PreparedData { train, val, train_records, test_records, train_trace_hash, model_config })
}

fn batch_from(samples: &[Sample], idx: &[usize]) -> Batch {
    Batch {
        inputs: idx.iter().map(|&i| samples[i].input.clone()).collect(),
        waveform: idx.iter().map(|&i| samples[i].wave.clone()).collect(),
        anchors: idx.iter().map(|&i| samples[i].anchor_classes.clone()).collect(),
        length_class: idx.iter().map(|&i| samples[i].length_class).collect(),
    }
}

/// Serializable (task, metric, value) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub task: usize,
    pub metric: String,
    pub value: f64,
}

pub fn entries_to_values(entries: &[MetricEntry]) -> MetricValues {
    entries
        .iter()
        .map(|e| ((e.task, e.metric.clone()), e.value))
        .collect()
}

fn values_to_entries(values: &MetricValues) -> Vec<MetricEntry> {
    values
        .iter()
        .map(|((task, metric), value)| MetricEntry {
            task: *task,
            metric: metric.clone(),
            value: *value,
        })
        .collect()
}

/// Everything one run produces, minus the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub temperature: f64,
    pub epochs: usize,
    /// Mean per-task loss per epoch (scaled by the configured loss scales).
    pub epoch_losses: Vec<[f64; 3]>,
    pub metrics: Vec<MetricEntry>,
    /// Trunk updates skipped on a degenerate gradient.
    pub skipped_updates: usize,
    pub train_trace_hash: String,
    /// Wall-clock duration; excluded from reproducibility comparisons.
    pub wall_s: f64,
}

impl RunRecord {
    pub fn metric_values(&self) -> MetricValues {
        entries_to_values(&self.metrics)
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub model: MultiTaskModel,
    pub data: PreparedData,
}

/// Trains one model under the configured strategy and evaluates it on the
/// test split with the config's noise protocol (training data stays clean).
pub fn train(config: &ExperimentConfig) -> Result<TrainOutput> {
    let started = Instant::now();
    config.validate()?;
    let data = prepare_data(config)?;
    let strategy = strategy_from_id(
        &config.strategy.id,
        config.strategy.temperature,
        config.strategy.rank_tol,
    )?;
    let mut model = MultiTaskModel::new_seeded(data.model_config.clone(), derive_seed(config.seed, 1))?;
    let mut history = LossHistory::new(config.strategy.t_warm);
    let mut velocities: [Vec<f64>; 3] = [
        vec![0.0; model.heads[0].n_params()],
        vec![0.0; model.heads[1].n_params()],
        vec![0.0; model.heads[2].n_params()],
    ];
    let scales = config.dataset.loss_scales;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut skipped = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10_000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sums = [0.0f64; 3];
        let mut sample_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = batch_from(&data.train, chunk);
            let fwd = model.forward(&batch)?;
            let grads = model.per_task_gradients(&fwd, &batch)?;
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    grads
                        .trunk
                        .matrix()
                        .row(i)
                        .iter()
                        .map(|g| g * scales[i])
                        .collect()
                })
                .collect();
            let scaled = GradientMatrix::new(&rows)?;
            match strategy.step(&scaled, &history, epoch) {
                Ok(update) => {
                    let params = apply_update(&model.trunk.params_flat(), &update, config.optimizer.eta)?;
                    model.trunk.set_params_flat(&params)?;
                }
                Err(Error::DegenerateGradient) => skipped += 1,
                Err(e) => return Err(e),
            }
            for task in 0..3 {
                let hg: Vec<f64> = grads.heads[task].iter().map(|g| g * scales[task]).collect();
                let mut params = model.heads[task].params_flat();
                sgd_momentum_step(
                    &mut params,
                    &hg,
                    &mut velocities[task],
                    config.optimizer.eta,
                    config.optimizer.momentum,
                    config.optimizer.weight_decay,
                )?;
                model.heads[task].set_params_flat(&params)?;
            }
            for task in 0..3 {
                loss_sums[task] += scales[task] * grads.losses[task] * batch.len() as f64;
            }
            sample_count += batch.len();
        }
        let means = [
            loss_sums[0] / sample_count as f64,
            loss_sums[1] / sample_count as f64,
            loss_sums[2] / sample_count as f64,
        ];
        history.record_epoch(epoch, &means)?;
        epoch_losses.push(means);
    }

    let (metrics, _) = evaluate(
        &model,
        &data.test_records,
        config,
        &config.noise,
        derive_seed(config.seed, 4242),
    )?;
    let record = RunRecord {
        config_hash: config.hash(),
        seed: config.seed,
        strategy: config.strategy.id.clone(),
        temperature: config.strategy.temperature,
        epochs: config.epochs,
        epoch_losses,
        metrics: values_to_entries(&metrics),
        skipped_updates: skipped,
        train_trace_hash: data.train_trace_hash.clone(),
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutput { record, model, data })
}

/// Realized-noise diagnostics gathered while doping evaluation data.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    /// Realized SNR per record for constant noise, dB.
    pub realized_snr_db: Vec<f64>,
    /// (doped, total) window counts per record for abrupt noise.
    pub doped_windows: Vec<(usize, usize)>,
}

/// Segments the evaluation records and applies the noise protocol to the
/// copies (never to the records themselves).
pub fn noisy_test_segments(
    records: &[SyntheticRecord],
    protocol: &NoiseProtocol,
    noise_seed_base: u64,
) -> Result<(Vec<Segment>, NoiseDiagnostics)> {
    let mut segments = Vec::new();
    let mut diag = NoiseDiagnostics::default();
    for (i, record) in records.iter().enumerate() {
        let record_seed = derive_seed(noise_seed_base, i as u64);
        match protocol {
            NoiseProtocol::None => {
                segments.extend(segment_record(record, WINDOW_S, STEP_S)?);
            }
            NoiseProtocol::Constant { snr_db } => {
                let noisy = add_constant_noise(&record.radar, *snr_db, record_seed)?;
                let p_sig =
                    record.radar.iter().map(|x| x * x).sum::<f64>() / record.radar.len() as f64;
                let p_noise = record
                    .radar
                    .iter()
                    .zip(&noisy)
                    .map(|(x, y)| (y - x) * (y - x))
                    .sum::<f64>()
                    / record.radar.len() as f64;
                diag.realized_snr_db.push(10.0 * (p_sig / p_noise).log10());
                let mut copy = record.clone();
                copy.radar = noisy;
                segments.extend(segment_record(&copy, WINDOW_S, STEP_S)?);
            }
            NoiseProtocol::Abrupt { fraction, duration_s, snr_db } => {
                let mut segs = segment_record(record, WINDOW_S, STEP_S)?;
                let ann = add_abrupt_noise(&mut segs, *fraction, *duration_s, *snr_db, record_seed)?;
                diag.doped_windows.push((ann.len(), segs.len()));
                segments.extend(segs);
            }
        }
    }
    Ok((segments, diag))
}

/// Decodes anchor times from the anchor-head probabilities: local maxima
/// above half the strongest peak, greedily kept with a minimum separation.
fn decode_anchor_times(logits: &[f64], window_start_s: f64, fs_pooled: f64) -> Vec<f64> {
    let top = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let n = probs.len();
    let max_p = probs.iter().copied().fold(0.0f64, f64::max);
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let left_ok = i == 0 || probs[i] >= probs[i - 1];
            let right_ok = i + 1 == n || probs[i] > probs[i + 1];
            left_ok && right_ok && probs[i] >= ANCHOR_PEAK_RATIO * max_p
        })
        .collect();
    candidates.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let min_sep = (ANCHOR_MIN_SEP_S * fs_pooled).round() as i64;
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| (k as i64 - c as i64).abs() >= min_sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept.iter()
        .map(|&bin| window_start_s + (bin as f64 + 0.5) / fs_pooled)
        .collect()
}

/// Metric names per task used throughout the harness.
pub fn standard_metric_specs() -> Vec<MetricSpec> {
    vec![
        MetricSpec::new(1, "rmse", Direction::LowerBetter),
        MetricSpec::new(1, "pcc", Direction::HigherBetter),
        MetricSpec::new(1, "r2", Direction::HigherBetter),
        MetricSpec::new(2, "timing_error_ms", Direction::LowerBetter),
        MetricSpec::new(2, "mdr", Direction::LowerBetter),
        MetricSpec::new(3, "ppi_error_ms", Direction::LowerBetter),
    ]
}

/// Evaluates a model over the test records under a noise protocol.
pub fn evaluate(
    model: &MultiTaskModel,
    records: &[SyntheticRecord],
    config: &ExperimentConfig,
    protocol: &NoiseProtocol,
    noise_seed_base: u64,
) -> Result<(MetricValues, NoiseDiagnostics)> {
    let (segments, diag) = noisy_test_segments(records, protocol, noise_seed_base)?;
    let pool = config.model.pool;
    let fs_pooled = config.synth.fs / pool as f64;

    let mut rmse_sum = 0.0;
    let mut rmse_n = 0usize;
    let mut pcc_sum = 0.0;
    let mut pcc_n = 0usize;
    let mut r2_sum = 0.0;
    let mut r2_n = 0usize;
    let mut timing_sum_s = 0.0;
    let mut timing_n = 0usize;
    let mut truth_anchor_total = 0usize;
    let mut matched_total = 0usize;
    let mut ppi_truth_ms = Vec::new();
    let mut ppi_pred_ms = Vec::new();

    for segment in &segments {
        let Some(labels) = segment.labels.as_ref() else { continue };
        let sample = sample_from_segment(segment, pool).expect("labeled segment");
        let batch = Batch {
            inputs: vec![sample.input.clone()],
            waveform: vec![sample.wave.clone()],
            anchors: vec![sample.anchor_classes.clone()],
            length_class: vec![sample.length_class],
        };
        let fwd = model.forward(&batch)?;

        let pred_wave = &fwd.waveform()[0];
        rmse_sum += metrics::rmse(&labels.ecg_piece, pred_wave)?;
        rmse_n += 1;
        match metrics::pcc(&labels.ecg_piece, pred_wave) {
            Ok(v) => {
                pcc_sum += v;
                pcc_n += 1;
            }
            Err(Error::UndefinedMetric(why)) => log::debug!("pcc skipped: {why}"),
            Err(e) => return Err(e),
        }
        match metrics::r_squared(&labels.ecg_piece, pred_wave) {
            Ok(v) => {
                r2_sum += v;
                r2_n += 1;
            }
            Err(Error::UndefinedMetric(why)) => log::debug!("r2 skipped: {why}"),
            Err(e) => return Err(e),
        }

        let decoded = decode_anchor_times(&fwd.anchor_logits()[0], segment.start_s, fs_pooled);
        let matched = anchor_match(&labels.anchors_s, &decoded, ANCHOR_MATCH_TOL_S)?;
        truth_anchor_total += labels.anchors_s.len();
        matched_total += matched.pairs.len();
        timing_sum_s += matched.timing_errors_s.iter().sum::<f64>();
        timing_n += matched.timing_errors_s.len();

        let logits = &fwd.length_logits()[0];
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        ppi_truth_ms.push(labels.ppi_s * 1000.0);
        ppi_pred_ms.push(ppi_bin_center_ms(best));
    }

    let mut values = MetricValues::new();
    if rmse_n > 0 {
        values.insert((1, "rmse".into()), rmse_sum / rmse_n as f64);
    }
    if pcc_n > 0 {
        values.insert((1, "pcc".into()), pcc_sum / pcc_n as f64);
    }
    if r2_n > 0 {
        values.insert((1, "r2".into()), r2_sum / r2_n as f64);
    }
    if timing_n > 0 {
        values.insert((2, "timing_error_ms".into()), timing_sum_s / timing_n as f64 * 1000.0);
    } else {
        log::warn!("no anchors matched; timing error undefined for this evaluation");
    }
    if truth_anchor_total > 0 {
        values.insert(
            (2, "mdr".into()),
            (truth_anchor_total - matched_total) as f64 / truth_anchor_total as f64,
        );
    }
    if !ppi_truth_ms.is_empty() {
        values.insert((3, "ppi_error_ms".into()), metrics::ppi_error_ms(&ppi_truth_ms, &ppi_pred_ms)?);
    }
    Ok((values, diag))
}

/// Per-task gradient norms of the first training batch at initialization;
/// used to verify dominance constructions.
pub fn gradient_norm_probe(config: &ExperimentConfig) -> Result<[f64; 3]> {
    let data = prepare_data(config)?;
    let model = MultiTaskModel::new_seeded(data.model_config.clone(), derive_seed(config.seed, 1))?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10_001));
    order.shuffle(&mut rng);
    let batch = batch_from(&data.train, &order[..config.batch_size.min(order.len())]);
    let fwd = model.forward(&batch)?;
    let grads = model.per_task_gradients(&fwd, &batch)?;
    let mut norms = [0.0f64; 3];
    for (task, norm) in norms.iter_mut().enumerate() {
        let row = grads.trunk.matrix().row(task);
        let scale = config.dataset.loss_scales[task];
        *norm = row.iter().map(|g| (g * scale) * (g * scale)).sum::<f64>().sqrt();
    }
    Ok(norms)
}

/// One noise level of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub protocol: NoiseProtocol,
    pub metrics: Vec<MetricEntry>,
    pub delta_m_pct: f64,
    pub diagnostics: NoiseDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutput {
    pub baseline: RunRecord,
    pub rows: Vec<SweepRow>,
    pub train_trace_hash_before: String,
    pub train_trace_hash_after: String,
}

impl SweepOutput {
    /// Whether the aggregate change degrades monotonically as the
    /// constant-noise SNR drops. Reported, never enforced: a noisy desk
    /// model may recover a level or two. `None` without constant levels.
    pub fn constant_trend_monotone(&self) -> Option<bool> {
        let mut levels: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter_map(|row| match row.protocol {
                NoiseProtocol::Constant { snr_db } => Some((snr_db, row.delta_m_pct)),
                _ => None,
            })
            .collect();
        if levels.len() < 2 {
            return None;
        }
        levels.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        Some(levels.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12))
    }
}

/// Trains once on clean data, then evaluates the same model under every
/// protocol. The aggregate change is computed against the clean test
/// metrics of the same model; training traces are hash-checked untouched.
pub fn noise_sweep(config: &ExperimentConfig, protocols: &[NoiseProtocol]) -> Result<SweepOutput> {
    let mut clean_config = config.clone();
    clean_config.noise = NoiseProtocol::None;
    let out = train(&clean_config)?;
    let baseline_values = out.record.metric_values();
    let specs: Vec<MetricSpec> = standard_metric_specs()
        .into_iter()
        .filter(|s| baseline_values.contains_key(&(s.task, s.name.clone())))
        .collect();

    let mut rows = Vec::with_capacity(protocols.len());
    for (k, protocol) in protocols.iter().enumerate() {
        let (values, diag) = evaluate(
            &out.model,
            &out.data.test_records,
            config,
            protocol,
            derive_seed(config.seed, 5000 + k as u64),
        )?;
        let usable: Vec<MetricSpec> = specs
            .iter()
            .filter(|s| values.contains_key(&(s.task, s.name.clone())))
            .cloned()
            .collect();
        let change = delta_m(&values, &baseline_values, &usable)?;
        rows.push(SweepRow {
            protocol: protocol.clone(),
            metrics: values_to_entries(&values),
            delta_m_pct: change,
            diagnostics: diag,
        });
    }
    let after = hash_traces(&out.data.train_records);
    Ok(SweepOutput {
        baseline: out.record,
        rows,
        train_trace_hash_before: out.data.train_trace_hash.clone(),
        train_trace_hash_after: after,
    })
}

/// The full default sweep grid: the constant-SNR ladder plus the abrupt
/// burst grid (fraction x durations x intensities).
pub fn sweep_protocols(config: &ExperimentConfig) -> Vec<NoiseProtocol> {
    let mut protocols: Vec<NoiseProtocol> = config
        .sweep
        .constant_db
        .iter()
        .map(|&snr_db| NoiseProtocol::Constant { snr_db })
        .collect();
    for &duration_s in &config.sweep.abrupt_duration_s {
        for &snr_db in &config.sweep.abrupt_db {
            protocols.push(NoiseProtocol::Abrupt {
                fraction: config.sweep.abrupt_fraction,
                duration_s,
                snr_db,
            });
        }
    }
    protocols
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Per-metric (mean, 95% CI half-width) across repeats.
    pub per_metric: Vec<(MetricEntry, f64)>,
    pub delta_m_mean: f64,
    pub delta_m_ci: f64,
    /// Welch p-value of the per-run aggregate changes against the baseline
    /// strategy's; `None` when the test is degenerate.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareOutput {
    pub baseline: String,
    pub summaries: Vec<StrategySummary>,
    pub rows: Vec<MetricRow>,
}

/// Repeated runs per strategy over shared seeds. The first strategy is the
/// baseline: per-run aggregate changes are computed against its per-metric
/// means, then tested for significance.
pub fn compare_strategies(config: &ExperimentConfig, strategies: &[String]) -> Result<CompareOutput> {
    if strategies.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one strategy".into()));
    }
    if config.repeats < 2 {
        return Err(Error::InvalidConfig("compare needs repeats >= 2 for intervals and p-values".into()));
    }
    for id in strategies {
        strategy_from_id(id, config.strategy.temperature, config.strategy.rank_tol)?;
    }

    let mut runs: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for id in strategies {
        let mut per_strategy = Vec::with_capacity(config.repeats);
        for r in 0..config.repeats {
            let mut run_config = config.clone();
            run_config.strategy.id = id.clone();
            run_config.seed = derive_seed(config.seed, 100 + r as u64);
            run_config.noise = config.noise.clone();
            per_strategy.push(train(&run_config)?.record);
        }
        runs.insert(id.clone(), per_strategy);
    }

    let baseline_id = &strategies[0];
    let baseline_runs = &runs[baseline_id];
    // Baseline per-metric means over its repeats, restricted to metrics
    // present in every run of every strategy.
    let mut specs = standard_metric_specs();
    specs.retain(|s| {
        let key = (s.task, s.name.clone());
        runs.values().flatten().all(|run| run.metric_values().contains_key(&key))
    });
    if specs.is_empty() {
        return Err(Error::UndefinedMetric("no metric defined across all runs".into()));
    }
    let mut baseline_mean = MetricValues::new();
    for spec in &specs {
        let key = (spec.task, spec.name.clone());
        let vals: Vec<f64> =
            baseline_runs.iter().map(|r| r.metric_values()[&key]).collect();
        baseline_mean.insert(key, vals.iter().sum::<f64>() / vals.len() as f64);
    }

    let mut deltas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, per_strategy) in &runs {
        let d: Result<Vec<f64>> = per_strategy
            .iter()
            .map(|run| delta_m(&run.metric_values(), &baseline_mean, &specs))
            .collect();
        deltas.insert(id.clone(), d?);
    }

    let mut summaries = Vec::with_capacity(strategies.len());
    let mut rows = Vec::new();
    for id in strategies {
        let per_strategy = &runs[id];
        let mut per_metric = Vec::new();
        for spec in &specs {
            let key = (spec.task, spec.name.clone());
            let vals: Vec<f64> = per_strategy.iter().map(|r| r.metric_values()[&key]).collect();
            let (mean, ci) = mean_ci95(&vals)?;
            per_metric.push((
                MetricEntry { task: spec.task, metric: spec.name.clone(), value: mean },
                ci,
            ));
        }
        let (dm_mean, dm_ci) = mean_ci95(&deltas[id])?;
        let p_value = match welch_t(&deltas[id], &deltas[baseline_id]) {
            Ok((_, p)) => Some(p),
            Err(Error::UndefinedMetric(why)) => {
                log::warn!("p-value for {id} undefined: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        summaries.push(StrategySummary {
            strategy: id.clone(),
            per_metric,
            delta_m_mean: dm_mean,
            delta_m_ci: dm_ci,
            p_value,
        });
        for (r, run) in per_strategy.iter().enumerate() {
            for entry in &run.metrics {
                rows.push(MetricRow {
                    run_id: format!("{}-r{r}", run.config_hash),
                    seed: run.seed,
                    strategy: id.clone(),
                    temperature: run.temperature,
                    noise_type: config.noise.type_name().into(),
                    noise_db: config.noise.db(),
                    task: entry.task.to_string(),
                    metric: entry.metric.clone(),
                    value: entry.value,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.run_id.cmp(&b.run_id))
            .then(a.task.cmp(&b.task))
            .then(a.metric.cmp(&b.metric))
    });
    Ok(CompareOutput { baseline: baseline_id.clone(), summaries, rows })
}

/// Rows exported by a single training run.
pub fn run_rows(record: &RunRecord, noise: &NoiseProtocol) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = record
        .metrics
        .iter()
        .map(|entry| MetricRow {
            run_id: format!("{}-r0", record.config_hash),
            seed: record.seed,
            strategy: record.strategy.clone(),
            temperature: record.temperature,
            noise_type: noise.type_name().into(),
            noise_db: noise.db(),
            task: entry.task.to_string(),
            metric: entry.metric.clone(),
            value: entry.value,
        })
        .collect();
    rows.sort_by(|a, b| a.task.cmp(&b.task).then(a.metric.cmp(&b.metric)));
    rows
}

/// Rows exported by a sweep: the clean baseline plus one block per level,
/// including the aggregate change as a task-"all" row.
pub fn sweep_rows(output: &SweepOutput) -> Vec<MetricRow> {
    let mut rows = run_rows(&output.baseline, &NoiseProtocol::None);
    for (k, row) in output.rows.iter().enumerate() {
        let run_id = format!("{}-n{k}", output.baseline.config_hash);
        for entry in &row.metrics {
            rows.push(MetricRow {
                run_id: run_id.clone(),
                seed: output.baseline.seed,
                strategy: output.baseline.strategy.clone(),
                temperature: output.baseline.temperature,
                noise_type: row.protocol.type_name().into(),
                noise_db: row.protocol.db(),
                task: entry.task.to_string(),
                metric: entry.metric.clone(),
                value: entry.value,
            });
        }
        rows.push(MetricRow {
            run_id: run_id.clone(),
            seed: output.baseline.seed,
            strategy: output.baseline.strategy.clone(),
            temperature: output.baseline.temperature,
            noise_type: row.protocol.type_name().into(),
            noise_db: row.protocol.db(),
            task: "all".into(),
            metric: "delta_m_pct".into(),
            value: row.delta_m_pct,
        });
    }
    rows
}

/// Aggregated view of exported rows: mean and CI per group.
#[derive(Debug, Clone, Serialize)]
pub struct ReportGroup {
    pub strategy: String,
    pub temperature: f64,
    pub noise_type: String,
    pub noise_db: Option<f64>,
    pub task: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub ci95: Option<f64>,
}

type GroupKey = (String, String, String, String, String);

pub fn aggregate_rows(rows: &[MetricRow]) -> Vec<ReportGroup> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    let mut meta: BTreeMap<GroupKey, (f64, Option<f64>)> = BTreeMap::new();
    for row in rows {
        let key = (
            row.strategy.clone(),
            format!("{}", row.temperature),
            format!("{:?}", row.noise_db),
            row.task.clone(),
            row.metric.clone(),
        );
        meta.entry(key.clone())
            .or_insert((row.temperature, row.noise_db));
        groups.entry(key).or_default().push(row.value);
    }
    let noise_type_of = |db: &Option<f64>, rows: &[MetricRow], strategy: &str, task: &str, metric: &str| {
        rows.iter()
            .find(|r| {
                r.strategy == strategy && r.task == task && r.metric == metric && r.noise_db == *db
            })
            .map(|r| r.noise_type.clone())
            .unwrap_or_else(|| "none".into())
    };
    groups
        .into_iter()
        .map(|(key, values)| {
            let (strategy, _, _, task, metric) = key.clone();
            let (temperature, noise_db) = meta[&key];
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let ci95 = if values.len() >= 2 { mean_ci95(&values).ok().map(|(_, c)| c) } else { None };
            ReportGroup {
                noise_type: noise_type_of(&noise_db, rows, &strategy, &task, &metric),
                strategy,
                temperature,
                noise_db,
                task,
                metric,
                runs: values.len(),
                mean,
                ci95,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{equal_weight_step, BalancedGradient};

    /// Small config that trains in well under a second.
    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.seed = 11;
        config.epochs = 2;
        config.batch_size = 16;
        config.repeats = 2;
        config.model.hidden = 8;
        config.dataset.records = 6;
        config.dataset.record_s = 12.0;
        config.dataset.train_frac = 0.5;
        config.dataset.val_frac = 0.17;
        config
    }

    #[test]
    fn prepare_data_splits_by_record() {
        let config = tiny_config();
        let data = prepare_data(&config).unwrap();
        assert_eq!(data.train_records.len(), 3);
        assert_eq!(data.test_records.len(), 2);
        assert!(!data.train.is_empty());
        assert_eq!(data.model_config.input_dim, 200);
        assert_eq!(data.model_config.anchor_classes, 200);
        assert_eq!(data.model_config.length_classes, PPI_CLASSES);
        // Deterministic.
        let again = prepare_data(&config).unwrap();
        assert_eq!(data.train_trace_hash, again.train_trace_hash);
    }

    #[test]
    fn zero_epoch_run_reports_untrained_metrics() {
        let mut config = tiny_config();
        config.epochs = 0;
        let out = train(&config).unwrap();
        assert!(out.record.epoch_losses.is_empty());
        assert!(!out.record.metrics.is_empty());
    }

    #[test]
    fn train_is_deterministic_modulo_wall_clock() {
        let config = tiny_config();
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.record.config_hash, b.record.config_hash);
        assert_eq!(a.record.epoch_losses.len(), b.record.epoch_losses.len());
        for (x, y) in a.record.epoch_losses.iter().zip(&b.record.epoch_losses) {
            for t in 0..3 {
                assert_eq!(x[t].to_bits(), y[t].to_bits());
            }
        }
        assert_eq!(a.record.metrics, b.record.metrics);
        for (x, y) in a.model.trunk.params_flat().iter().zip(b.model.trunk.params_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn run_record_shape_invariants() {
        let config = tiny_config();
        let out = train(&config).unwrap();
        assert_eq!(out.record.epoch_losses.len(), config.epochs);
        assert_eq!(out.record.config_hash, config.hash());
        let values = out.record.metric_values();
        for spec in standard_metric_specs() {
            assert!(values.contains_key(&(spec.task, spec.name.clone())), "{}", spec.name);
        }
    }

    #[test]
    fn equal_weight_starves_hard_task_on_quadratic_dominance() {
        // Two orthogonal quadratic tasks on theta in R^2 with gradient
        // scales (1, c): L1 = (theta0 - 1)^2 / 2, L2 = c (theta1 - 1)^2 / 2.
        // Under equal weighting with a step small enough for the dominant
        // task, the hard task contracts by (1 - eta) per step; the brute
        // force loop below is the oracle for the reachable loss.
        let c = 100.0;
        let eta = 1.0 / c; // largest stable step for the dominant task
        let steps = 120;
        let mut oracle = [1.0f64, 1.0];
        for _ in 0..steps {
            oracle[0] -= eta * oracle[0];
            oracle[1] -= eta * c * oracle[1];
        }
        let hard_residual_threshold = 0.5 * oracle[0] * oracle[0];

        let mut theta = [0.0f64, 0.0];
        for _ in 0..steps {
            let g = GradientMatrix::new(&[
                vec![theta[0] - 1.0, 0.0],
                vec![0.0, c * (theta[1] - 1.0)],
            ])
            .unwrap();
            let update: BalancedGradient = equal_weight_step(&g);
            let next = apply_update(&theta, &update, eta).unwrap();
            theta = [next[0], next[1]];
        }
        let hard_loss = 0.5 * (theta[0] - 1.0) * (theta[0] - 1.0);
        let dominant_loss = 0.5 * c * (theta[1] - 1.0) * (theta[1] - 1.0);
        // The dominant task converges while the hard task is stuck near the
        // oracle's residual, far from its own optimum.
        assert!(dominant_loss < 1e-3, "dominant loss {dominant_loss}");
        assert!(hard_loss >= hard_residual_threshold * 0.99, "hard loss {hard_loss}");
        assert!(hard_loss > 40.0 * dominant_loss, "hard task should remain far from optimum");
    }

    #[test]
    fn compare_self_comparison_is_null() {
        let mut config = tiny_config();
        config.epochs = 1;
        let out = compare_strategies(&config, &["equal_weight".into()]).unwrap();
        assert_eq!(out.baseline, "equal_weight");
        let summary = &out.summaries[0];
        assert!(summary.delta_m_mean.abs() < 1e-9, "delta {}", summary.delta_m_mean);
        assert_eq!(summary.p_value, Some(1.0));
        // strategies x repeats x metrics rows.
        assert_eq!(out.rows.len(), config.repeats * 6);
    }

    #[test]
    fn compare_row_count_and_determinism() {
        let mut config = tiny_config();
        config.epochs = 1;
        let ids = vec!["equal_weight".to_string(), "ortho_only".to_string()];
        let a = compare_strategies(&config, &ids).unwrap();
        assert_eq!(a.rows.len(), 2 * config.repeats * 6);
        let b = compare_strategies(&config, &ids).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x, y);
            assert_eq!(x.value.to_bits(), y.value.to_bits());
        }
        assert!(compare_strategies(&config, &[]).is_err());
        let mut one = config.clone();
        one.repeats = 1;
        assert!(compare_strategies(&one, &ids).is_err());
    }

    #[test]
    fn sweep_preserves_training_data_and_counts() {
        let mut config = tiny_config();
        config.epochs = 1;
        let protocols = vec![
            NoiseProtocol::Constant { snr_db: 0.0 },
            NoiseProtocol::Abrupt { fraction: 0.2, duration_s: 2.0, snr_db: 0.0 },
        ];
        let out = noise_sweep(&config, &protocols).unwrap();
        assert_eq!(out.train_trace_hash_before, out.train_trace_hash_after);
        assert_eq!(out.rows.len(), 2);
        for snr in &out.rows[0].diagnostics.realized_snr_db {
            assert!(snr.abs() <= 0.1, "realized snr {snr}");
        }
        for &(doped, total) in &out.rows[1].diagnostics.doped_windows {
            assert_eq!(doped, (0.2 * total as f64).round() as usize);
        }
        // Empty protocol list: baseline only.
        let empty = noise_sweep(&config, &[]).unwrap();
        assert!(empty.rows.is_empty());
        assert!(!empty.baseline.metrics.is_empty());
    }

    #[test]
    fn decode_anchor_times_finds_separated_peaks() {
        let mut logits = vec![0.0; 200];
        logits[30] = 6.0;
        logits[31] = 3.0;
        logits[90] = 6.0;
        logits[150] = 5.8;
        let times = decode_anchor_times(&logits, 2.0, 50.0);
        assert_eq!(times.len(), 3);
        assert!((times[0] - (2.0 + 30.5 / 50.0)).abs() < 1e-12);
        assert!((times[1] - (2.0 + 90.5 / 50.0)).abs() < 1e-12);
    }

    #[test]
    fn sweep_rows_parse_back() {
        let mut config = tiny_config();
        config.epochs = 1;
        let out = noise_sweep(&config, &[NoiseProtocol::Constant { snr_db: 3.0 }]).unwrap();
        let rows = sweep_rows(&out);
        let mut buf = Vec::new();
        metrics::write_rows(&mut buf, &rows).unwrap();
        let back = metrics::read_rows(buf.as_slice()).unwrap();
        assert_eq!(rows, back);
        let groups = aggregate_rows(&back);
        assert!(!groups.is_empty());
    }
}
