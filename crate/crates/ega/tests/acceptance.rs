// Configs are built by mutating defaults; the struct is large.
#![allow(clippy::field_reassign_with_default)]

//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its runtime (run with `--nocapture` to see them).
//!
//! Oracles here are independent of the library code paths they check:
//! closed-form 2x2 eigenvalues, the trigonometric cubic for 3x3, random
//! row-orthonormal competitors for the projection optimality, and central
//! finite differences for the gradients.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ega::balance::eccentric_vector;
use ega::config::{derive_seed, ExperimentConfig, NoiseProtocol};
use ega::harness::{gradient_norm_probe, noise_sweep, sweep_protocols, train};
use ega::linalg::{gram, jacobi_eigh, project_align, Matrix, DEFAULT_RANK_TOL};
use ega::metrics::{
    anchor_match, delta_m, pcc, ppi_error_ms, r_squared, rmse, welch_t, Direction, MetricSpec,
    MetricValues, ANCHOR_MATCH_TOL_S,
};
use ega::netcore::{Batch, ModelConfig, MultiTaskModel};

fn pass(name: &str, started: Instant, budget_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    println!("{name}: PASS ({elapsed:.2}s, budget {budget_s:.0}s)");
    assert!(elapsed <= budget_s, "{name} exceeded its runtime budget: {elapsed:.2}s");
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(n, m, data).unwrap()
}

/// Random row-orthonormal n x m matrix via modified Gram-Schmidt.
fn random_row_orthonormal(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let other = rows[j].clone();
            for (a, b) in rows[i].iter_mut().zip(&other) {
                *a -= dot * b;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn a1_orthogonal_alignment_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut cases: Vec<(usize, usize)> = vec![(2, 8), (6, 8), (2, 4096), (6, 4096)];
    while cases.len() < 1000 {
        let n = rng.gen_range(2..=6usize);
        let m = (2f64.powf(rng.gen_range(3.0..12.0)).round() as usize).clamp(8, 4096);
        if m >= n {
            cases.push((n, m));
        }
    }
    for (case, &(n, m)) in cases.iter().enumerate() {
        let g = random_matrix(&mut rng, n, m);
        let proj = project_align(&g, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(proj.retained, n, "case {case}: random G must be full rank");
        let s2 = proj.sigma_min * proj.sigma_min;

        // Rows mutually orthogonal with common norm sigma_min.
        let gg = gram(&proj.aligned);
        let mut defect = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { s2 } else { 0.0 };
                defect += (gg.get(i, j) - expect) * (gg.get(i, j) - expect);
            }
        }
        let defect = defect.sqrt();
        assert!(
            defect <= 1e-8 * s2 * n as f64,
            "case {case} ({n}x{m}): orthogonality defect {defect:e} vs sigma^2 {s2:e}"
        );

        // Procrustes optimality of the unit-scaled projection against
        // random row-orthonormal competitors.
        let q = proj.aligned.scaled(1.0 / proj.sigma_min);
        let best = g.sub(&q).unwrap().frobenius_norm();
        let competitors = if m >= 1024 { 50 } else { 200 };
        for _ in 0..competitors {
            let r = random_row_orthonormal(&mut rng, n, m);
            let alt = g.sub(&r).unwrap().frobenius_norm();
            assert!(
                best <= alt + 1e-9,
                "case {case} ({n}x{m}): projection {best} beaten by random competitor {alt}"
            );
        }
    }
    pass("A1 orthogonal alignment correctness", started, 60.0);
}

/// Closed-form eigenvalues of a symmetric 2x2 matrix, descending.
fn eigvals_2x2(a: &Matrix) -> Vec<f64> {
    let (p, q, r) = (a.get(0, 0), a.get(0, 1), a.get(1, 1));
    let mid = 0.5 * (p + r);
    let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    vec![mid + rad, mid - rad]
}

/// Roots of the characteristic cubic of a symmetric 3x3 matrix,
/// descending, via the trigonometric solution (all roots real).
fn eigvals_3x3(a: &Matrix) -> Vec<f64> {
    let tr = a.get(0, 0) + a.get(1, 1) + a.get(2, 2);
    let m2 = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0)
        + a.get(0, 0) * a.get(2, 2)
        - a.get(0, 2) * a.get(2, 0)
        + a.get(1, 1) * a.get(2, 2)
        - a.get(1, 2) * a.get(2, 1);
    let det = a.get(0, 0) * (a.get(1, 1) * a.get(2, 2) - a.get(1, 2) * a.get(2, 1))
        - a.get(0, 1) * (a.get(1, 0) * a.get(2, 2) - a.get(1, 2) * a.get(2, 0))
        + a.get(0, 2) * (a.get(1, 0) * a.get(2, 1) - a.get(1, 1) * a.get(2, 0));
    let p = m2 - tr * tr / 3.0;
    let q = -2.0 * tr.powi(3) / 27.0 + tr * m2 / 3.0 - det;
    let shift = tr / 3.0;
    if -p / 3.0 < 1e-30 {
        return vec![shift, shift, shift];
    }
    let r = (-p / 3.0).sqrt();
    let arg = (3.0 * q / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
    let phi = arg.acos() / 3.0;
    let mut roots = vec![
        shift + 2.0 * r * phi.cos(),
        shift + 2.0 * r * (phi - 2.0 * std::f64::consts::PI / 3.0).cos(),
        shift + 2.0 * r * (phi - 4.0 * std::f64::consts::PI / 3.0).cos(),
    ];
    roots.sort_by(|x, y| y.partial_cmp(x).unwrap());
    roots
}

#[test]
fn a2_eigensolver_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    for case in 0..500 {
        let n = if case % 2 == 0 { 2 } else { 3 };
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-3.0..3.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        let eig = jacobi_eigh(&a).unwrap();
        let oracle = if n == 2 { eigvals_2x2(&a) } else { eigvals_3x3(&a) };
        for (got, want) in eig.eigenvalues.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-8, "case {case}: {got} vs oracle {want}");
        }
        let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
        let sum: f64 = eig.eigenvalues.iter().sum();
        assert!(
            (sum - trace).abs() <= 1e-10 * (trace.abs() + 1.0),
            "case {case}: eigenvalue sum {sum} vs trace {trace}"
        );
    }
    pass("A2 eigensolver oracle equivalence", started, 10.0);
}

#[test]
fn a3_eccentric_vector_contract() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    for case in 0..1000 {
        let n = rng.gen_range(2..=8usize);
        let lr: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = rng.gen_range(0.05..4.0);
        let v = eccentric_vector(&lr, t).unwrap();
        let sum: f64 = v.weights().iter().sum();
        assert!((sum - n as f64).abs() <= 1e-12, "case {case}: sum {sum}");
        for i in 0..n {
            assert!(v.weights()[i] > 0.0);
            for j in 0..n {
                if lr[i] > lr[j] {
                    assert!(v.weights()[i] > v.weights()[j], "case {case}: monotonicity");
                }
            }
        }
        // Permutation equivariance (reversal), bit-exact.
        let rev: Vec<f64> = lr.iter().rev().copied().collect();
        let vr = eccentric_vector(&rev, t).unwrap();
        for i in 0..n {
            assert_eq!(vr.weights()[n - 1 - i].to_bits(), v.weights()[i].to_bits());
        }
    }
    // Large temperature flattens the weights.
    let flat = eccentric_vector(&[5.0, 1.0, 1.0], 1e6).unwrap();
    for w in flat.weights() {
        assert!((w - 1.0).abs() <= 1e-5, "weight {w} at T=1e6");
    }
    pass("A3 eccentric-vector contract", started, 5.0);
}

#[test]
fn a4_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
    for net in 0..20u64 {
        let config = ModelConfig {
            input_dim: rng.gen_range(3..7),
            hidden: rng.gen_range(4..9),
            wave_len: rng.gen_range(3..6),
            anchor_classes: rng.gen_range(4..9),
            length_classes: rng.gen_range(3..6),
        };
        let model = MultiTaskModel::new_seeded(config.clone(), derive_seed(0xA4, net)).unwrap();
        assert!(model.trunk_param_count() <= 500);
        let b = 3;
        let batch = Batch {
            inputs: (0..b)
                .map(|_| (0..config.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            waveform: (0..b)
                .map(|_| (0..config.wave_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            anchors: (0..b)
                .map(|_| {
                    let k = rng.gen_range(0..3usize);
                    (0..k).map(|_| rng.gen_range(0..config.anchor_classes)).collect()
                })
                .collect(),
            length_class: (0..b).map(|_| rng.gen_range(0..config.length_classes)).collect(),
        };
        let fwd = model.forward(&batch).unwrap();
        let analytic = model.per_task_gradients(&fwd, &batch).unwrap();

        let h = 1e-5;
        let base = model.trunk.params_flat();
        let mut worst: f64 = 0.0;
        for task in 0..3 {
            for p in 0..base.len() {
                let mut probe = model.clone();
                let mut theta = base.clone();
                theta[p] = base[p] + h;
                probe.trunk.set_params_flat(&theta).unwrap();
                let lp =
                    probe.task_losses(&probe.forward(&batch).unwrap(), &batch).unwrap()[task];
                theta[p] = base[p] - h;
                probe.trunk.set_params_flat(&theta).unwrap();
                let lm =
                    probe.task_losses(&probe.forward(&batch).unwrap(), &batch).unwrap()[task];
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.trunk.matrix().get(task, p);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "net {net}: max relative error {worst:e}");
    }
    pass("A4 gradient correctness", started, 30.0);
}

/// The skewed-difficulty benchmark: the cycle-length loss is scaled so its
/// gradient dominates the trunk by well over 10x, which starves the
/// waveform task under equal weighting.
fn dominance_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.seed = seed;
    config.epochs = 40;
    config.batch_size = 32;
    config.model.hidden = 32;
    config.dataset.records = 16;
    config.dataset.record_s = 20.0;
    config.dataset.loss_scales = [1.0, 1.0, 25.0];
    config.strategy.temperature = 1.0;
    config
}

#[test]
fn a5_difficulty_skew_directional_result() {
    let started = Instant::now();
    const HARD: usize = 0; // waveform task
    let mut ega_wins = 0;
    for r in 0..5u64 {
        let seed = derive_seed(3, 7000 + r);
        let mut config = dominance_config(seed);

        let norms = gradient_norm_probe(&config).unwrap();
        let ratio = norms[2] / norms[0].max(norms[1]);
        assert!(ratio >= 10.0, "seed {seed}: dominance ratio {ratio:.1} below 10x");

        config.strategy.id = "ega".into();
        let ega = *train(&config).unwrap().record.epoch_losses.last().unwrap();
        config.strategy.id = "equal_weight".into();
        let equal = *train(&config).unwrap().record.epoch_losses.last().unwrap();
        config.strategy.id = "ortho_only".into();
        let ortho = *train(&config).unwrap().record.epoch_losses.last().unwrap();

        if ega[HARD] < equal[HARD] {
            ega_wins += 1;
        }
        for task in 0..3 {
            assert!(
                ega[task] <= 1.2 * ortho[task],
                "seed {seed} task {task}: ega {:.5} vs ortho {:.5}",
                ega[task],
                ortho[task]
            );
        }
    }
    assert!(ega_wins >= 4, "ega beat equal_weight on the hard task in only {ega_wins}/5 seeds");
    pass("A5 difficulty-skew directional result", started, 600.0);
}

#[test]
fn a6_warmup_equivalence() {
    let started = Instant::now();
    let mut config = ExperimentConfig::default();
    config.seed = 77;
    config.epochs = config.strategy.t_warm; // stop at the warmup boundary
    config.batch_size = 16;
    config.model.hidden = 16;
    config.dataset.records = 6;
    config.dataset.record_s = 12.0;
    config.dataset.train_frac = 0.5;
    config.dataset.val_frac = 0.17;

    config.strategy.id = "ega".into();
    let ega = train(&config).unwrap();
    config.strategy.id = "ortho_only".into();
    let ortho = train(&config).unwrap();

    for (a, b) in ega
        .model
        .trunk
        .params_flat()
        .iter()
        .zip(ortho.model.trunk.params_flat())
    {
        assert_eq!(a.to_bits(), b.to_bits(), "trunk trajectories diverged before warmup end");
    }
    assert_eq!(ega.record.epoch_losses.len(), ortho.record.epoch_losses.len());
    for (x, y) in ega.record.epoch_losses.iter().zip(&ortho.record.epoch_losses) {
        for t in 0..3 {
            assert_eq!(x[t].to_bits(), y[t].to_bits());
        }
    }
    pass("A6 warmup equivalence", started, 120.0);
}

#[test]
fn a7_noise_protocol_integrity() {
    let started = Instant::now();
    let mut config = ExperimentConfig::default();
    config.seed = 5;
    config.epochs = 1;
    config.batch_size = 16;
    config.model.hidden = 16;
    config.dataset.records = 8;
    config.dataset.record_s = 16.0;

    let protocols = sweep_protocols(&config);
    // The default grid is the full test matrix: six SNR levels plus the
    // 20% burst grid at 1..3 s and 0/-9 dB.
    let constant_levels: Vec<f64> = protocols
        .iter()
        .filter_map(|p| match p {
            NoiseProtocol::Constant { snr_db } => Some(*snr_db),
            _ => None,
        })
        .collect();
    assert_eq!(constant_levels, vec![6.0, 3.0, 0.0, -1.0, -2.0, -3.0]);
    let abrupt: Vec<(f64, f64)> = protocols
        .iter()
        .filter_map(|p| match p {
            NoiseProtocol::Abrupt { fraction, duration_s, snr_db } => {
                assert_eq!(*fraction, 0.2);
                Some((*duration_s, *snr_db))
            }
            _ => None,
        })
        .collect();
    assert_eq!(abrupt.len(), 6);

    let output = noise_sweep(&config, &protocols).unwrap();
    assert_eq!(
        output.train_trace_hash_before, output.train_trace_hash_after,
        "training traces were touched by the sweep"
    );
    for row in &output.rows {
        match &row.protocol {
            NoiseProtocol::Constant { snr_db } => {
                for realized in &row.diagnostics.realized_snr_db {
                    assert!(
                        (realized - snr_db).abs() <= 0.1,
                        "realized SNR {realized} vs target {snr_db}"
                    );
                }
            }
            NoiseProtocol::Abrupt { fraction, .. } => {
                for &(doped, total) in &row.diagnostics.doped_windows {
                    assert_eq!(doped, (fraction * total as f64).round() as usize);
                }
            }
            NoiseProtocol::None => {}
        }
    }
    pass("A7 noise-protocol integrity", started, 300.0);
}

#[test]
fn a8_metric_oracles() {
    let started = Instant::now();

    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-9);
    let a = [1.0, 2.0, 3.0];
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    let shifted: Vec<f64> = a.iter().map(|v| v - 2.5).collect();
    assert!((rmse(&a, &shifted).unwrap() - 2.5).abs() < 1e-9);

    assert!((pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.9819805060619657).abs() < 1e-9);
    let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!((pcc(&a, &affine).unwrap() - 1.0).abs() < 1e-9);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((pcc(&a, &neg).unwrap() + 1.0).abs() < 1e-9);

    let truth = [1.0, 2.0, 3.0, 4.0];
    assert!((r_squared(&truth, &truth).unwrap() - 1.0).abs() < 1e-9);
    assert!(r_squared(&truth, &[2.5, 2.5, 2.5, 2.5]).unwrap().abs() < 1e-9);
    assert!(r_squared(&truth, &[10.0, -10.0, 10.0, -10.0]).unwrap() < 0.0);

    let m = anchor_match(&[1.0, 2.0], &[1.05, 2.5], ANCHOR_MATCH_TOL_S).unwrap();
    assert_eq!(m.timing_errors_s.len(), 1);
    assert!((m.timing_errors_s[0] - 0.05).abs() < 1e-9);
    assert!((m.mdr - 0.5).abs() < 1e-9);
    let all = anchor_match(&[1.0, 2.0], &[1.0, 2.0], ANCHOR_MATCH_TOL_S).unwrap();
    assert_eq!(all.mdr, 0.0);
    assert_eq!(anchor_match(&[1.0, 2.0], &[], ANCHOR_MATCH_TOL_S).unwrap().mdr, 1.0);

    assert!((ppi_error_ms(&[800.0, 900.0], &[810.0, 880.0]).unwrap() - 15.0).abs() < 1e-9);
    assert!((ppi_error_ms(&[800.0, 900.0], &[808.0, 908.0]).unwrap() - 8.0).abs() < 1e-9);

    let specs = vec![MetricSpec::new(0, "x", Direction::LowerBetter)];
    let mut base = MetricValues::new();
    base.insert((0, "x".into()), 10.0);
    let mut better = MetricValues::new();
    better.insert((0, "x".into()), 9.0);
    assert!((delta_m(&better, &base, &specs).unwrap() - 10.0).abs() < 1e-9);
    assert_eq!(delta_m(&base, &base, &specs).unwrap(), 0.0);
    let two = vec![
        MetricSpec::new(0, "up", Direction::HigherBetter),
        MetricSpec::new(1, "down", Direction::LowerBetter),
    ];
    let mut b2 = MetricValues::new();
    b2.insert((0, "up".into()), 0.5);
    b2.insert((1, "down".into()), 1.0);
    let mut m2 = MetricValues::new();
    m2.insert((0, "up".into()), 0.55);
    m2.insert((1, "down".into()), 1.1);
    assert!(delta_m(&m2, &b2, &two).unwrap().abs() < 1e-9);

    let same = [0.3, 0.3, 0.3, 0.3];
    let (t, p) = welch_t(&same, &same).unwrap();
    assert_eq!(t, 0.0);
    assert_eq!(p, 1.0);
    let jit_a = [0.0, 1e-9, -1e-9, 5e-10];
    let jit_b = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 5e-10];
    assert!(welch_t(&jit_a, &jit_b).unwrap().1 < 1e-6);

    pass("A8 metric oracles", started, 10.0);
}

#[test]
fn a9_reproducibility() {
    let started = Instant::now();
    let bin = env!("CARGO_BIN_EXE_ega");
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
seed = 123
epochs = 2
batch_size = 16
repeats = 2
compare_strategies = ["equal_weight", "ega"]

[strategy]
id = "ega"

[model]
hidden = 16

[dataset]
records = 6
record_s = 12.0
train_frac = 0.5
val_frac = 0.17
"#,
    )
    .unwrap();

    let run = |cmd: &str, out: &str| {
        let status = std::process::Command::new(bin)
            .args([cmd, "--config"])
            .arg(&config_path)
            .args(["--seed", "123", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success(), "{cmd} exited nonzero");
        std::fs::read(dir.path().join(out).join("rows.csv")).unwrap()
    };

    let t1 = run("train", "t1");
    let t2 = run("train", "t2");
    assert_eq!(t1, t2, "train rows differ between identical invocations");
    assert!(!t1.is_empty());

    let c1 = run("compare", "c1");
    let c2 = run("compare", "c2");
    assert_eq!(c1, c2, "compare rows differ between identical invocations");

    pass("A9 reproducibility", started, 300.0);
}
