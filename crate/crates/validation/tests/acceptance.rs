//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release -p spikedict-validation --test acceptance`.
//! The CLI checks re-run this binary as `spikedict` in child processes.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use spikedict::coding::{support, support_threshold};
use spikedict::data::{self, Provenance};
use spikedict::engine::{advance_neuron, run_single_phase, SimParams};
use spikedict::learning::{self, local};
use spikedict::linalg;
use spikedict::metrics::{self, Coder};
use spikedict::model::NeuronState;
use spikedict::oracle::{sgd_train, CoordinateDescent, SgdConfig};
use spikedict::rng::{stream, Stream};
use spikedict::{weights_from_dictionary, Dictionary, InitScheme, NetworkWeights, RunConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random::<f64>()).collect()
}

/// Non-negative unit-norm columns with roughly `density` non-zeros each.
fn sparse_dictionary(rng: &mut ChaCha8Rng, m: usize, n: usize, density: f64) -> Dictionary {
    let mut d = Array2::zeros((m, n));
    for j in 0..n {
        loop {
            for k in 0..m {
                let keep = rng.random::<f64>() < density;
                let v: f64 = rng.random();
                d[[k, j]] = if keep { v } else { 0.0 };
            }
            let norm = linalg::norm2(d.column(j));
            if norm > 0.0 {
                d.column_mut(j).mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    Dictionary::new(d).expect("valid dictionary")
}

// 1
fn single_neuron_isi() -> Outcome {
    let start = Instant::now();
    let (beta, theta, dt, t): (f64, f64, f64, f64) = (0.5, 1.0, 1.0 / 32.0, 100.0);
    let release = -(-dt).exp_m1();
    let mut st = NeuronState::default();
    let steps = (t / dt).round() as usize;
    for _ in 0..steps {
        advance_neuron(&mut st, beta, theta, dt, release);
    }
    let rate = st.spike_count as f64 / t;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (0.49..=0.51).contains(&rate) && secs < 1.0,
        format!("rate {rate:.4} in {secs:.3} s"),
    )
}

// 2
fn rate_threshold_law() -> Outcome {
    let mut rng = stream(2, Stream::Instance);
    let d = Dictionary::random_unit(16, 32, &mut rng);
    let x = uniform_vec(&mut rng, 16);
    let w = weights_from_dictionary(&d, 0.1, 0.0).unwrap();
    let params = SimParams::default();
    let max_theta = w.h.diag().iter().copied().fold(0.0, f64::max);
    let residual = |t: f64| {
        let snap = run_single_phase(&w, &x, 0.0, t, params).unwrap();
        (0..32)
            .map(|i| (snap.u[i].max(0.0) - w.h[[i, i]] * snap.a[i]).abs())
            .fold(0.0, f64::max)
    };
    let (r200, r50) = (residual(200.0), residual(50.0));
    let bound = (max_theta + 100.0 * params.dt) / 200.0;
    outcome(
        r200 <= bound && r200 < r50,
        format!("residual {r200:.3e} (bound {bound:.3e}), T=50 residual {r50:.3e}"),
    )
}

struct CodingInstance {
    d: Dictionary,
    x: Vec<f64>,
    oracle: Vec<f64>,
}

const LAMBDA1: f64 = 0.1;

/// Seeded instances whose optimal code has a margin: every inactive atom is
/// at least 0.01 below the penalty and every active coefficient is at least 0.03.
fn coding_instances(count: usize) -> Vec<CodingInstance> {
    let mut rng = stream(3, Stream::Instance);
    let mut out = Vec::new();
    while out.len() < count {
        let d = sparse_dictionary(&mut rng, 16, 32, 0.3);
        let mut a_true = vec![0.0; 32];
        for _ in 0..3 {
            let j = rng.random_range(0..32);
            a_true[j] = rng.random_range(0.3..0.6);
        }
        let x = linalg::matvec(d.matrix(), Array1::from(a_true).view()).to_vec();
        let ones = vec![1.0; 32];
        let sol = CoordinateDescent::new(d.matrix())
            .solve(&x, LAMBDA1, &ones, None, 1e-10, 100_000)
            .unwrap();
        let r: Vec<f64> = {
            let rec = linalg::matvec(d.matrix(), Array1::from(sol.a.clone()).view());
            x.iter().zip(rec.iter()).map(|(p, q)| p - q).collect()
        };
        let corr = linalg::matvec_t(d.matrix(), Array1::from(r).view());
        let inactive_ok = (0..32).filter(|&i| sol.a[i] == 0.0).all(|i| corr[i] <= LAMBDA1 - 0.01);
        let active_ok = sol.a.iter().filter(|v| **v > 0.0).all(|v| *v >= 0.03);
        if inactive_ok && active_ok && sol.a.iter().any(|v| *v > 0.0) {
            out.push(CodingInstance { d, x, oracle: sol.a });
        }
    }
    out
}

fn network_code(inst: &CodingInstance, gamma: f64, t: f64) -> Array1<f64> {
    let w = weights_from_dictionary(&inst.d, LAMBDA1, gamma).unwrap();
    run_single_phase(&w, &inst.x, gamma, t, SimParams::default()).unwrap().a
}

// 3 and 4
fn sparse_coding_equivalence(instances: &[CodingInstance]) -> (Outcome, Outcome) {
    let t = 200.0;
    let (mut close3, mut same3, mut ok4, mut worst3, mut worst4) = (0, 0, 0, 0.0f64, 0.0f64);
    let mut mismatched4 = Vec::new();
    for (k, inst) in instances.iter().enumerate() {
        let a0 = network_code(inst, 0.0, t);
        let ak = network_code(inst, 0.7, t);
        let oracle_support: Vec<usize> = (0..inst.oracle.len()).filter(|&i| inst.oracle[i] > 0.0).collect();
        let gap = linalg::max_abs(a0.iter().zip(&inst.oracle).map(|(p, q)| p - q));
        worst3 = worst3.max(gap);
        close3 += usize::from(gap <= 0.05);
        same3 += usize::from(support(a0.view(), t) == oracle_support);
        let gap_g = linalg::max_abs(a0.iter().zip(ak.iter()).map(|(p, q)| p - q));
        worst4 = worst4.max(gap_g);
        if gap_g <= 0.05 && support(ak.view(), t) == support(a0.view(), t) {
            ok4 += 1;
        } else {
            mismatched4.push(k);
        }
    }
    let n = instances.len();
    (
        outcome(
            close3 >= 19 && same3 == n,
            format!(
                "{close3}/{n} within 0.05, {same3}/{n} equal supports (threshold {:.4}), worst gap {worst3:.4}",
                support_threshold(t)
            ),
        ),
        outcome(
            ok4 == n,
            format!("{ok4}/{n} agree with gamma=0 (differing {mismatched4:?}), worst gap {worst4:.4}"),
        ),
    )
}

fn gradient_instance(seed: u64) -> (NetworkWeights, Vec<f64>) {
    let mut rng = stream(seed, Stream::Instance);
    let d = sparse_dictionary(&mut rng, 16, 8, 0.5);
    let x = uniform_vec(&mut rng, 16);
    (weights_from_dictionary(&d, LAMBDA1, 0.0).unwrap(), x)
}

fn cfg_with_t(t: f64) -> RunConfig {
    RunConfig {
        t_phase: t,
        ..RunConfig::default()
    }
}

// 5
fn gradient_identity_d() -> Outcome {
    let cfg = cfg_with_t(100.0);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (w, x) = gradient_instance(500 + seed);
        let pair = learning::contrastive_run(&w, &x, &cfg).unwrap();
        let g = learning::extract_gradients(&pair, &w);
        let ba = linalg::matvec(&w.b, pair.snap_k.a.view());
        let target: Vec<f64> = (0..16).map(|k| cfg.kappa * (ba[k] - x[k])).collect();
        let err: f64 = (0..16).map(|k| (g.g_d[k] - target[k]).powi(2)).sum::<f64>().sqrt();
        let scale = target.iter().map(|v| v * v).sum::<f64>().sqrt().max(0.01);
        worst = worst.max(err / scale);
    }
    outcome(worst <= 0.15, format!("worst relative error {worst:.4} over 10 instances"))
}

// 6
fn gradient_identity_h() -> Outcome {
    let cfg = cfg_with_t(100.0);
    let mut worst_consistent = 0.0f64;
    for seed in 0..10 {
        let (w, x) = gradient_instance(600 + seed);
        let pair = learning::contrastive_run(&w, &x, &cfg).unwrap();
        let g = learning::extract_gradients(&pair, &w);
        worst_consistent = worst_consistent.max(linalg::max_abs(g.g_h.iter().copied()));
    }

    let cfg = cfg_with_t(1000.0);
    let mut worst_rel = 0.0f64;
    for seed in 0..10 {
        let (mut w, x) = gradient_instance(650 + seed);
        let mut rng = stream(650 + seed, Stream::WeightInit);
        let u = uniform_vec(&mut rng, 8);
        let mut delta = Array2::from_shape_fn((8, 8), |(i, _)| u[i]);
        let fro = linalg::frobenius(&delta);
        delta.mapv_inplace(|v| v * 0.1 / fro);
        w.h = &w.h + &delta;
        let pair = learning::contrastive_run(&w, &x, &cfg).unwrap();
        let g = learning::extract_gradients(&pair, &w);
        let target = linalg::matvec(&delta, pair.snap_k.a.view()).mapv(|v| v * cfg.kappa);
        let err = linalg::norm2((&g.g_h - &target).view());
        worst_rel = worst_rel.max(err / linalg::norm2(target.view()));
    }
    outcome(
        worst_consistent <= 0.1 && worst_rel <= 0.25,
        format!("H=FB: max |g_H| {worst_consistent:.4}; injected: worst relative error {worst_rel:.4} (T=1000)"),
    )
}

fn small_dataset(seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Instance);
    (0..count).map(|_| uniform_vec(&mut rng, 16)).collect()
}

// 7
fn symmetry_decay() -> Outcome {
    let cfg = RunConfig {
        n_atoms: 8,
        init_scheme: InitScheme::Asymmetric,
        lambda2: 0.1,
        project_fb: false,
        ..RunConfig::default()
    };
    let data = small_dataset(7, 50);
    let mut w = learning::init_weights(&cfg, 16, &mut stream(7, Stream::WeightInit)).unwrap();
    let mut order = stream(7, Stream::SampleOrder);
    let alpha = 1.0 - cfg.eta_d * cfg.lambda2;
    let mut first: Option<Array2<f64>> = None;
    let mut worst = 0.0f64;
    for p in 1..=100 {
        let x = &data[order.random_range(0..data.len())];
        if let Err(e) = learning::iterate(&mut w, x, &cfg) {
            return outcome(false, format!("iteration {p}: {e}"));
        }
        let e = &w.f.t() - &w.b;
        let e1 = first.get_or_insert_with(|| e.clone());
        let expected = e1.mapv(|v| v * alpha.powi(p - 1));
        worst = worst.max(linalg::max_abs((&e - &expected).iter().copied()));
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.3e} over 100 iterations"))
}

// 8
fn locality_audit() -> Outcome {
    let cfg = RunConfig {
        n_atoms: 8,
        lambda2: 0.05,
        ..RunConfig::default()
    };
    let data = small_dataset(8, 5);
    let mut w = learning::init_weights(&cfg, 16, &mut stream(8, Stream::WeightInit)).unwrap();
    let p = local::Broadcast::from(&cfg);
    let mut mismatches = Vec::new();
    for (it, x) in data.iter().enumerate() {
        let pair = learning::contrastive_run(&w, x, &cfg).unwrap();
        let g = learning::extract_gradients(&pair, &w);
        let gl = local::gradients(&pair, &w);
        let by_row = local::apply_updates(&w, &pair, &gl, &p);
        learning::update_fb(&mut w, &pair, &g, &cfg);
        learning::update_h(&mut w, &pair, &g, &cfg);
        learning::scaling_update(&mut w).unwrap();
        let same = g.g_d == gl.g_d
            && g.g_h == gl.g_h
            && by_row.f == w.f
            && by_row.b == w.b
            && by_row.h == w.h
            && by_row.s == w.s;
        if !same {
            mismatches.push(it);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{} of 5 iterations differ {mismatches:?}", mismatches.len()),
    )
}

struct Desk {
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
    image: data::GrayImage,
}

fn desk() -> Desk {
    let image = data::synthetic_scene(256, 256, 0);
    let raw = data::sample_patches(&image, 8, 20000, 0).unwrap();
    let (train, _) = data::preprocess_split(&raw, Provenance::default()).unwrap();
    let raw_test = data::sample_patches_with(&image, 8, 500, &mut stream(0, Stream::TestPatchSampling)).unwrap();
    let (test, _) = data::preprocess_split(&raw_test, Provenance::default()).unwrap();
    Desk {
        train: train.patches,
        test: test.patches,
        image,
    }
}

// 9
fn consistency_maintenance(desk: &Desk) -> (Outcome, NetworkWeights) {
    let start = Instant::now();
    let cfg = RunConfig {
        iterations: 2000,
        metrics_every: 50,
        ..RunConfig::default()
    };
    let out = learning::train(&desk.train, &[], &cfg, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let after: Vec<_> = out.log.iter().filter(|r| r.iteration > 50).collect();
    let min_c = after.iter().filter_map(|r| r.consistency).fold(f64::INFINITY, f64::min);
    let min_s = after.iter().filter_map(|r| r.symmetry).fold(f64::INFINITY, f64::min);
    let first_bad = after
        .iter()
        .find(|r| r.consistency.is_none_or(|c| c < 0.9))
        .map(|r| r.iteration);
    let pass = out.aborted.is_none() && min_c >= 0.9 && min_s >= 0.95 && secs < 600.0;
    (
        outcome(
            pass,
            format!(
                "min consistency {min_c:.4} (first below 0.9 at {first_bad:?}), min symmetry {min_s:.4}, {secs:.1} s"
            ),
        ),
        out.weights,
    )
}

// 10
fn convergence(desk: &Desk) -> Outcome {
    let base = RunConfig {
        iterations: 5000,
        metrics_every: 5000,
        ..RunConfig::default()
    };
    let asym = RunConfig {
        init_scheme: InitScheme::Asymmetric,
        ..base.clone()
    };
    let sgd = SgdConfig::from_run(&base, base.eta_d);
    let ends = |log: &[spikedict::metrics::MetricsRecord]| {
        (
            log.first().and_then(|r| r.objective).unwrap(),
            log.last().and_then(|r| r.objective).unwrap(),
        )
    };
    let (snn, asym, sgd) = std::thread::scope(|s| {
        let h1 = s.spawn(|| learning::train(&desk.train, &desk.test, &base, |_| {}).unwrap());
        let h2 = s.spawn(|| learning::train(&desk.train, &desk.test, &asym, |_| {}).unwrap());
        let h3 = s.spawn(|| sgd_train(&desk.train, &desk.test, &sgd, |_| {}).unwrap());
        (h1.join().unwrap(), h2.join().unwrap(), h3.join().unwrap())
    });
    if snn.aborted.is_some() || asym.aborted.is_some() {
        return outcome(false, "a spiking run aborted");
    }
    let (snn0, snn1) = ends(&snn.log);
    let (_, asym1) = ends(&asym.log);
    let (_, sgd1) = ends(&sgd.log);
    let r_init = snn1 / snn0;
    let r_sgd = snn1 / sgd1;
    let r_asym = asym1 / snn1;
    outcome(
        r_init <= 0.8 && r_sgd <= 1.15 && r_asym <= 1.25,
        format!(
            "snn {snn0:.4} -> {snn1:.4} (x{r_init:.3}), sgd final {sgd1:.4} (snn/sgd {r_sgd:.3}), asymmetric final {asym1:.4} (x{r_asym:.3})"
        ),
    )
}

// 11
fn denoising(desk: &Desk, weights: &NetworkWeights) -> Outcome {
    let (sigma, p_noisy) = data::calibrate_sigma(&desk.image, 18.69, 0, 0.01).unwrap();
    let noisy = data::add_gaussian_noise(&desk.image, sigma, 0).unwrap();
    let coder = Coder::Oracle {
        d: &weights.b,
        lambda1: LAMBDA1,
    };
    let den = metrics::denoise(&coder, &noisy, 8, 1).unwrap();
    let p_den = metrics::psnr(&desk.image, &den.image).unwrap();
    outcome(
        (p_noisy - 18.69).abs() <= 0.1 && p_den - p_noisy >= 3.0 && den.mean_l0 <= 12.0,
        format!(
            "sigma {sigma:.4}: noisy {p_noisy:.2} dB, denoised {p_den:.2} dB (+{:.2}), mean l0 {:.2}",
            p_den - p_noisy,
            den.mean_l0
        ),
    )
}

// 12
fn cli(args: &[&str], dir: &Path, threads: usize) -> std::process::Output {
    let out = Command::new(std::env::current_exe().unwrap())
        .env(AS_CLI, "1")
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .current_dir(dir)
        .output()
        .expect("run spikedict");
    assert!(
        out.status.success(),
        "spikedict {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    data::write_pgm(root.join("scene.pgm"), &data::synthetic_scene(48, 48, 1)).unwrap();
    let ident = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
    spikedict::checkpoint::write_dlm(root.join("identity.dlm"), &ident).unwrap();
    fs::write(root.join("x.txt"), "1.0, 0.1\n").unwrap();
    fs::write(
        root.join("desk.cfg"),
        "dataset = scene.pgm\nn_atoms = 12\nn_patches = 300\ntest_patches = 40\niterations = 40\nmetrics_every = 10\nseed = 5\n",
    )
    .unwrap();

    let mut failures = Vec::new();
    let mut runs = 0;
    let mut check = |name: &str, make: &dyn Fn(&Path, usize) -> Vec<u8>| {
        let mut results = Vec::new();
        for (k, threads) in [1usize, 4, 1, 4].into_iter().enumerate() {
            let dir = root.join(format!("{name}-{k}"));
            fs::create_dir_all(&dir).unwrap();
            let stdout = make(&dir, threads);
            results.push((stdout, dir_bytes(&dir)));
        }
        runs += 1;
        if results.iter().any(|r| *r != results[0]) {
            failures.push(name.to_string());
        }
    };
    let cfg = root.join("desk.cfg");
    let cfg = cfg.to_str().unwrap();
    check("train-snn", &|d, t| cli(&["train-snn", "--config", cfg, "--out", "."], d, t).stdout);
    check("train-sgd", &|d, t| cli(&["train-sgd", "--config", cfg, "--out", "."], d, t).stdout);
    let snn = root.join("train-snn-0");
    let snn = snn.to_str().unwrap();
    let scene = root.join("scene.pgm");
    let scene = scene.to_str().unwrap();
    check("metrics", &|d, t| cli(&["metrics", "--config", cfg, "--weights", snn], d, t).stdout);
    check("denoise", &|d, t| {
        cli(
            &["denoise", "--config", cfg, "--weights", snn, "--image", scene, "--sigma", "0.1", "--out", "."],
            d,
            t,
        )
        .stdout
    });
    check("denoise-network", &|d, t| {
        cli(
            &[
                "denoise", "--config", cfg, "--weights", snn, "--image", scene, "--sigma", "0.1", "--stride", "4",
                "--set", "coder=network", "--out", ".",
            ],
            d,
            t,
        )
        .stdout
    });
    let ident = root.join("identity.dlm");
    let ident = ident.to_str().unwrap();
    let x = root.join("x.txt");
    let x = x.to_str().unwrap();
    check("sparse-code", &|d, t| {
        cli(&["sparse-code", "--weights", ident, "--input", x, "--set", "lambda1=0.5", "--T", "50"], d, t).stdout
    });
    check("raster", &|d, t| {
        cli(&["raster", "--weights", ident, "--input", x, "--set", "lambda1=0.5", "-o", "raster.csv"], d, t).stdout
    });
    outcome(
        failures.is_empty(),
        format!("{runs} subcommands x (1, 4, 1, 4 threads); differing: {failures:?}"),
    )
}

const AS_CLI: &str = "SPIKEDICT_ACCEPTANCE_AS_CLI";

fn main() {
    if std::env::var_os(AS_CLI).is_some() {
        std::process::exit(spikedict_cli::run_with_args(std::env::args_os()).into());
    }
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record(1, "single-neuron inter-spike interval", single_neuron_isi());
    record(2, "rate-threshold law", rate_threshold_law());
    let instances = coding_instances(20);
    let (c3, c4) = sparse_coding_equivalence(&instances);
    record(3, "sparse coding matches the oracle", c3);
    record(4, "feedback leaves the code unchanged", c4);
    record(5, "dictionary gradient identity", gradient_identity_d());
    record(6, "lateral gradient identity", gradient_identity_h());
    record(7, "symmetry decay", symmetry_decay());
    record(8, "locality audit", locality_audit());
    let desk = desk();
    let (c9, trained) = consistency_maintenance(&desk);
    record(9, "consistency maintenance", c9);
    record(10, "convergence against SGD", convergence(&desk));
    record(11, "denoising", denoising(&desk, &trained));
    record(12, "determinism across thread counts", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed {failed:?}",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
