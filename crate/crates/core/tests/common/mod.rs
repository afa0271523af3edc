#![allow(dead_code)]

use rand::Rng;
use tamatch::metrics;
use tamatch::simplex::{self, SimplexVector};
use tamatch::synth_ssl::train::{run_rngs, sample_batch, AugmentedBatch, MetricsRow};
use tamatch::synth_ssl::{
    lr_schedule, ClassifierParams, MetricsHistory, ModelKind, SynthDataset, TrainConfig,
};

/// Plain FixMatch: hard labels from the raw weak prediction, a fixed
/// threshold, unit weights, no marginal correction. `p_model` is tracked only
/// for logging; `p_target` stays uniform.
pub fn fixmatch_reference(cfg: &TrainConfig, data: &SynthDataset, seed: u64) -> MetricsHistory {
    let c = data.num_classes;
    let (mut rng, mut init_rng) = run_rngs(seed);
    let mut params = ClassifierParams::init(cfg.model, c, data.dim, &mut init_rng);
    let uniform = simplex::uniform(c).unwrap();
    let mut p_model = uniform.clone();
    let view = data.training_view();

    let mut hist = MetricsHistory {
        num_classes: c,
        rows: Vec::new(),
    };
    let (mut sum_l, mut sum_u, mut sum_util, mut count) = (0.0, 0.0, 0.0, 0usize);
    let log = |step: usize,
               lr: f64,
               means: (f64, f64, f64),
               params: &ClassifierParams,
               p_model: &SimplexVector,
               hist: &mut MetricsHistory| {
        let preds: Vec<usize> = data
            .test
            .x
            .iter()
            .map(|x| params.forward(x).unwrap().argmax())
            .collect();
        hist.rows.push(MetricsRow {
            step,
            lr,
            loss_l: means.0,
            loss_u: means.1,
            util_ratio: means.2,
            kl_model_truth: metrics::kl_to_truth(p_model, &data.p_truth).unwrap(),
            kl_target_truth: metrics::kl_to_truth(&uniform, &data.p_truth).unwrap(),
            test_error: metrics::error_rate(&preds, &data.test.y).unwrap(),
            acc_class: metrics::per_class_accuracy(&preds, &data.test.y, c).unwrap(),
        });
    };
    let nan = (f64::NAN, f64::NAN, f64::NAN);
    log(0, lr_schedule(cfg.lr, 0, cfg.steps, cfg.warmup), nan, &params, &p_model, &mut hist);

    for k in 0..cfg.steps {
        let batch = sample_batch(view, cfg, &mut rng).unwrap();
        let p_w: Vec<SimplexVector> = batch
            .unlabeled_weak
            .iter()
            .map(|x| params.forward(x).unwrap())
            .collect();
        p_model = simplex::ema_update(
            &p_model,
            &simplex::mean(&p_w).unwrap(),
            cfg.debiaser.lambda_model,
        )
        .unwrap();

        let mut grads = params.zeros_like();
        let n_l = batch.labeled_weak.len();
        let mut loss_l = 0.0;
        for (x, &y) in batch.labeled_weak.iter().zip(&batch.labels) {
            let act = params.activations(x);
            let p = tamatch::synth_ssl::softmax(&act.logits).unwrap();
            loss_l += -p[y].ln();
            params.accumulate_ce_grad(x, &act, &p, y, 1.0 / n_l as f64, &mut grads);
        }
        loss_l /= n_l as f64;

        let n_u = batch.unlabeled_strong.len();
        let mut loss_u = 0.0;
        let mut accepted = 0usize;
        for (pw, xs) in p_w.iter().zip(&batch.unlabeled_strong) {
            let probs = pw.as_slice();
            let mut label = 0;
            for j in 1..c {
                if probs[j] > probs[label] {
                    label = j;
                }
            }
            let act = params.activations(xs);
            let p = tamatch::synth_ssl::softmax(&act.logits).unwrap();
            if probs[label] > cfg.debiaser.tau {
                accepted += 1;
                loss_u += 1.0 * -p[label].ln();
                params.accumulate_ce_grad(xs, &act, &p, label, 1.0 / n_u as f64, &mut grads);
            }
        }
        loss_u /= n_u as f64;

        let lr = lr_schedule(cfg.lr, k, cfg.steps, cfg.warmup);
        params.sgd_step(&grads, lr);

        sum_l += loss_l;
        sum_u += loss_u;
        sum_util += accepted as f64 / n_u as f64;
        count += 1;
        let step = k + 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let n = count as f64;
            let means = (sum_l / n, sum_u / n, sum_util / n);
            (sum_l, sum_u, sum_util, count) = (0.0, 0.0, 0.0, 0);
            log(step, lr, means, &params, &p_model, &mut hist);
        }
    }
    hist
}

/// Forward pass written directly from the documented parameter layout.
pub fn oracle_probs(kind: ModelKind, c: usize, d: usize, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let (feat, off, k): (Vec<f64>, usize, usize) = match kind {
        ModelKind::Linear => (x.to_vec(), 0, d),
        ModelKind::Mlp { hidden } => {
            let b0 = hidden * d;
            let h = (0..hidden)
                .map(|j| {
                    let mut z = theta[b0 + j];
                    for i in 0..d {
                        z += theta[j * d + i] * x[i];
                    }
                    z.tanh()
                })
                .collect();
            (h, b0 + hidden, hidden)
        }
    };
    let logits: Vec<f64> = (0..c)
        .map(|cl| {
            let mut z = theta[off + c * k + cl];
            for j in 0..k {
                z += theta[off + cl * k + j] * feat[j];
            }
            z
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `L^l + L^u` with pseudo-labels, masks and weights frozen.
pub fn oracle_objective(
    kind: ModelKind,
    c: usize,
    d: usize,
    theta: &[f64],
    batch: &AugmentedBatch,
    labels: &[usize],
    masks: &[bool],
    weights: &[f64],
) -> f64 {
    let n_l = batch.labeled_weak.len() as f64;
    let l: f64 = batch
        .labeled_weak
        .iter()
        .zip(&batch.labels)
        .map(|(x, &y)| -oracle_probs(kind, c, d, theta, x)[y].ln())
        .sum::<f64>()
        / n_l;
    let n_u = batch.unlabeled_strong.len() as f64;
    let u: f64 = batch
        .unlabeled_strong
        .iter()
        .enumerate()
        .filter(|(i, _)| masks[*i])
        .map(|(i, x)| weights[i] * -oracle_probs(kind, c, d, theta, x)[labels[i]].ln())
        .sum::<f64>()
        / n_u;
    l + u
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Prints the one-line verdict for an acceptance criterion.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} ({detail})");
}

/// Outcome of the finite-difference comparison over many random instances.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub masked_in: usize,
    pub masked_out: usize,
    pub non_unit_weights: usize,
    pub loss_mismatch: f64,
}

/// Compares `loss_and_grad` with central differences of the oracle
/// objective on random MLP instances whose debiaser state makes the masks
/// and weights non-trivial.
pub fn gradient_check(instances: usize, seed: u64) -> GradCheck {
    use rand::SeedableRng;
    use tamatch::debiaser::{DebiaserConfig, DebiaserState};
    use tamatch::synth_ssl::loss_and_grad;

    let (c, d, h) = (3, 4, 5);
    let kind = ModelKind::Mlp { hidden: h };
    let step = 1e-5;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for _ in 0..instances {
        let mut params = ClassifierParams::zeros(kind, c, d);
        let theta = gaussian_vec(&mut rng, params.len(), 1.0);
        params.as_mut_slice().copy_from_slice(&theta);

        let batch = AugmentedBatch {
            labeled_weak: (0..4).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect(),
            labels: (0..4).map(|_| rng.random_range(0..c)).collect(),
            unlabeled_weak: (0..8).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect(),
            unlabeled_strong: (0..8).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect(),
        };
        let mut cfg = DebiaserConfig::balanced(c);
        cfg.tau = 0.5;
        let mut state = DebiaserState::new(cfg).unwrap();
        let raw_m: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
        let raw_t: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
        state.p_model = simplex::normalize(&raw_m).unwrap();
        state.p_target = simplex::normalize(&raw_t).unwrap();

        let res = loss_and_grad(&params, &batch, &state).unwrap();
        let pb = &res.pb;
        out.masked_in += pb.accepted();
        out.masked_out += pb.batch_size() - pb.accepted();
        out.non_unit_weights += pb
            .weights
            .iter()
            .zip(&pb.masks)
            .filter(|(w, m)| **m && **w != 1.0)
            .count();

        let f = |t: &[f64]| oracle_objective(kind, c, d, t, &batch, &pb.labels, &pb.masks, &pb.weights);
        out.loss_mismatch = out.loss_mismatch.max((f(&theta) - res.loss).abs());
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += step;
            let mut minus = theta.clone();
            minus[i] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let an = res.grads.as_slice()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            out.max_rel_err = out.max_rel_err.max(rel);
        }
    }
    out
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tamatch")
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

/// Every file under `dir` except the manifest, keyed by relative path.
pub fn output_files(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        root: &std::path::Path,
        dir: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs every subcommand with `--jobs 1` and `--jobs 8` and returns the
/// names of those whose outputs differ in any byte.
pub fn jobs_determinism_failures() -> Vec<String> {
    let tmp = tempfile::tempdir().unwrap();
    let smoke = config_path("ablate_smoke.toml");
    let smoke = smoke.to_str().unwrap();
    let logistic = config_path("logistic.toml");
    let logistic = logistic.to_str().unwrap();
    let table = tmp.path().join("table.csv");
    std::fs::write(&table, "method,a,b,c\nx,1.0,2.0,3.0\ny,2.0,1.0,3.0\nz,0.5,4.0,3.0\n").unwrap();
    let table = table.to_str().unwrap().to_string();

    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("bias-sim", vec!["bias-sim", "--trajectories", "40", "--steps", "30", "--seed", "5"]),
        ("logistic-sim", vec!["logistic-sim", "--config", logistic, "--seed", "5"]),
        ("train", vec!["train", "--config", smoke, "--seeds", "0,1,2", "--seed", "5"]),
        ("ablate", vec!["ablate", "--config", smoke, "--seeds", "0,1", "--seed", "5"]),
        ("rank", vec!["rank", &table, "--seed", "5"]),
    ];
    let mut failures = Vec::new();
    for (name, args) in cases {
        let mut outs = Vec::new();
        for jobs in ["1", "8"] {
            let dir = tmp.path().join(format!("{name}-{jobs}"));
            let mut full = args.clone();
            full.extend(["--out", dir.to_str().unwrap(), "--jobs", jobs]);
            let o = run_cli(&full);
            if !o.status.success() {
                failures.push(format!("{name} --jobs {jobs} exited with {:?}", o.status.code()));
            }
            outs.push(output_files(&dir));
        }
        if outs[0].is_empty() || outs[0] != outs[1] {
            failures.push(name.to_string());
        }
    }
    failures
}
