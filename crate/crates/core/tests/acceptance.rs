//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 8–10 train two MNIST models and take several minutes.
//! `ACCEPTANCE_ONLY=1,2,5` runs a subset.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use certood::attacks::{merge, monotone_pgd, AttackConfig, InitScheme};
use certood::autodiff::Graph;
use certood::checkpoint::Checkpoint;
use certood::data::{load_source, smooth_noise, uniform_noise, Dataset};
use certood::interval::{
    certified_log_conf_upper, certify, certify_chunked, network_logit_diff_bounds, training_bound,
};
use certood::losses::{good_objective, GoodBatch};
use certood::metrics::{
    auroc, cauroc, confidence, confidences, gauc, pair_counts, write_metrics_csv, EvalRecord,
    MetricsRow,
};
use certood::network::{forward, forward_chunked, BoundParams};
use certood::train::{accuracy, train, TrainConfig, TrainOptions};
use certood::Tensor;
use common::{brute_pairs, rng, RefMlp};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Random small ReLU network with 2–4 affine layers and input dim ≤ 12.
fn random_instance(r: &mut ChaCha8Rng) -> RefMlp {
    let d = r.random_range(2..=12);
    let depth = r.random_range(2..=4);
    let mut dims = vec![d];
    for _ in 1..depth {
        dims.push(r.random_range(2..=10));
    }
    dims.push(r.random_range(2..=6));
    RefMlp::random(&dims, 1.0, r)
}

fn random_pair(d: usize, r: &mut ChaCha8Rng) -> (Vec<f64>, f32) {
    let x = common::random_point(d, r);
    let eps = [0.0f32, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5][r.random_range(0..7)];
    let eps = if r.random_bool(0.5) {
        eps
    } else {
        r.random_range(0.0f32..0.5)
    };
    (x, eps)
}

/// Points of the clipped box: every corner, then uniform samples.
fn box_points(x: &Tensor, eps: f32, samples: usize, r: &mut ChaCha8Rng) -> Tensor {
    let d = x.len();
    let lo: Vec<f32> = x.data().iter().map(|v| (v - eps).max(0.0)).collect();
    let hi: Vec<f32> = x.data().iter().map(|v| (v + eps).min(1.0)).collect();
    let corners = 1usize << d;
    let mut data = Vec::with_capacity((corners + samples) * d);
    for mask in 0..corners {
        for j in 0..d {
            data.push(if mask >> j & 1 == 1 { hi[j] } else { lo[j] });
        }
    }
    for _ in 0..samples {
        for j in 0..d {
            data.push(if lo[j] < hi[j] {
                r.random_range(lo[j]..=hi[j])
            } else {
                lo[j]
            });
        }
    }
    Tensor::new(vec![corners + samples, 1, 1, d], data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut violations, mut checked) = (0usize, 0usize);
    let mut worst = f32::NEG_INFINITY;
    for _ in 0..20 {
        let mlp = random_instance(&mut r);
        let (spec, params) = (mlp.spec(), mlp.params());
        for _ in 0..50 {
            let (x, eps) = random_pair(mlp.input_dim(), &mut r);
            let xt = common::batch(&[x]);
            let bound = certify(&spec, &params, &xt, eps, true).map_err(|e| e.to_string())?[0];
            let pts = box_points(&xt, eps, 10_000, &mut r);
            let logits = forward(&spec, &params, &pts).map_err(|e| e.to_string())?;
            for i in 0..pts.batch() {
                let c = confidence(logits.row(i));
                worst = worst.max(c - bound);
                if c > bound {
                    violations += 1;
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("{violations} violations in {checked} points, max excess {worst:e}, {secs:.1}s");
    if violations == 0 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let mlp = random_instance(&mut r);
        let (spec, params) = (mlp.spec(), mlp.params());
        let xt = common::batch(&[common::random_point(mlp.input_dim(), &mut r)]);
        let bound = certify(&spec, &params, &xt, 0.0, true).map_err(|e| e.to_string())?[0];
        let conf = confidence(
            forward(&spec, &params, &xt)
                .map_err(|e| e.to_string())?
                .row(0),
        );
        worst = worst.max((bound - conf).abs());
    }
    let detail = format!("max |certify(x, 0) - conf(x)| = {worst:e} over 1000 cases");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    // Same generator and seed as criterion 1.
    let mut r = rng(101);
    let mut worst = f64::NEG_INFINITY;
    let mut n = 0;
    for _ in 0..20 {
        let mlp = random_instance(&mut r);
        let (spec, params) = (mlp.spec(), mlp.params());
        let k = mlp.classes() as f64;
        for _ in 0..50 {
            let (x, eps) = random_pair(mlp.input_dim(), &mut r);
            let xt = common::batch(&[x]);
            let b = &network_logit_diff_bounds(&spec, &params, &xt, eps, true)
                .map_err(|e| e.to_string())?[0];
            worst = worst.max(certified_log_conf_upper(b) - (training_bound(b) as f64 - k.ln()));
            n += 1;
            // Keep the random stream aligned with criterion 1.
            box_points(&xt, eps, 10_000, &mut r);
        }
    }
    let detail =
        format!("max (log bound - (training bound - log K)) = {worst:e} over {n} instances");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mnist_source(split: &str) -> String {
    let root = repo_root().join("data/mnist");
    format!(
        "idx:{},{}",
        root.join(format!("{split}-images-idx3-ubyte.gz")).display(),
        root.join(format!("{split}-labels-idx1-ubyte.gz")).display()
    )
}

fn criterion_4() -> Outcome {
    let config = TrainConfig::parse(
        "method = good\nepochs = 6\nwarmup_epochs = 1\narchitecture = custom:c8s2,a32\nbatch_size = 50\nseed = 4\n\
         in_data = idx:unused\nout_data = uniform:1\ncrop_pad = 0\neps_start_epoch = 1\neps_end_epoch = 4\n\
         eps_end = 0.1\nkappa_start = 0.5\nkappa_end = 0.5\n",
    )
    .map_err(|e| e.to_string())?;
    let shape = [1, 28, 28];
    let ind = load_source(&mnist_source("train"), shape, 0)
        .and_then(|d| d.take(1000))
        .map_err(|e| e.to_string())?;
    let noise = Dataset::concat(
        "noise",
        &[
            uniform_noise(500, shape, 40).unwrap(),
            smooth_noise(500, shape, 41).unwrap(),
        ],
    )
    .unwrap();
    let ck = train(&config, &ind, Some(&noise), &TrainOptions::default())
        .map_err(|e| e.to_string())?
        .checkpoint;
    let test = load_source(&mnist_source("test"), shape, 0)
        .and_then(|d| d.take(500))
        .map_err(|e| e.to_string())?;
    let ood = Dataset::concat(
        "ood",
        &[
            uniform_noise(100, shape, 42).unwrap(),
            smooth_noise(100, shape, 43).unwrap(),
        ],
    )
    .unwrap();
    let eps = 0.1;
    let attack = AttackConfig {
        steps: 100,
        restarts: 2,
        seed: 7,
        ..AttackConfig::new(eps)
    };
    let contrast = AttackConfig {
        init: InitScheme::Contrast,
        restarts: 1,
        ..attack.clone()
    };
    let runs = vec![
        monotone_pgd(&ck.spec, &ck.params, &ood.images, &attack).map_err(|e| e.to_string())?,
        monotone_pgd(&ck.spec, &ck.params, &ood.images, &contrast).map_err(|e| e.to_string())?,
    ];
    let attacked = merge(runs);
    let upper = certify_chunked(&ck.spec, &ck.params, &ood.images, eps, true, 100)
        .map_err(|e| e.to_string())?;
    let clean =
        confidences(&forward(&ck.spec, &ck.params, &ood.images).map_err(|e| e.to_string())?);
    let mut worst = f32::NEG_INFINITY;
    let records: Vec<EvalRecord> = (0..ood.len())
        .map(|i| {
            worst = worst.max(attacked[i].best_confidence - upper[i]);
            EvalRecord {
                clean_conf: clean[i],
                attacked_conf: Some(attacked[i].best_confidence),
                certified_upper: Some(upper[i]),
                dataset: "noise".into(),
            }
        })
        .collect();
    let in_conf = confidences(&forward_chunked(&ck.spec, &ck.params, &test.images, 250).unwrap());
    let row = MetricsRow::from_records("good", &in_conf, &records, eps);
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &[row]).map_err(|e| e.to_string())?;
    let text = String::from_utf8(csv).unwrap();
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let col = |i: usize| fields[i].parse::<f64>().unwrap();
    let (auc, aauc, g) = (col(2), col(4), col(5));
    let detail = format!(
        "max attacked - certified = {worst:e} over {} samples; csv auc {auc} aauc {aauc} gauc {g}",
        ood.len()
    );
    if worst <= 1e-5 && g <= aauc && aauc <= auc {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let mlp = RefMlp::random(&[6, 8, 4], 0.8, &mut r);
        let params = mlp.params();
        let reference = RefMlp::from_params(&params);
        let xin = common::as_f32(
            &(0..5)
                .map(|_| common::random_point(6, &mut r))
                .collect::<Vec<_>>(),
        );
        let xout = common::as_f32(
            &(0..8)
                .map(|_| common::random_point(6, &mut r))
                .collect::<Vec<_>>(),
        );
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        let eps = r.random_range(0.01f32..0.3);
        let q = [1.0, 0.5, 0.25, 0.0][case % 4];
        let kappa = 0.5;

        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, true);
        let in_x = g.constant(common::batch(&xin));
        let out_x = g.constant(common::batch(&xout));
        let batch = GoodBatch {
            in_x,
            in_labels: &labels,
            out_x,
        };
        let (root, _) = good_objective(&mut g, &mlp.spec(), &bound, &batch, eps, kappa as f32, q)
            .map_err(|e| e.to_string())?;
        let mut grads = g.backward(root).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = bound
            .ids()
            .flat_map(|id| grads.take(id).unwrap().data().to_vec())
            .map(f64::from)
            .collect();
        let h = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..reference.param_len() {
            let mut p = reference.clone();
            *p.param_mut(i) += h;
            let up = p.good_loss(&xin, &labels, &xout, eps as f64, kappa, q);
            *p.param_mut(i) -= 2.0 * h;
            let down = p.good_loss(&xin, &labels, &xout, eps as f64, kappa, q);
            let fd = (up - down) / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += fd * fd;
        }
        worst = worst.max(num.sqrt() / den.sqrt());
    }
    let detail = format!("max relative gradient error {worst:e} over 20 instances");
    if worst <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    for case in 0..100 {
        let (n, m) = (r.random_range(1..200), r.random_range(1..200));
        // Every third instance draws from few levels to force ties.
        let levels = if case % 3 == 0 {
            r.random_range(1..6)
        } else {
            1 << 20
        };
        let mut draw = |k: usize| -> Vec<f32> {
            (0..k)
                .map(|_| r.random_range(0..levels) as f32 / levels as f32)
                .collect()
        };
        let (ins, outs) = (draw(n), draw(m));
        let (gt, eq) = brute_pairs(&ins, &outs);
        if pair_counts(&ins, &outs) != (gt, eq) {
            return Err(format!("pair counts differ on instance {case}"));
        }
        let total = (n * m) as f64;
        if auroc(&ins, &outs) != (2 * gt + eq) as f64 / (2.0 * total)
            || cauroc(&ins, &outs) != gt as f64 / total
        {
            return Err(format!("auc mismatch on instance {case}"));
        }
    }
    let constant_in = vec![0.7f32; 40];
    let constant_out = vec![0.7f32; 25];
    let (a, c) = (
        auroc(&constant_in, &constant_out),
        cauroc(&constant_in, &constant_out),
    );
    if a != 0.5 || c != 0.0 {
        return Err(format!("constant classifier gives auc {a}, cauroc {c}"));
    }
    Ok("100 instances match pair counting exactly; constant classifier 0.5 / 0.0".into())
}

fn criterion_7() -> Outcome {
    let mut r = rng(707);
    let mlp = RefMlp::random(&[10, 12, 5], 1.0, &mut r);
    let (spec, params) = (mlp.spec(), mlp.params());
    let reference = RefMlp::from_params(&params);
    let xin = common::as_f32(
        &(0..16)
            .map(|_| common::random_point(10, &mut r))
            .collect::<Vec<_>>(),
    );
    let mut xout = common::as_f32(
        &(0..128)
            .map(|_| common::random_point(10, &mut r))
            .collect::<Vec<_>>(),
    );
    // Duplicates create exact ties in the CUB values.
    for i in 0..8 {
        xout[100 + i] = xout[i].clone();
    }
    let labels: Vec<usize> = (0..16).map(|i| i % 5).collect();
    let mut counts = Vec::new();
    for q in [0.0, 0.2, 0.6, 1.0] {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let batch = GoodBatch {
            in_x: g.constant(common::batch(&xin)),
            in_labels: &labels,
            out_x: g.constant(common::batch(&xout)),
        };
        let (_, report) = good_objective(&mut g, &spec, &bound, &batch, 0.1, 1.0, q)
            .map_err(|e| e.to_string())?;
        let cut = (q * 128.0f64).floor() as usize;
        let cub = &report.per_sample_cub;
        // Brute force: sample j ranks below `cut` iff fewer than `cut`
        // samples precede it (smaller value, or equal value and index).
        for j in 0..128 {
            let before = (0..128)
                .filter(|&i| cub[i] < cub[j] || (cub[i] == cub[j] && i < j))
                .count();
            if report.eps_term[j] != (before < cut) {
                return Err(format!(
                    "q = {q}: sample {j} selection differs from brute-force rank {before}"
                ));
            }
            let expected =
                (0.5 * reference.training_bound(&xout[j], 0.1f32 as f64).powi(2)).ln_1p();
            if (cub[j] as f64 - expected).abs() > 1e-4 * (1.0 + expected) {
                return Err(format!(
                    "q = {q}: CUB of sample {j} is {} but reference gives {expected}",
                    cub[j]
                ));
            }
        }
        let selected = report.eps_term.iter().filter(|&&b| b).count();
        if selected != cut || report.quantile_cut != cut {
            return Err(format!(
                "q = {q}: {selected} samples selected, expected {cut}"
            ));
        }
        counts.push(selected);
    }
    Ok(format!(
        "selected counts {counts:?} match floor(q*128) and brute-force ranks"
    ))
}

/// The two desk-scale models and their evaluation data.
struct DeskRun {
    model: Checkpoint,
    epsilon: f32,
    train_secs: f64,
}

fn desk_config(q: f64) -> Result<TrainConfig, String> {
    let path = repo_root().join("configs/mnist_good_desk.cfg");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut c = TrainConfig::parse(&text).map_err(|e| e.to_string())?;
    c.q = q;
    Ok(c)
}

fn desk_train(q: f64) -> Result<DeskRun, String> {
    let c = desk_config(q)?;
    let shape = c.input_shape;
    let root = repo_root();
    let ind = load_source(
        &c.in_data
            .replace("data/", &format!("{}/data/", root.display())),
        shape,
        c.seed,
    )
    .map_err(|e| e.to_string())?;
    let parts: Vec<Dataset> = c
        .out_data
        .iter()
        .enumerate()
        .map(|(i, s)| load_source(s, shape, c.seed.wrapping_add(1 + i as u64)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let out = Dataset::concat("out", &parts).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let outcome =
        train(&c, &ind, Some(&out), &TrainOptions::default()).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        model: outcome.checkpoint,
        epsilon: c.epsilon.end_value,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

struct DeskEval {
    accuracy: f64,
    in_conf: Vec<f32>,
    /// `(name, clean confidences, images)` for each test out-distribution.
    ood: Vec<(&'static str, Vec<f32>, Tensor)>,
}

fn desk_eval(model: &Checkpoint) -> Result<DeskEval, String> {
    let shape = model.spec.input_shape();
    let test = load_source(&mnist_source("test"), shape, 0)
        .and_then(|d| d.take(2000))
        .map_err(|e| e.to_string())?;
    let accuracy = accuracy(&model.spec, &model.params, &test).map_err(|e| e.to_string())?;
    let conf =
        |x: &Tensor| confidences(&forward_chunked(&model.spec, &model.params, x, 250).unwrap());
    let in_conf = conf(&test.images);
    let ood = [
        ("uniform", uniform_noise(1000, shape, 9001).unwrap()),
        ("smooth", smooth_noise(1000, shape, 9002).unwrap()),
    ]
    .into_iter()
    .map(|(name, ds)| (name, conf(&ds.images), ds.images))
    .collect();
    Ok(DeskEval {
        accuracy,
        in_conf,
        ood,
    })
}

fn certified(model: &Checkpoint, x: &Tensor, eps: f32) -> Result<Vec<f32>, String> {
    certify_chunked(&model.spec, &model.params, x, eps, true, 250).map_err(|e| e.to_string())
}

fn criterion_8(run: &DeskRun, ev: &DeskEval) -> Outcome {
    let (_, _, uniform) = &ev.ood[0];
    let g = gauc(&ev.in_conf, &certified(&run.model, uniform, run.epsilon)?);
    let detail = format!(
        "test accuracy {:.4}, GAUC(uniform, eps {}) {:.4}, training {:.0}s",
        ev.accuracy, run.epsilon, g, run.train_secs
    );
    if ev.accuracy >= 0.95 && g >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(run: &DeskRun, ev: &DeskEval) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, clean, images) in &ev.ood {
        let upper = certified(&run.model, images, run.epsilon)?;
        let (gt, eq) = pair_counts(&ev.in_conf, &upper);
        let g = gauc(&ev.in_conf, &upper);
        let tie_only = eq as f64 / (2.0 * ev.in_conf.len() as f64 * upper.len() as f64);
        ok &= gt == 0;
        parts.push(format!(
            "{name}: GAUC {g:.4} (ties {tie_only:.4}), AUC {:.4}",
            auroc(&ev.in_conf, clean)
        ));
        if *name == "uniform" {
            ok &= auroc(&ev.in_conf, clean) >= 0.99;
        }
    }
    let detail = format!("{}; training {:.0}s", parts.join("; "), run.train_secs);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10(run: &DeskRun, ev: &DeskEval) -> Outcome {
    let (_, _, uniform) = &ev.ood[0];
    let at_train = certified(&run.model, uniform, run.epsilon)?;
    let larger_eps = run.epsilon * 1.33;
    let at_larger = certified(&run.model, uniform, larger_eps)?;
    let (g1, g2) = (gauc(&ev.in_conf, &at_train), gauc(&ev.in_conf, &at_larger));
    let monotone = at_train.iter().zip(&at_larger).all(|(a, b)| a <= b);
    let detail = format!(
        "GAUC {g1:.4} at eps {}, {g2:.4} at eps {larger_eps}; per-sample monotone: {monotone}",
        run.epsilon
    );
    if g2 > 0.5 * g1 && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: u32, name: &str, outcome: Outcome, failures: &mut u32) {
    match outcome {
        Ok(detail) => println!("PASS  {id:>2}  {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL  {id:>2}  {name}: {detail}");
        }
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failures = 0;

    let quick: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "IBP soundness", criterion_1),
        (2, "exactness at eps = 0", criterion_2),
        (3, "bound chain", criterion_3),
        (4, "attack/certificate ordering", criterion_4),
        (5, "gradient through IBP", criterion_5),
        (6, "AUROC oracle equivalence", criterion_6),
        (7, "quantile mechanics", criterion_7),
    ];
    for (id, name, f) in quick {
        if wanted(id) {
            report(id, name, f(), &mut failures);
        }
    }

    let desk = |q: f64| desk_train(q).and_then(|run| desk_eval(&run.model).map(|ev| (run, ev)));
    let q1 = if wanted(8) || wanted(10) {
        Some(desk(1.0))
    } else {
        None
    };
    if wanted(8) {
        let outcome = q1
            .as_ref()
            .unwrap()
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|(run, ev)| criterion_8(run, ev));
        report(8, "desk-scale GOOD q=1", outcome, &mut failures);
    }
    if wanted(9) {
        let outcome = desk(0.0).and_then(|(run, ev)| criterion_9(&run, &ev));
        report(9, "desk-scale GOOD q=0", outcome, &mut failures);
    }
    if wanted(10) {
        let outcome = q1
            .as_ref()
            .unwrap()
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|(run, ev)| criterion_10(run, ev));
        report(10, "eps generalization", outcome, &mut failures);
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
