//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line and then
//! asserts at its stated tolerance.
//!
//! Criteria 5 to 7 train the full-size model on the synthetic benchmark and
//! take tens of minutes on one core. Criterion 8 needs MNIST on disk and is
//! ignored unless requested (`LRAD_MNIST_DIR`, `--ignored`).

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lrad::datasets::{one_class_split, pad_to, read_idx, synth_generate, Polarity, SynthSpec};
use lrad::eval::{auc, records_auc, score_split, AblationVariant, ScoreKind};
use lrad::losses::{
    DiscriminatorLoss, GeneratorAdversarialLoss, ImageReconstructionLoss, LatentReconstructionLoss, RankBudget,
    RankPenalty,
};
use lrad::tensor::ops::{Activation, ActivationOp, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, RunningStats};
use lrad::tensor::{grad_check, svd, DiffOp};
use lrad::trainer::{train, TrainConfig};
use lrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPES_PER_OP: usize = 20;
const FD_EPS: f64 = 1e-6;

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] criterion {id}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Values bounded away from the kinks of relu, leaky relu and abs.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -2.0, 2.0).map(|v| if v.abs() < 0.05 { v + 0.1_f64.copysign(v) } else { v })
}

type Case = (Box<dyn DiffOp<f64>>, Vec<Tensor<f64>>);

fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64, Vec<Case>)> {
    let mut conv = Vec::new();
    let mut convt = Vec::new();
    let mut bn_train = Vec::new();
    let mut bn_eval = Vec::new();
    let mut acts = Vec::new();
    let mut lin = Vec::new();
    let mut irec = Vec::new();
    let mut adv_d = Vec::new();
    let mut adv_g = Vec::new();
    let mut zrec = Vec::new();
    let mut rank = Vec::new();
    for i in 0..SHAPES_PER_OP {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..k);
        let h = rng.random_range(k..k + 4);
        let w = rng.random_range(k..k + 4);
        let mut ins = vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, k, k], -1.0, 1.0)];
        if i % 2 == 0 {
            ins.push(uniform(rng, &[o], -1.0, 1.0));
        }
        conv.push((Box::new(Conv2d { stride, pad }) as Box<dyn DiffOp<f64>>, ins));

        let (th, tw) = (rng.random_range(1..4), rng.random_range(1..4));
        let pad_t = if (th - 1) * stride + k > 2 * pad && (tw - 1) * stride + k > 2 * pad { pad } else { 0 };
        let mut ins = vec![uniform(rng, &[n, c, th, tw], -1.0, 1.0), uniform(rng, &[c, o, k, k], -1.0, 1.0)];
        if i % 2 == 1 {
            ins.push(uniform(rng, &[o], -1.0, 1.0));
        }
        convt.push((Box::new(ConvTranspose2d { stride, pad: pad_t }) as Box<dyn DiffOp<f64>>, ins));

        let (bn, bc, bh, bw) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let bn_inputs = |rng: &mut ChaCha8Rng| {
            vec![
                uniform(rng, &[bn, bc, bh, bw], -2.0, 2.0),
                uniform(rng, &[bc], 0.5, 1.5),
                uniform(rng, &[bc], -0.5, 0.5),
            ]
        };
        bn_train.push((Box::new(BatchNorm2d::<f64>::train(1e-5)) as Box<dyn DiffOp<f64>>, bn_inputs(rng)));
        let running = RunningStats {
            mean: uniform(rng, &[bc], -0.5, 0.5),
            var: uniform(rng, &[bc], 0.5, 2.0),
        };
        bn_eval.push((Box::new(BatchNorm2d::eval(1e-5, running)) as Box<dyn DiffOp<f64>>, bn_inputs(rng)));

        let kind = [Activation::Relu, Activation::LeakyRelu, Activation::Tanh, Activation::Sigmoid][i % 4];
        let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4)];
        acts.push((Box::new(ActivationOp(kind)) as Box<dyn DiffOp<f64>>, vec![off_kink(rng, &shape)]));

        let (b, fi, fo) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let mut ins = vec![uniform(rng, &[b, fi], -1.0, 1.0), uniform(rng, &[fo, fi], -1.0, 1.0)];
        if i % 2 == 0 {
            ins.push(uniform(rng, &[fo], -1.0, 1.0));
        }
        lin.push((Box::new(Linear) as Box<dyn DiffOp<f64>>, ins));

        let shape = [rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5)];
        let x = uniform(rng, &shape, -1.0, 1.0);
        let gap = off_kink(rng, &shape).scale(0.5);
        let y = x.zip_map(&gap, |a, b| a + b).unwrap();
        irec.push((Box::new(ImageReconstructionLoss) as Box<dyn DiffOp<f64>>, vec![x, y]));

        let b = rng.random_range(1..9);
        adv_d.push((
            Box::new(DiscriminatorLoss) as Box<dyn DiffOp<f64>>,
            vec![uniform(rng, &[b, 1], 0.05, 0.95), uniform(rng, &[b, 1], 0.05, 0.95)],
        ));
        adv_g.push((Box::new(GeneratorAdversarialLoss) as Box<dyn DiffOp<f64>>, vec![uniform(rng, &[b, 1], 0.05, 0.95)]));

        let (b, d) = (rng.random_range(1..6), rng.random_range(2..8));
        zrec.push((
            Box::new(LatentReconstructionLoss) as Box<dyn DiffOp<f64>>,
            vec![uniform(rng, &[b, d], -1.0, 1.0), uniform(rng, &[b, d], -1.0, 1.0)],
        ));

        // Distinct singular values keep the tail differentiable.
        let (d, b) = (rng.random_range(3..9), rng.random_range(3..12));
        let r = rng.random_range(1..d.min(b));
        let z = loop {
            let z = uniform(rng, &[d, b], -1.0, 1.0);
            let s = svd(&z).unwrap().s;
            if s.windows(2).all(|w| w[0] - w[1] >= 1e-2) && s[s.len() - 1] >= 1e-2 {
                break z;
            }
        };
        rank.push((Box::new(RankPenalty { budget: RankBudget(r) }) as Box<dyn DiffOp<f64>>, vec![z]));
    }
    vec![
        ("conv2d", 1e-4, conv),
        ("conv_transpose2d", 1e-4, convt),
        ("batchnorm2d (batch statistics)", 1e-3, bn_train),
        ("batchnorm2d (running statistics)", 1e-3, bn_eval),
        ("activations", 1e-4, acts),
        ("linear", 1e-4, lin),
        ("loss_irec", 1e-4, irec),
        ("loss_adv_d", 1e-4, adv_d),
        ("loss_adv_g", 1e-4, adv_g),
        ("loss_zrec", 1e-4, zrec),
        ("loss_rank", 1e-3, rank),
    ]
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut all_pass = true;
    let mut summary = Vec::new();
    for (name, tol, cases) in gradient_cases(&mut rng) {
        let mut worst: f64 = 0.0;
        for (op, inputs) in &cases {
            let r = grad_check(op.as_ref(), inputs, FD_EPS).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        let ok = worst <= tol && cases.len() >= SHAPES_PER_OP;
        all_pass &= ok;
        summary.push(format!("{name} {worst:.1e}/{tol:.0e} over {}", cases.len()));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = report(
        1,
        "gradient correctness",
        all_pass && secs < 60.0,
        &format!("{} ({secs:.1}s)", summary.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_2_svd_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_recon, mut worst_ortho, mut all_desc) = (0.0f64, 0.0f64, true);
    for _ in 0..500 {
        let (m, n) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let a = uniform(&mut rng, &[m, n], -1.0, 1.0);
        let s = svd(&a).unwrap();
        let diff = s.reconstruct().zip_map(&a, |x, y| x - y).unwrap();
        worst_recon = worst_recon.max(diff.frobenius_norm() / a.frobenius_norm());
        for q in [&s.u, &s.v] {
            let (rows, k) = (q.dim(0), q.dim(1));
            for i in 0..k {
                for j in 0..k {
                    let d: f64 = (0..rows).map(|p| q.data()[p * k + i] * q.data()[p * k + j]).sum();
                    worst_ortho = worst_ortho.max((d - f64::from(u8::from(i == j))).abs());
                }
            }
        }
        all_desc &= s.s.windows(2).all(|w| w[0] >= w[1]) && s.s.iter().all(|&v| v >= 0.0);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = report(
        2,
        "SVD oracle",
        worst_recon <= 1e-10 && worst_ortho <= 1e-10 && all_desc && secs < 60.0,
        &format!(
            "500 matrices, reconstruction {worst_recon:.1e}*|A|_F, orthonormality {worst_ortho:.1e}, descending {all_desc} ({secs:.1}s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_auc_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..300);
        let levels = rng.random_range(1..8);
        let mut flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        flags[0] = true;
        flags[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) * 0.1).collect();
        let mut pairs = 0.0;
        let mut hits = 0.0;
        for i in (0..n).filter(|&i| flags[i]) {
            for j in (0..n).filter(|&j| !flags[j]) {
                pairs += 1.0;
                hits += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        worst = worst.max((auc(&scores, &flags).unwrap() - hits / pairs).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = report(
        3,
        "AUC oracle equivalence",
        worst <= 1e-12 && secs < 10.0,
        &format!("200 tied score sets, max deviation {worst:.1e} ({secs:.2}s)"),
    );
    assert!(pass);
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_lrad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn criterion_4_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // 256 training normals at the default network size and batch.
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{ "data": { "synth": { "normal_count": 282, "anomaly_count": 40 } },
             "protocol": { "train_fraction": 0.908 },
             "train": { "epochs": 2, "seed": 7 } }"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for run in 0..3 {
        let out = dir.path().join(format!("run{run}"));
        let o = out.to_str().unwrap();
        let c = cfg.to_str().unwrap();
        run_cli(&["train", "--config", c, "--out", o, "--deterministic"]);
        let ck = out.join("model.lrad");
        run_cli(&["eval", "--config", c, "--out", o, "--checkpoint", ck.to_str().unwrap(), "--deterministic"]);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        outputs.push((read("history.csv"), read("scores.csv")));
    }
    let rows = String::from_utf8_lossy(&outputs[0].0).lines().count() - 1;
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    let secs = started.elapsed().as_secs_f64();
    let pass = report(
        4,
        "determinism",
        same && rows == 8 && secs < 300.0,
        &format!("3 runs, {rows} iterations, history and scores identical: {same} ({secs:.0}s)"),
    );
    assert!(pass);
}

#[test]
fn criteria_5_6_7_synthetic_detection() {
    let data = synth_generate(&SynthSpec::default()).unwrap();
    let split = one_class_split(&data, 1, Polarity::ClassIsAnomaly, 2000.0 / 2200.0, 0).unwrap();
    assert_eq!(split.train_normals.len(), 2000);
    assert_eq!(split.test_anomaly_flags.iter().filter(|&&f| f).count(), 200);
    assert_eq!(split.test.len(), 400);
    let config = TrainConfig::default();

    let started = Instant::now();
    let (full, _) = train::<f32>(&config, &split).unwrap();
    let full_secs = started.elapsed();
    let records = score_split(&full, &split).unwrap();
    let latent = records_auc(&records, ScoreKind::Latent).unwrap();
    let pixel = records_auc(&records, ScoreKind::Pixel).unwrap();
    let c5 = report(
        5,
        "desk-scale detection",
        latent >= 0.95 && full_secs <= Duration::from_secs(15 * 60),
        &format!("latent AUC {latent:.4} (need >= 0.95), {:.0}s", full_secs.as_secs_f64()),
    );
    let c7 = report(
        7,
        "latent vs pixel score",
        latent >= pixel,
        &format!("latent AUC {latent:.4}, pixel AUC {pixel:.4}"),
    );

    let base = AblationVariant::IrecAdv;
    let cfg = TrainConfig { weights: base.weights(config.weights), ..config.clone() };
    let (reduced, _) = train::<f32>(&cfg, &split).unwrap();
    let reduced_auc = records_auc(&score_split(&reduced, &split).unwrap(), base.score_kind()).unwrap();
    let total_secs = started.elapsed();
    let c6 = report(
        6,
        "ablation direction",
        latent >= reduced_auc + 0.05 && total_secs <= Duration::from_secs(45 * 60),
        &format!(
            "full {latent:.4} vs {} {reduced_auc:.4} (need a margin of 0.05), {:.0}s",
            base.name(),
            total_secs.as_secs_f64()
        ),
    );
    assert!(c5 && c6 && c7, "criteria 5/6/7: {c5}/{c6}/{c7}");
}

#[test]
#[ignore = "needs MNIST under LRAD_MNIST_DIR and about two hours"]
fn criterion_8_mnist_smoke() {
    let Some(dir) = std::env::var_os("LRAD_MNIST_DIR") else {
        println!("[SKIP] criterion 8: MNIST smoke: LRAD_MNIST_DIR is not set");
        return;
    };
    let dir = Path::new(&dir);
    let raw = read_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let data = pad_to(&raw, 32, -1.0).unwrap();
    let split = one_class_split(&data, 0, Polarity::ClassIsAnomaly, 0.8, 0).unwrap();
    let config = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let (model, _) = train::<f32>(&config, &split).unwrap();
    let latent = records_auc(&score_split(&model, &split).unwrap(), ScoreKind::Latent).unwrap();
    let pass = report(8, "MNIST smoke", latent >= 0.90, &format!("digit 0 latent AUC {latent:.4} (need >= 0.90)"));
    assert!(pass);
}
