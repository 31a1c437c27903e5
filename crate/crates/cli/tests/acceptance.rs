//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are always
//! visible in `cargo test` output. Positional arguments select criteria by
//! number, e.g. `cargo test -p vitsr-cli --test acceptance -- 4 8`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use vitsr::data::{make_sr_pair, render_synthetic, Batch, TrainPair};
use vitsr::diffcore::{Tape, Tensor};
use vitsr::gradcheck::run_suite;
use vitsr::imageops::{cubic_weights, psnr, ssim, ImageRGB};
use vitsr::losses::{composite_loss, l1_loss, ssim_loss_term, LossConfig};
use vitsr::model::{ModelConfig, VitSr};
use vitsr::training::{
    adamw_update, decide, evaluate, train_step, AdamW, AdamWConfig, Checkpoint, CheckpointMeta,
    CosineWarmRestarts, Decision, Stage,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn vitsr(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_vitsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vitsr");
    if !out.status.success() {
        panic!(
            "vitsr {args:?} exited with {}:\n{}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn log_rows(run_dir: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(run_dir.join("train_log.csv")).expect("train log");
    text.lines()
        .skip(1)
        .map(|l| l.split(',').take(5).map(|v| v.parse().unwrap()).collect())
        .collect()
}

// 1. Gradient correctness.
fn gradients() -> Verdict {
    let report = run_suite(5, 100, 0).map_err(|e| e.to_string())?;
    let worst = report
        .ops
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let detail = format!(
        "{} ops x {} instances, worst op {} at {:.2e}; micro model {} params sampled, max rel err {:.2e}; {:.1}s",
        report.ops.len(),
        report.ops.iter().map(|c| c.instances).min().unwrap_or(0),
        worst.name,
        worst.max_rel_error,
        report.model.elements,
        report.model.max_rel_error,
        report.seconds
    );
    let counts_ok = report.ops.iter().all(|c| c.instances >= 5) && report.model.elements >= 100;
    let tol_ok = report.ops.iter().all(|c| c.tolerance <= 1e-3) && report.model.tolerance <= 1e-2;
    check(
        report.passed() && counts_ok && tol_ok && report.seconds < 120.0,
        detail,
    )
}

// 2. Metric golden values.
fn metrics() -> Verdict {
    let flat = |v: f32| ImageRGB::filled(32, 32, [v; 3]).unwrap();
    let p1 = psnr(&flat(0.0), &flat(0.1)).unwrap();
    let p2 = psnr(&flat(0.4), &flat(0.5)).unwrap();
    let textured = ImageRGB::new(
        32,
        32,
        (0..32 * 32 * 3)
            .map(|i| ((i * 7919) % 256) as f32 / 255.0)
            .collect(),
    )
    .unwrap();
    let s_same = ssim(&textured, &textured).unwrap();
    let s_const = ssim(&flat(0.0), &flat(1.0)).unwrap();
    // Constant images: only the luminance term survives, C1 / (1 + C1).
    let c1 = 0.01f64 * 0.01;
    let s_oracle = c1 / (1.0 + c1);
    let w = cubic_weights(0.5);
    let w_want = [-0.0625, 0.5625, 0.5625, -0.0625];
    let w_err = w
        .iter()
        .zip(w_want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let detail = format!(
        "psnr {p1:.9}/{p2:.9} dB, ssim(x,x) {s_same:.9}, ssim(0,1) {s_const:.6e} (oracle {s_oracle:.6e}), bicubic weight err {w_err:.1e}"
    );
    check(
        (p1 - 20.0).abs() <= 1e-6
            && (p2 - 20.0).abs() <= 1e-6
            && (s_same - 1.0).abs() <= 1e-6
            && (s_const - 9.999e-5).abs() <= 1e-7
            && (s_const - s_oracle).abs() <= 1e-12
            && w_err <= 1e-9,
        detail,
    )
}

// 3. Composite objective.
fn objective() -> Verdict {
    const S: usize = 32;
    let checker: Vec<f64> = (0..3 * S * S)
        .map(|i| if (i / S + i % S) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    // target = 0.5 + b * checker, pred = target + 0.05 * checker: L1 is 0.05
    // for every b, and SSIM rises monotonically with b. Bisect b to SSIM 0.95.
    let pair = |b: f64| {
        let t: Vec<f64> = checker.iter().map(|c| 0.5 + b * c).collect();
        let q: Vec<f64> = t.iter().zip(&checker).map(|(v, c)| v + 0.05 * c).collect();
        (
            Tensor::new([1, 3, S, S], q).unwrap(),
            Tensor::new([1, 3, S, S], t).unwrap(),
        )
    };
    let run = |b: f64, f: &dyn Fn(&mut Tape<'_, f64>, _, _) -> vitsr::Result<_>| {
        let (q, t) = pair(b);
        let mut tape = Tape::new();
        let (q, t) = (tape.input(q).unwrap(), tape.input(t).unwrap());
        let v = f(&mut tape, q, t).unwrap();
        tape.item(v)
    };
    let cfg = LossConfig::default();
    let ssim_at = |b: f64| run(b, &|tp, q, t| ssim_loss_term(tp, q, t, &cfg));
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ssim_at(mid) < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    let l1 = run(b, &|tp, q, t| l1_loss(tp, q, t));
    let s = ssim_at(b);
    let loss = |lambda: f64| {
        run(b, &|tp, q, t| {
            composite_loss(tp, q, t, &LossConfig::with_lambda(lambda))
        })
    };
    let (l02, l0, l1w) = (loss(0.2), loss(0.0), loss(1.0));
    let detail = format!(
        "constructed L1 {l1:.12} SSIM {s:.12}: loss(0.2) {l02:.12}, loss(0) == L1: {}, loss(1) == 1-SSIM: {}",
        l0 == l1,
        l1w == 1.0 - s
    );
    check(
        (l1 - 0.05).abs() < 1e-12
            && (s - 0.95).abs() < 1e-12
            && (l02 - 0.05).abs() <= 1e-6
            && l0 == l1
            && l1w == 1.0 - s,
        detail,
    )
}

fn zero_residual_checkpoint(path: &Path) {
    // Random transformer weights; the output convolution starts at zero.
    let cfg = ModelConfig::micro();
    let model = VitSr::<f32>::init(cfg.clone(), 11).unwrap();
    let meta = CheckpointMeta::untrained(Stage::SuperResolution, cfg);
    Checkpoint::from_model(&model, meta).save(path).unwrap();
}

// 4. Residual wiring oracle through the CLI.
fn wiring() -> Verdict {
    let dir = scratch();
    let root = dir.path();
    let data = root.join("data");
    vitsr(&[
        "make-synthetic",
        "--out",
        p(&data),
        "--count",
        "8",
        "--size",
        "96",
        "--val-count",
        "4",
        "--seed",
        "5",
    ]);
    let ckpt = root.join("zero.ckpt");
    zero_residual_checkpoint(&ckpt);

    let report = root.join("eval.json");
    vitsr(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--dataset",
        p(&data),
        "--out",
        p(&report),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let field = |k: &str| json[k].as_f64().unwrap_or(f64::NAN);
    let eval_ok = field("psnr_model").to_bits() == field("psnr_bicubic").to_bits()
        && field("ssim_model").to_bits() == field("ssim_bicubic").to_bits()
        && json["n_images"] == 4;

    // Low-resolution inputs: one tile exactly, one smaller than a tile, and
    // one spanning several overlapping tiles.
    let lr_dir = root.join("lr");
    fs::create_dir_all(&lr_dir).unwrap();
    for (i, (h, w)) in [(16, 16), (9, 13), (37, 29)].into_iter().enumerate() {
        let img = render_synthetic(64, 3, i as u64)
            .unwrap()
            .crop(0, 0, h, w)
            .unwrap();
        vitsr::imageops::save_png(&img, lr_dir.join(format!("in{i}.png"))).unwrap();
    }
    let out_dir = root.join("sr");
    vitsr(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&lr_dir),
        "--out",
        p(&out_dir),
    ]);
    let mut identical = 0;
    for i in 0..3 {
        let sr = fs::read(out_dir.join(format!("in{i}.png"))).unwrap();
        let base = fs::read(out_dir.join(format!("in{i}_bicubic.png"))).unwrap();
        identical += usize::from(sr == base);
    }
    let files = fs::read_dir(&out_dir).unwrap().count();
    let detail = format!(
        "eval psnr model {} vs bicubic {}; infer {identical}/3 outputs byte-identical to baseline, {files} files",
        field("psnr_model"),
        field("psnr_bicubic")
    );
    check(eval_ok && identical == 3 && files == 6, detail)
}

fn mean_bicubic_psnr(pairs: &[TrainPair], s: usize) -> f64 {
    let img = |t: &Tensor<f32>| ImageRGB::from_chw(s, s, t.data()).unwrap();
    pairs
        .iter()
        .map(|q| psnr(&img(&q.input), &img(&q.target)).unwrap())
        .sum::<f64>()
        / pairs.len() as f64
}

// 5. Overfitting eight pairs.
fn overfit() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig::micro();
    let s = cfg.image_size;
    let pairs: Vec<TrainPair> = (0..8)
        .map(|i| make_sr_pair(&render_synthetic(s, 21, i).unwrap(), 4).unwrap())
        .collect();
    let batch = Batch::stack(&pairs).unwrap();
    let mut model = VitSr::<f32>::init(cfg, 21).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let loss_cfg = LossConfig::with_lambda(0.2);
    // One batch holds the whole set, so each step is one epoch.
    let mut losses = Vec::with_capacity(2000);
    for _ in 0..2000 {
        losses.push(
            train_step(&mut model, &mut opt, &batch, 1e-3, &loss_cfg).map_err(|e| e.to_string())?,
        );
    }
    let eval = evaluate(&model, &pairs, 8).unwrap();
    let base = mean_bicubic_psnr(&pairs, s);
    let (l50, l2000) = (losses[49], losses[1999]);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "train PSNR {:.2} dB vs bicubic {base:.2} dB (+{:.2}); loss step 50 {l50:.5} -> step 2000 {l2000:.5} ({:.1}%); {secs:.0}s",
        eval.psnr,
        eval.psnr - base,
        100.0 * l2000 / l50
    );
    check(
        eval.psnr - base >= 3.0 && l2000 < 0.25 * l50 && secs < 900.0,
        detail,
    )
}

// 6. Stage-1 initialization against random initialization.
fn two_stage() -> Verdict {
    let start = Instant::now();
    let dir = scratch();
    let root = dir.path();
    let data = root.join("data");
    vitsr(&[
        "make-synthetic",
        "--out",
        p(&data),
        "--count",
        "32",
        "--size",
        "64",
        "--val-count",
        "8",
        "--seed",
        "7",
    ]);
    let common = [
        "--set",
        "preset=micro",
        "--set",
        "batch_size=4",
        "--seed",
        "7",
        "--dataset",
        p(&data),
    ];
    let pre = root.join("pre");
    let mut args = vec![
        "pretrain",
        "--run-dir",
        p(&pre),
        "--set",
        "max_epochs=20",
        "--set",
        "patience=19",
    ];
    args.extend(common);
    vitsr(&args);

    // Six epochs are logged so the curves can be compared; the verdict uses
    // epoch 0 only.
    let finetune = |run: &Path, init: Option<&Path>| {
        let mut args = vec![
            "finetune",
            "--run-dir",
            p(run),
            "--set",
            "max_epochs=6",
            "--set",
            "patience=5",
        ];
        args.extend(common);
        if let Some(ckpt) = init {
            args.extend(["--init-from", p(ckpt)]);
        }
        let out = vitsr(&args);
        let psnr: Vec<f64> = log_rows(run).iter().map(|r| r[2]).collect();
        (psnr, String::from_utf8_lossy(&out.stdout).into_owned())
    };
    let (pretrained, msg) = finetune(&root.join("ft"), Some(&pre.join("best.ckpt")));
    let (random, msg0) = finetune(&root.join("ft0"), None);
    let ahead: Vec<String> = pretrained
        .iter()
        .zip(&random)
        .enumerate()
        .filter(|(_, (a, b))| a > b)
        .map(|(e, _)| e.to_string())
        .collect();
    let detail = format!(
        "epoch-0 val PSNR {:.4} dB from colorization checkpoint vs {:.4} dB from random init; pretrained ahead at epochs [{}] of 0..6; {:.0}s",
        pretrained[0],
        random[0],
        ahead.join(","),
        start.elapsed().as_secs_f64()
    );
    let logged =
        msg.contains("copied 85 tensors") && msg0.contains("random initialization (ablation mode)");
    check(pretrained[0] > random[0] && logged, detail)
}

// 7. Protocol values.
fn protocol() -> Verdict {
    let lr = 3e-4;
    let sched = CosineWarmRestarts {
        lr_init: lr,
        lr_min: 0.0,
        t0: 10,
        tmult: 2,
    };
    let want = [(0, lr), (5, lr / 2.0), (10, lr), (30, lr)];
    let sched_ok = want
        .iter()
        .all(|&(e, v)| (sched.lr_at(e) - v).abs() <= 1e-12);
    let (mut w, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
    adamw_update(
        &mut w,
        &[1.0],
        &mut m,
        &mut v,
        1,
        0.1,
        &AdamWConfig::default(),
    )
    .unwrap();
    let hand = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.05;
    let trace = [20.0, 21.0, 20.5, 20.9];
    let stop_ok =
        decide(&trace[..3], 2) == Decision::Continue && decide(&trace, 2) == Decision::Stop;
    let detail = format!(
        "lr at 0/5/10/30 = {:?}; AdamW w' = {:.8} (hand {hand:.8}); stopper continue@3, stop@4: {stop_ok}",
        want.map(|(e, _)| sched.lr_at(e)),
        w[0]
    );
    check(
        sched_ok && (w[0] - 0.8950).abs() <= 1e-6 && (w[0] - hand).abs() <= 1e-12 && stop_ok,
        detail,
    )
}

// 8. Persistence and run determinism.
fn persistence() -> Verdict {
    let dir = scratch();
    let root = dir.path();
    let data = root.join("data");
    vitsr(&[
        "make-synthetic",
        "--out",
        p(&data),
        "--count",
        "10",
        "--size",
        "64",
        "--val-count",
        "2",
        "--seed",
        "9",
    ]);
    let run = |name: &str| {
        let run_dir = root.join(name);
        vitsr(&[
            "pretrain",
            "--dataset",
            p(&data),
            "--run-dir",
            p(&run_dir),
            "--seed",
            "9",
            "--set",
            "preset=micro",
            "--set",
            "max_epochs=3",
            "--set",
            "patience=2",
            "--set",
            "batch_size=4",
        ]);
        run_dir
    };
    let (a, b) = (run("a"), run("b"));
    let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).unwrap();
    let csv_same = read(&a, "train_log.csv") == read(&b, "train_log.csv");
    let params_same = read(&a, "last.ckpt") == read(&b, "last.ckpt");

    let original = read(&a, "last.ckpt");
    let loaded = Checkpoint::load(a.join("last.ckpt")).unwrap();
    let resaved = root.join("resaved.ckpt");
    loaded.save(&resaved).unwrap();
    let again = Checkpoint::load(&resaved).unwrap().to_bytes().unwrap();
    let round_trip = fs::read(&resaved).unwrap() == original && again == original;
    let detail = format!(
        "save->load->save identical: {round_trip} ({} bytes, {} tensors incl. optimizer moments); repeated run CSV identical: {csv_same}; final checkpoints identical: {params_same}",
        original.len(),
        loaded.tensors().len()
    );
    check(round_trip && csv_same && params_same, detail)
}

// 9. Full-scale numbers are out of reach here.
fn scale_statement() -> Verdict {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&readme).unwrap_or_default();
    let stated = ["22.90", "0.712", "22.85", "0.71", "not reproducible"]
        .iter()
        .all(|s| text.contains(s));
    // The floor applies only to a DIV2K-scale fine-tuned checkpoint.
    let floor = match (
        std::env::var_os("VITSR_DIV2K"),
        std::env::var_os("VITSR_DIV2K_CKPT"),
    ) {
        (Some(data), Some(ckpt)) => {
            let out = vitsr(&[
                "eval",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--dataset",
                data.to_str().unwrap(),
            ]);
            let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
            let f = |k: &str| json[k].as_f64().unwrap();
            Some(f("psnr_model") > f("psnr_bicubic") && f("ssim_model") > f("ssim_bicubic"))
        }
        _ => None,
    };
    let detail = format!(
        "full-scale DIV2K results (22.90 dB / 0.712, 22.85 / 0.71) are not acceptance targets; statement in README: {stated}; bicubic floor on DIV2K: {}",
        match floor {
            Some(true) => "beaten",
            Some(false) => "NOT beaten",
            None => "not run (set VITSR_DIV2K and VITSR_DIV2K_CKPT)",
        }
    );
    check(stated && floor != Some(false), detail)
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient correctness", gradients),
        (2, "metric golden values", metrics),
        (3, "composite objective", objective),
        (4, "residual wiring oracle", wiring),
        (5, "overfit sanity", overfit),
        (6, "two-stage effect", two_stage),
        (7, "protocol conformance", protocol),
        (8, "persistence", persistence),
        (9, "full-scale non-reproducibility", scale_statement),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(d) => println!("criterion {id} ({name}): PASS: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
