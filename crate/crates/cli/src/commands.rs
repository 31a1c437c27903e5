use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vitsr::data::{
    generate_synthetic, generate_synthetic_dataset, scan_dir, validation_pairs, DatasetSpec,
    ImageSet, Split,
};
use vitsr::gradcheck::run_suite;
use vitsr::imageops::{load_png, psnr, save_png, ssim, ImageRGB};
use vitsr::model::VitSr;
use vitsr::training::{
    evaluate, run_stage, transfer_stage1_to_stage2, Checkpoint, RunOptions, Stage, StageData,
};
use vitsr::Error;

use crate::config::{Resolved, RunConfig};
use crate::infer::upscale;
use crate::TrainArgs;

/// Raised when the finite-difference suite reports a mismatch.
#[derive(Debug)]
pub struct GradcheckFailed(pub usize);

impl fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradcheck failed for {} check(s)", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn make_synthetic(
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
    val_count: Option<usize>,
) -> Result<()> {
    let val = val_count.unwrap_or(count / 4);
    if val == 0 {
        let m = generate_synthetic(count, size, seed, out)?;
        println!("wrote {} images to {}", m.len(), out.display());
    } else {
        let (train, val) = generate_synthetic_dataset(out, count, val, size, seed)?;
        println!(
            "wrote {} train and {} val images to {}",
            train.len(),
            val.len(),
            out.display()
        );
    }
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.dataset {
        rc.set("dataset", &d.display().to_string())?;
    }
    if let Some(s) = args.seed {
        rc.set("seed", &s.to_string())?;
    }
    for pair in &args.overrides {
        rc.set_pair(pair)?;
    }
    Ok(rc)
}

fn open_split(root: &Path, split: Split, crop: usize, scale: usize, seed: u64) -> Result<ImageSet> {
    let spec = DatasetSpec {
        crop_size: crop,
        scale,
        seed,
        ..DatasetSpec::new(root, split)
    };
    Ok(ImageSet::open(&spec)?)
}

/// Echoes the configuration, builds the model and trains one stage.
fn train(
    stage: Stage,
    args: &TrainArgs,
    resolved: &Resolved,
    extra: &[String],
    prepare: impl FnOnce(&mut VitSr<f32>) -> Result<()>,
) -> Result<()> {
    let run_dir = args.run_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(match stage {
            Stage::Colorization => "pretrain",
            Stage::SuperResolution => "finetune",
        })
    });
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let mut echo = resolved.to_text();
    for line in extra {
        echo.push_str(&format!("# {line}\n"));
    }
    let echo_path = run_dir.join("config.txt");
    fs::write(&echo_path, echo).map_err(|e| io_err(&echo_path, e))?;

    let (m, t) = (&resolved.model, &resolved.train);
    let root = resolved.dataset()?;
    let train_set = open_split(root, Split::Train, m.image_size, t.scale, t.seed)?;
    let val_set = open_split(root, Split::Val, m.image_size, t.scale, t.seed)?;
    log::info!(
        "{stage}: {} train / {} val images, {} parameters",
        train_set.len(),
        val_set.len(),
        m.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>()
    );

    let mut model = VitSr::init(m.clone(), t.seed)?;
    if let Some(path) = &args.init_encoder {
        let rep = model.load_external_encoder(path)?;
        println!(
            "loaded {} encoder tensors from {} ({} skipped{})",
            rep.matched,
            path.display(),
            rep.mismatched.len(),
            if rep.resized_pos_embed {
                ", positional table resized"
            } else {
                ""
            }
        );
    }
    prepare(&mut model)?;

    let outcome = run_stage(
        &mut model,
        StageData {
            train: &train_set,
            val: &val_set,
        },
        t,
        &RunOptions {
            run_dir: Some(run_dir.clone()),
        },
    )?;
    let best = &outcome.best.meta;
    println!(
        "{stage}: {} epochs{}, best val PSNR {} at epoch {}; run dir {}",
        outcome.log.len(),
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        },
        best.best_val_psnr
            .map_or("n/a".into(), |p| format!("{p:.3} dB")),
        best.epoch.map_or("n/a".into(), |e| e.to_string()),
        run_dir.display()
    );
    Ok(())
}

pub fn pretrain(args: &TrainArgs) -> Result<()> {
    let resolved = load_run_config(args)?.resolve(Stage::Colorization)?;
    train(Stage::Colorization, args, &resolved, &[], |_| Ok(()))
}

pub fn finetune(args: &TrainArgs, init_from: Option<&Path>, reset_output: bool) -> Result<()> {
    let rc = load_run_config(args)?;
    let Some(path) = init_from else {
        let resolved = rc.resolve(Stage::SuperResolution)?;
        return train(Stage::SuperResolution, args, &resolved, &[], |_| {
            println!("random initialization (ablation mode)");
            Ok(())
        });
    };
    let ckpt = Checkpoint::load(path)?;
    let resolved = rc.resolve_from(Stage::SuperResolution, Some(&ckpt.meta.model))?;
    let mut extra = vec![format!("init_from = {}", path.display())];
    if !reset_output {
        extra.push("keep_output_conv = true".into());
    }
    train(Stage::SuperResolution, args, &resolved, &extra, |model| {
        let rep = transfer_stage1_to_stage2(&ckpt, model, reset_output)?;
        println!(
            "copied {} tensors from {}{}",
            rep.copied,
            path.display(),
            if rep.output_reset {
                " (output convolution reset)"
            } else {
                ""
            }
        );
        Ok(())
    })
}

fn load_sr_checkpoint(path: &Path) -> Result<(Checkpoint, VitSr<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.stage != Stage::SuperResolution {
        return Err(Error::Contract(format!(
            "{} is a {} checkpoint; a super_resolution checkpoint is required",
            path.display(),
            ckpt.meta.stage
        ))
        .into());
    }
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn checkpoint_scale(ckpt: &Checkpoint) -> usize {
    ckpt.meta.train.as_ref().map_or(4, |t| t.scale)
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| io_err(input, e))? {
        let p = entry.map_err(|e| io_err(input, e))?.path();
        if p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", input.display())).into());
    }
    Ok(files)
}

pub fn infer(ckpt_path: &Path, input: &Path, out: &Path, scale: Option<usize>) -> Result<()> {
    let (ckpt, model) = load_sr_checkpoint(ckpt_path)?;
    let scale = scale.unwrap_or_else(|| checkpoint_scale(&ckpt));
    let files = input_files(input)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for file in &files {
        let lr = load_png(file)?;
        let up = upscale(&model, &lr, scale)?;
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad file name {}", file.display()))?;
        save_png(&up.output, out.join(format!("{stem}.png")))?;
        save_png(&up.bicubic, out.join(format!("{stem}_bicubic.png")))?;
        println!(
            "{}: {}x{} -> {}x{} ({} tiles)",
            file.display(),
            lr.width(),
            lr.height(),
            up.output.width(),
            up.output.height(),
            up.tiles
        );
    }
    println!("wrote {} images to {}", 2 * files.len(), out.display());
    Ok(())
}

/// Mean metrics of a checkpoint and of its bicubic input.
#[derive(Debug, Serialize)]
struct EvalReport {
    psnr_model: f64,
    ssim_model: f64,
    psnr_bicubic: f64,
    ssim_bicubic: f64,
    n_images: usize,
}

fn image_of(t: &[f32], s: usize) -> Result<ImageRGB> {
    Ok(ImageRGB::from_chw(s, s, t)?)
}

pub fn eval(ckpt_path: &Path, dataset: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let (ckpt, model) = load_sr_checkpoint(ckpt_path)?;
    let s = model.config().image_size;
    let scale = checkpoint_scale(&ckpt);
    let split = match split {
        "val" => Split::Val,
        "train" => Split::Train,
        other => return Err(Error::Config(format!("unknown split {other:?}")).into()),
    };
    let sub = dataset.join(split.dir_name());
    let dir = if sub.is_dir() {
        sub
    } else {
        dataset.to_path_buf()
    };
    let images = ImageSet::load(&scan_dir(&dir, s)?.manifest)?;
    let pairs = validation_pairs(&images, Stage::SuperResolution, s, scale)?;
    let batch = ckpt.meta.train.as_ref().map_or(4, |t| t.batch_size);
    let model_eval = evaluate(&model, &pairs, batch)?;
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for pair in &pairs {
        let base = image_of(pair.input.data(), s)?;
        let target = image_of(pair.target.data(), s)?;
        p_sum += psnr(&base, &target)?;
        s_sum += ssim(&base, &target)?;
    }
    let n = pairs.len() as f64;
    let report = EvalReport {
        psnr_model: model_eval.psnr,
        ssim_model: model_eval.ssim,
        psnr_bicubic: p_sum / n,
        ssim_bicubic: s_sum / n,
        n_images: pairs.len(),
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    let path = out.map_or_else(|| ckpt_path.with_extension("eval.json"), Path::to_path_buf);
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn gradcheck(seed: u64, instances: usize, model_samples: usize) -> Result<()> {
    let report = run_suite(instances, model_samples, seed)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(GradcheckFailed(report.failures().len()).into())
    }
}
