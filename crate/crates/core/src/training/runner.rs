use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{AdamW, Checkpoint, CheckpointMeta, Decision, EarlyStopper, Stage, TrainConfig};
use crate::data::{Batch, BatchPlan, ImageSet, TrainPair};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::imageops::{psnr, save_png, ssim, ImageRGB};
use crate::losses::{composite_loss, LossConfig};
use crate::model::VitSr;

pub const LOG_HEADER: &str = "epoch,train_loss,val_psnr,val_ssim,lr,seconds";

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub lr: f64,
    /// Present only when wall-clock logging is enabled.
    pub seconds: Option<f64>,
}

impl TrainLogRecord {
    pub fn to_csv_row(&self) -> String {
        let secs = self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_psnr, self.val_ssim, self.lr, secs
        )
    }
}

/// Training and validation images of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a ImageSet,
    pub val: &'a ImageSet,
}

/// Where run artifacts go.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Receives `train_log.csv`, `best.ckpt`, `last.ckpt` and `samples/`.
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Weights of the epoch with the highest validation PSNR.
    pub best: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    pub stopped_early: bool,
}

/// Mean per-image validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    /// Clamped model outputs in input order.
    pub outputs: Vec<ImageRGB>,
}

fn image_from(t: &[f32], s: usize) -> Result<ImageRGB> {
    ImageRGB::from_chw(s, s, t)
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut VitSr<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let x = tape.input(batch.input.clone())?;
        let t = tape.input(batch.target.clone())?;
        let y = model.forward(&mut tape, x)?;
        let l = composite_loss(&mut tape, y, t, loss_cfg)?;
        let value = tape.item(l) as f64;
        (value, tape.backward(l)?)
    };
    opt.step(model.params_mut(), &grads, lr)?;
    if model.params().iter().any(|p| !p.tensor.is_finite()) {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(loss)
}

/// Runs the model over `pairs` in chunks of `batch_size` and scores the
/// clamped outputs against the targets.
pub fn evaluate(model: &VitSr<f32>, pairs: &[TrainPair], batch_size: usize) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Data("no validation pairs".into()));
    }
    let s = pairs[0].target.shape()[1];
    let mut outputs = Vec::with_capacity(pairs.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = Batch::stack(chunk)?;
        let (out, _) = model.predict(batch.input)?;
        for (o, pair) in out.data().chunks(3 * s * s).zip(chunk) {
            let pred = image_from(o, s)?;
            let target = image_from(pair.target.data(), s)?;
            psnr_sum += psnr(&pred, &target)?;
            ssim_sum += ssim(&pred, &target)?;
            outputs.push(pred);
        }
    }
    let n = pairs.len() as f64;
    Ok(Evaluation {
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        outputs,
    })
}

fn with_context(e: Error, epoch: usize, batch: usize, lr: f64) -> Error {
    match e {
        Error::NonFinite(m) => {
            Error::NonFinite(format!("{m} (epoch {epoch}, batch {batch}, lr {lr:e})"))
        }
        other => other,
    }
}

struct Artifacts {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = BufWriter::new(file);
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn append(&mut self, rec: &TrainLogRecord) -> Result<()> {
        let path = self.dir.join("train_log.csv");
        writeln!(self.log, "{}", rec.to_csv_row())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn samples(&self, epoch: usize, images: &[ImageRGB]) -> Result<()> {
        for (i, img) in images.iter().enumerate() {
            save_png(
                img,
                self.dir.join(format!("samples/epoch_{epoch:04}_{i}.png")),
            )?;
        }
        Ok(())
    }
}

/// Trains one stage: per epoch, shuffled crops from the training images,
/// forward, composite loss, backward and an AdamW step per batch; then
/// validation on center crops, a log record and a checkpoint when the
/// validation PSNR improves. Stops early after `patience` epochs without
/// improvement.
pub fn run_stage(
    model: &mut VitSr<f32>,
    data: StageData<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let s = model.config().image_size;
    let plan = BatchPlan {
        stage: cfg.stage,
        crop_size: s,
        scale: cfg.scale,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    if plan.batches_per_epoch(data.train.len()) == 0 {
        return Err(Error::Data(format!(
            "{} training images cannot fill a batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let val_pairs = crate::data::validation_pairs(data.val, cfg.stage, s, cfg.scale)?;
    let loss_cfg = cfg.loss();
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.optimizer(), model.params());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut artifacts = opts.run_dir.as_deref().map(Artifacts::create).transpose()?;

    let model_cfg = model.config().clone();
    let meta_for = |epoch: Option<usize>, best: Option<f64>| CheckpointMeta {
        stage: cfg.stage,
        epoch,
        best_val_psnr: best.filter(|p| p.is_finite()),
        model: model_cfg.clone(),
        train: Some(cfg.clone()),
        optimizer_state: false,
        optimizer_step: None,
    };
    let mut best = Checkpoint::from_model(model, meta_for(None, None));
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, batch) in plan.epoch(data.train, epoch as u64).enumerate() {
            let batch = batch?;
            let loss = train_step(model, &mut opt, &batch, lr, &loss_cfg)
                .map_err(|e| with_context(e, epoch, bi, lr))?;
            total += loss;
            count += 1;
        }
        let eval = evaluate(model, &val_pairs, cfg.batch_size)
            .map_err(|e| with_context(e, epoch, count, lr))?;
        let seconds = start.elapsed().as_secs_f64();
        let rec = TrainLogRecord {
            epoch,
            train_loss: total / count as f64,
            val_psnr: eval.psnr,
            val_ssim: eval.ssim,
            lr,
            seconds: cfg.log_wall_clock.then_some(seconds),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} val psnr {:.3} ssim {:.4} lr {lr:.3e} ({seconds:.1}s)",
            cfg.stage,
            rec.train_loss,
            rec.val_psnr,
            rec.val_ssim
        );
        let (improved, decision) = stopper.observe(eval.psnr);
        if improved {
            best = Checkpoint::from_model(model, meta_for(Some(epoch), Some(eval.psnr)));
        }
        if let Some(a) = artifacts.as_mut() {
            a.append(&rec)?;
            let n = cfg.sample_images.min(eval.outputs.len());
            a.samples(epoch, &eval.outputs[..n])?;
            if improved {
                best.save(a.dir.join("best.ckpt"))?;
            }
        }
        log.push(rec);
        if decision == Decision::Stop {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    if let Some(a) = artifacts.as_ref() {
        let last_epoch = log.last().map(|r| r.epoch);
        let last = Checkpoint::from_model(model, meta_for(last_epoch, stopper.best()))
            .with_optimizer(&opt, model.params())?;
        last.save(a.dir.join("last.ckpt"))?;
    }
    Ok(StageOutcome {
        best,
        log,
        stopped_early,
    })
}

/// Outcome of loading colorization weights into a super-resolution model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub copied: usize,
    pub total: usize,
    /// Whether the output convolution was zeroed after copying.
    pub output_reset: bool,
}

/// Copies every parameter of a colorization checkpoint into `model`. The
/// architectures must match exactly; the residual mode may differ. With
/// `reset_output`, the output convolution is zeroed afterwards so the
/// fine-tuned network starts from its bicubic input. Optimizer state is never
/// transferred.
pub fn transfer_stage1_to_stage2(
    ckpt: &Checkpoint,
    model: &mut VitSr<f32>,
    reset_output: bool,
) -> Result<TransferReport> {
    if ckpt.meta.stage != Stage::Colorization {
        return Err(Error::Contract(format!(
            "expected a colorization checkpoint, got stage {}",
            ckpt.meta.stage
        )));
    }
    let diff = ckpt.meta.model.architecture_diff(model.config());
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "model config mismatch (checkpoint vs model): {}",
            diff.join("; ")
        )));
    }
    let total = model.params().len();
    let mut copied = 0;
    for (name, src) in ckpt.parameters() {
        let dst = model
            .params_mut()
            .by_name_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        if dst.tensor.shape() != src.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} vs {:?}",
                src.shape(),
                dst.tensor.shape()
            )));
        }
        dst.tensor.data_mut().copy_from_slice(src.data());
        copied += 1;
    }
    if copied != total {
        return Err(Error::Config(format!(
            "checkpoint provides {copied} of {total} parameters"
        )));
    }
    if reset_output {
        model.zero_output_conv();
    }
    Ok(TransferReport {
        copied,
        total,
        output_reset: reset_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_synthetic;
    use crate::model::{ModelConfig, ResidualMode};

    fn images(n: usize, size: usize, seed: u64) -> ImageSet {
        ImageSet::from_images(
            (0..n)
                .map(|i| render_synthetic(size, seed, i as u64).unwrap())
                .collect(),
        )
    }

    fn tiny_cfg(stage: Stage) -> TrainConfig {
        let mut c = TrainConfig::for_stage(stage);
        c.batch_size = 2;
        c.max_epochs = 2;
        c.patience = 1;
        c.lr_init = 1e-3;
        c
    }

    fn tiny_model(residual: ResidualMode) -> VitSr<f32> {
        VitSr::init(
            ModelConfig::small(16, 4, 16, 1, 1, 2).with_residual(residual),
            1,
        )
        .unwrap()
    }

    #[test]
    fn csv_row_format() {
        let r = TrainLogRecord {
            epoch: 3,
            train_loss: 0.25,
            val_psnr: 21.5,
            val_ssim: 0.75,
            lr: 5e-5,
            seconds: None,
        };
        assert_eq!(r.to_csv_row(), "3,0.25,21.5,0.75,0.00005,");
        assert_eq!(
            LOG_HEADER.split(',').count(),
            r.to_csv_row().split(',').count()
        );
    }

    #[test]
    fn one_epoch_smoke() {
        let (train, val) = (images(4, 16, 1), images(2, 16, 2));
        let mut model = tiny_model(ResidualMode::On);
        let mut cfg = tiny_cfg(Stage::SuperResolution);
        cfg.max_epochs = 1;
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        cfg.max_epochs = 2;
        cfg.patience = 1;
        let out = run_stage(
            &mut model,
            StageData {
                train: &train,
                val: &val,
            },
            &cfg,
            &RunOptions::default(),
        )
        .unwrap();
        assert!(!out.log.is_empty());
        assert!(out.log.iter().all(|r| r.train_loss.is_finite()));
        assert_eq!(out.log[0].epoch, 0);
    }

    #[test]
    fn run_dir_artifacts_and_determinism() {
        let (train, val) = (images(4, 16, 3), images(2, 16, 4));
        let run = |dir: &Path| {
            let mut model = tiny_model(ResidualMode::Off);
            let cfg = tiny_cfg(Stage::Colorization);
            let opts = RunOptions {
                run_dir: Some(dir.to_path_buf()),
            };
            let out = run_stage(
                &mut model,
                StageData {
                    train: &train,
                    val: &val,
                },
                &cfg,
                &opts,
            )
            .unwrap();
            (out, model)
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (out_a, model_a) = run(a.path());
        let (_, model_b) = run(b.path());
        let csv_a = fs::read(a.path().join("train_log.csv")).unwrap();
        assert_eq!(csv_a, fs::read(b.path().join("train_log.csv")).unwrap());
        let text = String::from_utf8(csv_a).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(text.lines().count(), out_a.log.len() + 1);
        for (p, q) in model_a.params().iter().zip(model_b.params().iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert!(a.path().join("best.ckpt").exists());
        let last = Checkpoint::load(a.path().join("last.ckpt")).unwrap();
        assert!(last.meta.optimizer_state);
        assert!(last.optimizer(model_a.params()).unwrap().is_some());
        let samples = fs::read_dir(a.path().join("samples")).unwrap().count();
        assert_eq!(samples, 2 * out_a.log.len());
    }

    #[test]
    fn transfer_copies_everything() {
        let src = tiny_model(ResidualMode::Off);
        let ck = Checkpoint::from_model(
            &src,
            CheckpointMeta::untrained(Stage::Colorization, src.config().clone()),
        );
        let mut dst =
            VitSr::init(src.config().clone().with_residual(ResidualMode::On), 99).unwrap();
        let rep = transfer_stage1_to_stage2(&ck, &mut dst, false).unwrap();
        assert_eq!(rep.copied, rep.total);
        for (p, q) in src.params().iter().zip(dst.params().iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert_eq!(dst.config().residual_mode, ResidualMode::On);
    }

    #[test]
    fn transfer_rejects_mismatch_and_wrong_stage() {
        let src = tiny_model(ResidualMode::Off);
        let ck = Checkpoint::from_model(
            &src,
            CheckpointMeta::untrained(Stage::Colorization, src.config().clone()),
        );
        let mut cfg = src.config().clone();
        cfg.decoder_depth = 2;
        let mut other = VitSr::init(cfg, 1).unwrap();
        match transfer_stage1_to_stage2(&ck, &mut other, true) {
            Err(Error::Config(m)) => assert!(m.contains("decoder_depth"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        let sr = Checkpoint::from_model(
            &src,
            CheckpointMeta::untrained(Stage::SuperResolution, src.config().clone()),
        );
        let mut same = tiny_model(ResidualMode::On);
        assert!(matches!(
            transfer_stage1_to_stage2(&sr, &mut same, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nan_aborts_with_diagnostic() {
        let (train, val) = (images(2, 16, 5), images(1, 16, 6));
        let mut model = tiny_model(ResidualMode::On);
        let mut cfg = tiny_cfg(Stage::SuperResolution);
        cfg.lr_init = 1e30;
        // a huge first step leaves finite but enormous weights that overflow
        // during validation
        match run_stage(
            &mut model,
            StageData {
                train: &train,
                val: &val,
            },
            &cfg,
            &RunOptions::default(),
        ) {
            Err(Error::NonFinite(m)) => assert!(m.contains("epoch 0") && m.contains("lr"), "{m}"),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
