//! Training pairs for both stages, dataset manifests and a synthetic texture
//! generator.
//!
//! A dataset root holds `train/` and `val/` folders of PNG files. Stage 1
//! pairs map the luma of a crop (replicated to three channels) to the crop
//! itself; Stage 2 pairs map a bicubic down-then-up copy to the crop.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::imageops::{bicubic_resize, load_png, png_dimensions, rgb_to_gray, save_png, ImageRGB};

/// Training task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Grayscale input, color target.
    Colorization,
    /// Bicubic-degraded input, original target.
    SuperResolution,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Colorization => "colorization",
            Stage::SuperResolution => "super_resolution",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Where a split lives and how it is cropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub crop_size: usize,
    pub scale: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            root: root.into(),
            split,
            crop_size: 256,
            scale: 4,
            seed: 0,
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.split.dir_name())
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.scale == 0 || self.crop_size % self.scale != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of scale {}",
                self.crop_size, self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

/// Sorted list of usable images, cached as `path<TAB>width<TAB>height` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().map(|e| e.path.as_path())
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.path.display(), e.width, e.height))
            .collect()
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || {
                Error::format(
                    origin,
                    format!("line {}: expected path, width, height", n + 1),
                )
            };
            if fields.len() != 3 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                width: fields[1].parse().map_err(|_| bad())?,
                height: fields[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// Result of scanning a split directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub manifest: Manifest,
    /// Files that were found but rejected, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lists the PNG files of a split that are at least `crop_size` on both
/// sides, in lexicographic order.
pub fn scan_dataset(spec: &DatasetSpec) -> Result<ScanReport> {
    spec.validate()?;
    scan_dir(&spec.dir(), spec.crop_size)
}

/// [`scan_dataset`] for an arbitrary directory of PNG files.
pub fn scan_dir(dir: &Path, crop_size: usize) -> Result<ScanReport> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut manifest = Manifest::default();
    let mut skipped = Vec::new();
    for path in sorted_pngs(dir)? {
        match png_dimensions(&path) {
            Ok((width, height)) if width >= crop_size && height >= crop_size => {
                manifest.entries.push(ManifestEntry {
                    path,
                    width,
                    height,
                })
            }
            Ok((width, height)) => {
                let reason = format!("{width}x{height} is smaller than crop {crop_size}");
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push((path, reason));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if manifest.is_empty() {
        return Err(Error::Data(format!(
            "no usable images in {} ({} skipped)",
            dir.display(),
            skipped.len()
        )));
    }
    Ok(ScanReport { manifest, skipped })
}

/// Decoded images of a manifest, kept in memory for the whole run.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub paths: Vec<PathBuf>,
    pub images: Vec<ImageRGB>,
}

impl ImageSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let images = manifest.paths().map(load_png).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            paths: manifest.paths().map(Path::to_path_buf).collect(),
            images,
        })
    }

    /// Scans and decodes one split.
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        Self::load(&scan_dataset(spec)?.manifest)
    }

    pub fn from_images(images: Vec<ImageRGB>) -> Self {
        Self {
            paths: (0..images.len())
                .map(|i| PathBuf::from(format!("#{i}")))
                .collect(),
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One input/target pair, each `[3, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub stage: Stage,
}

impl TrainPair {
    fn check(&self) {
        debug_assert_eq!(self.input.shape(), self.target.shape());
        debug_assert!(self
            .input
            .data()
            .iter()
            .chain(self.target.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Bicubic `1/scale` then bicubic back to the crop size.
pub fn degrade(hr: &ImageRGB, scale: usize) -> Result<ImageRGB> {
    let (h, w) = (hr.height(), hr.width());
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(dim_err!("{h}x{w} crop not divisible by scale {scale}"));
    }
    let lr = bicubic_resize(hr, h / scale, w / scale)?;
    bicubic_resize(&lr, h, w)
}

pub fn make_sr_pair(hr: &ImageRGB, scale: usize) -> Result<TrainPair> {
    let input = degrade(hr, scale)?;
    let pair = TrainPair {
        input: input.to_tensor(),
        target: hr.to_tensor(),
        stage: Stage::SuperResolution,
    };
    pair.check();
    Ok(pair)
}

pub fn make_colorization_pair(hr: &ImageRGB) -> TrainPair {
    let pair = TrainPair {
        input: rgb_to_gray(hr).to_rgb().to_tensor(),
        target: hr.to_tensor(),
        stage: Stage::Colorization,
    };
    pair.check();
    pair
}

pub fn make_pair(hr: &ImageRGB, stage: Stage, scale: usize) -> Result<TrainPair> {
    match stage {
        Stage::Colorization => Ok(make_colorization_pair(hr)),
        Stage::SuperResolution => make_sr_pair(hr, scale),
    }
}

/// Square crop with a uniformly drawn top-left corner.
pub fn random_crop(img: &ImageRGB, size: usize, rng: &mut impl Rng) -> Result<ImageRGB> {
    if size > img.height() || size > img.width() {
        return Err(dim_err!(
            "crop {size} larger than {}x{} image",
            img.height(),
            img.width()
        ));
    }
    let top = rng.gen_range(0..=img.height() - size);
    let left = rng.gen_range(0..=img.width() - size);
    img.crop(top, left, size, size)
}

/// Pairs stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl Batch {
    pub fn stack(pairs: &[TrainPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
        let item = first.input.shape().to_vec();
        let mut shape = vec![pairs.len()];
        shape.extend_from_slice(&item);
        let mut input = Vec::with_capacity(pairs.len() * first.input.len());
        let mut target = Vec::with_capacity(input.capacity());
        for p in pairs {
            if p.input.shape() != item.as_slice() || p.target.shape() != item.as_slice() {
                return Err(dim_err!("batch items have differing shapes"));
            }
            input.extend_from_slice(p.input.data());
            target.extend_from_slice(p.target.data());
        }
        Ok(Self {
            input: Tensor::new(shape.clone(), input)?,
            target: Tensor::new(shape, target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub stage: Stage,
    pub crop_size: usize,
    pub scale: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn batches_per_epoch(&self, images: usize) -> usize {
        if self.batch_size == 0 {
            0
        } else {
            images / self.batch_size
        }
    }

    /// Shuffled, cropped batches of one epoch. The sequence depends only on
    /// the plan, the images and `epoch`.
    pub fn epoch<'a>(&self, images: &'a ImageSet, epoch: u64) -> BatchIterator<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        BatchIterator {
            images,
            order,
            next: 0,
            plan: *self,
            rng,
        }
    }
}

/// Iterator over the full batches of one epoch; a trailing partial batch is
/// dropped.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    images: &'a ImageSet,
    order: Vec<usize>,
    next: usize,
    plan: BatchPlan,
    rng: ChaCha8Rng,
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.plan.batch_size;
        if b == 0 || self.next + b > self.order.len() {
            return None;
        }
        let idx = &self.order[self.next..self.next + b];
        self.next += b;
        let pairs: Result<Vec<TrainPair>> = idx
            .iter()
            .map(|&i| {
                let crop = random_crop(&self.images.images[i], self.plan.crop_size, &mut self.rng)?;
                make_pair(&crop, self.plan.stage, self.plan.scale)
            })
            .collect();
        Some(pairs.and_then(|p| Batch::stack(&p)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self
            .plan
            .batches_per_epoch(self.order.len() - self.next.min(self.order.len()));
        (n, Some(n))
    }
}

/// Center-crop pairs used for validation, in manifest order.
pub fn validation_pairs(
    images: &ImageSet,
    stage: Stage,
    crop_size: usize,
    scale: usize,
) -> Result<Vec<TrainPair>> {
    images
        .images
        .iter()
        .map(|img| make_pair(&img.center_crop(crop_size, crop_size)?, stage, scale))
        .collect()
}

/// Renders synthetic image `index` of the stream identified by `seed`: a
/// colored linear gradient, Gaussian color blobs and oriented sinusoid
/// textures at random frequencies.
pub fn render_synthetic(size: usize, seed: u64, index: u64) -> Result<ImageRGB> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };

    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Blob {
        cx: f64,
        cy: f64,
        inv2s2: f64,
        amp: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(3..=6))
        .map(|_| {
            let sigma = s * rng.gen_range(0.05..0.25);
            let c = color(&mut rng);
            let sign = if rng.gen() { 1.0 } else { -1.0 };
            Blob {
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                inv2s2: 1.0 / (2.0 * sigma * sigma),
                amp: c.map(|v| sign * 0.6 * v),
            }
        })
        .collect();

    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let max_cycles = (s / 4.0).max(2.0);
    let waves: Vec<Wave> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let cycles = rng.gen_range(2.0..=max_cycles);
            let theta = rng.gen_range(0.0..PI);
            let k = 2.0 * PI * cycles / s;
            let a = rng.gen_range(0.05..0.2);
            let c = color(&mut rng);
            Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: c.map(|v| a * (0.5 + v)),
            }
        })
        .collect();

    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx - s / 2.0) * dx + (fy - s / 2.0) * dy) / s + 0.5).clamp(0.0, 1.0);
            let mut rgb = [0.0f64; 3];
            for c in 0..3 {
                rgb[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for b in &blobs {
                let g = (-((fx - b.cx).powi(2) + (fy - b.cy).powi(2)) * b.inv2s2).exp();
                for c in 0..3 {
                    rgb[c] += b.amp[c] * g;
                }
            }
            for w in &waves {
                let v = (w.kx * fx + w.ky * fy + w.phase).sin();
                for c in 0..3 {
                    rgb[c] += w.amp[c] * v;
                }
            }
            px.extend(rgb.iter().map(|&v| v as f32));
        }
    }
    ImageRGB::new(size, size, px)
}

/// Writes `count` synthetic PNGs (`img_0000.png`, ...) to `out_dir`.
pub fn generate_synthetic(
    count: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    write_synthetic(out_dir, seed, 0..count as u64, size)
}

fn write_synthetic(
    out_dir: &Path,
    seed: u64,
    indices: std::ops::Range<u64>,
    size: usize,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for i in indices {
        let path = out_dir.join(format!("img_{i:04}.png"));
        save_png(&render_synthetic(size, seed, i)?, &path)?;
        manifest.entries.push(ManifestEntry {
            path,
            width: size,
            height: size,
        });
    }
    Ok(manifest)
}

/// Writes a `train/` and `val/` dataset from one seeded stream: the first
/// `count - val_count` images go to `train/`, the rest to `val/`.
pub fn generate_synthetic_dataset(
    root: &Path,
    count: usize,
    val_count: usize,
    size: usize,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if val_count >= count {
        return Err(Error::Config(format!(
            "val_count {val_count} leaves no training images out of {count}"
        )));
    }
    let n_train = (count - val_count) as u64;
    let train = write_synthetic(&root.join("train"), seed, 0..n_train, size)?;
    let val = write_synthetic(&root.join("val"), seed, n_train..count as u64, size)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::psnr;

    fn checkerboard(size: usize) -> ImageRGB {
        let px = (0..size * size)
            .flat_map(|i| {
                let v = if (i / size + i % size) % 2 == 0 {
                    0.9
                } else {
                    0.1
                };
                [v, v, v]
            })
            .collect();
        ImageRGB::new(size, size, px).unwrap()
    }

    fn smooth(size: usize) -> ImageRGB {
        let px = (0..size * size)
            .flat_map(|i| {
                let (y, x) = ((i / size) as f32, (i % size) as f32);
                [x / size as f32, y / size as f32, 0.5]
            })
            .collect();
        ImageRGB::new(size, size, px).unwrap()
    }

    #[test]
    fn constant_crop_is_fixed_by_degradation() {
        let img = ImageRGB::filled(32, 32, [0.3, 0.6, 0.9]).unwrap();
        let pair = make_sr_pair(&img, 4).unwrap();
        for (a, b) in pair.input.data().iter().zip(pair.target.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn degradation_hurts_high_frequencies_more() {
        let psnr_of = |img: &ImageRGB| psnr(&degrade(img, 4).unwrap(), img).unwrap();
        assert!(psnr_of(&smooth(64)) > psnr_of(&checkerboard(64)));
    }

    #[test]
    fn sr_pair_rejects_indivisible_size() {
        let img = ImageRGB::filled(30, 30, [0.5; 3]).unwrap();
        assert!(make_sr_pair(&img, 4).is_err());
    }

    #[test]
    fn default_scale_gives_64_pixel_intermediate() {
        let spec = DatasetSpec::new("x", Split::Train);
        assert_eq!(spec.crop_size / spec.scale, 64);
    }

    #[test]
    fn colorization_pairs() {
        let gray = ImageRGB::new(
            2,
            2,
            vec![0.2, 0.2, 0.2, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let pair = make_colorization_pair(&gray);
        for (a, b) in pair.input.data().iter().zip(pair.target.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let red = ImageRGB::filled(4, 4, [1.0, 0.0, 0.0]).unwrap();
        let pair = make_colorization_pair(&red);
        assert!(pair.input.data().iter().all(|&v| (v - 0.299).abs() < 1e-6));

        let img = render_synthetic(16, 3, 0).unwrap();
        let pair = make_colorization_pair(&img);
        let n = 16 * 16;
        let d = pair.input.data();
        for i in 0..n {
            assert_eq!(d[i], d[n + i]);
            assert_eq!(d[i], d[2 * n + i]);
        }
    }

    #[test]
    fn random_crop_bounds() {
        let img = render_synthetic(20, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&img, 20, &mut rng).unwrap(), img);
        let c = random_crop(&img, 8, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (8, 8));
        assert!(random_crop(&img, 21, &mut rng).is_err());
    }

    fn set(n: usize, size: usize) -> ImageSet {
        ImageSet::from_images(
            (0..n)
                .map(|i| render_synthetic(size, 9, i as u64).unwrap())
                .collect(),
        )
    }

    #[test]
    fn partial_batch_dropped() {
        let images = set(10, 16);
        let plan = BatchPlan {
            stage: Stage::SuperResolution,
            crop_size: 8,
            scale: 4,
            batch_size: 4,
            seed: 1,
        };
        let batches: Vec<Batch> = plan.epoch(&images, 0).map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 2);
        assert_eq!(plan.batches_per_epoch(10), 2);
        assert_eq!(batches[0].input.shape(), &[4, 3, 8, 8]);
    }

    #[test]
    fn batches_are_deterministic_per_epoch() {
        let images = set(6, 24);
        let plan = BatchPlan {
            stage: Stage::Colorization,
            crop_size: 16,
            scale: 4,
            batch_size: 2,
            seed: 5,
        };
        let run = |epoch| {
            plan.epoch(&images, epoch)
                .map(|b| b.unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn synthetic_images_have_chroma_and_detail() {
        for i in 0..8 {
            let img = render_synthetic(96, 7, i).unwrap();
            assert!(img.mean_channel_spread() > 0.05, "image {i} too gray");
            let p = psnr(&degrade(&img, 4).unwrap(), &img).unwrap();
            assert!(p.is_finite());
        }
    }

    #[test]
    fn synthetic_files_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(16, 96, 7, a.path()).unwrap();
        generate_synthetic(16, 96, 7, b.path()).unwrap();
        assert_eq!(ma.len(), 16);
        for e in &ma.entries {
            let name = e.path.file_name().unwrap();
            assert_eq!(
                fs::read(&e.path).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn scan_skips_undersized_and_is_stable() {
        let root = tempfile::tempdir().unwrap();
        let train = root.path().join("train");
        generate_synthetic(3, 32, 1, &train).unwrap();
        save_png(
            &render_synthetic(16, 1, 99).unwrap(),
            train.join("small.png"),
        )
        .unwrap();
        fs::write(train.join("notes.txt"), "not an image").unwrap();
        let mut spec = DatasetSpec::new(root.path(), Split::Train);
        spec.crop_size = 32;
        let a = scan_dataset(&spec).unwrap();
        assert_eq!(a.manifest.len(), 3);
        assert_eq!(a.skipped.len(), 1);
        let b = scan_dataset(&spec).unwrap();
        assert_eq!(a, b);

        let tsv = root.path().join("manifest.tsv");
        a.manifest.write(&tsv).unwrap();
        assert_eq!(Manifest::read(&tsv).unwrap(), a.manifest);
    }

    #[test]
    fn empty_split_is_an_error() {
        let root = tempfile::tempdir().unwrap();
        fs::create_dir(root.path().join("val")).unwrap();
        let spec = DatasetSpec::new(root.path(), Split::Val);
        assert!(matches!(scan_dataset(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_splits_are_disjoint() {
        let root = tempfile::tempdir().unwrap();
        let (train, val) = generate_synthetic_dataset(root.path(), 6, 2, 16, 3).unwrap();
        assert_eq!((train.len(), val.len()), (4, 2));
        for p in train.paths() {
            assert!(val.paths().all(|q| q != p));
        }
        // val images continue the same stream rather than repeating it
        let first_val = load_png(&val.entries[0].path).unwrap();
        assert_eq!(
            to_bytes(&first_val),
            to_bytes(&render_synthetic(16, 3, 4).unwrap())
        );
    }

    fn to_bytes(img: &ImageRGB) -> Vec<u8> {
        crate::imageops::to_rgb8(img)
    }
}
