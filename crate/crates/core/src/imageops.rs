//! Deterministic image primitives: Catmull-Rom resampling, luma conversion,
//! PSNR/SSIM metrics and 8-bit PNG I/O.
//!
//! Images are stored interleaved (`H x W x 3`) with values in `[0, 1]`.

use std::path::Path;

use crate::diffcore::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `H x W x 3` RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// `H x W` single-channel image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageRGB {
    /// Builds an image from interleaved RGB values; values are clamped to `[0, 1]`.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(dim_err!(
                "image dimensions must be positive, got {height}x{width}"
            ));
        }
        if pixels.len() != height * width * 3 {
            return Err(dim_err!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("pixel value {v}")));
        }
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-planar `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let data = self
            .to_chw()
            .into_iter()
            .map(|v| E::from_f64_lossy(v as f64))
            .collect();
        Tensor::new([3, self.height, self.width], data).expect("image shape is valid")
    }

    /// Inverse of [`ImageRGB::to_chw`]; values are clamped to `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let n = height * width;
        if chw.len() != 3 * n {
            return Err(dim_err!(
                "planar buffer of {} values does not match {height}x{width}x3",
                chw.len()
            ));
        }
        let mut px = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                px[i * 3 + c] = chw[c * n + i];
            }
        }
        Self::new(height, width, px)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(dim_err!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut px = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            px.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Ok(Self {
            height,
            width,
            pixels: px,
        })
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(dim_err!(
                "center crop {height}x{width} larger than {}x{}",
                self.height,
                self.width
            ));
        }
        self.crop(
            (self.height - height) / 2,
            (self.width - width) / 2,
            height,
            width,
        )
    }

    /// Mean over pixels of `max(channel) - min(channel)`.
    pub fn mean_channel_spread(&self) -> f64 {
        let total: f64 = self
            .pixels
            .chunks(3)
            .map(|p| {
                let hi = p[0].max(p[1]).max(p[2]);
                let lo = p[0].min(p[1]).min(p[2]);
                (hi - lo) as f64
            })
            .sum();
        total / (self.height * self.width) as f64
    }
}

impl ImageGray {
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(dim_err!(
                "gray image {height}x{width} with {} values",
                pixels.len()
            ));
        }
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Replicates the luma into all three channels.
    pub fn to_rgb(&self) -> ImageRGB {
        ImageRGB {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// The four tap weights for a sample at fractional offset `phase` in `[0, 1)`
/// past the second tap.
pub fn cubic_weights(phase: f64) -> [f64; 4] {
    [
        cubic_kernel(phase + 1.0),
        cubic_kernel(phase),
        cubic_kernel(1.0 - phase),
        cubic_kernel(2.0 - phase),
    ]
}

/// Tap indices (clamped to the edge) and weights for every output position
/// along one axis.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let phase = src - base;
            let base = base as isize;
            let idx = [-1isize, 0, 1, 2].map(|d| (base + d).clamp(0, in_len as isize - 1) as usize);
            (idx, cubic_weights(phase))
        })
        .collect()
}

/// Unclamped separable bicubic resize of `planes` stacked `h x w` planes.
pub fn bicubic_resize_planes(
    src: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(dim_err!("cannot resize {h}x{w} to {out_h}x{out_w}"));
    }
    if src.len() != planes * h * w {
        return Err(dim_err!(
            "plane buffer length {} != {planes}x{h}x{w}",
            src.len()
        ));
    }
    let xt = resample_taps(w, out_w);
    let yt = resample_taps(h, out_h);
    let mut tmp = vec![0.0; planes * h * out_w];
    for (srow, trow) in src.chunks(w).zip(tmp.chunks_mut(out_w)) {
        for (t, (idx, wt)) in trow.iter_mut().zip(&xt) {
            *t = (0..4).map(|i| wt[i] * srow[idx[i]]).sum();
        }
    }
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let tp = &tmp[p * h * out_w..(p + 1) * h * out_w];
        let op = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, (idx, wt)) in yt.iter().enumerate() {
            let orow = &mut op[oy * out_w..(oy + 1) * out_w];
            for (i, &weight) in wt.iter().enumerate() {
                let trow = &tp[idx[i] * out_w..(idx[i] + 1) * out_w];
                for (o, t) in orow.iter_mut().zip(trow) {
                    *o += weight * t;
                }
            }
        }
    }
    Ok(out)
}

/// Separable Catmull-Rom resize with half-pixel centers and clamp-to-edge
/// sampling. Output is clamped to `[0, 1]`.
pub fn bicubic_resize(img: &ImageRGB, out_h: usize, out_w: usize) -> Result<ImageRGB> {
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!(
            "bicubic target size must be positive, got {out_h}x{out_w}"
        ));
    }
    let planes: Vec<f64> = img.to_chw().into_iter().map(f64::from).collect();
    let out = bicubic_resize_planes(&planes, 3, img.height, img.width, out_h, out_w)?;
    let out: Vec<f32> = out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ImageRGB::from_chw(out_h, out_w, &out)
}

pub fn rgb_to_gray(img: &ImageRGB) -> ImageGray {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    ImageGray {
        height: img.height,
        width: img.width,
        pixels: img
            .pixels
            .chunks(3)
            .map(|p| (wr * p[0] + wg * p[1] + wb * p[2]).clamp(0.0, 1.0))
            .collect(),
    }
}

fn same_dims(x: &ImageRGB, y: &ImageRGB) -> Result<()> {
    if x.height != y.height || x.width != y.width {
        return Err(dim_err!(
            "image sizes differ: {}x{} vs {}x{}",
            x.height,
            x.width,
            y.height,
            y.width
        ));
    }
    Ok(())
}

pub fn mse(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    same_dims(x, y)?;
    let total: f64 = x
        .pixels
        .iter()
        .zip(&y.pixels)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(total / x.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0 over all channels.
/// Identical images give `f64::INFINITY`.
pub fn psnr(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * src[y * w + clamp(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, k) in kernel.iter().enumerate() {
            let sy = clamp(y as isize + t as isize - r, h);
            for x in 0..w {
                out[y * w + x] += k * tmp[sy * w + x];
            }
        }
    }
    out
}

/// Mean SSIM over all pixels and channels.
///
/// Local statistics use an 11x11 Gaussian window (sigma 1.5) evaluated at
/// every pixel with clamp-to-edge boundaries, so the map has the image's
/// size. `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    same_dims(x, y)?;
    if x.height.min(x.width) < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height, x.width);
    let kernel = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (xp, yp) = (x.to_chw(), y.to_chw());
    let n = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = xp[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = yp[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let mu_a = blur_plane(&a, h, w, &kernel);
        let mu_b = blur_plane(&b, h, w, &kernel);
        let e_aa = blur_plane(&aa, h, w, &kernel);
        let e_bb = blur_plane(&bb, h, w, &kernel);
        let e_ab = blur_plane(&ab, h, w, &kernel);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (3 * n) as f64)
}

/// Reads any PNG as 8-bit RGB, mapping `v -> v / 255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    ImageRGB::new(h as usize, w as usize, px)
}

/// Quantizes `round(v * 255)` (values already lie in `[0, 1]`).
pub fn to_rgb8(img: &ImageRGB) -> Vec<u8> {
    img.pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_png(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, to_rgb8(img))
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Width and height from the PNG header without decoding pixels.
pub fn png_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((w as usize, h as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// Smooth test pattern with some detail, a stand-in for a natural image.
    fn smooth_image(h: usize, w: usize) -> ImageRGB {
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
                px.push(0.5 + 0.4 * (6.0 * fx).sin() * (4.0 * fy).cos());
                px.push(fy);
                px.push(0.5 + 0.3 * (9.0 * (fx + fy)).sin());
            }
        }
        ImageRGB::new(h, w, px).unwrap()
    }

    #[test]
    fn kernel_weights_at_half_phase() {
        let w = cubic_weights(0.5);
        let want = [-0.0625, 0.5625, 0.5625, -0.0625];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..=1000 {
            let s: f64 = cubic_weights(i as f64 / 1000.0).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = ImageRGB::filled(13, 9, [0.25, 0.5, 0.75]).unwrap();
        for (h, w) in [(4, 3), (13, 9), (52, 36), (7, 20)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            for px in out.pixels().chunks(3) {
                assert!((px[0] - 0.25).abs() < 1e-6);
                assert!((px[1] - 0.5).abs() < 1e-6);
                assert!((px[2] - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = random_image(3, 17, 11);
        assert_eq!(bicubic_resize(&img, 17, 11).unwrap(), img);
    }

    #[test]
    fn zero_target_rejected() {
        let img = random_image(3, 4, 4);
        assert!(matches!(
            bicubic_resize(&img, 0, 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn resize_output_in_unit_range() {
        // overshoot of the negative lobes must be clamped
        let mut px = vec![0.0; 8 * 8 * 3];
        for y in 0..8 {
            for x in 0..8 {
                let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                px[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3].copy_from_slice(&[v, v, v]);
            }
        }
        let img = ImageRGB::new(8, 8, px).unwrap();
        let out = bicubic_resize(&img, 29, 29).unwrap();
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degrade_round_trip_sits_between_identity_and_noise() {
        let img = smooth_image(64, 64);
        let lr = bicubic_resize(&img, 16, 16).unwrap();
        let up = bicubic_resize(&lr, 64, 64).unwrap();
        let p = psnr(&up, &img).unwrap();
        let noise = psnr(&random_image(1, 64, 64), &random_image(2, 64, 64)).unwrap();
        assert!(p.is_finite());
        assert!(p > noise);
    }

    #[test]
    fn gray_conversion() {
        let img = ImageRGB::new(1, 3, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let g = rgb_to_gray(&img);
        assert!((g.pixels()[0] - 1.0).abs() < 1e-6);
        assert!((g.pixels()[1] - 0.299).abs() < 1e-7);
        assert_eq!(g.pixels()[2], 0.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRGB::filled(8, 8, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageRGB::filled(8, 8, [0.25, 0.25, 0.25]).unwrap();
        let c = ImageRGB::filled(8, 8, [0.75, 0.75, 0.75]).unwrap();
        // difference 0.5 -> MSE 0.25
        assert!((psnr(&b, &c).unwrap() - 6.020599913279624).abs() < 1e-9);
        let d = ImageRGB::filled(4, 4, [0.0, 0.0, 0.0]).unwrap();
        assert!(psnr(&a, &d).is_err());
    }

    #[test]
    fn psnr_monotone_in_noise_amplitude() {
        let img = ImageRGB::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pattern: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.05, 0.1, 0.2, 0.4] {
            let noisy =
                ImageRGB::new(16, 16, pattern.iter().map(|p| 0.5 + amp * p).collect()).unwrap();
            let p = psnr(&img, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_constant_images() {
        let a = ImageRGB::filled(16, 16, [0.0; 3]).unwrap();
        let b = ImageRGB::filled(16, 16, [1.0; 3]).unwrap();
        let c1 = 1e-4;
        assert!((ssim(&a, &b).unwrap() - c1 / (1.0 + c1)).abs() < 1e-7);
    }

    #[test]
    fn ssim_needs_window_sized_images() {
        let a = random_image(1, 10, 20);
        assert!(matches!(ssim(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn chw_round_trip() {
        let img = random_image(5, 6, 7);
        assert_eq!(ImageRGB::from_chw(6, 7, &img.to_chw()).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = random_image(8, 5, 9);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(png_dimensions(&path).unwrap(), (9, 5));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(to_rgb8(&back), to_rgb8(&img));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_identity_symmetry_and_range(seed in 0u64..1000, h in 11usize..20, w in 11usize..20) {
            let x = random_image(seed, h, w);
            let y = random_image(seed + 7, h, w);
            prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
            let s = ssim(&x, &y).unwrap();
            prop_assert_eq!(s, ssim(&y, &x).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_symmetric(seed in 0u64..1000) {
            let x = random_image(seed, 8, 8);
            let y = random_image(seed + 1, 8, 8);
            prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        }

        #[test]
        fn resize_shape_and_range(seed in 0u64..100, h in 1usize..24, w in 1usize..24) {
            let img = random_image(seed, 9, 7);
            let out = bicubic_resize(&img, h, w).unwrap();
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
