//! Whole-image inference with overlapping model-sized tiles.

use vitsr::diffcore::Tensor;
use vitsr::imageops::{bicubic_resize, ImageRGB};
use vitsr::model::{ResidualMode, VitSr};
use vitsr::{Error, Result};

/// Overlap between neighbouring tiles, in output pixels.
pub const TILE_OVERLAP: usize = 32;

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 4;

/// Top-left offsets of tiles of side `tile` covering `len` pixels with at
/// least `overlap` shared pixels; the last tile is flush with the edge.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile.saturating_sub(overlap).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * step)
        .take_while(|&s| s + tile < len)
        .collect();
    starts.push(len - tile);
    starts
}

/// Edge-replicates `img` to at least `min_h x min_w`.
fn pad_replicate(img: &ImageRGB, min_h: usize, min_w: usize) -> Result<ImageRGB> {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    let mut px = Vec::with_capacity(ph * pw * 3);
    for y in 0..ph {
        for x in 0..pw {
            px.extend(img.get(y.min(h - 1), x.min(w - 1)));
        }
    }
    ImageRGB::new(ph, pw, px)
}

/// Result of super-resolving one image.
#[derive(Debug, Clone)]
pub struct Upscaled {
    pub output: ImageRGB,
    pub bicubic: ImageRGB,
    pub tiles: usize,
}

/// Bicubic-upscales `lr` by `scale`, runs the model over overlapping tiles of
/// its input size and averages the overlaps.
///
/// With the residual connection on, the tiles' residuals are averaged and
/// added to the bicubic image once, so a network whose residual is zero
/// reproduces the bicubic baseline exactly. Without it, outputs are averaged.
pub fn upscale(model: &VitSr<f32>, lr: &ImageRGB, scale: usize) -> Result<Upscaled> {
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let (h, w) = (lr.height() * scale, lr.width() * scale);
    let bicubic = bicubic_resize(lr, h, w)?;
    let s = model.config().image_size;
    let padded = pad_replicate(&bicubic, s, s)?;
    let (ph, pw) = (padded.height(), padded.width());
    let residual = model.config().residual_mode == ResidualMode::On;

    let tiles: Vec<(usize, usize)> = tile_starts(ph, s, TILE_OVERLAP)
        .into_iter()
        .flat_map(|y| {
            tile_starts(pw, s, TILE_OVERLAP)
                .into_iter()
                .map(move |x| (y, x))
        })
        .collect();
    let mut acc = vec![0.0f64; 3 * ph * pw];
    let mut count = vec![0u32; ph * pw];
    let plane = s * s;
    for group in tiles.chunks(TILE_BATCH) {
        let mut data = Vec::with_capacity(group.len() * 3 * plane);
        for &(y, x) in group {
            data.extend(padded.crop(y, x, s, s)?.to_chw());
        }
        let (out, head) = model.predict(Tensor::new([group.len(), 3, s, s], data)?)?;
        let src = if residual { head } else { out };
        for (t, &(y0, x0)) in src.data().chunks(3 * plane).zip(group) {
            for c in 0..3 {
                for ty in 0..s {
                    let row = &t[c * plane + ty * s..c * plane + (ty + 1) * s];
                    let base = c * ph * pw + (y0 + ty) * pw + x0;
                    for (a, &v) in acc[base..base + s].iter_mut().zip(row) {
                        *a += f64::from(v);
                    }
                }
            }
            for ty in 0..s {
                let base = (y0 + ty) * pw + x0;
                count[base..base + s].iter_mut().for_each(|n| *n += 1);
            }
        }
    }

    let mut chw = Vec::with_capacity(3 * h * w);
    let bic = bicubic.to_chw();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = y * pw + x;
                let mean = (acc[c * ph * pw + i] / f64::from(count[i])) as f32;
                let v = if residual {
                    bic[c * h * w + y * w + x] + mean
                } else {
                    mean
                };
                chw.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Upscaled {
        output: ImageRGB::from_chw(h, w, &chw)?,
        bicubic,
        tiles: tiles.len(),
    })
}
