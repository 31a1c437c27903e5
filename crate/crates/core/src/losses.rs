//! Training objective: `(1 - lambda) * L1 + lambda * (1 - SSIM)`.
//!
//! The SSIM term uses the same window, constants and clamp-to-edge boundary
//! handling as [`imageops::ssim`](crate::imageops::ssim), so the value the
//! optimizer sees is the value the metric reports.

use crate::diffcore::{Element, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::imageops::{gaussian_window, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

/// Weighting of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the SSIM term.
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(Error::Config("ssim_window must be odd".into()));
        }
        if self.ssim_sigma <= 0.0 {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair<E: Element>(tape: &Tape<'_, E>, pred: Var, target: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(dim_err!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn l1_loss<E: Element>(tape: &mut Tape<'_, E>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// Differentiable mean SSIM of `[.., H, W]` tensors (typically `[B, 3, H, W]`),
/// averaged over every pixel of every plane.
pub fn ssim_loss_term<E: Element>(
    tape: &mut Tape<'_, E>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let shape = tape.shape(pred).to_vec();
    if shape.len() < 2 {
        return Err(dim_err!("SSIM needs at least 2 axes, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h.min(w) < cfg.ssim_window {
        return Err(Error::Contract(format!(
            "SSIM window {} does not fit a {h}x{w} image",
            cfg.ssim_window
        )));
    }
    let kernel: Vec<E> = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
        .into_iter()
        .map(E::from_f64_lossy)
        .collect();
    let c1 = E::from_f64_lossy(SSIM_K1 * SSIM_K1);
    let c2 = E::from_f64_lossy(SSIM_K2 * SSIM_K2);
    let two = E::from_f64_lossy(2.0);

    let mu_x = tape.blur(pred, &kernel)?;
    let mu_y = tape.blur(target, &kernel)?;
    let xx = tape.square(pred)?;
    let yy = tape.square(target)?;
    let xy = tape.mul(pred, target)?;
    let e_xx = tape.blur(xx, &kernel)?;
    let e_yy = tape.blur(yy, &kernel)?;
    let e_xy = tape.blur(xy, &kernel)?;

    let mu_x2 = tape.square(mu_x)?;
    let mu_y2 = tape.square(mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_x2)?;
    let var_y = tape.sub(e_yy, mu_y2)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, two)?;
    let lum_num = tape.add_scalar(lum_num, c1)?;
    let cs_num = tape.scale(cov, two)?;
    let cs_num = tape.add_scalar(cs_num, c2)?;
    let lum_den = tape.add(mu_x2, mu_y2)?;
    let lum_den = tape.add_scalar(lum_den, c1)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2)?;

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `(1 - lambda) * l1 + lambda * (1 - ssim)`.
///
/// The boundary weights skip the unused term entirely, so `lambda = 0` is
/// exactly the L1 loss and `lambda = 1` exactly `1 - ssim`.
pub fn composite_loss<E: Element>(
    tape: &mut Tape<'_, E>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let lambda = cfg.lambda;
    if lambda == 0.0 {
        return l1_loss(tape, pred, target);
    }
    let ssim = ssim_loss_term(tape, pred, target, cfg)?;
    let one_minus_ssim = tape.scale(ssim, -E::one())?;
    let one_minus_ssim = tape.add_scalar(one_minus_ssim, E::one())?;
    if lambda == 1.0 {
        return Ok(one_minus_ssim);
    }
    let l1 = l1_loss(tape, pred, target)?;
    let a = tape.scale(l1, E::from_f64_lossy(1.0 - lambda))?;
    let b = tape.scale(one_minus_ssim, E::from_f64_lossy(lambda))?;
    tape.add(a, b)
}
