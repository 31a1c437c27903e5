use crate::diffcore::{Element, Gradients, ParamId, ParamSet};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update of step `t` (1-based) with decoupled weight decay:
/// `w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w`, where the decay
/// term uses the weight before the update.
pub fn adamw_update<E: Element>(
    w: &mut [E],
    g: &[E],
    m: &mut [E],
    v: &mut [E],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if g.len() != w.len() || m.len() != w.len() || v.len() != w.len() {
        return Err(dim_err!(
            "adamw: weight {} / grad {} / moments {}, {} lengths differ",
            w.len(),
            g.len(),
            m.len(),
            v.len()
        ));
    }
    let t = t.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..w.len() {
        let gi = g[i].as_f64();
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
        m[i] = E::from_f64_lossy(mi);
        v[i] = E::from_f64_lossy(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let wi = w[i].as_f64();
        w[i] = E::from_f64_lossy(
            wi - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * wi,
        );
    }
    Ok(())
}

/// AdamW state for every tensor of a parameter set, indexed like the set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores saved moments; shapes must match the parameter set.
    pub fn from_state(
        cfg: AdamWConfig,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        params: &ParamSet<f32>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(dim_err!(
                "optimizer state has {} / {} tensors for {} parameters",
                m.len(),
                v.len(),
                params.len()
            ));
        }
        for ((p, a), b) in params.iter().zip(&m).zip(&v) {
            if a.len() != p.tensor.len() || b.len() != p.tensor.len() {
                return Err(dim_err!(
                    "optimizer moments of {} have the wrong size",
                    p.name
                ));
            }
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Applies one update to every parameter. Parameters the loss did not
    /// reach get a zero gradient, so they still decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &Gradients<f32>,
        lr: f64,
    ) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(dim_err!(
                "optimizer built for {} tensors, got {}",
                self.m.len(),
                params.len()
            ));
        }
        self.step += 1;
        let mut zeros = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            let g = match grads.param(ParamId(i)) {
                Some(g) => g,
                None => {
                    zeros.resize(p.tensor.len(), 0.0);
                    &zeros[..p.tensor.len()]
                }
            };
            adamw_update(
                p.tensor.data_mut(),
                g,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                &self.cfg,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_by_hand() {
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let (mut w, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
        adamw_update(&mut w, &[1.0], &mut m, &mut v, 1, 0.1, &cfg).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.05;
        assert!((w[0] as f64 - expect).abs() < 1e-6);
        assert!((w[0] - 0.895).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_cases() {
        let none = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut w, mut m, mut v) = ([0.7f32, -0.3], [0.0; 2], [0.0; 2]);
        adamw_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &none).unwrap();
        assert_eq!(w, [0.7, -0.3]);

        let decay = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        adamw_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &decay).unwrap();
        assert_eq!(
            w,
            [
                (0.7f64 * (1.0 - 0.005)) as f32,
                (-0.3f64 * (1.0 - 0.005)) as f32
            ]
        );
    }

    #[test]
    fn length_mismatch() {
        let (mut w, mut m, mut v) = ([0.0f32; 2], [0.0f32; 2], [0.0f32; 2]);
        assert!(adamw_update(
            &mut w,
            &[0.0f32],
            &mut m,
            &mut v,
            1,
            0.1,
            &AdamWConfig::default()
        )
        .is_err());
    }

    /// Textbook Adam in f64 as the reference.
    fn adam_reference(w: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
        let mut m = vec![0.0; w.len()];
        let mut v = vec![0.0; w.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn without_decay_matches_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 64;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = init.clone();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut w, g, &mut m, &mut v, t as u64 + 1, 1e-3, &cfg).unwrap();
        }
        let mut r = init;
        adam_reference(&mut r, &grads, 1e-3, 0.9, 0.999, 1e-8);
        for (a, b) in w.iter().zip(&r) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn optimizer_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params
            .insert("w", Tensor::new([3], vec![2.0f32, -1.0, 0.5]).unwrap())
            .unwrap();
        let target = [0.25f32, 0.75, -0.5];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..500 {
            let grads = {
                let mut t = Tape::new();
                let w = t.param(&params, id).unwrap();
                let c = t.constant([3], target.to_vec()).unwrap();
                let d = t.sub(w, c).unwrap();
                let s = t.square(d).unwrap();
                let l = t.mean(s).unwrap();
                t.backward(l).unwrap()
            };
            opt.step(&mut params, &grads, 1e-2).unwrap();
        }
        assert_eq!(opt.steps(), 500);
        for (a, b) in params.get(id).tensor.data().iter().zip(target) {
            assert!((a - b).abs() < 1e-2);
        }
    }
}
