use std::f64::consts::PI;

/// Cosine annealing with warm restarts at epoch granularity. Cycle `i`
/// lasts `t0 * tmult^i` epochs; within a cycle the rate follows half a
/// cosine from `lr_init` down towards `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWarmRestarts {
    pub lr_init: f64,
    pub lr_min: f64,
    pub t0: usize,
    pub tmult: usize,
}

impl CosineWarmRestarts {
    /// `(cycle index, epochs into the cycle, cycle length)` of a 0-based epoch.
    pub fn position(&self, epoch: usize) -> (usize, usize, usize) {
        let (mut cycle, mut start, mut len) = (0, 0, self.t0.max(1));
        while epoch >= start + len {
            start += len;
            len *= self.tmult.max(1);
            cycle += 1;
        }
        (cycle, epoch - start, len)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (_, t_cur, t_i) = self.position(epoch);
        let cos = (PI * t_cur as f64 / t_i as f64).cos();
        self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + cos)
    }

    /// 0-based epochs at which a new cycle starts, below `limit`.
    pub fn restarts(&self, limit: usize) -> Vec<usize> {
        (1..limit).filter(|&e| self.position(e).1 == 0).collect()
    }
}
