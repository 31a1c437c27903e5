/// Early-stopping verdict after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Tracks the best validation PSNR. An epoch counts as an improvement only
/// when it strictly beats the best so far; NaN never does.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            best_epoch: None,
            seen: 0,
        }
    }

    /// Records the next epoch's PSNR; returns whether it improved and the
    /// resulting decision.
    pub fn observe(&mut self, psnr: f64) -> (bool, Decision) {
        let epoch = self.seen;
        self.seen += 1;
        let improved = !psnr.is_nan() && self.best.map_or(true, |b| psnr > b);
        if improved {
            self.best = Some(psnr);
            self.best_epoch = Some(epoch);
        }
        (improved, self.decision())
    }

    pub fn decision(&self) -> Decision {
        let since = match self.best_epoch {
            Some(b) => self.seen - 1 - b,
            None => self.seen,
        };
        if since >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Decision after the last entry of a PSNR history.
pub fn decide(history: &[f64], patience: usize) -> Decision {
    let mut s = EarlyStopper::new(patience);
    history
        .iter()
        .fold(Decision::Continue, |_, &p| s.observe(p).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn traced_history() {
        let h = [20.0, 21.0, 20.5, 20.9];
        assert_eq!(decide(&h[..3], 2), Decision::Continue);
        assert_eq!(decide(&h, 2), Decision::Stop);
        let mut s = EarlyStopper::new(2);
        for p in h {
            s.observe(p);
        }
        assert_eq!(s.best(), Some(21.0));
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn equal_value_is_not_an_improvement() {
        assert_eq!(decide(&[20.0, 20.0, 20.0], 2), Decision::Stop);
        assert_eq!(decide(&[20.0, f64::NAN, f64::NAN], 2), Decision::Stop);
    }

    proptest! {
        #[test]
        fn strictly_increasing_never_stops(start in -50.0f64..50.0, steps in prop::collection::vec(1e-3f64..5.0, 1..60), patience in 1usize..5) {
            let mut v = start;
            let mut h = vec![v];
            for d in steps {
                v += d;
                h.push(v);
            }
            for k in 1..=h.len() {
                prop_assert_eq!(decide(&h[..k], patience), Decision::Continue);
            }
        }

        #[test]
        fn pure_function_of_history(h in prop::collection::vec(0.0f64..40.0, 1..30), patience in 1usize..6) {
            prop_assert_eq!(decide(&h, patience), decide(&h.clone(), patience));
        }
    }
}
