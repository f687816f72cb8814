use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::params::ParamSet;

/// Exponential moving average of a parameter set.
///
/// With `warmup` enabled the effective decay for update `t` (0-based) is
/// `min(decay, (1 + t) / (10 + t))`, so early shadows are not pinned to the
/// initialization when a run has fewer steps than `1 / (1 - decay)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub decay: f64,
    pub warmup: bool,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &ParamSet, decay: f64, warmup: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::OutOfRange {
                what: "ema decay",
                range: "[0, 1)",
                value: decay,
            });
        }
        Ok(EmaState {
            shadow: params.clone(),
            decay,
            warmup,
            updates: 0,
        })
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let t = self.updates as f64;
            self.decay.min((1.0 + t) / (10.0 + t))
        } else {
            self.decay
        }
    }

    /// Resets the shadow to `params`.
    pub fn reset(&mut self, params: &ParamSet) {
        self.shadow = params.clone();
        self.updates = 0;
    }
}

/// `shadow <- d * shadow + (1 - d) * theta`, elementwise.
pub fn ema_update(ema: &mut EmaState, params: &ParamSet) -> Result<()> {
    if !ema.shadow.same_layout(params) {
        return Err(Error::shape(
            "ema_update",
            format!("{} shadow tensors", ema.shadow.len()),
            format!("{} parameters with differing layout", params.len()),
        ));
    }
    let d = ema.effective_decay();
    for (s, p) in ema.shadow.iter_mut().zip(params.iter()) {
        for (sv, &pv) in s.value.data_mut().iter_mut().zip(p.value.data()) {
            // incremental form keeps a shadow that already equals θ bit-exact
            if d == 0.0 {
                *sv = pv;
            } else {
                *sv += (1.0 - d) * (pv - *sv);
            }
        }
    }
    ema.updates += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::ParamTag;
    use crate::matrix::Matrix;

    fn set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", ParamTag::Backbone, Matrix::filled(2, 3, v)).unwrap();
        p
    }

    #[test]
    fn zero_decay_copies_parameters() {
        let mut ema = EmaState::new(&set(1.0), 0.0, false).unwrap();
        ema_update(&mut ema, &set(-2.5)).unwrap();
        assert_eq!(ema.shadow, set(-2.5));
    }

    #[test]
    fn fixed_point() {
        let mut ema = EmaState::new(&set(0.3), 0.9997, false).unwrap();
        ema_update(&mut ema, &set(0.3)).unwrap();
        assert_eq!(ema.shadow, set(0.3));
    }

    #[test]
    fn single_update_arithmetic() {
        let mut ema = EmaState::new(&set(1.0), 0.9997, false).unwrap();
        ema_update(&mut ema, &set(0.0)).unwrap();
        for v in ema.shadow.value(0).data() {
            assert!((v - 0.9997).abs() < 1e-15);
        }
    }

    #[test]
    fn warmup_caps_early_decay() {
        let mut ema = EmaState::new(&set(1.0), 0.9997, true).unwrap();
        assert!((ema.effective_decay() - 0.1).abs() < 1e-15);
        ema_update(&mut ema, &set(0.0)).unwrap();
        assert!((ema.shadow.value(0).get(0, 0) - 0.1).abs() < 1e-15);
        ema.updates = 1_000_000;
        assert_eq!(ema.effective_decay(), 0.9997);
    }

    #[test]
    fn rejects_bad_decay_and_layout() {
        assert!(EmaState::new(&set(1.0), 1.0, false).is_err());
        let mut ema = EmaState::new(&set(1.0), 0.5, false).unwrap();
        let mut other = ParamSet::new();
        other.insert("w", ParamTag::Backbone, Matrix::zeros(3, 2)).unwrap();
        assert!(ema_update(&mut ema, &other).is_err());
    }
}
