use serde::{Deserialize, Serialize};

use super::FinetuneError;

fn default_cut_frac() -> f64 {
    0.1
}
fn default_ratio() -> f64 {
    32.0
}

/// Learning-rate shape over the steps of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Slanted triangular: short linear warm-up, long linear decay.
    Stlr {
        #[serde(default = "default_cut_frac")]
        cut_frac: f64,
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
    Constant,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Stlr {
            cut_frac: default_cut_frac(),
            ratio: default_ratio(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        match *self {
            Schedule::Stlr { cut_frac, ratio } => check_stlr(cut_frac, ratio),
            Schedule::Constant => Ok(()),
        }
    }

    pub fn lr(&self, t: usize, total: usize, lr_max: f64) -> Result<f64, FinetuneError> {
        match *self {
            Schedule::Stlr { cut_frac, ratio } => stlr(t, total, cut_frac, ratio, lr_max),
            Schedule::Constant => Ok(lr_max),
        }
    }
}

fn check_stlr(cut_frac: f64, ratio: f64) -> Result<(), FinetuneError> {
    if !(cut_frac > 0.0 && cut_frac < 1.0) {
        return Err(FinetuneError::Config(format!(
            "cut_frac {cut_frac} outside (0, 1)"
        )));
    }
    if !ratio.is_finite() || ratio <= 1.0 {
        return Err(FinetuneError::Config(format!(
            "ratio {ratio} must exceed 1"
        )));
    }
    Ok(())
}

/// Slanted triangular learning rate at step `t` of `total`.
///
/// `cut = floor(total · cut_frac)`, raised to 1 when the product is below
/// one step so the warm-up never divides by zero. When the floor shortens
/// `cut`, the decay leg `cut · (1/cut_frac − 1)` ends before `total`; `p` is
/// held at 0 from there on so the rate never drops below `lr_max / ratio`.
pub fn stlr(
    t: usize,
    total: usize,
    cut_frac: f64,
    ratio: f64,
    lr_max: f64,
) -> Result<f64, FinetuneError> {
    check_stlr(cut_frac, ratio)?;
    if total == 0 || t > total {
        return Err(FinetuneError::Config(format!(
            "step {t} outside [0, {total}]"
        )));
    }
    if !lr_max.is_finite() || lr_max <= 0.0 {
        return Err(FinetuneError::Config(format!(
            "lr_max {lr_max} must be positive"
        )));
    }
    let cut = ((total as f64 * cut_frac).floor() as usize).max(1);
    let p = if t < cut {
        t as f64 / cut as f64
    } else {
        (1.0 - (t - cut) as f64 / (cut as f64 * (1.0 / cut_frac - 1.0))).max(0.0)
    };
    Ok(lr_max * (1.0 + p * (ratio - 1.0)) / ratio)
}

/// Per-group rates, bottom group first: the top group gets `base_lr` and
/// each group below gets the rate above it divided by `decay`.
pub fn discriminative_lrs(
    base_lr: f64,
    n_groups: usize,
    decay: f64,
) -> Result<Vec<f64>, FinetuneError> {
    if n_groups == 0 {
        return Err(FinetuneError::Config("no parameter groups".into()));
    }
    if decay.is_nan() || decay < 1.0 {
        return Err(FinetuneError::Config(format!("decay {decay} below 1")));
    }
    let mut lrs = vec![base_lr; n_groups];
    for i in (0..n_groups - 1).rev() {
        lrs[i] = lrs[i + 1] / decay;
    }
    Ok(lrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        assert_eq!(stlr(10, 100, 0.1, 32.0, 0.01).unwrap(), 0.01);
        assert_eq!(stlr(0, 100, 0.1, 32.0, 0.01).unwrap(), 0.01 / 32.0);
        assert!((stlr(100, 100, 0.1, 32.0, 0.01).unwrap() - 0.01 / 32.0).abs() < 1e-18);
    }

    #[test]
    fn mid_decay_value() {
        let lr = stlr(55, 100, 0.1, 32.0, 0.01).unwrap();
        assert!((lr - 0.005_156_25).abs() < 1e-15);
    }

    #[test]
    fn single_peak() {
        let lrs: Vec<f64> = (0..=200)
            .map(|t| stlr(t, 200, 0.2, 10.0, 1.0).unwrap())
            .collect();
        let peak = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(lrs.iter().position(|&v| v == peak), Some(40));
        assert!(lrs[..=40].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[40..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn floored_cut_never_goes_below_the_floor_rate() {
        // cut = 5, decay leg 45 steps, schedule 54 steps
        let lrs: Vec<f64> = (0..=54)
            .map(|t| stlr(t, 54, 0.1, 32.0, 0.01).unwrap())
            .collect();
        assert!(lrs.iter().all(|&v| v >= 0.01 / 32.0));
        assert_eq!(lrs[50], 0.01 / 32.0);
        assert_eq!(lrs[54], 0.01 / 32.0);
    }

    #[test]
    fn bounds_are_checked() {
        assert!(stlr(0, 10, 0.0, 32.0, 0.01).is_err());
        assert!(stlr(0, 10, 0.1, 1.0, 0.01).is_err());
        assert!(stlr(11, 10, 0.1, 32.0, 0.01).is_err());
        assert!(stlr(0, 10, 0.1, 32.0, 0.0).is_err());
    }

    #[test]
    fn discriminative_example() {
        let lrs = discriminative_lrs(0.01, 3, 2.6).unwrap();
        assert!((lrs[0] - 0.01 / (2.6 * 2.6)).abs() < 1e-18);
        assert!((lrs[1] - 0.01 / 2.6).abs() < 1e-18);
        assert_eq!(lrs[2], 0.01);
        assert_eq!(discriminative_lrs(0.5, 1, 2.6).unwrap(), [0.5]);
        assert!(discriminative_lrs(0.5, 0, 2.6).is_err());
    }
}
