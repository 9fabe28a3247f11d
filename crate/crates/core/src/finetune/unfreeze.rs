use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::FinetuneError;

/// How layer groups are thawed over a stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum UnfreezeStrategy {
    #[default]
    Gradual,
    ChainThawFull,
    ChainThawPartial {
        k: usize,
    },
    AllAtOnce,
}

impl UnfreezeStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            UnfreezeStrategy::Gradual => "gradual",
            UnfreezeStrategy::ChainThawFull => "chain_thaw_full",
            UnfreezeStrategy::ChainThawPartial { .. } => "chain_thaw_partial",
            UnfreezeStrategy::AllAtOnce => "all_at_once",
        }
    }
}

/// When a phase ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    FixedEpochs {
        epochs: usize,
    },
    /// Early stopping on validation loss, capped at `max_epochs`.
    Converge {
        patience: usize,
        min_delta: f64,
        max_epochs: usize,
    },
}

impl StopRule {
    pub fn max_epochs(&self) -> usize {
        match *self {
            StopRule::FixedEpochs { epochs } => epochs,
            StopRule::Converge { max_epochs, .. } => max_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Indices into the model's group list.
    pub trainable: BTreeSet<usize>,
    pub stop: StopRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnfreezePlan {
    pub strategy: UnfreezeStrategy,
    pub phases: Vec<Phase>,
}

impl UnfreezePlan {
    /// Human-readable phase list using the model's group names.
    pub fn describe(&self, names: &[String]) -> String {
        let mut out = String::new();
        for (i, p) in self.phases.iter().enumerate() {
            let groups: Vec<&str> = p.trainable.iter().map(|&g| names[g].as_str()).collect();
            let stop = match p.stop {
                StopRule::FixedEpochs { epochs } => format!("{epochs} epoch(s)"),
                StopRule::Converge {
                    patience,
                    min_delta,
                    max_epochs,
                } => format!("until converged (patience {patience}, min_delta {min_delta}, max {max_epochs} epochs)"),
            };
            out.push_str(&format!(
                "phase {}: {{{}}} {stop}\n",
                i + 1,
                groups.join(", ")
            ));
        }
        out
    }
}

/// One phase per epoch; phase `i` trains the top `min(i, n)` groups.
pub fn gradual_unfreeze_plan(
    n_groups: usize,
    epochs: usize,
) -> Result<UnfreezePlan, FinetuneError> {
    if n_groups == 0 || epochs == 0 {
        return Err(FinetuneError::Config(
            "gradual unfreezing needs groups and epochs".into(),
        ));
    }
    let phases = (1..=epochs)
        .map(|i| Phase {
            trainable: (n_groups - i.min(n_groups)..n_groups).collect(),
            stop: StopRule::FixedEpochs { epochs: 1 },
        })
        .collect();
    Ok(UnfreezePlan {
        strategy: UnfreezeStrategy::Gradual,
        phases,
    })
}

/// Head to convergence, then each group alone from the bottom up (the head
/// included), then everything together. `partial = Some(k)` keeps the first
/// `k` phases.
pub fn chain_thaw_plan(
    n_groups: usize,
    partial: Option<usize>,
    stop: StopRule,
) -> Result<UnfreezePlan, FinetuneError> {
    if n_groups == 0 {
        return Err(FinetuneError::Config(
            "chain-thaw needs at least one group".into(),
        ));
    }
    let head = n_groups - 1;
    let mut phases = vec![Phase {
        trainable: BTreeSet::from([head]),
        stop,
    }];
    phases.extend((0..n_groups).map(|g| Phase {
        trainable: BTreeSet::from([g]),
        stop,
    }));
    phases.push(Phase {
        trainable: (0..n_groups).collect(),
        stop,
    });
    let strategy = match partial {
        None => UnfreezeStrategy::ChainThawFull,
        Some(k) => {
            if k == 0 || k > phases.len() {
                return Err(FinetuneError::Config(format!(
                    "partial chain-thaw k = {k} outside 1..={}",
                    phases.len()
                )));
            }
            phases.truncate(k);
            UnfreezeStrategy::ChainThawPartial { k }
        }
    };
    Ok(UnfreezePlan { strategy, phases })
}

pub fn all_at_once_plan(n_groups: usize, stop: StopRule) -> Result<UnfreezePlan, FinetuneError> {
    if n_groups == 0 {
        return Err(FinetuneError::Config("no parameter groups".into()));
    }
    Ok(UnfreezePlan {
        strategy: UnfreezeStrategy::AllAtOnce,
        phases: vec![Phase {
            trainable: (0..n_groups).collect(),
            stop,
        }],
    })
}

/// True once the best loss has gone `patience` evaluations without
/// improving on the previous best by more than `min_delta`.
pub fn convergence_check(losses: &[f64], patience: usize, min_delta: f64) -> bool {
    let patience = patience.max(1);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &l in losses {
        if l < best - min_delta {
            best = l;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn gradual_phases() {
        let p = gradual_unfreeze_plan(5, 7).unwrap();
        assert_eq!(p.phases[0].trainable, set(&[4]));
        assert_eq!(p.phases[2].trainable, set(&[2, 3, 4]));
        assert_eq!(p.phases[4].trainable, set(&[0, 1, 2, 3, 4]));
        assert_eq!(p.phases[6].trainable, set(&[0, 1, 2, 3, 4]));
    }

    #[test]
    fn chain_thaw_phases() {
        let stop = StopRule::Converge {
            patience: 3,
            min_delta: 1e-4,
            max_epochs: 5,
        };
        let full = chain_thaw_plan(3, None, stop).unwrap();
        let sets: Vec<_> = full.phases.iter().map(|p| p.trainable.clone()).collect();
        assert_eq!(
            sets,
            [set(&[2]), set(&[0]), set(&[1]), set(&[2]), set(&[0, 1, 2])]
        );
        let one = chain_thaw_plan(3, Some(1), stop).unwrap();
        assert_eq!(one.phases.len(), 1);
        assert_eq!(one.phases[0].trainable, set(&[2]));
        assert!(chain_thaw_plan(3, Some(6), stop).is_err());
        assert!(chain_thaw_plan(3, Some(0), stop).is_err());
    }

    #[test]
    fn convergence_examples() {
        let dec: Vec<f64> = (0..20).map(|i| 1.0 / (i + 1) as f64).collect();
        assert!((1..=dec.len()).all(|n| !convergence_check(&dec[..n], 2, 0.0)));
        let flat = [1.0; 3];
        assert!(!convergence_check(&flat[..2], 2, 0.0));
        assert!(convergence_check(&flat, 2, 0.0));
        let s = [1.0, 0.9, 0.91, 0.92, 0.93];
        assert!(!convergence_check(&s[..3], 2, 0.0));
        assert!(convergence_check(&s[..4], 2, 0.0));
    }
}
