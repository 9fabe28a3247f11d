use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BaselineError, MetricsRecord};

/// Trains on a subsample and evaluates on the fixed held-out set.
pub trait CurveRunner: Sync {
    fn run(&self, train_indices: &[usize], seed: u64) -> Result<MetricsRecord, String>;
}

impl<F> CurveRunner for F
where
    F: Fn(&[usize], u64) -> Result<MetricsRecord, String> + Sync,
{
    fn run(&self, train_indices: &[usize], seed: u64) -> Result<MetricsRecord, String> {
        self(train_indices, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    /// Long format with columns `fraction,seed,metric,value`. A skipped run
    /// writes a single `skipped` line with an empty value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BaselineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["fraction", "seed", "metric", "value"])?;
        for row in &self.rows {
            let (f, s) = (row.fraction.to_string(), row.seed.to_string());
            match &row.metrics {
                Some(m) => {
                    w.write_record([f.as_str(), &s, "n_train", &row.n_train.to_string()])?;
                    for (name, v) in m.scalars() {
                        w.write_record([f.as_str(), &s, name, &v.to_string()])?;
                    }
                }
                None => w.write_record([f.as_str(), &s, "skipped", ""])?,
            }
        }
        w.flush().map_err(|e| BaselineError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, BaselineError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    /// Median of `metric` over the completed seeds at `fraction`.
    pub fn median(&self, fraction: f64, metric: &str) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.fraction == fraction)
            .filter_map(|r| r.metrics.as_ref()?.get(metric))
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            (vals[n / 2 - 1] + vals[n / 2]) / 2.0
        })
    }
}

/// Sorted indices of a uniform subsample without replacement of
/// `round(n · fraction)` items. Fraction 1 returns every index.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((n as f64 * fraction).round() as usize).min(n);
    if k == n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `runner` for every `(fraction, seed)` pair, in parallel. Pairs whose
/// subsample has fewer than `2 · n_classes` examples are skipped with a
/// warning. Rows come back in `fractions × seeds` order.
pub fn subsample_curve<R: CurveRunner>(
    n_train: usize,
    n_classes: usize,
    fractions: &[f64],
    seeds: &[u64],
    runner: &R,
) -> Result<CurveTable, BaselineError> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(BaselineError::InvalidArgument(format!(
            "fraction {f} outside (0, 1]"
        )));
    }
    let mut seen = BTreeSet::new();
    for &f in fractions {
        for &s in seeds {
            if !seen.insert((f.to_bits(), s)) {
                return Err(BaselineError::InvalidArgument(format!(
                    "duplicate (fraction, seed) pair ({f}, {s})"
                )));
            }
        }
    }
    let pairs: Vec<(f64, u64)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    let min = 2 * n_classes.max(1);
    let rows = pairs
        .par_iter()
        .map(|&(fraction, seed)| {
            let idx = subsample_indices(n_train, fraction, seed);
            if idx.len() < min {
                let reason = format!(
                    "{} examples at fraction {fraction} is below the minimum of {min}",
                    idx.len()
                );
                log::warn!("skipping curve point: {reason}");
                return Ok(CurveRow {
                    fraction,
                    seed,
                    n_train: idx.len(),
                    metrics: None,
                    skipped: Some(reason),
                });
            }
            let metrics = runner.run(&idx, seed).map_err(|e| {
                BaselineError::Run(format!("fraction {fraction}, seed {seed}: {e}"))
            })?;
            Ok(CurveRow {
                fraction,
                seed,
                n_train: idx.len(),
                metrics: Some(metrics),
                skipped: None,
            })
        })
        .collect::<Result<Vec<_>, BaselineError>>()?;
    Ok(CurveTable { rows })
}
