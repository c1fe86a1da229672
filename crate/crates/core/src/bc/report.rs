use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A seed-averaged normalized success value with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub stderr: f64,
    /// Evaluation epoch the value was taken at, for the max-epoch metric.
    pub epoch: Option<usize>,
}

/// Sample standard deviation over `√n`; zero for a single value.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// `raw[seed][k]` is the raw success at `epochs[k]`. Returns the max-epoch
/// metric (best epoch of the seed mean) and the avg-epoch metric (mean over
/// all evaluated epochs), both divided by the demonstrator success rate.
pub fn summarize(raw: &[Vec<f64>], epochs: &[usize], demo_rate: f64) -> Result<(Metric, Metric)> {
    if raw.is_empty() || epochs.is_empty() {
        return Err(Error::BadConfig("nothing to summarize".into()));
    }
    if raw.iter().any(|r| r.len() != epochs.len()) {
        return Err(Error::ShapeMismatch("every seed needs one value per evaluation epoch".into()));
    }
    if !(demo_rate > 0.0 && demo_rate <= 1.0) {
        return Err(Error::BadConfig(format!("demonstrator success rate {demo_rate} outside (0, 1]")));
    }
    let norm: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|x| x / demo_rate).collect()).collect();

    let mut best: Option<(usize, f64, f64)> = None;
    for k in 0..epochs.len() {
        let column: Vec<f64> = norm.iter().map(|r| r[k]).collect();
        let (mean, se) = mean_stderr(&column);
        if best.is_none_or(|(_, m, _)| mean > m) {
            best = Some((k, mean, se));
        }
    }
    let (k, mean, stderr) = best.expect("at least one epoch");
    let max_epoch = Metric {
        mean,
        stderr,
        epoch: Some(epochs[k]),
    };

    let per_seed: Vec<f64> = norm.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let (mean, stderr) = mean_stderr(&per_seed);
    let avg_epoch = Metric {
        mean,
        stderr,
        epoch: None,
    };
    Ok((max_epoch, avg_epoch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub policy: String,
    pub demo_success_rate: f64,
    pub seeds: Vec<u64>,
    pub eval_epochs: Vec<usize>,
    /// Raw success per seed and evaluation epoch.
    pub raw_success: Vec<Vec<f64>>,
    pub max_epoch: Metric,
    pub avg_epoch: Metric,
    /// Training batches skipped after numerical failures, per seed.
    pub skipped_batches: Vec<usize>,
}

impl EvalReport {
    pub fn new(
        env: &str,
        policy: &str,
        demo_success_rate: f64,
        seeds: Vec<u64>,
        eval_epochs: Vec<usize>,
        raw_success: Vec<Vec<f64>>,
        skipped_batches: Vec<usize>,
    ) -> Result<Self> {
        let (max_epoch, avg_epoch) = summarize(&raw_success, &eval_epochs, demo_success_rate)?;
        Ok(EvalReport {
            env: env.to_string(),
            policy: policy.to_string(),
            demo_success_rate,
            seeds,
            eval_epochs,
            raw_success,
            max_epoch,
            avg_epoch,
            skipped_batches,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
