//! Progressive retrieval that bounds the error of a derived quantity,
//! `Q(v) = sum_c v_c^2`, over several variables.

use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::container::{plan_more_groups, ByteSource, FetchPlan, ProgressiveReader};
use crate::error::{Error, Result};
use crate::pipeline::Scheduler;
use crate::refactor::reconstruct_chunks;

pub const DEFAULT_MAPE_C: f64 = 10.0;

/// Next-error-bound strategy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Halve the bounds until the worst point fits.
    Cp,
    /// One more group per variable.
    Ma,
    /// Jump by the ratio `tau' / tau` while it exceeds `c`, else as `Ma`.
    Mape { c: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Cp => "cp",
            Strategy::Ma => "ma",
            Strategy::Mape { .. } => "mape",
        }
    }

    pub fn parse(name: &str, mape_c: f64) -> Result<Self> {
        match name {
            "cp" => Ok(Strategy::Cp),
            "ma" => Ok(Strategy::Ma),
            "mape" if mape_c > 0.0 && mape_c.is_finite() => Ok(Strategy::Mape { c: mape_c }),
            "mape" => Err(Error::Config(format!("MAPE threshold {mape_c} must be positive"))),
            _ => Err(Error::Config(format!("unknown strategy '{name}'"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of squares over `variables` components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QoiSpec {
    pub variables: usize,
}

impl QoiSpec {
    pub fn vtotal(variables: usize) -> Result<Self> {
        if variables == 0 {
            return Err(Error::Config("a QoI needs at least one variable".into()));
        }
        Ok(QoiSpec { variables })
    }

    pub fn evaluate(&self, vars: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = check_shapes(vars, self.variables)?;
        Ok((0..n).map(|i| vars.iter().map(|v| v[i] * v[i]).sum()).collect())
    }
}

fn check_shapes(vars: &[Vec<f64>], expected: usize) -> Result<usize> {
    if vars.len() != expected || vars.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} variables, expected {expected}", vars.len())));
    }
    let n = vars[0].len();
    if vars.iter().any(|v| v.len() != n) {
        return Err(Error::ShapeMismatch("variables differ in length".into()));
    }
    Ok(n)
}

/// Worst-case `|Q(v) - Q(v_hat)|` at one point when `|v_c - v_hat_c| <= eps_c`,
/// rounded upward.
pub fn point_bound(v_hat: impl IntoIterator<Item = f64>, eps: &[f64]) -> f64 {
    let mut ops = 0u32;
    let sum: f64 = v_hat
        .into_iter()
        .zip(eps)
        .map(|(v, &e)| {
            ops += 4;
            2.0 * v.abs() * e + e * e
        })
        .sum();
    if sum == 0.0 {
        return 0.0;
    }
    (sum * (1.0 + f64::from(ops + 1) * f64::EPSILON)).next_up()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QoiEstimate {
    pub value: f64,
    /// First point attaining `value`.
    pub argmax: usize,
}

/// Largest per-point bound over the field.
pub fn estimate_qoi_error(recon: &[Vec<f64>], eps: &[f64]) -> Result<QoiEstimate> {
    let n = check_shapes(recon, eps.len())?;
    if let Some(e) = eps.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::ShapeMismatch(format!("error bound {e} is not a non-negative number")));
    }
    let mut best = QoiEstimate { value: 0.0, argmax: 0 };
    for i in 0..n {
        let b = point_bound(recon.iter().map(|v| v[i]), eps);
        if b > best.value {
            best = QoiEstimate { value: b, argmax: i };
        }
    }
    Ok(best)
}

/// Largest pointwise `|Q(truth) - Q(recon)|`.
pub fn real_qoi_error(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> Result<f64> {
    let spec = QoiSpec::vtotal(truth.len())?;
    let a = spec.evaluate(truth)?;
    let b = spec.evaluate(recon)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("ground truth and reconstruction differ in length".into()));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub enum NextStep {
    /// Per-variable error bound targets.
    Targets(Vec<f64>),
    /// One more group for every variable.
    Augment,
}

/// Choose what to fetch next given `tau' > tau`.
pub fn estimate_next_eb(
    recon: &[Vec<f64>],
    eps: &[f64],
    estimate: QoiEstimate,
    tau: f64,
    strategy: Strategy,
) -> NextStep {
    match strategy {
        Strategy::Ma => NextStep::Augment,
        Strategy::Mape { c } => {
            let p = estimate.value / tau;
            if p > c {
                NextStep::Targets(eps.iter().map(|e| e / p).collect())
            } else {
                NextStep::Augment
            }
        }
        Strategy::Cp => {
            let at: Vec<f64> = recon.iter().map(|v| v[estimate.argmax]).collect();
            let mut e = eps.to_vec();
            loop {
                e.iter_mut().for_each(|x| *x *= 0.5);
                let b = point_bound(at.iter().copied(), &e);
                if b <= tau || e.iter().all(|&x| x == 0.0) {
                    return NextStep::Targets(e);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoiStats {
    pub tau: f64,
    pub strategy: Strategy,
    pub iterations: usize,
    pub bytes: u64,
    /// Bits fetched per element, over all variables.
    pub bitrate: f64,
    pub est_err: f64,
    /// Estimated QoI error after each iteration.
    pub history: Vec<f64>,
}

pub struct QoiOutcome {
    pub values: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
    pub stats: QoiStats,
}

fn bitrate(bytes: u64, elements: u64) -> f64 {
    if elements == 0 {
        0.0
    } else {
        8.0 * bytes as f64 / elements as f64
    }
}

/// Fetch until the estimated QoI error is at most `tau`.
///
/// Every iteration runs the reconstruct graph over all variables with the
/// current plans. `UnreachableTolerance` is returned once every group is
/// loaded and the estimate still exceeds `tau`.
pub fn progressive_qoi_retrieve<S: ByteSource + Send>(
    readers: Vec<ProgressiveReader<S>>,
    tau: f64,
    strategy: Strategy,
    scheduler: Scheduler,
) -> Result<QoiOutcome> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("QoI tolerance {tau} must be positive")));
    }
    QoiSpec::vtotal(readers.len())?;
    let dims = readers[0].header().dims.clone();
    if readers.iter().any(|r| r.header().dims != dims) {
        return Err(Error::ShapeMismatch("streams have different shapes".into()));
    }
    let elements: u64 = readers.iter().map(|r| r.header().element_count()).sum();
    let readers: Vec<Mutex<ProgressiveReader<S>>> = readers.into_iter().map(Mutex::new).collect();
    let augment = |n: usize| -> Vec<FetchPlan> {
        readers
            .iter()
            .map(|r| {
                let r = r.lock().unwrap();
                plan_more_groups(r.header(), r.state(), n)
            })
            .collect()
    };

    let mut plans = augment(0);
    let mut bytes = 0u64;
    let mut history = Vec::new();
    loop {
        let rec = reconstruct_chunks(&readers, &plans, scheduler)?;
        bytes += rec.bytes;
        let eps: Vec<f64> = readers.iter().map(|r| r.lock().unwrap().state().bound).collect();
        let estimate = estimate_qoi_error(&rec.values, &eps)?;
        history.push(estimate.value);
        if estimate.value <= tau {
            let stats = QoiStats {
                tau,
                strategy,
                iterations: history.len(),
                bytes,
                bitrate: bitrate(bytes, elements),
                est_err: estimate.value,
                history,
            };
            return Ok(QoiOutcome {
                values: rec.values,
                eps,
                stats,
            });
        }
        let complete = readers.iter().all(|r| {
            let r = r.lock().unwrap();
            r.state().is_complete(r.header())
        });
        if complete {
            return Err(Error::UnreachableTolerance {
                requested: tau,
                achieved: estimate.value,
            });
        }
        plans = match estimate_next_eb(&rec.values, &eps, estimate, tau, strategy) {
            NextStep::Augment => augment(1),
            NextStep::Targets(t) => readers
                .iter()
                .zip(&t)
                .map(|(r, &target)| r.lock().unwrap().plan(target))
                .collect(),
        };
        if plans.iter().all(FetchPlan::is_empty) {
            plans = augment(1);
        }
    }
}
