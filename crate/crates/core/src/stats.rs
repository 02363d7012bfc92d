//! Confusion counts of a characterizer against ground-truth labels and the
//! resulting probabilistic guarantee on the safety claim.

use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::characterizer::{decide, Characterizer};
use crate::error::{Error, Result};
use crate::network::{Dataset, Network};
use crate::verifier::RiskCondition;

/// Cell counts indexed by (ground truth, decision).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub n11: usize,
    pub n10: usize,
    pub n01: usize,
    pub n00: usize,
    pub n: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: bool, decision: bool) {
        match (truth, decision) {
            (true, true) => self.n11 += 1,
            (true, false) => self.n10 += 1,
            (false, true) => self.n01 += 1,
            (false, false) => self.n00 += 1,
        }
        self.n += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionEstimate {
    pub counts: ConfusionCounts,
    /// in the property and flagged
    pub alpha: f64,
    /// flagged without being in the property
    pub beta: f64,
    /// in the property but missed
    pub gamma: f64,
}

impl ConfusionEstimate {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        if counts.n == 0 {
            return Err(Error::EmptyDataset);
        }
        if counts.n11 + counts.n10 + counts.n01 + counts.n00 != counts.n {
            return Err(Error::Value("confusion cells do not sum to n".into()));
        }
        let n = counts.n as f64;
        Ok(ConfusionEstimate {
            counts,
            alpha: counts.n11 as f64 / n,
            beta: counts.n01 as f64 / n,
            gamma: counts.n10 as f64 / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatisticalGuarantee {
    pub point_guarantee: f64,
    pub conservative_guarantee: f64,
    pub confidence: f64,
    pub premise_checked: bool,
}

/// Combined output of the `stats` command.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub counts: ConfusionCounts,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub point_guarantee: f64,
    pub conservative_guarantee: f64,
    pub confidence: f64,
    pub premise_checked: bool,
}

impl StatsReport {
    pub fn new(est: &ConfusionEstimate, g: &StatisticalGuarantee) -> Self {
        StatsReport {
            counts: est.counts,
            alpha: est.alpha,
            beta: est.beta,
            gamma: est.gamma,
            point_guarantee: g.point_guarantee,
            conservative_guarantee: g.conservative_guarantee,
            confidence: g.confidence,
            premise_checked: g.premise_checked,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

fn check_head(net: &Network, h: &Characterizer, l: usize) -> Result<()> {
    net.check_cut(l)?;
    if h.input_dim() != net.dim_at(l) {
        return Err(Error::shape(format!(
            "characterizer reads {} features, layer {l} has {}",
            h.input_dim(),
            net.dim_at(l)
        )));
    }
    Ok(())
}

pub fn estimate_confusion(net: &Network, h: &Characterizer, l: usize, data: &Dataset) -> Result<ConfusionEstimate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_head(net, h, l)?;
    let labels = data.labels()?;
    let mut counts = ConfusionCounts::default();
    for (row, truth) in data.rows().iter().zip(labels) {
        let act = net.forward(&row.input, 0, l)?;
        counts.record(truth, decide(h, &act)?);
    }
    ConfusionEstimate::from_counts(counts)
}

/// True iff every labeled-positive input that the characterizer misses
/// produces an output outside the risk condition.
pub fn check_premise(net: &Network, h: &Characterizer, l: usize, data: &Dataset, risk: &RiskCondition) -> Result<bool> {
    check_head(net, h, l)?;
    risk.check_dim(net.output_dim())?;
    let labels = data.labels()?;
    for (row, truth) in data.rows().iter().zip(labels) {
        if !truth {
            continue;
        }
        let act = net.forward(&row.input, 0, l)?;
        if !decide(h, &act)? && risk.holds(&net.forward(&act, l, net.depth())?) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One-sided Clopper–Pearson upper bound on a binomial proportion after
/// `x` successes in `n` trials, at confidence `1 - delta`.
pub fn clopper_pearson_upper(x: usize, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if x > n {
        return Err(Error::Value(format!("{x} successes out of {n} trials")));
    }
    if x == n {
        return Ok(1.0);
    }
    if x == 0 {
        return Ok(1.0 - delta.powf(1.0 / n as f64));
    }
    // solve I_p(x+1, n-x) = 1 - delta; the regularized beta is increasing in p
    let (a, b) = ((x + 1) as f64, (n - x) as f64);
    let target = 1.0 - delta;
    let (mut lo, mut hi) = (x as f64 / n as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

pub fn guarantee(est: &ConfusionEstimate, delta: f64, premise: bool) -> Result<StatisticalGuarantee> {
    let gamma_upper = clopper_pearson_upper(est.counts.n10, est.counts.n, delta)?;
    let point = 1.0 - est.gamma;
    Ok(StatisticalGuarantee {
        point_guarantee: point,
        conservative_guarantee: (1.0 - gamma_upper).clamp(0.0, point),
        confidence: 1.0 - delta,
        premise_checked: premise,
    })
}
