//! Runtime check that cut-layer activations stay inside the envelope a
//! verification result was conditioned on.

use serde::Serialize;

use crate::abstraction::ActivationBounds;
use crate::error::{Error, Result};
use crate::network::{adjacent_differences, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    Box,
    Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub index: usize,
    pub value: f64,
    pub bound_lo: f64,
    pub bound_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    pub contained: bool,
    pub violations: Vec<Violation>,
    pub sample_id: String,
}

impl MonitorReport {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.sample_id = id.into();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialize")
    }
}

fn scan(kind: ViolationKind, values: &[f64], lo: &[f64], hi: &[f64], tol: f64, out: &mut Vec<Violation>) {
    for (index, ((&value, &bound_lo), &bound_hi)) in values.iter().zip(lo).zip(hi).enumerate() {
        // written so that NaN counts as a violation
        if !(value >= bound_lo - tol && value <= bound_hi + tol) {
            out.push(Violation {
                kind,
                index,
                value,
                bound_lo,
                bound_hi,
            });
        }
    }
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::InvalidConfig(format!("tolerance must be nonnegative, got {tolerance}")));
    }
    Ok(())
}

/// Lists every box and adjacent-difference bound that `activation` breaks by
/// more than `tolerance`.
pub fn check(bounds: &ActivationBounds, activation: &[f64], tolerance: f64) -> Result<MonitorReport> {
    check_tolerance(tolerance)?;
    if activation.len() != bounds.dim() {
        return Err(Error::shape(format!(
            "activation has {} entries, bounds cover {}",
            activation.len(),
            bounds.dim()
        )));
    }
    let mut violations = Vec::new();
    scan(ViolationKind::Box, activation, &bounds.lo, &bounds.hi, tolerance, &mut violations);
    if let (Some(dlo), Some(dhi)) = (&bounds.diff_lo, &bounds.diff_hi) {
        let diffs = adjacent_differences(activation)?;
        scan(ViolationKind::Diff, &diffs, dlo, dhi, tolerance, &mut violations);
    }
    Ok(MonitorReport {
        contained: violations.is_empty(),
        violations,
        sample_id: String::new(),
    })
}

/// Runs each input through the network up to the bounds' layer and checks
/// the activation. A malformed input yields an error in its slot without
/// stopping the stream; reports carry the input's position as `sample_id`.
pub fn monitor_stream<'a, I>(
    net: &'a Network,
    bounds: &'a ActivationBounds,
    inputs: I,
    tolerance: f64,
) -> Result<impl Iterator<Item = Result<MonitorReport>> + 'a>
where
    I: IntoIterator + 'a,
    I::Item: AsRef<[f64]>,
{
    check_tolerance(tolerance)?;
    net.check_cut(bounds.layer)?;
    if net.dim_at(bounds.layer) != bounds.dim() {
        return Err(Error::shape(format!(
            "bounds cover {} neurons, layer {} has {}",
            bounds.dim(),
            bounds.layer,
            net.dim_at(bounds.layer)
        )));
    }
    Ok(inputs.into_iter().enumerate().map(move |(i, input)| {
        let act = net.forward(input.as_ref(), 0, bounds.layer)?;
        Ok(check(bounds, &act, tolerance)?.with_id(i.to_string()))
    }))
}
