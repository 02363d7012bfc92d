//! Cut-layer bound sets: the sound static envelope obtained by interval
//! propagation from an input box, and the dataset envelope (box plus
//! adjacent-difference bounds) used for assume-guarantee proofs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{adjacent_differences, read_to_string, Dataset, Layer, Network};

/// Axis-aligned box `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Input-space box used for static analysis.
pub type InputBox = IntervalBox;

impl IntervalBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_ordered(&lo, &hi, "box")?;
        Ok(IntervalBox { lo, hi })
    }

    /// The same `[lo, hi]` on every one of `dim` coordinates.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| l <= v && v <= h)
    }
}

fn check_ordered(lo: &[f64], hi: &[f64], what: &str) -> Result<()> {
    if lo.len() != hi.len() {
        return Err(Error::shape(format!("{what} lower and upper bounds differ in length")));
    }
    if let Some(i) = (0..lo.len()).find(|&i| lo[i].is_nan() || hi[i].is_nan() || lo[i] > hi[i]) {
        return Err(Error::Value(format!("{what} bound {i} has lo {} > hi {}", lo[i], hi[i])));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Static,
    Dataset,
}

/// Bound set at cut position `layer`: a box, optionally refined by bounds
/// on the differences of adjacent neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct ActivationBounds {
    pub layer: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub diff_lo: Option<Vec<f64>>,
    pub diff_hi: Option<Vec<f64>>,
    pub provenance: Provenance,
    pub sample_count: usize,
}

#[derive(Deserialize)]
struct RawBounds {
    layer: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    #[serde(default)]
    diff_lo: Option<Vec<f64>>,
    #[serde(default)]
    diff_hi: Option<Vec<f64>>,
    provenance: Provenance,
    #[serde(default)]
    sample_count: usize,
}

impl TryFrom<RawBounds> for ActivationBounds {
    type Error = Error;

    fn try_from(raw: RawBounds) -> Result<Self> {
        let b = ActivationBounds {
            layer: raw.layer,
            lo: raw.lo,
            hi: raw.hi,
            diff_lo: raw.diff_lo,
            diff_hi: raw.diff_hi,
            provenance: raw.provenance,
            sample_count: raw.sample_count,
        };
        b.validate()?;
        Ok(b)
    }
}

impl ActivationBounds {
    pub fn validate(&self) -> Result<()> {
        check_ordered(&self.lo, &self.hi, "activation")?;
        if self.lo.is_empty() {
            return Err(Error::shape("activation bounds are empty"));
        }
        if self.lo.iter().chain(&self.hi).any(|v| !v.is_finite()) {
            return Err(Error::Value("activation bounds must be finite".into()));
        }
        match (&self.diff_lo, &self.diff_hi) {
            (None, None) => {}
            (Some(dlo), Some(dhi)) => {
                check_ordered(dlo, dhi, "difference")?;
                if dlo.len() + 1 != self.lo.len() {
                    return Err(Error::shape(format!(
                        "{} difference bounds for {} neurons",
                        dlo.len(),
                        self.lo.len()
                    )));
                }
            }
            _ => return Err(Error::Value("diff_lo and diff_hi must be given together".into())),
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn has_diffs(&self) -> bool {
        self.diff_lo.is_some()
    }

    pub fn as_box(&self) -> IntervalBox {
        IntervalBox {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bounds serialize")
    }
}

/// Running min/max over cut-layer activations. Partial accumulators over
/// disjoint partitions of a dataset can be merged in any order.
#[derive(Debug, Clone)]
pub struct BoundsAccumulator {
    layer: usize,
    with_diffs: bool,
    lo: Vec<f64>,
    hi: Vec<f64>,
    diff_lo: Vec<f64>,
    diff_hi: Vec<f64>,
    count: usize,
}

impl BoundsAccumulator {
    pub fn new(layer: usize, dim: usize, with_diffs: bool) -> Self {
        let nd = if with_diffs { dim.saturating_sub(1) } else { 0 };
        BoundsAccumulator {
            layer,
            with_diffs,
            lo: vec![f64::INFINITY; dim],
            hi: vec![f64::NEG_INFINITY; dim],
            diff_lo: vec![f64::INFINITY; nd],
            diff_hi: vec![f64::NEG_INFINITY; nd],
            count: 0,
        }
    }

    pub fn push(&mut self, activation: &[f64]) -> Result<()> {
        if activation.len() != self.lo.len() {
            return Err(Error::shape(format!(
                "activation has length {}, expected {}",
                activation.len(),
                self.lo.len()
            )));
        }
        min_max_into(&mut self.lo, &mut self.hi, activation);
        if self.with_diffs {
            let d = adjacent_differences(activation)?;
            min_max_into(&mut self.diff_lo, &mut self.diff_hi, &d);
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(mut self, other: &BoundsAccumulator) -> Self {
        min_max_into(&mut self.lo, &mut self.hi, &other.lo);
        min_max_into(&mut self.lo, &mut self.hi, &other.hi);
        min_max_into(&mut self.diff_lo, &mut self.diff_hi, &other.diff_lo);
        min_max_into(&mut self.diff_lo, &mut self.diff_hi, &other.diff_hi);
        self.count += other.count;
        self
    }

    pub fn finish(self) -> Result<ActivationBounds> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(ActivationBounds {
            layer: self.layer,
            lo: self.lo,
            hi: self.hi,
            diff_lo: self.with_diffs.then_some(self.diff_lo),
            diff_hi: self.with_diffs.then_some(self.diff_hi),
            provenance: Provenance::Dataset,
            sample_count: self.count,
        })
    }
}

fn min_max_into(lo: &mut [f64], hi: &mut [f64], values: &[f64]) {
    for ((l, h), v) in lo.iter_mut().zip(hi.iter_mut()).zip(values) {
        // infinities from an empty partner accumulator are skipped naturally
        if v.is_finite() {
            *l = l.min(*v);
            *h = h.max(*v);
        }
    }
}

/// Envelope of `f^(l)` over every sample of `data`.
pub fn dataset_bounds(net: &Network, data: &Dataset, l: usize, with_diffs: bool) -> Result<ActivationBounds> {
    net.check_cut(l)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = net.dim_at(l);
    if with_diffs && dim < 2 {
        return Err(Error::shape("difference bounds need a cut layer with at least two neurons"));
    }
    let mut acc = BoundsAccumulator::new(l, dim, with_diffs);
    for row in data.rows() {
        acc.push(&net.forward(&row.input, 0, l)?)?;
    }
    acc.finish()
}

/// Sound interval bounds on `f^(l)(x)` for every `x` in `input`.
pub fn static_bounds(net: &Network, input: &InputBox, l: usize) -> Result<ActivationBounds> {
    net.check_cut(l)?;
    if input.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "input box has dimension {}, network expects {}",
            input.dim(),
            net.input_dim()
        )));
    }
    let mut boxes = propagate_intervals(&net.layers()[..l], input);
    let cut = boxes.pop().expect("at least one position");
    Ok(ActivationBounds {
        layer: l,
        lo: cut.lo,
        hi: cut.hi,
        diff_lo: None,
        diff_hi: None,
        provenance: Provenance::Static,
        sample_count: 0,
    })
}

/// Interval propagation through `layers`. Returns one box per position,
/// starting with `input` itself, so `result[k]` bounds the output of
/// `layers[k-1]`. Bounds are padded outward to cover floating-point
/// rounding in the concrete forward pass.
pub fn propagate_intervals(layers: &[Layer], input: &IntervalBox) -> Vec<IntervalBox> {
    let mut out = Vec::with_capacity(layers.len() + 1);
    out.push(input.clone());
    for layer in layers {
        let cur = out.last().expect("nonempty");
        let next = match layer {
            Layer::Dense { weights, bias } => {
                let n = cur.lo.len() as f64;
                let (lo, hi) = weights
                    .iter()
                    .zip(bias)
                    .map(|(row, b)| {
                        let (mut lo, mut hi, mut mag) = (*b, *b, b.abs());
                        for ((w, l), h) in row.iter().zip(&cur.lo).zip(&cur.hi) {
                            if *w > 0.0 {
                                lo += w * l;
                                hi += w * h;
                            } else if *w < 0.0 {
                                lo += w * h;
                                hi += w * l;
                            } else {
                                continue;
                            }
                            mag += w.abs() * l.abs().max(h.abs());
                        }
                        let pad = (n + 2.0) * f64::EPSILON * mag;
                        (lo - pad, hi + pad)
                    })
                    .unzip();
                IntervalBox { lo, hi }
            }
            Layer::Relu { .. } => IntervalBox {
                lo: cur.lo.iter().map(|v| v.max(0.0)).collect(),
                hi: cur.hi.iter().map(|v| v.max(0.0)).collect(),
            },
            Layer::BatchNorm { mean, offset, .. } => {
                let affine = layer.batchnorm_affine().expect("batchnorm");
                let (lo, hi) = affine
                    .iter()
                    .enumerate()
                    .map(|(i, (mul, shift))| {
                        let (a, b) = (mul * cur.lo[i] + shift, mul * cur.hi[i] + shift);
                        let mag = mul.abs() * (cur.lo[i].abs().max(cur.hi[i].abs()) + mean[i].abs())
                            + offset[i].abs();
                        let pad = 8.0 * f64::EPSILON * mag;
                        (a.min(b) - pad, a.max(b) + pad)
                    })
                    .unzip();
                IntervalBox { lo, hi }
            }
        };
        out.push(next);
    }
    out
}

/// Enlarges every bound by `margin * max(1, |bound|)`.
pub fn widen(bounds: &ActivationBounds, margin: f64) -> ActivationBounds {
    let slack = |v: f64| margin * v.abs().max(1.0);
    let down = |v: &Vec<f64>| v.iter().map(|x| x - slack(*x)).collect::<Vec<_>>();
    let up = |v: &Vec<f64>| v.iter().map(|x| x + slack(*x)).collect::<Vec<_>>();
    ActivationBounds {
        layer: bounds.layer,
        lo: down(&bounds.lo),
        hi: up(&bounds.hi),
        diff_lo: bounds.diff_lo.as_ref().map(down),
        diff_hi: bounds.diff_hi.as_ref().map(up),
        provenance: bounds.provenance,
        sample_count: bounds.sample_count,
    }
}
