//! Feed-forward networks built from dense, ReLU and batch-normalization
//! layers, plus the labeled datasets fed through them.
//!
//! Positions index the gaps between layers: position 0 is the network
//! input, position `l` is the output of layer `l` (1-based), and position
//! `L` is the network output.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Dense {
        /// Row-major, `d_out` rows of `d_in` entries.
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    /// Dimension is inferred from the preceding layer when loading.
    Relu {
        #[serde(default, skip_serializing)]
        dim: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        scale: Vec<f64>,
        offset: Vec<f64>,
        mean: Vec<f64>,
        variance: Vec<f64>,
        epsilon: f64,
    },
}

impl Layer {
    pub fn dense(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Self {
        Layer::Dense { weights, bias }
    }

    pub fn relu(dim: usize) -> Self {
        Layer::Relu { dim }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense { weights, .. } => weights.first().map_or(0, Vec::len),
            Layer::Relu { dim } => *dim,
            Layer::BatchNorm { scale, .. } => scale.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense { bias, .. } => bias.len(),
            Layer::Relu { dim } => *dim,
            Layer::BatchNorm { scale, .. } => scale.len(),
        }
    }

    /// BatchNorm in inference mode as per-channel `(multiplier, shift)`,
    /// i.e. `y = multiplier * x + shift`.
    pub fn batchnorm_affine(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Layer::BatchNorm {
                scale,
                offset,
                mean,
                variance,
                epsilon,
            } => Some(
                (0..scale.len())
                    .map(|i| {
                        let mul = scale[i] / (variance[i] + epsilon).sqrt();
                        (mul, offset[i] - mul * mean[i])
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect(),
            Layer::Relu { .. } => x.iter().map(|v| v.max(0.0)).collect(),
            Layer::BatchNorm {
                scale,
                offset,
                mean,
                variance,
                epsilon,
            } => x
                .iter()
                .enumerate()
                .map(|(i, v)| scale[i] * (v - mean[i]) / (variance[i] + epsilon).sqrt() + offset[i])
                .collect(),
        }
    }

    /// Checks internal consistency and fixes up the ReLU dimension.
    /// `index` is 1-based and only used for diagnostics.
    fn validate(&mut self, index: usize, in_dim: usize) -> Result<()> {
        match self {
            Layer::Dense { weights, bias } => {
                if weights.is_empty() || weights.len() != bias.len() {
                    return Err(Error::shape_at(
                        index,
                        format!("dense layer has {} weight rows but {} biases", weights.len(), bias.len()),
                    ));
                }
                for row in weights.iter() {
                    if row.len() != in_dim {
                        return Err(Error::shape_at(
                            index,
                            format!("dense row has {} columns, expected input dim {in_dim}", row.len()),
                        ));
                    }
                }
                if weights.iter().flatten().chain(bias.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Value(format!("non-finite weight in layer {index}")));
                }
            }
            Layer::Relu { dim } => *dim = in_dim,
            Layer::BatchNorm {
                scale,
                offset,
                mean,
                variance,
                epsilon,
            } => {
                let n = scale.len();
                if offset.len() != n || mean.len() != n || variance.len() != n {
                    return Err(Error::shape_at(index, "batchnorm vectors differ in length"));
                }
                if n != in_dim {
                    return Err(Error::shape_at(
                        index,
                        format!("batchnorm has {n} channels, expected input dim {in_dim}"),
                    ));
                }
                let all = scale.iter().chain(offset.iter()).chain(mean.iter()).chain(variance.iter());
                if all.clone().any(|v| !v.is_finite()) || !epsilon.is_finite() {
                    return Err(Error::Value(format!("non-finite parameter in layer {index}")));
                }
                if variance.iter().any(|v| *v < 0.0) {
                    return Err(Error::Value(format!("negative variance in layer {index}")));
                }
                if *epsilon < 0.0 {
                    return Err(Error::Value(format!("negative epsilon in layer {index}")));
                }
                if variance.iter().any(|v| v + *epsilon <= 0.0) {
                    return Err(Error::Value(format!(
                        "zero variance with zero epsilon in layer {index}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawNetwork {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetwork> for Network {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        Network::new(raw.input_dim, raw.layers)
    }
}

impl Network {
    pub fn new(input_dim: usize, mut layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::shape("input_dim must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        let mut dim = input_dim;
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.validate(i + 1, dim)?;
            dim = layer.output_dim();
        }
        Ok(Network { input_dim, layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<RawNetwork>(text)
            .map_err(|e| Error::Parse(e.to_string()))
            .and_then(Network::try_from)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Dimension `d_pos` at a position between layers.
    pub fn dim_at(&self, position: usize) -> usize {
        if position == 0 {
            self.input_dim
        } else {
            self.layers[position - 1].output_dim()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dim_at(self.depth())
    }

    /// Layers strictly after `position`.
    pub fn suffix(&self, position: usize) -> &[Layer] {
        &self.layers[position..]
    }

    /// Evaluates layers `from+1 ..= to`.
    pub fn forward(&self, input: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
        if from >= to || to > self.depth() {
            return Err(Error::shape(format!(
                "invalid layer range {from}..{to} for network of depth {}",
                self.depth()
            )));
        }
        let expected = self.dim_at(from);
        if input.len() != expected {
            return Err(Error::shape(format!(
                "input has length {}, expected {expected}",
                input.len()
            )));
        }
        let mut x = input.to_vec();
        for layer in &self.layers[from..to] {
            x = layer.apply(&x);
        }
        Ok(x)
    }

    /// Full forward pass `f^(L)`.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input, 0, self.depth())
    }

    /// Validates `l` as a cut position strictly inside the network.
    pub fn check_cut(&self, l: usize) -> Result<()> {
        if l == 0 || l >= self.depth() {
            return Err(Error::InvalidConfig(format!(
                "cut layer {l} outside [1, {}]",
                self.depth().saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// `out[i] = activation[i+1] - activation[i]`.
pub fn adjacent_differences(activation: &[f64]) -> Result<Vec<f64>> {
    if activation.len() < 2 {
        return Err(Error::shape("adjacent differences need at least two neurons"));
    }
    Ok(activation.windows(2).map(|w| w[1] - w[0]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    rows: Vec<Sample>,
}

impl Dataset {
    pub fn new(rows: Vec<Sample>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.input.len();
            if let Some(i) = rows.iter().position(|r| r.input.len() != d) {
                return Err(Error::shape(format!(
                    "row {i} has {} values, expected {d}",
                    rows[i].input.len()
                )));
            }
        }
        Ok(Dataset { rows })
    }

    pub fn labeled(inputs: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::shape("inputs and labels differ in length"));
        }
        Self::new(
            inputs
                .into_iter()
                .zip(labels)
                .map(|(input, l)| Sample { input, label: Some(l) })
                .collect(),
        )
    }

    pub fn unlabeled(inputs: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(inputs.into_iter().map(|input| Sample { input, label: None }).collect())
    }

    pub fn rows(&self) -> &[Sample] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.input.len())
    }

    /// Labels of every row, or `UnlabeledData` naming the first gap.
    pub fn labels(&self) -> Result<Vec<bool>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.label.ok_or(Error::UnlabeledData { row: i }))
            .collect()
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_csv(BufReader::new(file))
    }

    /// Reads the `x0..x{d-1}[,label]` CSV layout. The header is mandatory.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let has_label = header.iter().next_back() == Some("label");
        let d = header.len() - usize::from(has_label);
        for (i, name) in header.iter().take(d).enumerate() {
            if name != format!("x{i}") {
                return Err(Error::Parse(format!("header column {i} is {name:?}, expected \"x{i}\"")));
            }
        }
        if d == 0 {
            return Err(Error::Parse("header names no feature columns".into()));
        }
        let mut rows = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            if record.len() != header.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, header has {}",
                    r + 1,
                    record.len(),
                    header.len()
                )));
            }
            let input = record
                .iter()
                .take(d)
                .map(|f| parse_real(f, r + 1))
                .collect::<Result<Vec<_>>>()?;
            let label = if has_label {
                match record.get(d) {
                    Some("") => None,
                    Some("0") => Some(false),
                    Some("1") => Some(true),
                    Some(other) => {
                        return Err(Error::Parse(format!("row {}: label {other:?} not in {{0,1}}", r + 1)))
                    }
                    None => None,
                }
            } else {
                None
            };
            rows.push(Sample { input, label });
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim().unwrap_or(0);
        let labeled = self.rows.iter().any(|r| r.label.is_some());
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        if labeled {
            header.push("label".into());
        }
        let to_err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(&header).map_err(to_err)?;
        for row in &self.rows {
            let mut fields: Vec<String> = row.input.iter().map(|v| format!("{v:?}")).collect();
            if labeled {
                fields.push(match row.label {
                    Some(true) => "1".into(),
                    Some(false) => "0".into(),
                    None => String::new(),
                });
            }
            w.write_record(&fields).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn parse_real(field: &str, row: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("row {row}: {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Value(format!("row {row}: non-finite value {field}")));
    }
    Ok(v)
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
