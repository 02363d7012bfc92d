//! Input property characterizer: a small binary classifier over cut-layer
//! activations whose positive class stands in for an input property that
//! cannot be written down as constraints on raw inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{read_to_string, Dataset, Layer, Network, Sample};

pub const DECISION_RULE: &str = "logit_ge_zero";

#[derive(Debug, Clone, PartialEq)]
pub struct Characterizer {
    /// Maps `d_l` activations to a single logit.
    pub head: Network,
    pub property_id: String,
    /// Training accuracy of `head` under [`decide`]; `None` for heads
    /// that were not produced by [`train`].
    pub achieved_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CharacterizerFile {
    #[serde(flatten)]
    head: Network,
    property_id: String,
    decision_rule: String,
    #[serde(default)]
    achieved_accuracy: Option<f64>,
}

impl Characterizer {
    pub fn new(head: Network, property_id: impl Into<String>) -> Result<Self> {
        if head.output_dim() != 1 {
            return Err(Error::shape(format!(
                "characterizer head must output one logit, got {}",
                head.output_dim()
            )));
        }
        if !matches!(head.layers().last(), Some(Layer::Dense { .. })) {
            return Err(Error::InvalidConfig("characterizer head must end in a dense layer".into()));
        }
        Ok(Characterizer {
            head,
            property_id: property_id.into(),
            achieved_accuracy: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn logit(&self, activation: &[f64]) -> Result<f64> {
        Ok(self.head.eval(activation)?[0])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CharacterizerFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.decision_rule != DECISION_RULE {
            return Err(Error::Parse(format!(
                "unsupported decision rule {:?}, expected {DECISION_RULE:?}",
                file.decision_rule
            )));
        }
        let mut c = Characterizer::new(file.head, file.property_id)?;
        c.achieved_accuracy = file.achieved_accuracy;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        let file = CharacterizerFile {
            head: self.head.clone(),
            property_id: self.property_id.clone(),
            decision_rule: DECISION_RULE.into(),
            achieved_accuracy: self.achieved_accuracy,
        };
        serde_json::to_string_pretty(&file).expect("characterizer serializes")
    }
}

/// Class 1 iff the head's logit is nonnegative.
pub fn decide(h: &Characterizer, activation: &[f64]) -> Result<bool> {
    Ok(h.logit(activation)? >= 0.0)
}

/// Pairs every labeled input with its activation `f^(l)(in)`.
pub fn extract_features(net: &Network, data: &Dataset, l: usize) -> Result<Dataset> {
    net.check_cut(l)?;
    let labels = data.labels()?;
    let rows = data
        .rows()
        .iter()
        .zip(labels)
        .map(|(row, label)| {
            Ok(Sample {
                input: net.forward(&row.input, 0, l)?,
                label: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 0 trains plain logistic regression.
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_units: 0,
            learning_rate: 0.5,
            max_epochs: 5000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters in standardized feature space.
struct Params {
    hidden: Option<(Vec<Vec<f64>>, Vec<f64>)>,
    out_w: Vec<f64>,
    out_b: f64,
}

/// Full-batch gradient descent on mean logistic loss. Features are
/// standardized internally and the standardization is folded back into the
/// first dense layer, so the returned head consumes raw activations.
pub fn train(features: &Dataset, cfg: &TrainConfig, property_id: &str) -> Result<Characterizer> {
    cfg.validate()?;
    let labels = features.labels()?;
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
        return Err(Error::DegenerateLabels);
    }
    let d = features.dim().expect("nonempty");
    let n = features.len() as f64;

    let mut mean = vec![0.0; d];
    for r in features.rows() {
        for (m, v) in mean.iter_mut().zip(&r.input) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in features.rows() {
        for ((s, v), m) in std.iter_mut().zip(&r.input).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in std.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = features
        .rows()
        .iter()
        .map(|r| r.input.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let ys: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.hidden_units;
    let mut p = if k == 0 {
        Params {
            hidden: None,
            out_w: vec![0.0; d],
            out_b: 0.0,
        }
    } else {
        let a = (6.0 / (d + k) as f64).sqrt();
        let w1 = (0..k).map(|_| (0..d).map(|_| rng.random_range(-a..a)).collect()).collect();
        let b1 = (0..k).map(|_| rng.random_range(0.0..0.1)).collect();
        let a2 = (1.0 / k as f64).sqrt();
        Params {
            hidden: Some((w1, b1)),
            out_w: (0..k).map(|_| rng.random_range(-a2..a2)).collect(),
            out_b: 0.0,
        }
    };

    let mut head = fold(&p, &mean, &std, d)?;
    let mut accuracy = training_accuracy(&head, features, &labels)?;
    for _ in 0..cfg.max_epochs {
        if accuracy == 1.0 {
            break;
        }
        gradient_step(&mut p, &xs, &ys, cfg.learning_rate);
        head = fold(&p, &mean, &std, d)?;
        accuracy = training_accuracy(&head, features, &labels)?;
    }
    let mut c = Characterizer::new(head, property_id)?;
    c.achieved_accuracy = Some(accuracy);
    Ok(c)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gradient_step(p: &mut Params, xs: &[Vec<f64>], ys: &[f64], lr: f64) {
    let n = xs.len() as f64;
    let mut g_out_w = vec![0.0; p.out_w.len()];
    let mut g_out_b = 0.0;
    match &mut p.hidden {
        None => {
            for (x, y) in xs.iter().zip(ys) {
                let z: f64 = p.out_w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p.out_b;
                let g = (sigmoid(z) - y) / n;
                for (gw, v) in g_out_w.iter_mut().zip(x) {
                    *gw += g * v;
                }
                g_out_b += g;
            }
        }
        Some((w1, b1)) => {
            let mut g_w1 = vec![vec![0.0; xs[0].len()]; w1.len()];
            let mut g_b1 = vec![0.0; b1.len()];
            for (x, y) in xs.iter().zip(ys) {
                let pre: Vec<f64> = w1
                    .iter()
                    .zip(b1.iter())
                    .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
                let hid: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let z: f64 = p.out_w.iter().zip(&hid).map(|(w, h)| w * h).sum::<f64>() + p.out_b;
                let g = (sigmoid(z) - y) / n;
                g_out_b += g;
                for u in 0..hid.len() {
                    g_out_w[u] += g * hid[u];
                    if pre[u] > 0.0 {
                        let gh = g * p.out_w[u];
                        g_b1[u] += gh;
                        for (gw, v) in g_w1[u].iter_mut().zip(x) {
                            *gw += gh * v;
                        }
                    }
                }
            }
            for (row, grow) in w1.iter_mut().zip(&g_w1) {
                for (w, g) in row.iter_mut().zip(grow) {
                    *w -= lr * g;
                }
            }
            for (b, g) in b1.iter_mut().zip(&g_b1) {
                *b -= lr * g;
            }
        }
    }
    for (w, g) in p.out_w.iter_mut().zip(&g_out_w) {
        *w -= lr * g;
    }
    p.out_b -= lr * g_out_b;
}

/// Rewrites `W ((x - mean) / std) + b` as `W' x + b'`.
fn fold(p: &Params, mean: &[f64], std: &[f64], d: usize) -> Result<Network> {
    let fold_row = |row: &[f64], b: f64| {
        let w: Vec<f64> = row.iter().zip(std).map(|(w, s)| w / s).collect();
        let shift: f64 = w.iter().zip(mean).map(|(w, m)| w * m).sum();
        (w, b - shift)
    };
    let layers = match &p.hidden {
        None => {
            let (w, b) = fold_row(&p.out_w, p.out_b);
            vec![Layer::dense(vec![w], vec![b])]
        }
        Some((w1, b1)) => {
            let (rows, biases): (Vec<_>, Vec<_>) = w1.iter().zip(b1).map(|(r, b)| fold_row(r, *b)).unzip();
            vec![
                Layer::dense(rows, biases),
                Layer::relu(w1.len()),
                Layer::dense(vec![p.out_w.clone()], vec![p.out_b]),
            ]
        }
    };
    Network::new(d, layers)
}

fn training_accuracy(head: &Network, features: &Dataset, labels: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    for (row, label) in features.rows().iter().zip(labels) {
        if (head.eval(&row.input)?[0] >= 0.0) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
