//! Shared fixtures for integration tests: random verification instances and
//! an exhaustive ReLU-phase enumeration oracle.
#![allow(dead_code)]

pub mod road;

use cutverify::abstraction::{ActivationBounds, Provenance};
use cutverify::characterizer::Characterizer;
use cutverify::lp::{lp_solve, LinearProgram, LpStatus, Relation};
use cutverify::network::{Layer, Network};
use cutverify::verifier::{RiskClause, RiskCondition, RiskOp, SafetyQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random Dense/BatchNorm/Relu stack with real-valued weights.
pub fn random_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d0 = rng.random_range(1..=5);
    let mut layers = Vec::new();
    let mut d = d0;
    for _ in 0..rng.random_range(1..=4) {
        let out = rng.random_range(1..=6);
        let weights = (0..out).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        layers.push(Layer::dense(weights, bias));
        d = out;
        if rng.random_bool(0.3) {
            layers.push(Layer::BatchNorm {
                scale: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                offset: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                variance: (0..d).map(|_| rng.random_range(0.1..2.0)).collect(),
                epsilon: 1e-5,
            });
        }
        layers.push(Layer::relu(d));
    }
    Network::new(d0, layers).unwrap()
}

pub struct Instance {
    pub net: Network,
    pub query: SafetyQuery,
}

fn half_steps(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.random_range(lo..=hi) as f64 * 0.5
}

fn dense(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Layer {
    let weights = (0..d_out)
        .map(|_| (0..d_in).map(|_| half_steps(rng, -4, 4)).collect())
        .collect();
    let bias = (0..d_out).map(|_| half_steps(rng, -2, 2)).collect();
    Layer::dense(weights, bias)
}

/// Random suffix network cut after layer 1, with a random head, box plus
/// optional difference bounds and one or two risk clauses. Total ReLU
/// count across suffix and head never exceeds 10.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=6);
    let hidden = rng.random_range(1..=5);
    let second = if rng.random_bool(0.3) { rng.random_range(1..=2) } else { 0 };
    let head_hidden = rng.random_range(0..=3);
    let outputs = rng.random_range(1..=2);

    let mut layers = vec![dense(&mut rng, d, d)];
    layers.push(dense(&mut rng, d, hidden));
    if rng.random_bool(0.25) {
        let scale = (0..hidden).map(|_| half_steps(&mut rng, -3, 3)).collect();
        let offset = (0..hidden).map(|_| half_steps(&mut rng, -1, 1)).collect();
        let mean = (0..hidden).map(|_| half_steps(&mut rng, -1, 1)).collect();
        let variance = (0..hidden).map(|_| rng.random_range(1..=4) as f64 * 0.25).collect();
        layers.push(Layer::BatchNorm {
            scale,
            offset,
            mean,
            variance,
            epsilon: 0.0,
        });
    }
    layers.push(Layer::relu(hidden));
    let mut last = hidden;
    if second > 0 {
        layers.push(dense(&mut rng, hidden, second));
        layers.push(Layer::relu(second));
        last = second;
    }
    layers.push(dense(&mut rng, last, outputs));
    let net = Network::new(d, layers).unwrap();

    let head_layers = if head_hidden == 0 {
        vec![dense(&mut rng, d, 1)]
    } else {
        vec![dense(&mut rng, d, head_hidden), Layer::relu(head_hidden), dense(&mut rng, head_hidden, 1)]
    };
    let characterizer = Characterizer::new(Network::new(d, head_layers).unwrap(), "random").unwrap();

    let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-8..=4) as f64 * 0.25).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(1..=12) as f64 * 0.25).collect();
    let (diff_lo, diff_hi) = if d >= 2 && rng.random_bool(0.5) {
        let (a, b): (Vec<f64>, Vec<f64>) = (0..d - 1)
            .map(|i| {
                // keep the difference window overlapping the box's range
                let span_lo = lo[i + 1] - hi[i];
                let span_hi = hi[i + 1] - lo[i];
                let a = span_lo + rng.random_range(0.0..1.0) * (span_hi - span_lo) * 0.6;
                let b = a + rng.random_range(0.0..1.0) * (span_hi - a);
                (a, b)
            })
            .unzip();
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let provenance = if rng.random_bool(0.5) { Provenance::Dataset } else { Provenance::Static };
    let bounds = ActivationBounds {
        layer: 1,
        lo,
        hi,
        diff_lo,
        diff_hi,
        provenance,
        sample_count: if provenance == Provenance::Dataset { 10 } else { 0 },
    };

    let clauses = (0..rng.random_range(1..=2))
        .map(|_| {
            let coeffs = (0..outputs).map(|_| half_steps(&mut rng, -2, 2)).collect();
            let op = match rng.random_range(0..4) {
                0 => RiskOp::Le,
                1 => RiskOp::Ge,
                2 => RiskOp::Lt,
                _ => RiskOp::Gt,
            };
            RiskClause::new(coeffs, op, half_steps(&mut rng, -6, 6))
        })
        .collect();
    let query = SafetyQuery {
        cut_layer: 1,
        bounds,
        characterizer,
        risk: RiskCondition::new(clauses).unwrap(),
    };
    Instance { net, query }
}

/// Builds LP rows for `layers` with every ReLU fixed to the phase given by
/// the next bit of `pattern`. Returns the output variables.
fn phase_layers(
    lp: &mut LinearProgram,
    layers: &[Layer],
    inputs: &[usize],
    pattern: u32,
    bit: &mut u32,
) -> Vec<usize> {
    let free = |lp: &mut LinearProgram| lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
    let mut cur = inputs.to_vec();
    for layer in layers {
        cur = match layer {
            Layer::Dense { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(row, b)| {
                    let y = free(lp);
                    let mut coeffs = vec![(y, 1.0)];
                    coeffs.extend(cur.iter().zip(row).map(|(x, w)| (*x, -w)));
                    lp.add_constraint(coeffs, Relation::Eq, *b);
                    y
                })
                .collect(),
            Layer::BatchNorm {
                scale,
                offset,
                mean,
                variance,
                epsilon,
            } => cur
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    // y = scale (x - mean) / sqrt(var + eps) + offset
                    let s = scale[i] / (variance[i] + epsilon).sqrt();
                    let y = free(lp);
                    lp.add_constraint(vec![(y, 1.0), (*x, -s)], Relation::Eq, offset[i] - s * mean[i]);
                    y
                })
                .collect(),
            Layer::Relu { .. } => cur
                .iter()
                .map(|x| {
                    let active = pattern >> *bit & 1 == 1;
                    *bit += 1;
                    let y = free(lp);
                    if active {
                        lp.add_constraint(vec![(y, 1.0), (*x, -1.0)], Relation::Eq, 0.0);
                        lp.add_constraint(vec![(*x, 1.0)], Relation::Ge, 0.0);
                    } else {
                        lp.add_constraint(vec![(y, 1.0)], Relation::Eq, 0.0);
                        lp.add_constraint(vec![(*x, 1.0)], Relation::Le, 0.0);
                    }
                    y
                })
                .collect(),
        };
    }
    cur
}

fn relu_count(layers: &[Layer]) -> usize {
    layers
        .iter()
        .filter_map(|l| match l {
            Layer::Relu { dim } => Some(*dim),
            _ => None,
        })
        .sum()
}

/// Exhaustive oracle: Unsafe iff some assignment of phases to every ReLU in
/// the suffix and the head admits a feasible point of the pure LP.
/// Returns the feasible cut-layer point when one exists.
pub fn phase_oracle(net: &Network, query: &SafetyQuery) -> Option<Vec<f64>> {
    let suffix = net.suffix(query.cut_layer);
    let head = query.characterizer.head.layers();
    let k = relu_count(suffix) + relu_count(head);
    assert!(k <= 12, "oracle limited to 12 ReLUs, got {k}");
    let b = &query.bounds;
    for pattern in 0..(1u32 << k) {
        let mut lp = LinearProgram::new();
        let cut: Vec<usize> = (0..b.lo.len()).map(|i| lp.add_var(b.lo[i], b.hi[i])).collect();
        if let (Some(dlo), Some(dhi)) = (&b.diff_lo, &b.diff_hi) {
            for i in 0..dlo.len() {
                lp.add_constraint(vec![(cut[i + 1], 1.0), (cut[i], -1.0)], Relation::Ge, dlo[i]);
                lp.add_constraint(vec![(cut[i + 1], 1.0), (cut[i], -1.0)], Relation::Le, dhi[i]);
            }
        }
        let mut bit = 0;
        let out = phase_layers(&mut lp, suffix, &cut, pattern, &mut bit);
        let logit = phase_layers(&mut lp, head, &cut, pattern, &mut bit)[0];
        lp.add_constraint(vec![(logit, 1.0)], Relation::Ge, 0.0);
        for c in &query.risk.clauses {
            let rel = match c.op {
                RiskOp::Le | RiskOp::Lt => Relation::Le,
                RiskOp::Ge | RiskOp::Gt => Relation::Ge,
            };
            lp.add_constraint(out.iter().zip(&c.coeffs).map(|(v, a)| (*v, *a)).collect(), rel, c.rhs);
        }
        let res = lp_solve(&lp).expect("oracle LP");
        if res.status == LpStatus::Optimal {
            let p = res.point.unwrap();
            return Some(cut.iter().map(|&v| p[v]).collect());
        }
    }
    None
}

pub fn total_relus(inst: &Instance) -> usize {
    relu_count(inst.net.suffix(inst.query.cut_layer)) + relu_count(inst.query.characterizer.head.layers())
}
