//! Synthetic lane-following scenario: eight lateral offsets of the lane
//! centre at increasing lookahead distances, regressed to two waypoints.

use cutverify::network::{Dataset, Layer, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FEATURES: usize = 8;
/// Cut position: after the first hidden ReLU.
pub const CUT: usize = 2;

pub struct Road {
    pub inputs: Vec<Vec<f64>>,
    /// true when the road bends right (positive curvature)
    pub bends_right: Vec<bool>,
    /// near and far lateral waypoint
    pub targets: Vec<[f64; 2]>,
}

pub fn road_samples(n: usize, seed: u64) -> Road {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut road = Road {
        inputs: Vec::with_capacity(n),
        bends_right: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
    };
    for i in 0..n {
        // alternate directions; keep a gap around straight roads
        let mag = rng.random_range(0.2..1.0);
        let c = if i % 2 == 0 { mag } else { -mag };
        let o = rng.random_range(-0.3..0.3);
        let x = (0..FEATURES)
            .map(|k| {
                let t = (k + 1) as f64 / FEATURES as f64;
                o + c * t * t + noise.sample(&mut rng)
            })
            .collect();
        road.inputs.push(x);
        road.bends_right.push(c > 0.0);
        road.targets.push([o + 0.25 * c, o + c]);
    }
    road
}

impl Road {
    pub fn labeled(&self) -> Dataset {
        Dataset::labeled(self.inputs.clone(), self.bends_right.clone()).unwrap()
    }
}

struct Mlp {
    w: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
}

/// Full-batch gradient descent on mean squared error for a ReLU MLP with
/// the given layer widths. Returns the network as Dense/Relu layers.
pub fn train_regressor(road: &Road, widths: &[usize], epochs: usize, lr: f64, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![FEATURES];
    dims.extend_from_slice(widths);
    dims.push(2);
    let mut mlp = Mlp { w: Vec::new(), b: Vec::new() };
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, scale).unwrap();
        mlp.w.push((0..fan_out).map(|_| (0..fan_in).map(|_| normal.sample(&mut rng)).collect()).collect());
        mlp.b.push(vec![0.0; fan_out]);
    }
    let n = road.inputs.len() as f64;
    let depth = mlp.w.len();
    for _ in 0..epochs {
        let mut gw: Vec<Vec<Vec<f64>>> = mlp.w.iter().map(|m| m.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let mut gb: Vec<Vec<f64>> = mlp.b.iter().map(|v| vec![0.0; v.len()]).collect();
        for (x, y) in road.inputs.iter().zip(&road.targets) {
            // forward, keeping post-activation values per layer
            let mut acts = vec![x.clone()];
            for k in 0..depth {
                let prev = &acts[k];
                let mut z: Vec<f64> = mlp.w[k]
                    .iter()
                    .zip(&mlp.b[k])
                    .map(|(row, b)| row.iter().zip(prev).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
                if k + 1 < depth {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(z);
            }
            let mut delta: Vec<f64> = acts[depth].iter().zip(y).map(|(p, t)| 2.0 * (p - t) / n).collect();
            for k in (0..depth).rev() {
                for (j, d) in delta.iter().enumerate() {
                    gb[k][j] += d;
                    for (i, a) in acts[k].iter().enumerate() {
                        gw[k][j][i] += d * a;
                    }
                }
                if k > 0 {
                    delta = (0..acts[k].len())
                        .map(|i| {
                            if acts[k][i] > 0.0 {
                                delta.iter().enumerate().map(|(j, d)| d * mlp.w[k][j][i]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        for k in 0..depth {
            for j in 0..mlp.w[k].len() {
                mlp.b[k][j] -= lr * gb[k][j];
                for i in 0..mlp.w[k][j].len() {
                    mlp.w[k][j][i] -= lr * gw[k][j][i];
                }
            }
        }
    }
    let mut layers = Vec::new();
    for k in 0..depth {
        let width = mlp.b[k].len();
        layers.push(Layer::dense(mlp.w[k].clone(), mlp.b[k].clone()));
        if k + 1 < depth {
            layers.push(Layer::relu(width));
        }
    }
    Network::new(FEATURES, layers).unwrap()
}

pub fn mse(net: &Network, road: &Road) -> f64 {
    let total: f64 = road
        .inputs
        .iter()
        .zip(&road.targets)
        .map(|(x, t)| {
            let y = net.eval(x).unwrap();
            (y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2)
        })
        .sum();
    total / road.inputs.len() as f64
}
