mod common;

use common::{random_instance, random_net};
use cutverify::abstraction::{dataset_bounds, static_bounds, widen, ActivationBounds, IntervalBox};
use cutverify::characterizer::{decide, train, Characterizer, TrainConfig};
use cutverify::monitor::{check, ViolationKind};
use cutverify::network::{adjacent_differences, Dataset, Layer, Network};
use cutverify::stats::{guarantee, ConfusionCounts, ConfusionEstimate};
use cutverify::verifier::{encode, verify, verify_with, Budget, RiskOp, Status, VerifyOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Shrinks every interval of `b` to a random sub-interval.
fn shrink(b: &ActivationBounds, rng: &mut ChaCha8Rng) -> ActivationBounds {
    let sub = |lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        lo.iter()
            .zip(hi)
            .map(|(l, h)| {
                let w = h - l;
                let a = l + rng.random_range(0.0..0.5) * w;
                let b = h - rng.random_range(0.0..0.5) * w;
                (a, b)
            })
            .unzip()
    };
    let (lo, hi) = sub(&b.lo, &b.hi, rng);
    let (diff_lo, diff_hi) = match (&b.diff_lo, &b.diff_hi) {
        (Some(dl), Some(dh)) => {
            let (a, c) = sub(dl, dh, rng);
            (Some(a), Some(c))
        }
        _ => (None, None),
    };
    ActivationBounds {
        lo,
        hi,
        diff_lo,
        diff_hi,
        ..b.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_composes(seed in any::<u64>()) {
        let net = random_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = random_vec(&mut rng, net.input_dim(), 3.0);
        let depth = net.depth();
        for a in 0..depth {
            for b in a + 1..depth {
                for c in b + 1..=depth {
                    let start = if a == 0 { x.clone() } else { net.forward(&x, 0, a).unwrap() };
                    let whole = net.forward(&start, a, c).unwrap();
                    let split = net.forward(&net.forward(&start, a, b).unwrap(), b, c).unwrap();
                    for (u, v) in whole.iter().zip(&split) {
                        prop_assert!((u - v).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn relu_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let relu = Network::new(x.len(), vec![Layer::relu(x.len())]).unwrap();
        let twice = Network::new(x.len(), vec![Layer::relu(x.len()), Layer::relu(x.len())]).unwrap();
        prop_assert_eq!(relu.eval(&x).unwrap(), twice.eval(&x).unwrap());
    }

    #[test]
    fn dense_is_affine_linear(seed in any::<u64>(), alpha in -1.0f64..1.0, beta in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d_out) = (rng.random_range(1..6), rng.random_range(1..6));
        let weights: Vec<Vec<f64>> = (0..d_out).map(|_| random_vec(&mut rng, d_in, 1.0)).collect();
        // linearity holds for the bias-free map
        let net = Network::new(d_in, vec![Layer::dense(weights, vec![0.0; d_out])]).unwrap();
        let x = random_vec(&mut rng, d_in, 1.0);
        let y = random_vec(&mut rng, d_in, 1.0);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let (fx, fy, fm) = (net.eval(&x).unwrap(), net.eval(&y).unwrap(), net.eval(&mix).unwrap());
        for i in 0..d_out {
            prop_assert!((fm[i] - (alpha * fx[i] + beta * fy[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn widen_is_monotone(seed in any::<u64>(), m1 in 0.0f64..1.0, m2 in 0.0f64..1.0) {
        let (m1, m2) = (m1.min(m2), m1.max(m2));
        let net = random_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::unlabeled((0..20).map(|_| random_vec(&mut rng, net.input_dim(), 2.0)).collect()).unwrap();
        let b = dataset_bounds(&net, &data, 1, net.dim_at(1) >= 2).unwrap();
        let (w1, w2) = (widen(&b, m1), widen(&b, m2));
        for i in 0..b.dim() {
            prop_assert!(w2.lo[i] <= w1.lo[i] && w1.hi[i] <= w2.hi[i]);
        }
        if let (Some(d1l), Some(d1h), Some(d2l), Some(d2h)) = (w1.diff_lo, w1.diff_hi, w2.diff_lo, w2.diff_hi) {
            for i in 0..d1l.len() {
                prop_assert!(d2l[i] <= d1l[i] && d1h[i] <= d2h[i]);
            }
        }
    }

    #[test]
    fn static_dominates_dataset(seed in any::<u64>()) {
        let net = random_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = random_vec(&mut rng, net.input_dim(), 2.0);
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
        let input = IntervalBox::new(lo.clone(), hi.clone()).unwrap();
        let rows = (0..50)
            .map(|_| lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..=*h)).collect())
            .collect();
        let data = Dataset::unlabeled(rows).unwrap();
        for l in 1..net.depth() {
            let s = static_bounds(&net, &input, l).unwrap();
            let d = dataset_bounds(&net, &data, l, false).unwrap();
            for i in 0..s.dim() {
                prop_assert!(s.lo[i] <= d.lo[i] && d.hi[i] <= s.hi[i]);
            }
        }
    }

    #[test]
    fn dataset_bounds_contain_their_samples(seed in any::<u64>()) {
        let net = random_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Dataset::unlabeled((0..30).map(|_| random_vec(&mut rng, net.input_dim(), 3.0)).collect()).unwrap();
        let l = rng.random_range(1..net.depth());
        let b = dataset_bounds(&net, &data, l, net.dim_at(l) >= 2).unwrap();
        for row in data.rows() {
            prop_assert!(check(&b, &net.forward(&row.input, 0, l).unwrap(), 0.0).unwrap().contained);
        }
    }

    #[test]
    fn decide_ignores_positive_output_scaling(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let w1: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, d, 1.0)).collect();
        let b1 = random_vec(&mut rng, k, 1.0);
        let w2 = vec![random_vec(&mut rng, k, 1.0)];
        let b2 = random_vec(&mut rng, 1, 1.0);
        let head = |w2: Vec<Vec<f64>>, b2: Vec<f64>| {
            let layers = vec![Layer::dense(w1.clone(), b1.clone()), Layer::relu(k), Layer::dense(w2, b2)];
            Characterizer::new(Network::new(d, layers).unwrap(), "p").unwrap()
        };
        let scaled_w2 = vec![w2[0].iter().map(|w| w * c).collect()];
        let (h, hc) = (head(w2, b2.clone()), head(scaled_w2, vec![b2[0] * c]));
        for _ in 0..50 {
            let x = random_vec(&mut rng, d, 2.0);
            let logit = h.logit(&x).unwrap();
            // away from rounding noise at the threshold
            if logit.abs() > 1e-9 {
                prop_assert_eq!(decide(&h, &x).unwrap(), decide(&hc, &x).unwrap());
            }
        }
    }

    #[test]
    fn training_is_deterministic(seed in 0u64..1000, hidden in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..40).map(|_| random_vec(&mut rng, 3, 1.0)).collect();
        let labels: Vec<bool> = inputs.iter().map(|x| x[0] + 0.5 * x[1] > 0.1).collect();
        prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
        let data = Dataset::labeled(inputs, labels).unwrap();
        let cfg = TrainConfig { hidden_units: hidden, max_epochs: 300, seed, ..TrainConfig::default() };
        let a = train(&data, &cfg, "p").unwrap();
        let b = train(&data, &cfg, "p").unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn monitor_matches_encoder_cut_constraints(seed in any::<u64>()) {
        let inst = random_instance(seed % 100_000);
        let problem = encode(&inst.net, &inst.query).unwrap();
        let b = &inst.query.bounds;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let v: Vec<f64> = (0..b.dim())
                .map(|i| {
                    let w = b.hi[i] - b.lo[i];
                    match rng.random_range(0..4) {
                        0 => b.lo[i],
                        1 => b.hi[i],
                        _ => rng.random_range(b.lo[i] - 0.2 * w..=b.hi[i] + 0.2 * w),
                    }
                })
                .collect();
            let report = check(b, &v, 0.0).unwrap();
            prop_assert_eq!(report.contained, problem.cut_constraints_satisfied(&v));
        }
    }

    #[test]
    fn monitor_tolerance_monotone_and_complete(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (t1, t2) = (t1.min(t2), t1.max(t2));
        let inst = random_instance(seed % 100_000);
        let b = &inst.query.bounds;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b.dim()).map(|i| rng.random_range(b.lo[i] - 1.0..b.hi[i] + 1.0)).collect();
        let (r1, r2) = (check(b, &v, t1).unwrap(), check(b, &v, t2).unwrap());
        prop_assert!(!r1.contained || r2.contained);
        prop_assert!(r2.violations.len() <= r1.violations.len());

        let mut expected = (0..b.dim()).filter(|&i| v[i] < b.lo[i] - t1 || v[i] > b.hi[i] + t1).count();
        if let (Some(dl), Some(dh)) = (&b.diff_lo, &b.diff_hi) {
            let d = adjacent_differences(&v).unwrap();
            expected += (0..d.len()).filter(|&i| d[i] < dl[i] - t1 || d[i] > dh[i] + t1).count();
        }
        prop_assert_eq!(r1.violations.len(), expected);
        prop_assert_eq!(r1.contained, expected == 0);
        let boxes = r1.violations.iter().filter(|x| x.kind == ViolationKind::Box).count();
        prop_assert!(boxes <= b.dim());
    }

    #[test]
    fn confusion_cells_and_upper_bound(n11 in 0usize..50, n10 in 0usize..50, n01 in 0usize..50, n00 in 0usize..50, delta in 0.001f64..0.5) {
        let n = n11 + n10 + n01 + n00;
        prop_assume!(n > 0);
        let est = ConfusionEstimate::from_counts(ConfusionCounts { n11, n10, n01, n00, n }).unwrap();
        prop_assert!((est.alpha + est.beta + est.gamma + n00 as f64 / n as f64 - 1.0).abs() <= 1e-12);
        let g = guarantee(&est, delta, false).unwrap();
        prop_assert!(1.0 - g.conservative_guarantee >= est.gamma);
        prop_assert!(0.0 <= g.conservative_guarantee && g.conservative_guarantee <= g.point_guarantee);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn safe_is_monotone_in_bounds(seed in 0u64..100_000) {
        let inst = random_instance(seed);
        let outer = verify(&inst.net, &inst.query, Budget::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inner = inst.query.clone();
        inner.bounds = shrink(&inst.query.bounds, &mut rng);
        let v = verify(&inst.net, &inner, Budget::default()).unwrap();
        if outer.status == Status::Safe {
            prop_assert_eq!(v.status, Status::Safe);
        }
        if v.status == Status::Unsafe {
            prop_assert_eq!(outer.status, Status::Unsafe);
        }
    }

    #[test]
    fn safe_is_never_refuted_by_sampling(seed in 0u64..100_000) {
        let inst = random_instance(seed);
        prop_assume!(inst.query.risk.clauses.iter().any(|c| matches!(c.op, RiskOp::Lt | RiskOp::Gt)));
        let verdict = verify(&inst.net, &inst.query, Budget::default()).unwrap();
        let b = &inst.query.bounds;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0;
        for _ in 0..2000 {
            let v: Vec<f64> = (0..b.dim()).map(|i| rng.random_range(b.lo[i]..=b.hi[i])).collect();
            if !check(b, &v, 0.0).unwrap().contained {
                continue;
            }
            let out = inst.net.forward(&v, inst.query.cut_layer, inst.net.depth()).unwrap();
            if decide(&inst.query.characterizer, &v).unwrap() && inst.query.risk.holds(&out) {
                hits += 1;
            }
        }
        if hits > 0 {
            prop_assert_eq!(verdict.status, Status::Unsafe);
        }
    }

    #[test]
    fn verification_is_deterministic(seed in 0u64..100_000) {
        let inst = random_instance(seed);
        let a = verify(&inst.net, &inst.query, Budget::default()).unwrap();
        let b = verify(&inst.net, &inst.query, Budget::default()).unwrap();
        prop_assert_eq!(a.report_json(false), b.report_json(false));
        let par = verify_with(&inst.net, &inst.query, &VerifyOptions { workers: 4, ..VerifyOptions::default() }).unwrap();
        prop_assert_eq!(par.status, a.status);
    }
}
