use ctxpair::ndgrad::{grad_check_with, Graph, Tensor, Var};
use ctxpair::ssl::{
    barlow_twins_loss, byol_pair_loss, combined_loss, vicreg_loss, CombinedLossConfig, SslError, SslMethod,
    VicregCoefficients,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Columns 1..=d of the 8×8 Sylvester Hadamard matrix: zero mean, unit
/// population variance, mutually orthogonal.
fn hadamard_columns(d: usize) -> Tensor<f64> {
    let h = |i: usize, j: usize| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    let rows: Vec<Vec<f64>> = (0..8).map(|i| (1..=d).map(|j| h(i, j)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

type Loss = fn(&mut Graph<f64>, Var, Var) -> f64;

fn eval(za: &Tensor<f64>, zb: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(za.clone()), g.constant(zb.clone()));
    let l = f(&mut g, a, b);
    g.value(l).item()
}

fn bt(za: &Tensor<f64>, zb: &Tensor<f64>) -> f64 {
    eval(za, zb, |g, a, b| barlow_twins_loss(g, a, b, 0.005).unwrap())
}

fn vic(za: &Tensor<f64>, zb: &Tensor<f64>) -> f64 {
    eval(za, zb, |g, a, b| vicreg_loss(g, a, b, &VicregCoefficients::default()).unwrap())
}

fn byol(q: &Tensor<f64>, z: &Tensor<f64>) -> f64 {
    eval(q, z, |g, a, b| byol_pair_loss(g, a, b).unwrap())
}

fn column(z: &Tensor<f64>, j: usize) -> Vec<f64> {
    (0..z.shape()[0]).map(|i| z.at(i, j)).collect()
}

fn bt_oracle(za: &Tensor<f64>, zb: &Tensor<f64>, lambda: f64) -> f64 {
    let (n, d) = (za.shape()[0], za.shape()[1]);
    let standardize = |c: Vec<f64>| -> Vec<f64> {
        let m = c.iter().sum::<f64>() / n as f64;
        let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        c.iter().map(|v| if s > 1e-8 { (v - m) / s } else { 0.0 }).collect()
    };
    let a: Vec<Vec<f64>> = (0..d).map(|j| standardize(column(za, j))).collect();
    let b: Vec<Vec<f64>> = (0..d).map(|j| standardize(column(zb, j))).collect();
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let c: f64 = (0..n).map(|k| a[i][k] * b[j][k]).sum::<f64>() / n as f64;
            loss += if i == j { (1.0 - c).powi(2) } else { lambda * c * c };
        }
    }
    loss
}

fn vicreg_oracle(za: &Tensor<f64>, zb: &Tensor<f64>) -> f64 {
    let (n, d) = (za.shape()[0], za.shape()[1]);
    let mse = za.data().iter().zip(zb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (n * d) as f64;
    let regs = |z: &Tensor<f64>| -> (f64, f64) {
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let c = column(z, j);
                let m = c.iter().sum::<f64>() / n as f64;
                c.iter().map(|v| v - m).collect()
            })
            .collect();
        let mut var = 0.0;
        let mut cov = 0.0;
        for i in 0..d {
            for j in 0..d {
                let c: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum::<f64>() / (n - 1) as f64;
                if i == j {
                    var += (1.0 - (c + 1e-4).sqrt()).max(0.0);
                } else {
                    cov += c * c;
                }
            }
        }
        (var / d as f64, cov / d as f64)
    };
    let (va, ca) = regs(za);
    let (vb, cb) = regs(zb);
    25.0 * mse + 25.0 * (va + vb) + (ca + cb)
}

#[test]
fn barlow_twins_identities() {
    let z = hadamard_columns(4);
    assert!(bt(&z, &z) < 1e-9);
    let neg = z.map(|v| -v);
    assert!((bt(&z, &neg) - 16.0).abs() < 1e-9);
}

#[test]
fn barlow_twins_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (a, b) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        assert!((bt(&a, &b) - bt_oracle(&a, &b, 0.005)).abs() < 1e-10);
    }
}

#[test]
fn vicreg_identities() {
    let z = hadamard_columns(4).map(|v| 1.2 * v);
    assert!(vic(&z, &z) < 1e-6);
    let c = Tensor::full(&[8, 4], 0.3);
    let expected = 2.0 * 25.0 * (1.0 - 1e-4f64.sqrt());
    assert!((vic(&c, &c) - expected).abs() < 1e-12);
    assert!((expected - 50.0).abs() < 0.6);
}

#[test]
fn vicreg_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (a, b) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4).map(|v| 0.3 * v));
        let (got, want) = (vic(&a, &b), vicreg_oracle(&a, &b));
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn byol_identities() {
    let q = Tensor::from_f64(vec![2, 3], &[1.0, 2.0, -0.5, 0.1, 0.0, 3.0]).unwrap();
    assert!(byol(&q, &q).abs() < 1e-12);
    assert!((byol(&q, &q.map(|v| -v)) - 4.0).abs() < 1e-12);
    let a = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 3.0, 3.0]).unwrap();
    let b = Tensor::from_f64(vec![2, 2], &[0.0, 2.0, -1.0, 1.0]).unwrap();
    assert!((byol(&a, &b) - 2.0).abs() < 1e-12);
}

#[test]
fn byol_target_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, z) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4));
    let mut g = Graph::new();
    let (a, b) = (g.param(q.clone()), g.param(z.clone()));
    let l = byol_pair_loss(&mut g, a, b).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.grad(a).unwrap().data().iter().any(|&v| v != 0.0));
    let z2 = z.map(|v| v + 0.5);
    assert_ne!(byol(&q, &z), byol(&q, &z2));
}

fn losses() -> [(&'static str, Loss); 3] {
    [
        ("bt", |g, a, b| {
            let l = barlow_twins_loss(g, a, b, 0.005).unwrap();
            g.value(l).item()
        }),
        ("vicreg", |g, a, b| {
            let l = vicreg_loss(g, a, b, &VicregCoefficients::default()).unwrap();
            g.value(l).item()
        }),
        ("byol", |g, a, b| {
            let l = byol_pair_loss(g, a, b).unwrap();
            g.value(l).item()
        }),
    ]
}

fn loss_node(name: &str, g: &mut Graph<f64>, a: Var, b: Var) -> Var {
    match name {
        "bt" => barlow_twins_loss(g, a, b, 0.005).unwrap(),
        "vicreg" => vicreg_loss(g, a, b, &VicregCoefficients::default()).unwrap(),
        _ => byol_pair_loss(g, a, b).unwrap(),
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, _) in losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (za, zb) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
            // BYOL's target is detached, so only the prediction side is checked.
            let sides: &[bool] = if name == "byol" { &[true] } else { &[true, false] };
            for &first in sides {
                let value = |x: &Tensor<f64>| {
                    let mut g = Graph::new();
                    let (a, b) = if first { (x, &zb) } else { (&za, x) };
                    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
                    let l = loss_node(name, &mut g, va, vb);
                    Ok(g.value(l).item())
                };
                let gradient = |x: &Tensor<f64>| {
                    let mut g = Graph::new();
                    let (a, b) = if first { (x, &zb) } else { (&za, x) };
                    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
                    let l = loss_node(name, &mut g, va, vb);
                    g.backward(l)?;
                    Ok(g.grad(if first { va } else { vb }).unwrap().clone())
                };
                let x = if first { &za } else { &zb };
                worst = worst.max(grad_check_with(value, gradient, x, 1e-6).unwrap());
            }
        }
        assert!(worst < 1e-4, "{name}: {worst}");
    }
}

#[test]
fn losses_are_non_negative_and_byol_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (a, b) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3));
        assert!(bt(&a, &b) >= 0.0);
        assert!(vic(&a, &b) >= 0.0);
        let l = byol(&a, &b);
        assert!((0.0..=4.0 + 1e-12).contains(&l));
    }
}

#[test]
fn degenerate_batches_are_rejected() {
    let one = Tensor::<f64>::zeros(&[1, 4]);
    let mut g = Graph::new();
    let (a, b) = (g.constant(one.clone()), g.constant(one));
    assert!(barlow_twins_loss(&mut g, a, b, 0.005).is_err());
    assert!(vicreg_loss(&mut g, a, b, &VicregCoefficients::default()).is_err());
    assert!(byol_pair_loss(&mut g, a, b).is_err());
}

#[test]
fn combined_loss_reductions() {
    let mut g = Graph::<f64>::new();
    let two = g.constant(Tensor::scalar(2.0));
    let one = g.constant(Tensor::scalar(1.0));
    let mixed = combined_loss(&mut g, 0.5, |_| Ok(two), |_| Ok(one)).unwrap();
    assert_eq!(g.value(mixed).item(), 1.5);
    let zero = combined_loss(&mut g, 0.0, |_| panic!("context branch evaluated"), |_| Ok(one)).unwrap();
    assert_eq!(zero, one);
    let full = combined_loss(&mut g, 1.0, |_| Ok(two), |_| panic!("standard branch evaluated")).unwrap();
    assert_eq!(full, two);
    for alpha in [-0.1, 1.5, f64::NAN] {
        let r = combined_loss(&mut g, alpha, |_| Ok(two), |_| Ok(one));
        assert!(matches!(r, Err(SslError::AlphaOutOfRange(_))));
    }
}

#[test]
fn combined_config_validation() {
    assert!(CombinedLossConfig::default().validate().is_ok());
    let bad = CombinedLossConfig { alpha: 1.2, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = CombinedLossConfig { bt_lambda: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = CombinedLossConfig { byol_tau: 1.5, ..Default::default() };
    assert!(bad.validate().is_err());
    for m in SslMethod::ALL {
        assert_eq!(m.short_name().parse::<SslMethod>().unwrap(), m);
    }
}

proptest! {
    #[test]
    fn combined_of_equal_losses_is_that_loss(l in 0.0f64..100.0, alpha in 0.0f64..=1.0) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(l));
        let b = g.constant(Tensor::scalar(l));
        let c = combined_loss(&mut g, alpha, |_| Ok(a), |_| Ok(b)).unwrap();
        prop_assert!((g.value(c).item() - l).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn batch_losses_ignore_row_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);
        let permute = |t: &Tensor<f64>| {
            Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let (pa, pb) = (permute(&a), permute(&b));
        prop_assert!((bt(&a, &b) - bt(&pa, &pb)).abs() < 1e-10);
        prop_assert!((vic(&a, &b) - vic(&pa, &pb)).abs() < 1e-10);
    }
}
