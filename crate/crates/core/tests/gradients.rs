//! Tape gradients against finite differences of a plain forward pass.

use proptest::prelude::*;
use shield_core::numerics::{Tape, Tensor};

fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
    let h = 1e-4;
    let at = |t: f64| {
        let mut v = x.to_vec();
        v[k] += t;
        f(&v)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3)
}

/// Plain forward: sum(tanh(phi(x W) + b)) + cos(mean_rows(x), c) + sum(norms(x)).
fn forward(x: &[f64], w: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let (n, d, m) = (3, 4, 2);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p: f64 = (0..d).map(|k| x[i * d + k] * w[k * m + j]).sum();
            total += (p * p.abs() + b[j]).tanh();
        }
    }
    let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|i| x[i * d + k]).sum::<f64>() / n as f64).collect();
    let dot: f64 = mean.iter().zip(c).map(|(a, b)| a * b).sum();
    let nm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    total += dot / (nm * nc);
    for i in 0..n {
        total += (0..d).map(|k| x[i * d + k].powi(2)).sum::<f64>().sqrt();
    }
    total
}

fn taped(x: &[f64], w: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let xv = t.leaf(Tensor::new(vec![3, 4], x.to_vec()).unwrap(), true);
    let wv = t.constant(Tensor::new(vec![4, 2], w.to_vec()).unwrap());
    let bv = t.constant(Tensor::new(vec![1, 2], b.to_vec()).unwrap());
    let cv = t.constant(Tensor::new(vec![4], c.to_vec()).unwrap());
    let p = t.matmul(xv, wv).unwrap();
    let p = t.signed_square(p).unwrap();
    let p = t.add_row(p, bv).unwrap();
    let p = t.tanh(p).unwrap();
    let s1 = t.sum(p).unwrap();
    let mean = t.mean_rows(xv).unwrap();
    let cs = t.cosine(mean, cv).unwrap();
    let norms = t.row_norms(xv).unwrap();
    let s3 = t.sum(norms).unwrap();
    let a = t.add(s1, cs).unwrap();
    let loss = t.add(a, s3).unwrap();
    t.backward(loss).unwrap();
    t.grad(xv).unwrap().unwrap().data().to_vec()
}

fn vec_in(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.1f64..1.0, n).prop_map(|v| v.into_iter().enumerate().map(|(i, x)| if i % 3 == 0 { -x } else { x }).collect())
}

proptest! {
    #[test]
    fn composite_graph_matches_finite_differences(
        x in vec_in(12), w in vec_in(8), b in vec_in(2), c in vec_in(4)
    ) {
        let g = taped(&x, &w, &b, &c);
        let f = |v: &[f64]| forward(v, &w, &b, &c);
        for k in 0..12 {
            let n = fd(&f, &x, k);
            prop_assert!(close(g[k], n), "coord {k}: tape {} fd {n}", g[k]);
        }
    }

    #[test]
    fn clamp_and_gather_route_gradients(x in proptest::collection::vec(-0.5f64..1.5, 6)) {
        // Keep clear of the clamp edges, where the derivative jumps.
        prop_assume!(x.iter().all(|v| v.abs() > 1e-3 && (v - 1.0).abs() > 1e-3));
        let idx = vec![5, 0, 0, 3, 2, 2, 2];
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::new(vec![6], x.clone()).unwrap(), true);
        let c = t.clamp(xv, 0.0, 1.0).unwrap();
        let g = t.gather(c, idx.clone(), vec![7]).unwrap();
        let sq = t.mul(g, g).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let grad = t.grad(xv).unwrap().unwrap().data().to_vec();
        let f = |v: &[f64]| idx.iter().map(|&i| v[i].clamp(0.0, 1.0).powi(2)).sum::<f64>();
        for k in 0..6 {
            prop_assert!(close(grad[k], fd(&f, &x, k)));
        }
    }
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().unwrap().data(), &[2.0, 2.0]);
    t.zero_grad();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().unwrap().data(), &[1.0, 1.0]);
}
