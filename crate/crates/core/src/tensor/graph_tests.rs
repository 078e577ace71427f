use proptest::prelude::*;

use super::*;
use crate::error::Error;

/// erf by its Maclaurin series; independent of the libm routine the graph uses.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..80 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn scalar_graph(x: f64) -> (Graph, Var) {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::from_vec(vec![x]), false);
    (g, v)
}

#[test]
fn gelu_matches_erf_oracle() {
    let (mut g, x) = scalar_graph(0.0);
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.0);

    for &x0 in &[1.0, -0.7, 2.3, 0.1] {
        let (mut g, x) = scalar_graph(x0);
        let y = g.gelu(x).unwrap();
        let oracle = x0 * 0.5 * (1.0 + erf_series(x0 / 2f64.sqrt()));
        assert!((g.value(y).data()[0] - oracle).abs() < 1e-12);
    }
    let (mut g, x) = scalar_graph(1.0);
    let y = g.gelu(x).unwrap();
    assert!((g.value(y).data()[0] - 0.841345).abs() < 1e-5);
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    for c in [-300.0, 0.0, 5.5, 1e4] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![c; 4]));
        let y = g.softmax(x).unwrap();
        for p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let mut eye = Tensor::zeros([3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let a = Tensor::new([3, 3], (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
    let i = g.constant(eye);
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2,3]"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let w = g.constant(Tensor::zeros([4, 2, 5]));
    let x = g.constant(Tensor::zeros([3, 10]));
    assert!(matches!(
        g.conv1d(x, w, None, Conv1dAttrs::default()),
        Err(Error::Shape { op: "conv1d", .. })
    ));
}

#[test]
fn non_finite_input_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, f64::NAN]), true);
    assert!(matches!(g.gelu(x), Err(Error::NonFinite { op: "gelu" })));
    let y = g.leaf(Tensor::from_vec(vec![f64::INFINITY]), false);
    assert!(matches!(g.sum(y), Err(Error::NonFinite { .. })));
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([2, 3], vec![0.5; 6]).unwrap(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_zero_mse_is_zero() {
    let mut g = Graph::new();
    let data = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
    let x = g.leaf(data.clone(), true);
    let y = g.constant(data);
    let d = g.sub(x, y).unwrap();
    let sq = g.mul(d, d).unwrap();
    let m = g.mean(sq).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let c = g.leaf(Tensor::from_vec(vec![3.0, 4.0]), false);
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 8.0]);
    assert!(g.grad(c).is_none());
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let y = g.gelu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(s)) if s == vec![2]));
}

#[test]
fn softmax_kl_pipeline_matches_finite_differences() {
    let target = [0.1, 0.2, 0.3, 0.4];
    let logits = Tensor::from_vec(vec![0.3, -1.1, 2.0, 0.7]);
    let report = grad_check(
        |g, v| {
            let p = g.softmax(v[0])?;
            let t = g.constant(Tensor::from_vec(target.to_vec()));
            let lt = g.clamp_log(t, 1e-12)?;
            let lp = g.clamp_log(p, 1e-12)?;
            let diff = g.sub(lt, lp)?;
            let prod = g.mul(t, diff)?;
            g.sum(prod)
        },
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn grad_check_on_sum_of_squares() {
    let report = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        &[Tensor::from_vec(vec![1.0, 2.0, 3.0])],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert_eq!(report.probes, 3);
}

#[test]
fn grad_check_on_constant_function_is_zero() {
    let report = grad_check(
        |g, _| Ok(g.constant(Tensor::scalar(4.2))),
        &[Tensor::from_vec(vec![1.0, -1.0])],
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let r = grad_check(
        |g, v| g.gelu(v[0]),
        &[Tensor::from_vec(vec![1.0, 2.0])],
        1e-5,
    );
    assert!(matches!(r, Err(Error::NonScalarRoot(_))));
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new([4, 6], (0..24).map(|i| (i as f64).sin()).collect()).unwrap(),
            true,
        );
        let w = g.leaf(
            Tensor::new([6, 6], (0..36).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap(),
            true,
        );
        let q = g.matmul(x, w).unwrap();
        let a = g.scaled_dot_attention(q, q, x, 2).unwrap();
        let n = g.layer_norm(a, 1e-5).unwrap();
        let out = g.gelu(n).unwrap();
        g.value(out).clone()
    };
    let a = run();
    let b = run();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn narrow_and_concat_round_trip() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([3, 4], (0..12).map(f64::from).collect()).unwrap());
    let top = g.narrow(x, 0, 0, 1).unwrap();
    let rest = g.narrow(x, 0, 1, 2).unwrap();
    let back = g.concat_rows(&[top, rest]).unwrap();
    assert_eq!(g.value(back), g.value(x));
    let cols = g.narrow(x, 1, 1, 2).unwrap();
    assert_eq!(g.value(cols).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
}

#[test]
fn broadcast_per_row_and_suffix() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2, 3], vec![1.0; 6]).unwrap());
    let row = g.constant(Tensor::new([2, 1], vec![2.0, 3.0]).unwrap());
    let col = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let a = g.mul(x, row).unwrap();
    assert_eq!(g.value(a).data(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    let b = g.add(x, col).unwrap();
    assert_eq!(g.value(b).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    let bad = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(g.add(x, bad).is_err());
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in small_matrix(3, 5), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let p = g.softmax(x).unwrap();
        let shifted = Tensor::new([3, 5], t.data().iter().map(|v| v + shift).collect()).unwrap();
        let xs = g.constant(shifted);
        let ps = g.softmax(xs).unwrap();
        for (row, row_s) in g.value(p).data().chunks(5).zip(g.value(ps).data().chunks(5)) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in row.iter().zip(row_s) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(t in small_matrix(4, 8)) {
        // Rows with negligible spread are dominated by eps.
        prop_assume!(t.data().chunks(8).all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0 > 1e-2
        }));
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.layer_norm(x, 1e-12).unwrap();
        for row in g.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
