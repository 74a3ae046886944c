mod common;

use common::{analytic, max_rel_err};
use deld_core::rng::{normal_tensor, stream};
use deld_core::{Gradients, Parameter, Tape, Tensor, Var};

fn randp(seed: u64, shape: &[usize]) -> Parameter {
    let mut rng = stream(seed, 0);
    Parameter::new(normal_tensor(&mut rng, shape, 1.0))
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut params = vec![randp(1, &[3, 4]), randp(2, &[4, 2])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let y = t.matmul(v[0], v[1]).unwrap();
        t.sum(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn matmul_t_gradient_matches_finite_differences() {
    let mut params = vec![randp(3, &[3, 4]), randp(4, &[5, 4])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let y = t.matmul_t(v[0], v[1]).unwrap();
        let y = t.gelu(y);
        t.sum(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = stream(5, 0);
    let x = normal_tensor(&mut rng, &[2, 5], 3.0);
    let s = x.softmax_rows();
    for r in 0..2 {
        // direct summation oracle
        let total: f64 = s.row(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.row(r).iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut params = vec![randp(6, &[3, 5]), randp(7, &[3, 5])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let s = t.softmax_rows(v[0]);
        // weight by a second tensor so the loss is not constant
        let w = t.matmul_t(s, v[1]).unwrap();
        t.sum(w)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn layer_norm_centers_and_scales() {
    let g = Parameter::new(Tensor::full(&[3], 1.0));
    let b = Parameter::new(Tensor::zeros(&[3]));
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]).unwrap();
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let (gv, bv) = (tape.param(&g), tape.param(&b));
    let y = tape.layer_norm(xv, gv, bv, 1e-12).unwrap();
    let out = tape.value(y);
    let row = out.row(0);
    let mean = row.iter().sum::<f64>() / 3.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-10);
    // constant row: zero variance handled by eps, output all zeros
    assert!(out.row(1).iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut params = vec![randp(8, &[4, 6]), randp(9, &[6]), randp(10, &[6]), randp(11, &[4, 6])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let z = t.matmul_t(y, v[3]).unwrap();
        let z = t.gelu(z);
        t.sum(z)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn gelu_values_and_gradient() {
    let gelu = deld_core::tensor::gelu;
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(20.0) - 20.0).abs() < 1e-9);
    let mut params = vec![Parameter::new(Tensor::scalar(0.5))];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let y = t.gelu(v[0]);
        t.sum(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn concat_rows_routes_ones_to_each_part() {
    let a = randp(12, &[2, 3]);
    let b = randp(13, &[3, 3]);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(&a), tape.param(&b));
    let c = tape.concat_rows(&[va, vb]).unwrap();
    assert_eq!(tape.value(c).shape(), &[5, 3]);
    assert_eq!(tape.value(c).row(1), a.value().row(1));
    assert_eq!(tape.value(c).row(2), b.value().row(0));
    let s = tape.sum(c);
    let mut grads = Gradients::new();
    tape.backward(s, &mut grads).unwrap();
    assert_eq!(grads.get(a.id()).unwrap(), &Tensor::full(&[2, 3], 1.0));
    assert_eq!(grads.get(b.id()).unwrap(), &Tensor::full(&[3, 3], 1.0));
}

#[test]
fn concat_single_part_is_identity() {
    let a = randp(14, &[2, 3]);
    let mut tape = Tape::inference();
    let va = tape.param(&a);
    let c = tape.concat_rows(&[va]).unwrap();
    assert_eq!(tape.value(c), a.value());
}

#[test]
fn structural_ops_gradients() {
    // gather, slice/concat cols, mean rows, add_row, scale, sigmoid, bce
    let mut params = vec![randp(15, &[6, 4]), randp(16, &[4]), randp(17, &[1, 4])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        let g = t.gather_rows(v[0], &[3, 1, 3, 5]).unwrap();
        let g = t.add_row(g, v[1]).unwrap();
        let left = t.slice_cols(g, 0, 2).unwrap();
        let right = t.slice_cols(g, 2, 4).unwrap();
        let right = t.scale(right, 0.5);
        let g = t.concat_cols(&[right, left]).unwrap();
        let m = t.mean_rows(g, &[0, 2, 3]).unwrap();
        let logit = t.matmul_t(m, v[2]).unwrap();
        let p = t.sigmoid(logit);
        t.bce(p, 1.0).unwrap()
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn cross_entropy_gradient() {
    let mut params = vec![randp(18, &[3, 7])];
    let err = max_rel_err(&mut params, &|t: &mut Tape, v: &[Var]| {
        t.cross_entropy(v[0], &[0, 6, 2]).unwrap()
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn sum_of_trainable_gives_ones() {
    let p = randp(19, &[2, 2]);
    let grads = analytic(std::slice::from_ref(&p), &|t: &mut Tape, v: &[Var]| t.sum(v[0]));
    assert_eq!(grads.get(p.id()).unwrap(), &Tensor::full(&[2, 2], 1.0));
}

#[test]
fn frozen_only_loss_produces_no_gradients() {
    let p = Parameter::frozen(Tensor::full(&[2], 3.0));
    let mut tape = Tape::new();
    let v = tape.param(&p);
    let s = tape.sum(v);
    let mut grads = Gradients::new();
    tape.backward(s, &mut grads).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn backward_rejects_non_scalar() {
    let p = randp(20, &[2, 2]);
    let mut tape = Tape::new();
    let v = tape.param(&p);
    let err = tape.backward(v, &mut Gradients::new()).unwrap_err();
    assert!(matches!(err, deld_core::Error::Contract(_)));
}

#[test]
fn mixed_frozen_and_trainable_only_trainable_get_grads() {
    let a = randp(21, &[2, 3]);
    let b = Parameter::frozen(normal_tensor(&mut stream(22, 0), &[3, 2], 1.0));
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(&a), tape.param(&b));
    let y = tape.matmul(va, vb).unwrap();
    let s = tape.sum(y);
    let mut grads = Gradients::new();
    tape.backward(s, &mut grads).unwrap();
    assert!(grads.get(a.id()).is_some());
    assert!(grads.get(b.id()).is_none());
}
