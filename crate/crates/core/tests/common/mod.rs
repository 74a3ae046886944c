#![allow(dead_code)]

//! Central finite-difference oracle shared by the gradient tests and the
//! acceptance suite. It only evaluates forward values; it never touches the
//! tape's backward pass.

pub mod mock;

use deld_core::{Gradients, Parameter, Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients that are
/// zero up to round-off do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub type Build<'f> = dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> Var + 'f;

pub fn eval(params: &[Parameter], build: &Build) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

pub fn analytic(params: &[Parameter], build: &Build) -> Gradients {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = build(&mut tape, &vars);
    let mut grads = Gradients::new();
    tape.backward(out, &mut grads).expect("backward");
    grads
}

/// Max relative error over every element of every trainable parameter.
pub fn max_rel_err(params: &mut [Parameter], build: &Build) -> f64 {
    let grads = analytic(params, build);
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        if !params[pi].trainable() {
            continue;
        }
        let id = params[pi].id();
        let n = params[pi].value().len();
        for j in 0..n {
            let orig = params[pi].value().data()[j];
            params[pi].value_mut().data_mut()[j] = orig + FD_STEP;
            let up = eval(params, build);
            params[pi].value_mut().data_mut()[j] = orig - FD_STEP;
            let down = eval(params, build);
            params[pi].value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
