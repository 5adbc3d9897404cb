//! Central-difference verification of the tape's backward pass.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Analytic gradient of `f` at `x` via one backward pass.
fn analytic<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    Ok(tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]))
}

/// Derivative of a scalar function of one variable at `x0` by central
/// differences.
///
/// ReLU and max-pool make the tape's functions piecewise smooth. When a
/// switching point lies within `h` of `x0` the two one-sided slopes
/// disagree by a jump instead of by `O(h)`; the step is then shrunk by 10x,
/// at most three times, so the difference is taken on one smooth piece. A
/// wrong backward rule still disagrees with every step.
pub fn central_difference<G>(mut g: G, x0: f64, h: f64) -> Result<f64>
where
    G: FnMut(f64) -> Result<f64>,
{
    let f0 = g(x0)?;
    let mut step = h;
    let mut slope = 0.0;
    for _ in 0..4 {
        let up = g(x0 + step)?;
        let down = g(x0 - step)?;
        let (fwd, bwd) = ((up - f0) / step, (f0 - down) / step);
        slope = (up - down) / (2.0 * step);
        if (fwd - bwd).abs() <= KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
            break;
        }
        step /= 10.0;
    }
    Ok(slope)
}

/// One-sided slopes further apart than this (relative) mark a kink. A jump
/// small enough to pass unnoticed moves the central difference by at most
/// half of it, which is already under [`super::GRAD_CHECK_TOL`].
const KINK_TOL: f64 = 1e-4;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at the given
/// coordinates, refined near kinks as in [`central_difference`].
pub fn numeric_gradient<F>(f: &F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            let d = central_difference(
                |v| {
                    probe.data_mut()[i] = v;
                    eval(f, &probe)
                },
                orig,
                h,
            );
            probe.data_mut()[i] = orig;
            d
        })
        .collect()
}

/// Compares backward against central differences on every coordinate of
/// `x` and returns the max relative error.
///
/// The error is `max_i |a_i - n_i| / max(max_j |a_j|, max_j |n_j|)`, i.e.
/// relative to the gradient's own scale. Coordinates with a tiny true
/// gradient would otherwise dominate through round-off alone.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let full = analytic(&f, x)?;
    let analytic: Vec<f64> = indices.iter().map(|&i| full[i]).collect();
    let numeric = numeric_gradient(&f, x, h, indices)?;
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max))
}
