//! Reverse- and forward-mode differentiation over batched tensors.

mod dual;
mod tape;

pub use dual::Dual;
pub use tape::{sigmoid, Gradients, Tape, Tensor, Var, LAYER_NORM_EPS};

use crate::error::Result;

/// Value and gradient of a scalar program with respect to each parameter tensor.
pub fn gradient<F>(params: &[Tensor], program: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    let g = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt(v, p.dim()))
        .collect();
    Ok((value, g))
}

/// Primal outputs and one tangent per direction.
pub fn jvp<F>(input: &Tensor, directions: &[Tensor], program: F) -> Result<(Tensor, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, Dual) -> Result<Dual>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let t = directions
        .iter()
        .map(|d| {
            assert_eq!(d.dim(), input.dim(), "direction shape must match input");
            Some(tape.constant(d.clone()))
        })
        .collect();
    let out = program(&mut tape, Dual::new(x, t))?;
    let tangents = (0..out.channels()).map(|k| out.tangent_value(&tape, k)).collect();
    Ok((tape.value(out.p).clone(), tangents))
}

/// Gradient of a scalar that depends on forward-mode tangents.
///
/// The program receives the parameters and builds whatever duals it needs;
/// since tangents live on the same tape the reverse sweep differentiates
/// through them.
pub fn reverse_over_forward<F>(params: &[Tensor], program: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient(params, program)
}

/// Central finite-difference gradient of `f` over every entry of every tensor.
pub fn finite_difference<F>(params: &[Tensor], h: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut g = Tensor::zeros(params[k].dim());
        for idx in 0..params[k].len() {
            let (r, c) = (idx / params[k].ncols(), idx % params[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let fp = f(&work)?;
            work[k][[r, c]] = orig - h;
            let fm = f(&work)?;
            work[k][[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest entry-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(&u, &v)| (u, v)).collect::<Vec<_>>())
        .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(floor))
        .fold(0.0, f64::max)
}
