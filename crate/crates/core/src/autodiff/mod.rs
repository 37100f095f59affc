//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A fresh [`Tape`] is built for every forward pass. Operations append nodes;
//! [`Tape::backward`] sweeps them in reverse and sums gradient contributions
//! across fan-out. Broadcasting is limited to scalar-with-tensor; anything else
//! needs an explicit [`Tape::reshape`] or [`Tape::repeat_rows`].

mod kernels;
mod tape;
mod tensor;

#[allow(unused_imports)]
pub(crate) use kernels::{log_softmax_row, matmul, softmax_row, transpose};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;

use crate::error::{ensure, Result};

/// Denominator floor for [`fd_check`]'s relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between backward gradients and central
/// finite differences with step `h`, over every entry of `params`.
///
/// The error for one entry is `|fd - g| / max(|fd|, |g|, FD_REL_FLOOR)`.
pub fn fd_check<F>(f: F, params: &mut [Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let up = eval(params)?;
            params[p].data_mut()[i] = orig - h;
            let down = eval(params)?;
            params[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[p].data()[i];
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(FD_REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
