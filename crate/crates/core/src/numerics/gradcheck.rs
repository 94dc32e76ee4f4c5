//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::numerics::tape::{GradTape, Var};
use crate::numerics::tensor::{Element, Tensor};

/// Compare tape gradients of `loss_fn` against central finite differences,
/// component by component, and return the worst error.
///
/// The error metric for a component is `|g_tape - g_fd| / max(1, |g_tape|,
/// |g_fd|)`: relative for gradients above one, absolute below, which keeps
/// finite-difference noise on near-zero components from dominating. Run in
/// `f64` for tight tolerances.
pub fn grad_check<E, F>(mut loss_fn: F, params: &[Tensor<E>], h: E) -> Result<E>
where
    E: Element,
    F: FnMut(&mut GradTape<E>, &[Var]) -> Result<Var>,
{
    // Tape pass.
    let mut tape = GradTape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut eval = |perturbed: &[Tensor<E>]| -> Result<E> {
        let mut tape = GradTape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };

    let two_h = h + h;
    let mut worst = E::zero();
    let mut work: Vec<Tensor<E>> = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let zero_grad = Tensor::zeros(params[pi].dims());
        let g = grads.get(*leaf).unwrap_or(&zero_grad);
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / two_h;
            let gt = g.data()[ci];
            let denom = E::one().max(gt.abs()).max(fd.abs());
            let err = (gt - fd).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
