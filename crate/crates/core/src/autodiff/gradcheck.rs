//! Central finite-difference verification of recorded graphs.

use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// "leaf-index/element" of the worst element.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare the tape's analytic gradient of `loss` w.r.t. each listed leaf
/// against central differences with step `eps`. The graph must be
/// deterministic; tapes that sampled dropout are rejected.
///
/// The relative error floors its denominator at 1e-6·max(1, |loss|): a
/// central difference resolves nothing below the rounding noise of the
/// loss evaluation (about |loss|·2⁻⁵²/2ε), so gradient entries under the
/// floor are judged in absolute terms instead of against their own size.
pub fn grad_check<T: Scalar>(
    tape: &mut Tape<T>,
    loss: NodeId,
    leaves: &[NodeId],
    eps: f64,
) -> Result<GradCheckReport> {
    if tape.is_stochastic() {
        return Err(Error::Config("grad_check requires a deterministic graph".into()));
    }
    let floor = 1e-6 * tape.scalar(loss).to_f64().abs().max(1.0);
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = leaves.iter().map(|&l| tape.grad(l)).collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    let (mut worst_analytic, mut worst_numeric) = (0.0f64, 0.0f64);
    let mut checked = 0usize;
    let step = T::from_f64(eps);
    for (li, &leaf) in leaves.iter().enumerate() {
        let base = tape.value(leaf).to_vec();
        for j in 0..base.len() {
            let mut bumped = base.clone();
            bumped[j] = base[j] + step;
            tape.set_leaf_value(leaf, &bumped)?;
            tape.replay_forward()?;
            let up = tape.scalar(loss).to_f64();

            bumped[j] = base[j] - step;
            tape.set_leaf_value(leaf, &bumped)?;
            tape.replay_forward()?;
            let down = tape.scalar(loss).to_f64();

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[li][j].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{}/{}", li, j);
                worst_analytic = a;
                worst_numeric = numeric;
            }
            checked += 1;
        }
        tape.set_leaf_value(leaf, &base)?;
    }
    tape.replay_forward()?;
    Ok(GradCheckReport { max_rel_err, checked, worst, worst_analytic, worst_numeric })
}
