use rand::seq::index::sample;

use super::tape::{NodeId, OpKind, Tape};
use super::tensor::Tensor;
use super::{AutodiffError, Result};
use crate::seeded_rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub fd_step: f64,
    /// Coordinates compared; every coordinate is used when there are fewer.
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub abs_floor: f64,
    /// Sign-flip the adjoint of this op (negative controls only).
    pub sign_fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { fd_step: 1e-6, coords: 256, seed: 0, abs_floor: 1e-7, sign_fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
}

fn evaluate<F>(params: &[Tensor], f: &F, sign_fault: Option<OpKind>) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = match sign_fault {
        Some(k) => Tape::with_sign_fault(k),
        None => Tape::new(),
    };
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    tape.check_finite()?;
    Ok((tape, ids, out))
}

/// Compare tape gradients of the scalar `f(params)` with central finite
/// differences on a random subsample of coordinates.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.fd_step > 0.0) {
        return Err(AutodiffError::Argument(format!("fd_step {} must be > 0", opts.fd_step)));
    }
    let (tape, ids, out) = evaluate(params, &f, opts.sign_fault)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| grads.get_or_zeros(*id, p.shape()))
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.numel();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let n = opts.coords.min(total);
    let mut rng = seeded_rng(opts.seed);
    let mut picks = sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();

    let value_at = |ps: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = evaluate(ps, &f, None)?;
        tape.value(out).item()
    };

    let mut worst = (0.0, (0, 0));
    let mut work = params.to_vec();
    for flat in picks {
        let pi = offsets.partition_point(|o| *o <= flat) - 1;
        let idx = flat - offsets[pi];
        let orig = work[pi].data()[idx];
        work[pi].data_mut()[idx] = orig + opts.fd_step;
        let up = value_at(&work)?;
        work[pi].data_mut()[idx] = orig - opts.fd_step;
        let down = value_at(&work)?;
        work[pi].data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * opts.fd_step);
        let a = analytic[pi].data()[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.abs_floor);
        if rel > worst.0 || worst.0.is_nan() {
            worst = (rel, (pi, idx));
        }
    }
    Ok(GradCheckReport { max_rel_error: worst.0, coords_checked: n, worst: worst.1 })
}
