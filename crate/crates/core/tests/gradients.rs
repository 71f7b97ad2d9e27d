use proptest::prelude::*;
use pulseflow::interpolant::standard_normal;
use pulseflow::seeded_rng;
use pulseflow::training::{build_loss, draw_noise, RclTarget, ShiftedPair, WindowPair};
use pulseflow::vectorfield::{
    grad_check, ArchSpec, AutodiffError, BoundParams, FinalLayerInit, GradCheckOptions, NodeId, OpKind, Tape, Tensor,
    VectorFieldParams,
};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = standard_normal((n, 1), &mut seeded_rng(seed)).into_raw_vec_and_offset().0;
    Tensor::new(shape.to_vec(), v).unwrap()
}

#[test]
fn linear_map_gradient_is_exact() {
    let x = tensor(&[3, 4], 1);
    let w = tensor(&[4, 5], 2);
    let b = tensor(&[5], 3);
    let r = grad_check(
        &[w, b],
        |tape: &mut Tape, ids| {
            let xl = tape.leaf(x.clone());
            let y = tape.linear(xl, ids[0], ids[1])?;
            Ok(tape.sum(y))
        },
        // Central differences of a linear map are exact for any step; a wide
        // one keeps cancellation out of the comparison.
        &GradCheckOptions { fd_step: 1e-2, ..Default::default() },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn single_conv_gradient() {
    let x = tensor(&[2, 3, 9], 4);
    let w = tensor(&[4, 3, 5], 5);
    let b = tensor(&[4], 6);
    let target = tensor(&[2, 4, 9], 7);
    let r = grad_check(
        &[w, b],
        |tape: &mut Tape, ids| {
            let xl = tape.leaf(x.clone());
            let tl = tape.leaf(target.clone());
            let y = tape.conv1d(xl, ids[0], ids[1])?;
            tape.mse(y, tl)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn full_loss_check(opts: &GradCheckOptions) -> pulseflow::vectorfield::GradCheckReport {
    let arch = ArchSpec { regions: 3, hidden: 6, blocks: 2, kernel: 5, time_embed_dim: 8, time_scale: 20.0 };
    let mut rng = seeded_rng(30);
    let flow = VectorFieldParams::init(arch, FinalLayerInit::FanIn, &mut rng).unwrap();
    let den = VectorFieldParams::init(arch, FinalLayerInit::FanIn, &mut rng).unwrap();
    let pair = |rng: &mut pulseflow::Rng| WindowPair {
        x0: standard_normal((12, 3), rng),
        x1: standard_normal((12, 3), rng),
    };
    let batch: Vec<ShiftedPair> = (0..3).map(|_| ShiftedPair { first: pair(&mut rng), second: pair(&mut rng) }).collect();
    let draw = draw_noise(&batch, 0.05, &mut rng);
    let nf = flow.tensors().len();
    let params: Vec<Tensor> = flow.tensors().iter().chain(den.tensors()).cloned().collect();
    grad_check(
        &params,
        |tape: &mut Tape, ids| {
            let fb = BoundParams { ids: ids[..nf].to_vec() };
            let db = BoundParams { ids: ids[nf..].to_vec() };
            build_loss(tape, &flow, &fb, &den, &db, &batch, &draw, 0.3, RclTarget::Residual)
                .map(|n| n.total)
                .map_err(|e| AutodiffError::Argument(e.to_string()))
        },
        opts,
    )
    .unwrap()
}

#[test]
fn full_network_loss_gradient() {
    // Some coordinates carry gradients near 1e-5, where a 1e-6 step loses
    // about 1e-5 relative accuracy to cancellation in the loss value.
    let r = full_loss_check(&GradCheckOptions { coords: 300, seed: 2, fd_step: 1e-5, ..Default::default() });
    assert!(r.coords_checked >= 200);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn sign_fault_is_detected() {
    for kind in [OpKind::Silu, OpKind::Conv1d, OpKind::Rcl] {
        let r = full_loss_check(&GradCheckOptions { coords: 300, seed: 2, sign_fault: Some(kind), ..Default::default() });
        assert!(r.max_rel_error > 1e-2, "{kind:?}: {r:?}");
    }
}

/// Scalar probe `sum(w * op(...))` so every output entry gets its own weight.
fn probe(tape: &mut Tape, y: NodeId, seed: u64) -> pulseflow::vectorfield::Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(tensor(&shape, seed));
    let m = tape.mul(y, w)?;
    Ok(tape.sum(m))
}

/// Gradients here are O(1); the floor turns the comparison into an absolute
/// one for the odd coordinate that lands near zero.
fn check(params: &[Tensor], f: impl Fn(&mut Tape, &[NodeId]) -> pulseflow::vectorfield::Result<NodeId>) -> f64 {
    let opts = GradCheckOptions { fd_step: 1e-5, coords: 64, abs_floor: 1e-3, ..Default::default() };
    grad_check(params, f, &opts).unwrap().max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitive_adjoints(b in 1usize..3, c in 1usize..4, t in 2usize..9, o in 1usize..4, k in 0usize..3, seed in 0u64..1000) {
        let k = 2 * k + 1;
        let x = tensor(&[b, c, t], seed);
        let y = tensor(&[b, c, t], seed + 1);
        let tol = 1e-6;
        let elementwise: [fn(&mut Tape, _, _) -> pulseflow::vectorfield::Result<_>; 4] = [
            |tp: &mut Tape, a, b| tp.add(a, b),
            |tp: &mut Tape, a, b| tp.sub(a, b),
            |tp: &mut Tape, a, b| tp.mul(a, b),
            |tp: &mut Tape, a, b| { let s = tp.silu(a); tp.add(s, b) },
        ];
        for op in elementwise {
            let e = check(&[x.clone(), y.clone()], |tp, ids| { let r = op(tp, ids[0], ids[1])?; probe(tp, r, seed + 2) });
            prop_assert!(e < tol, "elementwise {}", e);
        }
        let e = check(&[x.clone()], |tp, ids| { let r = tp.scale(ids[0], -1.7); probe(tp, r, seed + 3) });
        prop_assert!(e < tol, "scale {}", e);
        let e = check(&[x.clone()], |tp, ids| { let s = tp.sum(ids[0]); let m = tp.mean(ids[0]); let p = tp.mul(s, m)?; Ok(p) });
        prop_assert!(e < tol, "sum/mean {}", e);
        let e = check(&[x.clone(), y.clone()], |tp, ids| tp.mse(ids[0], ids[1]));
        prop_assert!(e < tol, "mse {}", e);
        if t >= 3 {
            let e = check(&[x.clone(), y.clone()], |tp, ids| tp.rcl(ids[0], ids[1]));
            prop_assert!(e < tol, "rcl {}", e);
        }
        let w = tensor(&[o, c, k], seed + 4);
        let bias = tensor(&[o], seed + 5);
        let e = check(&[x.clone(), w, bias], |tp, ids| { let r = tp.conv1d(ids[0], ids[1], ids[2])?; probe(tp, r, seed + 6) });
        prop_assert!(e < tol, "conv1d {}", e);
        let cb = tensor(&[b, c], seed + 7);
        let e = check(&[x.clone(), cb], |tp, ids| { let r = tp.add_channel_bias(ids[0], ids[1])?; probe(tp, r, seed + 8) });
        prop_assert!(e < tol, "add_channel_bias {}", e);
        let xm = tensor(&[b, c], seed + 9);
        let wm = tensor(&[c, o], seed + 10);
        let bm = tensor(&[o], seed + 11);
        let e = check(&[xm, wm, bm], |tp, ids| { let r = tp.linear(ids[0], ids[1], ids[2])?; probe(tp, r, seed + 12) });
        prop_assert!(e < tol, "linear {}", e);
    }
}
