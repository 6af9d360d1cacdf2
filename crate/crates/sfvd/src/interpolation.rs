//! Differentiable crossfade: expands `n` source frames into a `target_f`-frame
//! video by convex blending of adjacent pairs. This is the single mechanism
//! that bridges frames and videos everywhere in the crate, so it is written
//! once, generically, together with its exact adjoint.
//!
//! Slot rule: the last output slot is pinned to the last input frame; the
//! remaining `target_f - 1` slots are partitioned into `n - 1` contiguous
//! segments whose sizes differ by at most one (earlier segments take the
//! remainder). Within the segment for pair `(x_j, x_{j+1})` of length `L`,
//! slot `s` blends with weight `alpha = s / L`. With `n = target_f` every
//! segment has length one and the input is reproduced exactly.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::Array4;

/// Interpolation kind tag. Only crossfade is implemented; the tag exists so
/// container provenance can name the mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpKind {
    Crossfade,
}

impl std::fmt::Display for InterpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterpKind::Crossfade => write!(f, "crossfade"),
        }
    }
}

/// Per-slot blend plan: `(left_frame, alpha)`; the slot value is
/// `(1 - alpha) * x[left] + alpha * x[left + 1]` (`alpha = 0` when `n = 1`).
fn slot_plan(n: usize, target_f: usize) -> Result<Vec<(usize, f64)>> {
    if n == 0 || target_f == 0 {
        return Err(Error::Argument(format!(
            "crossfade needs n >= 1 and target_f >= 1, got n={n}, target_f={target_f}"
        )));
    }
    if n == 1 {
        return Ok(vec![(0, 0.0); target_f]);
    }
    if target_f < n {
        return Err(Error::Argument(format!(
            "crossfade with n={n} frames needs target_f >= n, got {target_f}"
        )));
    }
    let mut plan = Vec::with_capacity(target_f);
    let body = target_f - 1; // last slot is pinned to the last frame
    let segments = n - 1;
    let base = body / segments;
    let rem = body % segments;
    for j in 0..segments {
        let len = base + usize::from(j < rem);
        for s in 0..len {
            plan.push((j, s as f64 / len as f64));
        }
    }
    plan.push((n - 2, 1.0));
    debug_assert_eq!(plan.len(), target_f);
    Ok(plan)
}

/// Expand `frames` of shape `(n, c, h, w)` into `(target_f, c, h, w)`.
///
/// The map is linear in the input frames; every output frame is a convex
/// combination of at most two adjacent inputs.
pub fn crossfade<S: Real>(frames: &Array4<S>, target_f: usize) -> Result<Array4<S>> {
    let (n, c, h, w) = frames.dim();
    let plan = slot_plan(n, target_f)?;
    let fs = frames.as_slice().expect("frames must be standard layout");
    let px = c * h * w;
    let mut out = Vec::with_capacity(target_f * px);
    for &(j, alpha) in &plan {
        let left = &fs[j * px..(j + 1) * px];
        if alpha == 0.0 {
            out.extend_from_slice(left);
        } else if alpha == 1.0 {
            out.extend_from_slice(&fs[(j + 1) * px..(j + 2) * px]);
        } else {
            let right = &fs[(j + 1) * px..(j + 2) * px];
            let a = S::from_f64(alpha);
            let b = S::from_f64(1.0 - alpha);
            out.extend(left.iter().zip(right).map(|(&l, &r)| b * l + a * r));
        }
    }
    Ok(Array4::from_shape_vec((target_f, c, h, w), out).expect("shape"))
}

/// Exact adjoint of [`crossfade`]: pulls an upstream gradient of shape
/// `(target_f, c, h, w)` back to a gradient over the `n` input frames.
pub fn crossfade_pullback<S: Real>(
    n: usize,
    upstream: &Array4<S>,
    grad_frames: &mut Array4<S>,
) -> Result<()> {
    let (target_f, c, h, w) = upstream.dim();
    let (gn, gc, gh, gw) = grad_frames.dim();
    if gn != n || gc != c || gh != h || gw != w {
        return Err(Error::Argument(format!(
            "pullback shape mismatch: grad ({gn},{gc},{gh},{gw}) vs n={n}, up ({target_f},{c},{h},{w})"
        )));
    }
    let plan = slot_plan(n, target_f)?;
    let up = upstream.as_slice().expect("upstream must be standard layout");
    let gf = grad_frames.as_slice_mut().expect("grad must be standard layout");
    let px = c * h * w;
    for (slot, &(j, alpha)) in plan.iter().enumerate() {
        let u = &up[slot * px..(slot + 1) * px];
        if alpha < 1.0 {
            let b = S::from_f64(1.0 - alpha);
            let g = &mut gf[j * px..(j + 1) * px];
            for (gi, &ui) in g.iter_mut().zip(u) {
                *gi += b * ui;
            }
        }
        if alpha > 0.0 {
            let a = S::from_f64(alpha);
            let g = &mut gf[(j + 1) * px..(j + 2) * px];
            for (gi, &ui) in g.iter_mut().zip(u) {
                *gi += a * ui;
            }
        }
    }
    Ok(())
}
