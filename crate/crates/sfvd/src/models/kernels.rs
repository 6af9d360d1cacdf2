//! Low-level compute kernels, written once over [`Real`] and shared by the
//! f64 training paths and the dual-number meta-gradient passes. All kernels
//! operate on flat standard-layout slices with explicit dimensions.

use crate::data::Vdim;
use crate::scalar::Real;

/// 3-D convolution, "same" padding (`k/2` per axis), stride 1.
/// Input `(f, c_in, h, w)`, kernel `(c_out, c_in, kt, ky, kx)`, bias `(c_out)`,
/// output `(f, c_out, h, w)`. A `kt = 1` kernel degenerates to per-frame 2-D
/// convolution, which is how the recurrent evaluators reuse this.
///
/// Organized as one row-long axpy per kernel tap so the inner loop is a
/// dependency-free elementwise update.
pub fn conv3d_forward<S: Real>(
    inp: &[S],
    id: Vdim,
    weight: &[S],
    bias: &[S],
    c_out: usize,
    k: (usize, usize, usize),
    out: &mut [S],
) {
    let (kt, ky, kx) = k;
    let (pt, py, px) = (kt / 2, ky / 2, kx / 2);
    let (f, c_in, h, w) = (id.f, id.c, id.h, id.w);
    debug_assert_eq!(inp.len(), id.len());
    debug_assert_eq!(out.len(), f * c_out * h * w);
    debug_assert_eq!(weight.len(), c_out * c_in * kt * ky * kx);
    let plane = h * w;
    for t in 0..f {
        for co in 0..c_out {
            let out_plane = &mut out[(t * c_out + co) * plane..(t * c_out + co + 1) * plane];
            for v in out_plane.iter_mut() {
                *v = bias[co];
            }
            for dt in 0..kt {
                let t_in = t + dt;
                if t_in < pt || t_in - pt >= f {
                    continue;
                }
                let t_in = t_in - pt;
                for ci in 0..c_in {
                    let in_plane = &inp[(t_in * c_in + ci) * plane..(t_in * c_in + ci + 1) * plane];
                    let w_tap = &weight[((co * c_in + ci) * kt + dt) * ky * kx..];
                    for dy in 0..ky {
                        let y_lo = py.saturating_sub(dy);
                        let y_hi = (h + py).saturating_sub(dy).min(h);
                        for dx in 0..kx {
                            let wv = w_tap[dy * kx + dx];
                            let x_lo = px.saturating_sub(dx);
                            let x_hi = (w + px).saturating_sub(dx).min(w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let y_in = y + dy - py;
                                let out_row = &mut out_plane[y * w + x_lo..y * w + x_hi];
                                let in_row =
                                    &in_plane[y_in * w + x_lo + dx - px..y_in * w + x_hi + dx - px];
                                for (o, &iv) in out_row.iter_mut().zip(in_row) {
                                    *o += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv3d_forward`] with respect to its input; `dinp` is
/// overwritten. Exact adjoint of the forward map.
pub fn conv3d_backward_input<S: Real>(
    dout: &[S],
    id: Vdim,
    weight: &[S],
    c_out: usize,
    k: (usize, usize, usize),
    dinp: &mut [S],
) {
    let (kt, ky, kx) = k;
    let (pt, py, px) = (kt / 2, ky / 2, kx / 2);
    let (f, c_in, h, w) = (id.f, id.c, id.h, id.w);
    let plane = h * w;
    for v in dinp.iter_mut() {
        *v = S::zero();
    }
    for t in 0..f {
        for co in 0..c_out {
            let dout_plane = &dout[(t * c_out + co) * plane..(t * c_out + co + 1) * plane];
            for dt in 0..kt {
                let t_in = t + dt;
                if t_in < pt || t_in - pt >= f {
                    continue;
                }
                let t_in = t_in - pt;
                for ci in 0..c_in {
                    let di_plane =
                        &mut dinp[(t_in * c_in + ci) * plane..(t_in * c_in + ci + 1) * plane];
                    let w_tap = &weight[((co * c_in + ci) * kt + dt) * ky * kx..];
                    for dy in 0..ky {
                        let y_lo = py.saturating_sub(dy);
                        let y_hi = (h + py).saturating_sub(dy).min(h);
                        for dx in 0..kx {
                            let wv = w_tap[dy * kx + dx];
                            let x_lo = px.saturating_sub(dx);
                            let x_hi = (w + px).saturating_sub(dx).min(w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let y_in = y + dy - py;
                                let dout_row = &dout_plane[y * w + x_lo..y * w + x_hi];
                                let di_row = &mut di_plane
                                    [y_in * w + x_lo + dx - px..y_in * w + x_hi + dx - px];
                                for (dv, &g) in di_row.iter_mut().zip(dout_row) {
                                    *dv += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3d_forward`] with respect to weights and bias;
/// accumulated (`+=`) into `dweight` / `dbias`. Each tap gradient is a dot
/// product of shifted rows, unrolled over four accumulators to break the
/// floating-point dependency chain.
pub fn conv3d_backward_params<S: Real>(
    dout: &[S],
    inp: &[S],
    id: Vdim,
    c_out: usize,
    k: (usize, usize, usize),
    dweight: &mut [S],
    dbias: &mut [S],
) {
    let (kt, ky, kx) = k;
    let (pt, py, px) = (kt / 2, ky / 2, kx / 2);
    let (f, c_in, h, w) = (id.f, id.c, id.h, id.w);
    let plane = h * w;
    for t in 0..f {
        for co in 0..c_out {
            let dout_plane = &dout[(t * c_out + co) * plane..(t * c_out + co + 1) * plane];
            let mut bacc = S::zero();
            for &g in dout_plane {
                bacc += g;
            }
            dbias[co] += bacc;
            for dt in 0..kt {
                let t_in = t + dt;
                if t_in < pt || t_in - pt >= f {
                    continue;
                }
                let t_in = t_in - pt;
                for ci in 0..c_in {
                    let in_plane = &inp[(t_in * c_in + ci) * plane..(t_in * c_in + ci + 1) * plane];
                    let dw_tap = &mut dweight[((co * c_in + ci) * kt + dt) * ky * kx..];
                    for dy in 0..ky {
                        let y_lo = py.saturating_sub(dy);
                        let y_hi = (h + py).saturating_sub(dy).min(h);
                        for dx in 0..kx {
                            let x_lo = px.saturating_sub(dx);
                            let x_hi = (w + px).saturating_sub(dx).min(w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let mut a0 = S::zero();
                            let mut a1 = S::zero();
                            let mut a2 = S::zero();
                            let mut a3 = S::zero();
                            for y in y_lo..y_hi {
                                let y_in = y + dy - py;
                                let dout_row = &dout_plane[y * w + x_lo..y * w + x_hi];
                                let in_row =
                                    &in_plane[y_in * w + x_lo + dx - px..y_in * w + x_hi + dx - px];
                                let mut chunks_g = dout_row.chunks_exact(4);
                                let mut chunks_i = in_row.chunks_exact(4);
                                for (gc, icn) in (&mut chunks_g).zip(&mut chunks_i) {
                                    a0 += gc[0] * icn[0];
                                    a1 += gc[1] * icn[1];
                                    a2 += gc[2] * icn[2];
                                    a3 += gc[3] * icn[3];
                                }
                                for (&g, &iv) in
                                    chunks_g.remainder().iter().zip(chunks_i.remainder())
                                {
                                    a0 += g * iv;
                                }
                            }
                            dw_tap[dy * kx + dx] += a0 + a1 + a2 + a3;
                        }
                    }
                }
            }
        }
    }
}

/// Average pooling with per-axis windows (stride = window, ceil mode: the
/// trailing window is clipped at the boundary). Returns output dims.
pub fn avgpool_forward<S: Real>(
    inp: &[S],
    id: Vdim,
    win: (usize, usize, usize),
    out: &mut Vec<S>,
) -> Vdim {
    let od = pool_out_dims(id, win);
    out.clear();
    out.reserve(od.len());
    let plane = id.h * id.w;
    for ot in 0..od.f {
        for c in 0..id.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let t0 = ot * win.0;
                    let y0 = oy * win.1;
                    let x0 = ox * win.2;
                    let t1 = (t0 + win.0).min(id.f);
                    let y1 = (y0 + win.1).min(id.h);
                    let x1 = (x0 + win.2).min(id.w);
                    let mut acc = S::zero();
                    for t in t0..t1 {
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += inp[(t * id.c + c) * plane + y * id.w + x];
                            }
                        }
                    }
                    let count = ((t1 - t0) * (y1 - y0) * (x1 - x0)) as f64;
                    out.push(acc * S::from_f64(1.0 / count));
                }
            }
        }
    }
    od
}

pub fn pool_out_dims(id: Vdim, win: (usize, usize, usize)) -> Vdim {
    Vdim::new(
        id.f.div_ceil(win.0),
        id.c,
        id.h.div_ceil(win.1),
        id.w.div_ceil(win.2),
    )
}

/// Adjoint of [`avgpool_forward`]; `dinp` is overwritten.
pub fn avgpool_backward<S: Real>(
    dout: &[S],
    id: Vdim,
    win: (usize, usize, usize),
    dinp: &mut [S],
) {
    let od = pool_out_dims(id, win);
    for v in dinp.iter_mut() {
        *v = S::zero();
    }
    let plane = id.h * id.w;
    let oplane = od.h * od.w;
    for ot in 0..od.f {
        for c in 0..id.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let g = dout[(ot * od.c + c) * oplane + oy * od.w + ox];
                    let t0 = ot * win.0;
                    let y0 = oy * win.1;
                    let x0 = ox * win.2;
                    let t1 = (t0 + win.0).min(id.f);
                    let y1 = (y0 + win.1).min(id.h);
                    let x1 = (x0 + win.2).min(id.w);
                    let count = ((t1 - t0) * (y1 - y0) * (x1 - x0)) as f64;
                    let share = g * S::from_f64(1.0 / count);
                    for t in t0..t1 {
                        for y in y0..y1 {
                            for x in x0..x1 {
                                dinp[(t * id.c + c) * plane + y * id.w + x] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample, per-channel normalization over `(f, h, w)` with no learnable
/// affine. Returns `(inv_sigma, normalized)` per channel for the backward.
pub struct InstNormCache<S> {
    pub inv_sigma: Vec<S>,
}

pub fn instnorm_forward<S: Real>(inp: &[S], id: Vdim, eps: f64, out: &mut [S]) -> InstNormCache<S> {
    let n = id.f * id.h * id.w;
    let inv_n = S::from_f64(1.0 / n as f64);
    let plane = id.h * id.w;
    let mut inv_sigma = Vec::with_capacity(id.c);
    for c in 0..id.c {
        let mut mean = S::zero();
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                mean += inp[base + i];
            }
        }
        mean = mean * inv_n;
        let mut var = S::zero();
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                let d = inp[base + i] - mean;
                var += d * d;
            }
        }
        var = var * inv_n;
        let inv = S::one() / (var + S::from_f64(eps)).sqrt();
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                out[base + i] = (inp[base + i] - mean) * inv;
            }
        }
        inv_sigma.push(inv);
    }
    InstNormCache { inv_sigma }
}

/// Backward through instance normalization. `normalized` is the forward
/// output; `dinp` is overwritten.
pub fn instnorm_backward<S: Real>(
    dout: &[S],
    normalized: &[S],
    id: Vdim,
    cache: &InstNormCache<S>,
    dinp: &mut [S],
) {
    let n = id.f * id.h * id.w;
    let inv_n = S::from_f64(1.0 / n as f64);
    let plane = id.h * id.w;
    for c in 0..id.c {
        let inv = cache.inv_sigma[c];
        let mut mean_dy = S::zero();
        let mut mean_dy_y = S::zero();
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                mean_dy += dout[base + i];
                mean_dy_y += dout[base + i] * normalized[base + i];
            }
        }
        mean_dy = mean_dy * inv_n;
        mean_dy_y = mean_dy_y * inv_n;
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                dinp[base + i] =
                    (dout[base + i] - mean_dy - normalized[base + i] * mean_dy_y) * inv;
            }
        }
    }
}

/// Global average over `(f, h, w)` per channel.
pub fn gap_forward<S: Real>(inp: &[S], id: Vdim, out: &mut [S]) {
    let n = id.f * id.h * id.w;
    let inv = S::from_f64(1.0 / n as f64);
    let plane = id.h * id.w;
    for c in 0..id.c {
        let mut acc = S::zero();
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                acc += inp[base + i];
            }
        }
        out[c] = acc * inv;
    }
}

pub fn gap_backward<S: Real>(dout: &[S], id: Vdim, dinp: &mut [S]) {
    let n = id.f * id.h * id.w;
    let inv = S::from_f64(1.0 / n as f64);
    let plane = id.h * id.w;
    for c in 0..id.c {
        let share = dout[c] * inv;
        for t in 0..id.f {
            let base = (t * id.c + c) * plane;
            for i in 0..plane {
                dinp[base + i] = share;
            }
        }
    }
}

/// Dense layer `y = W x + b`, `W` row-major `(n_out, n_in)`.
pub fn linear_forward<S: Real>(x: &[S], weight: &[S], bias: &[S], n_out: usize, y: &mut [S]) {
    let n_in = x.len();
    for o in 0..n_out {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        y[o] = acc;
    }
}

/// Backward of [`linear_forward`]: `dx` overwritten, `dw`/`db` accumulated.
pub fn linear_backward<S: Real>(
    dy: &[S],
    x: &[S],
    weight: &[S],
    n_out: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    let n_in = x.len();
    for v in dx.iter_mut() {
        *v = S::zero();
    }
    for o in 0..n_out {
        let g = dy[o];
        db[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] += row[i] * g;
            drow[i] += x[i] * g;
        }
    }
}

pub fn relu_forward<S: Real>(inp: &[S], out: &mut [S]) {
    for (o, &i) in out.iter_mut().zip(inp) {
        *o = i.relu();
    }
}

/// Backward of ReLU given the *pre-activation* input.
pub fn relu_backward<S: Real>(dout: &[S], pre: &[S], dinp: &mut [S]) {
    for ((di, &g), &p) in dinp.iter_mut().zip(dout).zip(pre) {
        *di = if p.value() > 0.0 { g } else { S::zero() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rand_vec(n: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    /// Adjoint identity <A x, y> == <x, A^T y> for the linear kernels.
    #[test]
    fn conv3d_input_grad_is_exact_adjoint() {
        let mut rng = crate::rng::seeded(1);
        let id = Vdim::new(3, 2, 5, 4);
        let c_out = 3;
        let k = (3, 3, 3);
        let w = rand_vec(c_out * id.c * 27, &mut rng);
        let b = vec![0.0; c_out];
        let x = rand_vec(id.len(), &mut rng);
        let y_probe = rand_vec(id.f * c_out * id.h * id.w, &mut rng);
        let mut y = vec![0.0; y_probe.len()];
        conv3d_forward(&x, id, &w, &b, c_out, k, &mut y);
        let mut xt = vec![0.0; x.len()];
        conv3d_backward_input(&y_probe, id, &w, c_out, k, &mut xt);
        let lhs: f64 = y.iter().zip(&y_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv3d_param_grads_match_finite_differences() {
        let mut rng = crate::rng::seeded(2);
        let id = Vdim::new(2, 1, 4, 3);
        let c_out = 2;
        let k = (3, 3, 3);
        let mut w = rand_vec(c_out * id.c * 27, &mut rng);
        let b = rand_vec(c_out, &mut rng);
        let x = rand_vec(id.len(), &mut rng);
        let probe = rand_vec(id.f * c_out * id.h * id.w, &mut rng);
        let loss = |w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; probe.len()];
            conv3d_forward(&x, id, w, b, c_out, k, &mut y);
            y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut y = vec![0.0; probe.len()];
        conv3d_forward(&x, id, &w, &b, c_out, k, &mut y);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        conv3d_backward_params(&probe, &x, id, c_out, k, &mut dw, &mut db);
        let eps = 1e-5;
        for i in (0..w.len()).step_by(7) {
            let orig = w[i];
            w[i] = orig + eps;
            let up = loss(&w, &b);
            w[i] = orig - eps;
            let dn = loss(&w, &b);
            w[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((dw[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "w[{i}] {} vs {}", dw[i], fd);
        }
        let mut bb = b.clone();
        for i in 0..b.len() {
            let orig = bb[i];
            bb[i] = orig + eps;
            let up = loss(&w, &bb);
            bb[i] = orig - eps;
            let dn = loss(&w, &bb);
            bb[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((db[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn pool_gap_norm_backwards_match_fd() {
        let mut rng = crate::rng::seeded(3);
        let id = Vdim::new(3, 2, 5, 5);
        let x = rand_vec(id.len(), &mut rng);
        let win = (2, 2, 2);
        let od = pool_out_dims(id, win);
        let probe_pool = rand_vec(od.len(), &mut rng);
        let probe_gap = rand_vec(id.c, &mut rng);
        let probe_norm = rand_vec(id.len(), &mut rng);
        let eps = 1e-6;

        let pool_loss = |x: &[f64]| {
            let mut out = Vec::new();
            avgpool_forward(x, id, win, &mut out);
            out.iter().zip(&probe_pool).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dpool = vec![0.0; x.len()];
        avgpool_backward(&probe_pool, id, win, &mut dpool);

        let gap_loss = |x: &[f64]| {
            let mut out = vec![0.0; id.c];
            gap_forward(x, id, &mut out);
            out.iter().zip(&probe_gap).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dgap = vec![0.0; x.len()];
        gap_backward(&probe_gap, id, &mut dgap);

        let norm_loss = |x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            instnorm_forward(x, id, 1e-3, &mut out);
            out.iter().zip(&probe_norm).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut normalized = vec![0.0; x.len()];
        let cache = instnorm_forward(&x, id, 1e-3, &mut normalized);
        let mut dnorm = vec![0.0; x.len()];
        instnorm_backward(&probe_norm, &normalized, id, &cache, &mut dnorm);

        let mut xm = x.clone();
        for i in (0..x.len()).step_by(11) {
            let orig = xm[i];
            for (grad, lossfn) in [
                (&dpool, &pool_loss as &dyn Fn(&[f64]) -> f64),
                (&dgap, &gap_loss),
                (&dnorm, &norm_loss),
            ] {
                xm[i] = orig + eps;
                let up = lossfn(&xm);
                xm[i] = orig - eps;
                let dn = lossfn(&xm);
                xm[i] = orig;
                let fd = (up - dn) / (2.0 * eps);
                assert!(
                    (grad[i] - fd).abs() < 2e-5 * fd.abs().max(1.0),
                    "i={i}: {} vs {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn pool_ceil_mode_clips_boundary_windows() {
        let id = Vdim::new(1, 1, 3, 3);
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = Vec::new();
        let od = avgpool_forward(&x, id, (1, 2, 2), &mut out);
        assert_eq!((od.h, od.w), (2, 2));
        // windows: {0,1,3,4}, {2,5}, {6,7}, {8}
        assert_eq!(out, vec![2.0, 3.5, 6.5, 8.0]);
    }

    #[test]
    fn instnorm_zero_input_stays_zero() {
        let id = Vdim::new(2, 1, 3, 3);
        let x = vec![0.0; id.len()];
        let mut out = vec![1.0; id.len()];
        instnorm_forward(&x, id, 1e-3, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
