//! Channel-merge fusion layer: a 3x3x3 convolution over the channel
//! concatenation of an interpolated frame video and a sampled real video,
//! producing a fused video of the original shape.

use super::kernels::{conv3d_backward_params, conv3d_forward};
use crate::data::Vdim;
use crate::error::{Error, Result};
use crate::scalar::Real;

const KERNEL: (usize, usize, usize) = (3, 3, 3);

/// Shape bookkeeping for the fusion convolution; the parameters themselves
/// live in a flat vector `[kernel (c, 2c, 3, 3, 3) | bias (c)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionLayer {
    pub channels: usize,
}

impl FusionLayer {
    pub fn new(channels: usize) -> Self {
        FusionLayer { channels }
    }

    pub fn kernel_len(&self) -> usize {
        self.channels * 2 * self.channels * 27
    }

    pub fn param_count(&self) -> usize {
        self.kernel_len() + self.channels
    }

    /// Identity-on-frame-channels initialization: the center tap copies each
    /// frame channel through, everything else (including bias) is zero, so a
    /// freshly fused item equals the interpolated frame video exactly.
    pub fn passthrough_params(&self) -> Vec<f64> {
        let c = self.channels;
        let mut p = vec![0.0; self.param_count()];
        for o in 0..c {
            // kernel index (o, o, 1, 1, 1) within (c, 2c, 3, 3, 3)
            let idx = ((o * 2 * c + o) * 3 + 1) * 9 + 1 * 3 + 1;
            p[idx] = 1.0;
        }
        p
    }

    /// Stack the two videos along channels: `(f, 2c, h, w)`.
    pub fn concat_inputs(frame_video: &[f64], real_video: &[f64], dims: Vdim) -> Vec<f64> {
        let plane = dims.h * dims.w;
        let mut out = Vec::with_capacity(2 * dims.len());
        for t in 0..dims.f {
            let base = t * dims.c * plane;
            out.extend_from_slice(&frame_video[base..base + dims.c * plane]);
            out.extend_from_slice(&real_video[base..base + dims.c * plane]);
        }
        out
    }

    /// Fused output `z = conv(concat) + bias`, shape `(f, c, h, w)`.
    pub fn fuse<S: Real>(&self, params: &[S], concat: &[S], dims: Vdim) -> Result<Vec<S>> {
        if params.len() != self.param_count() {
            return Err(Error::Argument(format!(
                "fusion params length {} != {}",
                params.len(),
                self.param_count()
            )));
        }
        if concat.len() != 2 * dims.len() {
            return Err(Error::Argument(format!(
                "fusion input length {} != 2x{}",
                concat.len(),
                dims.len()
            )));
        }
        let concat_dims = Vdim::new(dims.f, 2 * dims.c, dims.h, dims.w);
        let mut out = vec![S::zero(); dims.len()];
        conv3d_forward(
            concat,
            concat_dims,
            &params[..self.kernel_len()],
            &params[self.kernel_len()..],
            dims.c,
            KERNEL,
            &mut out,
        );
        Ok(out)
    }

    /// Accumulate gradients w.r.t. the fusion parameters given the upstream
    /// gradient on the fused output. The inputs are fixed during SFVD-T, so
    /// no input gradient is produced.
    pub fn fuse_backward_params<S: Real>(
        &self,
        dz: &[S],
        concat: &[S],
        dims: Vdim,
        dparams: &mut [S],
    ) {
        let concat_dims = Vdim::new(dims.f, 2 * dims.c, dims.h, dims.w);
        let (dw, db) = dparams.split_at_mut(self.kernel_len());
        conv3d_backward_params(dz, concat, concat_dims, dims.c, KERNEL, dw, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn dims() -> Vdim {
        Vdim::new(3, 1, 5, 4)
    }

    fn rand_video(rng: &mut crate::rng::Rng, d: Vdim) -> Vec<f64> {
        (0..d.len()).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn passthrough_init_reproduces_frame_video() {
        let d = dims();
        let layer = FusionLayer::new(d.c);
        let mut rng = crate::rng::seeded(1);
        let frames = rand_video(&mut rng, d);
        let real = rand_video(&mut rng, d);
        let concat = FusionLayer::concat_inputs(&frames, &real, d);
        let z = layer.fuse(&layer.passthrough_params(), &concat, d).unwrap();
        assert_eq!(z, frames);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let d = dims();
        let layer = FusionLayer::new(d.c);
        let concat = vec![0.3; 2 * d.len()];
        let z = layer
            .fuse(&vec![0.0; layer.param_count()], &concat, d)
            .unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_kernel_blends_linearly() {
        // only center taps nonzero: w0 on the frame channel, w1 on the video
        // channel -> z = w0*frame + w1*video
        let d = dims();
        let layer = FusionLayer::new(d.c);
        let (w0, w1) = (0.7, -0.3);
        let mut params = vec![0.0; layer.param_count()];
        params[(0 * 3 + 1) * 9 + 4] = w0; // (o=0, ci=0, 1, 1, 1)
        params[(1 * 3 + 1) * 9 + 4] = w1; // (o=0, ci=1, 1, 1, 1)
        let mut rng = crate::rng::seeded(2);
        let frames = rand_video(&mut rng, d);
        let real = rand_video(&mut rng, d);
        let concat = FusionLayer::concat_inputs(&frames, &real, d);
        let z = layer.fuse(&params, &concat, d).unwrap();
        for i in 0..d.len() {
            let want = w0 * frames[i] + w1 * real[i];
            assert!((z[i] - want).abs() < 1e-12, "{} vs {}", z[i], want);
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let d = Vdim::new(2, 1, 4, 4);
        let layer = FusionLayer::new(d.c);
        let mut rng = crate::rng::seeded(3);
        let frames = rand_video(&mut rng, d);
        let real = rand_video(&mut rng, d);
        let concat = FusionLayer::concat_inputs(&frames, &real, d);
        let probe = rand_video(&mut rng, d);
        let mut params: Vec<f64> = (0..layer.param_count())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let loss = |p: &[f64]| -> f64 {
            layer
                .fuse(p, &concat, d)
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut dparams = vec![0.0; layer.param_count()];
        let dz = probe.clone();
        layer.fuse_backward_params(&dz, &concat, d, &mut dparams);
        let eps = 1e-6;
        for i in (0..params.len()).step_by(5) {
            let orig = params[i];
            params[i] = orig + eps;
            let up = loss(&params);
            params[i] = orig - eps;
            let dn = loss(&params);
            params[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((dparams[i] - fd).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }
}
