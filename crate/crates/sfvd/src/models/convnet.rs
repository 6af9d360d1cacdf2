//! The 3-D convolutional classifier used for expert training, distillation,
//! and primary evaluation: `depth x [3x3x3 conv -> per-sample norm -> relu ->
//! 2x2x2 avg pool] -> global avg pool -> linear head`.
//!
//! Normalization uses per-sample statistics only, so logits for one item
//! never depend on batch composition.

use super::kernels::*;
use super::{init_uniform, Backbone, ItemGrads, LossKind, ModelSpec, ParamLayout, Target};
use crate::data::Vdim;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Real;

pub const NORM_EPS: f64 = 1e-3;
const POOL: (usize, usize, usize) = (2, 2, 2);
const KERNEL: (usize, usize, usize) = (3, 3, 3);

/// Normalization grouping: each (frame, channel) plane normalizes over its
/// own (h, w) statistics.
fn norm_dims(cd: crate::data::Vdim) -> crate::data::Vdim {
    crate::data::Vdim::new(1, cd.f * cd.c, cd.h, cd.w)
}

pub struct ConvNet {
    spec: ModelSpec,
    layout: ParamLayout,
    /// Input dims of each block (block 0 sees the video).
    block_in: Vec<Vdim>,
    /// Dims of each block's conv output (= norm/relu dims).
    block_conv: Vec<Vdim>,
    /// Dims after the final pool (= gap input).
    trunk_out: Vdim,
}

pub struct ConvCache<S> {
    /// xs[0] = input video, xs[d+1] = block d output (post pool).
    xs: Vec<Vec<S>>,
    normalized: Vec<Vec<S>>,
    norm_caches: Vec<InstNormCache<S>>,
    feat: Vec<S>,
}

impl ConvNet {
    pub fn new(spec: &ModelSpec) -> Result<ConvNet> {
        if spec.width < 1 || spec.num_classes < 1 {
            return Err(Error::Config(format!(
                "conv3d needs width and num_classes >= 1, got {}, {}",
                spec.width, spec.num_classes
            )));
        }
        // depth 0 degenerates to global-average-pool -> linear, an affine
        // probe used by the bound checker; the head then reads c features.
        if spec.depth == 0 && spec.width != spec.dims.c {
            return Err(Error::Config(format!(
                "depth 0 requires width == input channels ({} != {})",
                spec.width, spec.dims.c
            )));
        }
        let min_spatial = 1usize << spec.depth;
        if spec.dims.h < min_spatial || spec.dims.w < min_spatial {
            return Err(Error::Config(format!(
                "spatial size {}x{} collapses under {} pooling stages",
                spec.dims.h, spec.dims.w, spec.depth
            )));
        }
        let mut layout = ParamLayout::default();
        let mut block_in = Vec::new();
        let mut block_conv = Vec::new();
        let mut dims = spec.dims;
        for d in 0..spec.depth {
            layout.push(
                &format!("block{d}.conv.weight"),
                &[spec.width, dims.c, KERNEL.0, KERNEL.1, KERNEL.2],
            );
            layout.push(&format!("block{d}.conv.bias"), &[spec.width]);
            block_in.push(dims);
            let conv_dims = Vdim::new(dims.f, spec.width, dims.h, dims.w);
            block_conv.push(conv_dims);
            dims = pool_out_dims(conv_dims, POOL);
        }
        layout.push("head.weight", &[spec.num_classes, spec.width]);
        layout.push("head.bias", &[spec.num_classes]);
        Ok(ConvNet {
            spec: spec.clone(),
            layout,
            block_in,
            block_conv,
            trunk_out: dims,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn weight_off(&self, d: usize) -> (usize, usize) {
        let e = &self.layout.entries[2 * d];
        let b = &self.layout.entries[2 * d + 1];
        (e.offset, b.offset)
    }

    fn head_off(&self) -> (usize, usize) {
        let n = self.layout.entries.len();
        (
            self.layout.entries[n - 2].offset,
            self.layout.entries[n - 1].offset,
        )
    }

    pub fn forward_cached<S: Real>(&self, params: &[S], video: &[S]) -> (Vec<S>, ConvCache<S>) {
        debug_assert_eq!(video.len(), self.spec.dims.len());
        let depth = self.spec.depth;
        let mut xs: Vec<Vec<S>> = vec![video.to_vec()];
        let mut normalized = Vec::with_capacity(depth);
        let mut norm_caches = Vec::with_capacity(depth);
        for d in 0..depth {
            let id = self.block_in[d];
            let cd = self.block_conv[d];
            let (w_off, b_off) = self.weight_off(d);
            let w = &params[w_off..w_off + self.spec.width * id.c * 27];
            let b = &params[b_off..b_off + self.spec.width];
            let mut conv = vec![S::zero(); cd.len()];
            conv3d_forward(&xs[d], id, w, b, self.spec.width, KERNEL, &mut conv);
            // per-sample statistics taken per frame and channel over (h, w),
            // so static and moving inputs normalize identically
            let nd = norm_dims(cd);
            let mut norm = vec![S::zero(); cd.len()];
            let cache = instnorm_forward(&conv, nd, NORM_EPS, &mut norm);
            let mut act = vec![S::zero(); cd.len()];
            relu_forward(&norm, &mut act);
            let mut pooled = Vec::new();
            avgpool_forward(&act, cd, POOL, &mut pooled);
            xs.push(pooled);
            normalized.push(norm);
            norm_caches.push(cache);
        }
        let mut feat = vec![S::zero(); self.spec.width];
        gap_forward(&xs[depth], self.trunk_out, &mut feat);
        let (hw, hb) = self.head_off();
        let head_w = &params[hw..hw + self.spec.num_classes * self.spec.width];
        let head_b = &params[hb..hb + self.spec.num_classes];
        let mut logits = vec![S::zero(); self.spec.num_classes];
        linear_forward(&feat, head_w, head_b, self.spec.num_classes, &mut logits);
        (
            logits,
            ConvCache {
                xs,
                normalized,
                norm_caches,
                feat,
            },
        )
    }

    /// Backward from `dlogits`; accumulates into `dparams`, optionally
    /// returning the gradient w.r.t. the input video.
    pub fn backward_cached<S: Real>(
        &self,
        params: &[S],
        cache: &ConvCache<S>,
        dlogits: &[S],
        dparams: &mut [S],
        want_dinput: bool,
    ) -> Option<Vec<S>> {
        let depth = self.spec.depth;
        let (hw, _) = self.head_off();
        let head_w = &params[hw..hw + self.spec.num_classes * self.spec.width];
        let mut dfeat = vec![S::zero(); self.spec.width];
        {
            let (dw_head, rest) = dparams[hw..].split_at_mut(self.spec.num_classes * self.spec.width);
            let db_head = &mut rest[..self.spec.num_classes];
            linear_backward(
                dlogits,
                &cache.feat,
                head_w,
                self.spec.num_classes,
                &mut dfeat,
                dw_head,
                db_head,
            );
        }
        let mut dtrunk = vec![S::zero(); self.trunk_out.len()];
        gap_backward(&dfeat, self.trunk_out, &mut dtrunk);
        for d in (0..depth).rev() {
            let id = self.block_in[d];
            let cd = self.block_conv[d];
            let mut dact = vec![S::zero(); cd.len()];
            avgpool_backward(&dtrunk, cd, POOL, &mut dact);
            let mut dnorm = vec![S::zero(); cd.len()];
            relu_backward(&dact, &cache.normalized[d], &mut dnorm);
            let mut dconv = vec![S::zero(); cd.len()];
            instnorm_backward(
                &dnorm,
                &cache.normalized[d],
                norm_dims(cd),
                &cache.norm_caches[d],
                &mut dconv,
            );
            let (w_off, _) = self.weight_off(d);
            {
                let (dw, rest) = dparams[w_off..].split_at_mut(self.spec.width * id.c * 27);
                let db = &mut rest[..self.spec.width];
                conv3d_backward_params(&dconv, &cache.xs[d], id, self.spec.width, KERNEL, dw, db);
            }
            if d > 0 || want_dinput {
                let w = &params[w_off..w_off + self.spec.width * id.c * 27];
                let mut dinp = vec![S::zero(); id.len()];
                conv3d_backward_input(&dconv, id, w, self.spec.width, KERNEL, &mut dinp);
                dtrunk = dinp;
            } else {
                return None;
            }
        }
        if want_dinput {
            Some(dtrunk)
        } else {
            None
        }
    }
}

impl ConvNet {
    /// Shape bookkeeping accessors for the spectral-norm machinery.
    pub fn block_in_dims(&self) -> &[Vdim] {
        &self.block_in
    }
    pub fn block_conv_dims(&self) -> &[Vdim] {
        &self.block_conv
    }
    pub fn trunk_out_dims(&self) -> Vdim {
        self.trunk_out
    }
    pub fn conv_param_offsets(&self, d: usize) -> (usize, usize) {
        self.weight_off(d)
    }
    pub fn head_param_offsets(&self) -> (usize, usize) {
        self.head_off()
    }

    /// Per-block minimum normalization scale `sqrt(var + eps)` observed on
    /// one input; used for the local Lipschitz estimate of the norm layers.
    pub fn norm_scale_floor(&self, params: &[f64], video: &[f64]) -> Vec<f64> {
        let (_, cache) = self.forward_cached(params, video);
        cache
            .norm_caches
            .iter()
            .map(|c| {
                c.inv_sigma
                    .iter()
                    .fold(f64::INFINITY, |acc, &inv| acc.min(1.0 / inv))
            })
            .collect()
    }
}

impl Backbone for ConvNet {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
    fn input_dims(&self) -> Vdim {
        self.spec.dims
    }
    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let mut params = vec![0.0; self.layout.total];
        for d in 0..self.spec.depth {
            let id = self.block_in[d];
            let (w_off, b_off) = self.weight_off(d);
            let fan_in = id.c * 27;
            init_uniform(&mut rng, fan_in, &mut params[w_off..b_off]);
            // biases stay zero
        }
        let (hw, hb) = self.head_off();
        init_uniform(&mut rng, self.spec.width, &mut params[hw..hb]);
        params
    }
    fn forward_logits<S: Real>(&self, params: &[S], video: &[S]) -> Vec<S> {
        self.forward_cached(params, video).0
    }
    fn item_loss_grads<S: Real>(
        &self,
        params: &[S],
        video: &[S],
        target: &Target<'_, S>,
        loss: LossKind,
        dparams: &mut [S],
        want_dinput: bool,
    ) -> ItemGrads<S> {
        let (logits, cache) = self.forward_cached(params, video);
        let (loss_val, dlogits, dtarget) = super::loss_and_dlogits(loss, &logits, target);
        let dinput = self.backward_cached(params, &cache, &dlogits, dparams, want_dinput);
        ItemGrads {
            loss: loss_val,
            dinput,
            dtarget,
        }
    }
}
