//! Cross-architecture evaluators: a shared per-frame 2-D conv stem feeding a
//! GRU or LSTM cell over frame features, then a linear head on the final
//! hidden state. Used for evaluation transfer only, never as the
//! distillation backbone.

use super::kernels::*;
use super::{init_uniform, Backbone, ItemGrads, LossKind, ModelSpec, ParamLayout, Target};
use crate::data::Vdim;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Real;

const NORM_EPS: f64 = super::convnet::NORM_EPS;
const POOL2D: (usize, usize, usize) = (1, 2, 2);
const KERNEL2D: (usize, usize, usize) = (1, 3, 3);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

pub struct RecurrentNet {
    spec: ModelSpec,
    kind: CellKind,
    layout: ParamLayout,
    /// Per-frame stem dims: input dims of each block (f axis fixed at 1).
    block_in: Vec<Vdim>,
    block_conv: Vec<Vdim>,
    stem_out: Vdim,
    hidden: usize,
}

struct FrameStemCache<S> {
    xs: Vec<Vec<S>>,
    normalized: Vec<Vec<S>>,
    norm_caches: Vec<InstNormCache<S>>,
}

struct StepCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    gates: Vec<Vec<S>>,
    /// GRU: W_hn h + b_hn (needed for the reset-gate backward).
    hn_lin: Vec<S>,
    /// LSTM: tanh(c').
    tc: Vec<S>,
}

pub struct RecurrentCache<S> {
    frames: Vec<FrameStemCache<S>>,
    steps: Vec<StepCache<S>>,
    h_last: Vec<S>,
}

impl RecurrentNet {
    pub fn new(spec: &ModelSpec) -> Result<RecurrentNet> {
        let kind = match spec.arch {
            super::Arch::CnnGru => CellKind::Gru,
            super::Arch::CnnLstm => CellKind::Lstm,
            super::Arch::Conv3d => {
                return Err(Error::Config("recurrent net requires cnn_gru or cnn_lstm".into()))
            }
        };
        if spec.width < 1 || spec.depth < 1 || spec.num_classes < 1 {
            return Err(Error::Config("recurrent net needs width, depth, classes >= 1".into()));
        }
        let min_spatial = 1usize << spec.depth;
        if spec.dims.h < min_spatial || spec.dims.w < min_spatial {
            return Err(Error::Config(format!(
                "spatial size {}x{} collapses under {} pooling stages",
                spec.dims.h, spec.dims.w, spec.depth
            )));
        }
        let hidden = spec.width;
        let gates = kind.gates();
        let mut layout = ParamLayout::default();
        let mut block_in = Vec::new();
        let mut block_conv = Vec::new();
        let mut dims = Vdim::new(1, spec.dims.c, spec.dims.h, spec.dims.w);
        for d in 0..spec.depth {
            layout.push(
                &format!("stem{d}.conv.weight"),
                &[spec.width, dims.c, 1, 3, 3],
            );
            layout.push(&format!("stem{d}.conv.bias"), &[spec.width]);
            block_in.push(dims);
            let conv_dims = Vdim::new(1, spec.width, dims.h, dims.w);
            block_conv.push(conv_dims);
            dims = pool_out_dims(conv_dims, POOL2D);
        }
        layout.push("cell.w_ih", &[gates * hidden, spec.width]);
        layout.push("cell.w_hh", &[gates * hidden, hidden]);
        layout.push("cell.b_ih", &[gates * hidden]);
        layout.push("cell.b_hh", &[gates * hidden]);
        layout.push("head.weight", &[spec.num_classes, hidden]);
        layout.push("head.bias", &[spec.num_classes]);
        Ok(RecurrentNet {
            spec: spec.clone(),
            kind,
            layout,
            block_in,
            block_conv,
            stem_out: dims,
            hidden,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn entry_offset(&self, name: &str) -> usize {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .expect("entry")
            .offset
    }

    fn stem_forward<S: Real>(&self, params: &[S], frame: &[S]) -> (Vec<S>, FrameStemCache<S>) {
        let depth = self.spec.depth;
        let mut xs = vec![frame.to_vec()];
        let mut normalized = Vec::with_capacity(depth);
        let mut norm_caches = Vec::with_capacity(depth);
        for d in 0..depth {
            let id = self.block_in[d];
            let cd = self.block_conv[d];
            let w_off = self.entry_offset(&format!("stem{d}.conv.weight"));
            let b_off = self.entry_offset(&format!("stem{d}.conv.bias"));
            let w = &params[w_off..w_off + self.spec.width * id.c * 9];
            let b = &params[b_off..b_off + self.spec.width];
            let mut conv = vec![S::zero(); cd.len()];
            conv3d_forward(&xs[d], id, w, b, self.spec.width, KERNEL2D, &mut conv);
            let mut norm = vec![S::zero(); cd.len()];
            let cache = instnorm_forward(&conv, cd, NORM_EPS, &mut norm);
            let mut act = vec![S::zero(); cd.len()];
            relu_forward(&norm, &mut act);
            let mut pooled = Vec::new();
            avgpool_forward(&act, cd, POOL2D, &mut pooled);
            xs.push(pooled);
            normalized.push(norm);
            norm_caches.push(cache);
        }
        let mut feat = vec![S::zero(); self.spec.width];
        gap_forward(&xs[depth], self.stem_out, &mut feat);
        (
            feat,
            FrameStemCache {
                xs,
                normalized,
                norm_caches,
            },
        )
    }

    fn stem_backward<S: Real>(
        &self,
        params: &[S],
        cache: &FrameStemCache<S>,
        dfeat: &[S],
        dparams: &mut [S],
        want_dinput: bool,
    ) -> Option<Vec<S>> {
        let depth = self.spec.depth;
        let mut dtrunk = vec![S::zero(); self.stem_out.len()];
        gap_backward(dfeat, self.stem_out, &mut dtrunk);
        for d in (0..depth).rev() {
            let id = self.block_in[d];
            let cd = self.block_conv[d];
            let mut dact = vec![S::zero(); cd.len()];
            avgpool_backward(&dtrunk, cd, POOL2D, &mut dact);
            let mut dnorm = vec![S::zero(); cd.len()];
            relu_backward(&dact, &cache.normalized[d], &mut dnorm);
            let mut dconv = vec![S::zero(); cd.len()];
            instnorm_backward(&dnorm, &cache.normalized[d], cd, &cache.norm_caches[d], &mut dconv);
            let w_off = self.entry_offset(&format!("stem{d}.conv.weight"));
            let w_len = self.spec.width * id.c * 9;
            {
                let (dw, rest) = dparams[w_off..].split_at_mut(w_len);
                let db = &mut rest[..self.spec.width];
                conv3d_backward_params(&dconv, &cache.xs[d], id, self.spec.width, KERNEL2D, dw, db);
            }
            if d > 0 || want_dinput {
                let w = &params[w_off..w_off + w_len];
                let mut dinp = vec![S::zero(); id.len()];
                conv3d_backward_input(&dconv, id, w, self.spec.width, KERNEL2D, &mut dinp);
                dtrunk = dinp;
            } else {
                return None;
            }
        }
        want_dinput.then_some(dtrunk)
    }

    fn cell_offsets(&self) -> (usize, usize, usize, usize) {
        (
            self.entry_offset("cell.w_ih"),
            self.entry_offset("cell.w_hh"),
            self.entry_offset("cell.b_ih"),
            self.entry_offset("cell.b_hh"),
        )
    }

    fn cell_step<S: Real>(
        &self,
        params: &[S],
        x: &[S],
        h: &[S],
        c: &[S],
    ) -> (Vec<S>, Vec<S>, StepCache<S>) {
        let hu = self.hidden;
        let g = self.kind.gates();
        let (wih, whh, bih, bhh) = self.cell_offsets();
        let w_ih = &params[wih..wih + g * hu * self.spec.width];
        let w_hh = &params[whh..whh + g * hu * hu];
        let b_ih = &params[bih..bih + g * hu];
        let b_hh = &params[bhh..bhh + g * hu];
        let mut gi = vec![S::zero(); g * hu];
        let mut gh = vec![S::zero(); g * hu];
        linear_forward(x, w_ih, b_ih, g * hu, &mut gi);
        linear_forward(h, w_hh, b_hh, g * hu, &mut gh);
        match self.kind {
            CellKind::Gru => {
                let mut r = vec![S::zero(); hu];
                let mut z = vec![S::zero(); hu];
                let mut n = vec![S::zero(); hu];
                let mut hn_lin = vec![S::zero(); hu];
                let mut h_new = vec![S::zero(); hu];
                for i in 0..hu {
                    r[i] = (gi[i] + gh[i]).sigmoid();
                    z[i] = (gi[hu + i] + gh[hu + i]).sigmoid();
                    hn_lin[i] = gh[2 * hu + i];
                    n[i] = (gi[2 * hu + i] + r[i] * hn_lin[i]).tanh();
                    h_new[i] = (S::one() - z[i]) * n[i] + z[i] * h[i];
                }
                let cache = StepCache {
                    x: x.to_vec(),
                    h_prev: h.to_vec(),
                    c_prev: vec![],
                    gates: vec![r, z, n],
                    hn_lin,
                    tc: vec![],
                };
                (h_new, c.to_vec(), cache)
            }
            CellKind::Lstm => {
                let mut ig = vec![S::zero(); hu];
                let mut fg = vec![S::zero(); hu];
                let mut gg = vec![S::zero(); hu];
                let mut og = vec![S::zero(); hu];
                let mut c_new = vec![S::zero(); hu];
                let mut tc = vec![S::zero(); hu];
                let mut h_new = vec![S::zero(); hu];
                for i in 0..hu {
                    ig[i] = (gi[i] + gh[i]).sigmoid();
                    fg[i] = (gi[hu + i] + gh[hu + i]).sigmoid();
                    gg[i] = (gi[2 * hu + i] + gh[2 * hu + i]).tanh();
                    og[i] = (gi[3 * hu + i] + gh[3 * hu + i]).sigmoid();
                    c_new[i] = fg[i] * c[i] + ig[i] * gg[i];
                    tc[i] = c_new[i].tanh();
                    h_new[i] = og[i] * tc[i];
                }
                let cache = StepCache {
                    x: x.to_vec(),
                    h_prev: h.to_vec(),
                    c_prev: c.to_vec(),
                    gates: vec![ig, fg, gg, og],
                    hn_lin: vec![],
                    tc,
                };
                (h_new, c_new, cache)
            }
        }
    }

    /// Backward through one cell step. Returns `(dx, dh_prev, dc_prev)`.
    fn cell_backward<S: Real>(
        &self,
        params: &[S],
        cache: &StepCache<S>,
        dh: &[S],
        dc: &[S],
        dparams: &mut [S],
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let hu = self.hidden;
        let g = self.kind.gates();
        let (wih, whh, bih, bhh) = self.cell_offsets();
        let one = S::one();
        let (dgi, dgh, mut dh_prev, dc_prev) = match self.kind {
            CellKind::Gru => {
                let (r, z, n) = (&cache.gates[0], &cache.gates[1], &cache.gates[2]);
                let mut dgi = vec![S::zero(); 3 * hu];
                let mut dgh = vec![S::zero(); 3 * hu];
                let mut dh_prev = vec![S::zero(); hu];
                for i in 0..hu {
                    let dn = dh[i] * (one - z[i]);
                    let dz = dh[i] * (cache.h_prev[i] - n[i]);
                    dh_prev[i] = dh[i] * z[i];
                    let dpre_n = dn * (one - n[i] * n[i]);
                    let dr = dpre_n * cache.hn_lin[i];
                    let dpre_r = dr * r[i] * (one - r[i]);
                    let dpre_z = dz * z[i] * (one - z[i]);
                    dgi[i] = dpre_r;
                    dgi[hu + i] = dpre_z;
                    dgi[2 * hu + i] = dpre_n;
                    dgh[i] = dpre_r;
                    dgh[hu + i] = dpre_z;
                    dgh[2 * hu + i] = dpre_n * r[i];
                }
                (dgi, dgh, dh_prev, vec![S::zero(); 0])
            }
            CellKind::Lstm => {
                let (ig, fg, gg, og) = (
                    &cache.gates[0],
                    &cache.gates[1],
                    &cache.gates[2],
                    &cache.gates[3],
                );
                let mut dgates = vec![S::zero(); 4 * hu];
                let mut dc_prev = vec![S::zero(); hu];
                for i in 0..hu {
                    let do_ = dh[i] * cache.tc[i];
                    let dct = dc[i] + dh[i] * og[i] * (one - cache.tc[i] * cache.tc[i]);
                    let di = dct * gg[i];
                    let df = dct * cache.c_prev[i];
                    let dg = dct * ig[i];
                    dc_prev[i] = dct * fg[i];
                    dgates[i] = di * ig[i] * (one - ig[i]);
                    dgates[hu + i] = df * fg[i] * (one - fg[i]);
                    dgates[2 * hu + i] = dg * (one - gg[i] * gg[i]);
                    dgates[3 * hu + i] = do_ * og[i] * (one - og[i]);
                }
                (dgates.clone(), dgates, vec![S::zero(); hu], dc_prev)
            }
        };
        let w_ih = &params[wih..wih + g * hu * self.spec.width];
        let w_hh = &params[whh..whh + g * hu * hu];
        let mut dx = vec![S::zero(); self.spec.width];
        let mut dh_lin = vec![S::zero(); hu];
        {
            let (dw_ih, _) = dparams[wih..].split_at_mut(g * hu * self.spec.width);
            let db_ih = &mut vec![S::zero(); g * hu];
            linear_backward(&dgi, &cache.x, w_ih, g * hu, &mut dx, dw_ih, db_ih);
            for (acc, d) in dparams[bih..bih + g * hu].iter_mut().zip(db_ih.iter()) {
                *acc += *d;
            }
        }
        {
            let (dw_hh, _) = dparams[whh..].split_at_mut(g * hu * hu);
            let db_hh = &mut vec![S::zero(); g * hu];
            linear_backward(&dgh, &cache.h_prev, w_hh, g * hu, &mut dh_lin, dw_hh, db_hh);
            for (acc, d) in dparams[bhh..bhh + g * hu].iter_mut().zip(db_hh.iter()) {
                *acc += *d;
            }
        }
        for i in 0..hu {
            dh_prev[i] += dh_lin[i];
        }
        (dx, dh_prev, dc_prev)
    }

    pub fn forward_cached<S: Real>(&self, params: &[S], video: &[S]) -> (Vec<S>, RecurrentCache<S>) {
        let f = self.spec.dims.f;
        let frame_len = self.spec.dims.frame_len();
        let hu = self.hidden;
        let mut frames = Vec::with_capacity(f);
        let mut steps = Vec::with_capacity(f);
        let mut h = vec![S::zero(); hu];
        let mut c = vec![S::zero(); hu];
        for t in 0..f {
            let (feat, stem_cache) = self.stem_forward(params, &video[t * frame_len..(t + 1) * frame_len]);
            let (h_new, c_new, step) = self.cell_step(params, &feat, &h, &c);
            frames.push(stem_cache);
            steps.push(step);
            h = h_new;
            c = c_new;
        }
        let hw = self.entry_offset("head.weight");
        let hb = self.entry_offset("head.bias");
        let head_w = &params[hw..hw + self.spec.num_classes * hu];
        let head_b = &params[hb..hb + self.spec.num_classes];
        let mut logits = vec![S::zero(); self.spec.num_classes];
        linear_forward(&h, head_w, head_b, self.spec.num_classes, &mut logits);
        (
            logits,
            RecurrentCache {
                frames,
                steps,
                h_last: h,
            },
        )
    }

    pub fn backward_cached<S: Real>(
        &self,
        params: &[S],
        cache: &RecurrentCache<S>,
        dlogits: &[S],
        dparams: &mut [S],
        want_dinput: bool,
    ) -> Option<Vec<S>> {
        let f = self.spec.dims.f;
        let frame_len = self.spec.dims.frame_len();
        let hu = self.hidden;
        let hw = self.entry_offset("head.weight");
        let head_w = &params[hw..hw + self.spec.num_classes * hu];
        let mut dh = vec![S::zero(); hu];
        {
            let (dw_head, rest) = dparams[hw..].split_at_mut(self.spec.num_classes * hu);
            let db_head = &mut rest[..self.spec.num_classes];
            linear_backward(
                dlogits,
                &cache.h_last,
                head_w,
                self.spec.num_classes,
                &mut dh,
                dw_head,
                db_head,
            );
        }
        let mut dc = vec![S::zero(); hu];
        let mut dinput = want_dinput.then(|| vec![S::zero(); self.spec.dims.len()]);
        for t in (0..f).rev() {
            let (dx, dh_prev, dc_prev) = self.cell_backward(params, &cache.steps[t], &dh, &dc, dparams);
            let dframe = self.stem_backward(params, &cache.frames[t], &dx, dparams, want_dinput);
            if let (Some(di), Some(df)) = (dinput.as_mut(), dframe) {
                di[t * frame_len..(t + 1) * frame_len].copy_from_slice(&df);
            }
            dh = dh_prev;
            dc = if dc_prev.is_empty() { vec![S::zero(); hu] } else { dc_prev };
        }
        dinput
    }
}

impl Backbone for RecurrentNet {
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
            let w_off = self.entry_offset(&format!("stem{d}.conv.weight"));
            let w_len = self.spec.width * id.c * 9;
            init_uniform(&mut rng, id.c * 9, &mut params[w_off..w_off + w_len]);
        }
        let g = self.kind.gates();
        let hu = self.hidden;
        let (wih, whh, _, _) = self.cell_offsets();
        let ih_len = g * hu * self.spec.width;
        init_uniform(&mut rng, self.spec.width, &mut params[wih..wih + ih_len]);
        let hh_len = g * hu * hu;
        init_uniform(&mut rng, hu, &mut params[whh..whh + hh_len]);
        let hw = self.entry_offset("head.weight");
        let head_len = self.spec.num_classes * hu;
        init_uniform(&mut rng, hu, &mut params[hw..hw + head_len]);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;
    use rand::Rng as _;

    fn spec(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            width: 3,
            depth: 1,
            num_classes: 3,
            dims: Vdim::new(3, 1, 4, 4),
            init_seed: 11,
        }
    }

    #[test]
    fn builds_with_stable_layout_and_init() {
        for arch in [Arch::CnnGru, Arch::CnnLstm] {
            let net = RecurrentNet::new(&spec(arch)).unwrap();
            assert_eq!(net.init_params(1), net.init_params(1));
            assert_ne!(net.init_params(1), net.init_params(2));
            let v = vec![0.1; net.input_dims().len()];
            let logits = net.forward_logits(&net.init_params(1), &v);
            assert_eq!(logits.len(), 3);
            assert!(logits.iter().all(|z| z.is_finite()));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in [Arch::CnnGru, Arch::CnnLstm] {
            let net = RecurrentNet::new(&spec(arch)).unwrap();
            let mut params = net.init_params(3);
            let mut rng = crate::rng::seeded(4);
            let mut video: Vec<f64> =
                (0..net.input_dims().len()).map(|_| rng.random()).collect();
            let loss_of = |p: &[f64], v: &[f64]| {
                let logits = net.forward_logits(p, v);
                crate::models::loss_and_dlogits(
                    LossKind::CrossEntropy,
                    &logits,
                    &Target::Hard(2),
                )
                .0
            };
            let mut dparams = vec![0.0; net.param_count()];
            let grads = net.item_loss_grads(
                &params,
                &video,
                &Target::Hard(2),
                LossKind::CrossEntropy,
                &mut dparams,
                true,
            );
            let dinput = grads.dinput.unwrap();
            let eps = 1e-5;
            for i in (0..params.len()).step_by(17) {
                let orig = params[i];
                params[i] = orig + eps;
                let up = loss_of(&params, &video);
                params[i] = orig - eps;
                let dn = loss_of(&params, &video);
                params[i] = orig;
                let fd = (up - dn) / (2.0 * eps);
                assert!(
                    (dparams[i] - fd).abs() < 1e-3 * fd.abs().max(1e-3),
                    "{arch:?} param {i}: {} vs {}",
                    dparams[i],
                    fd
                );
            }
            for i in (0..video.len()).step_by(9) {
                let orig = video[i];
                video[i] = orig + eps;
                let up = loss_of(&params, &video);
                video[i] = orig - eps;
                let dn = loss_of(&params, &video);
                video[i] = orig;
                let fd = (up - dn) / (2.0 * eps);
                assert!(
                    (dinput[i] - fd).abs() < 1e-3 * fd.abs().max(1e-3),
                    "{arch:?} pixel {i}: {} vs {}",
                    dinput[i],
                    fd
                );
            }
        }
    }
}
