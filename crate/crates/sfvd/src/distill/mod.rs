//! The optimization core: learnable single frames matched via interpolation
//! (SFVD), fusion fine-tuning over frozen frames (SFVD-T), and the
//! full-video-tensor baseline, plus soft labels and the learnable inner step
//! size.

pub mod artifact;
pub mod engine;

use crate::data::{sample_frames, TargetDataset, Vdim};
use crate::error::{Error, Result};
use crate::interpolation::crossfade;
use crate::models::{build_model, Backbone, FusionLayer, LossKind, Model};
use crate::rng::{derive_seed, seeded};
use crate::trajectories::{sample_match_target, SourceTag, TrajectoryBuffer};
use engine::{meta_gradient, trajectory_loss, unroll_inner, Labels, SynSource};
use ndarray::Array4;
use rand::Rng as _;
use std::time::Instant;

pub use engine::{InnerRun, MetaGrads};

/// Positive floor for the learnable inner step size.
pub const INNER_LR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Hard,
    Soft,
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelMode::Hard => write!(f, "hard"),
            LabelMode::Soft => write!(f, "soft"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    RealSample,
    Noise,
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub ipc: usize,
    /// Frames per synthetic item (k).
    pub frames_per_item: usize,
    pub lr_img: f64,
    pub lr_y: f64,
    pub lr_lr: f64,
    pub batch_syn: usize,
    /// Inner student steps (N).
    pub syn_steps: usize,
    /// Expert epochs to match (M).
    pub match_steps: usize,
    pub max_start_epoch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub label_mode: LabelMode,
    pub init_mode: InitMode,
    pub inner_lr_init: f64,
    /// 0.0 = plain gradient descent on the synthetic learnables.
    pub outer_momentum: f64,
    /// Temperature for soft-label initialization from expert logits.
    pub soft_temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            ipc: 1,
            frames_per_item: 1,
            lr_img: 100.0,
            lr_y: 1.0,
            lr_lr: 3e-4,
            batch_syn: usize::MAX, // clamped to item count
            syn_steps: 5,
            match_steps: 2,
            max_start_epoch: 10,
            iterations: 500,
            seed: 0,
            label_mode: LabelMode::Hard,
            init_mode: InitMode::RealSample,
            inner_lr_init: 0.02,
            outer_momentum: 0.0,
            soft_temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_img <= 0.0 || self.lr_y <= 0.0 || self.lr_lr <= 0.0 {
            return Err(Error::Config("all learning rates must be > 0".into()));
        }
        if self.syn_steps < 1 {
            return Err(Error::Config("syn_steps must be >= 1".into()));
        }
        if self.match_steps < 1 {
            return Err(Error::Config("match_steps (M) must be >= 1".into()));
        }
        if self.ipc < 1 || self.frames_per_item < 1 {
            return Err(Error::Config("ipc and frames_per_item must be >= 1".into()));
        }
        Ok(())
    }
}

/// The distillation product: per-class learnable frames plus labels and the
/// learnable inner step size.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    /// Target video dims (frames are `(k, c, h, w)` slices of `frames`).
    pub dims: Vdim,
    pub ipc: usize,
    pub k: usize,
    pub num_classes: usize,
    /// `items * k * c * h * w` learnable reals.
    pub frames: Vec<f64>,
    /// Hard class index per item.
    pub labels: Vec<usize>,
    /// Learnable per-item logits when label mode is soft.
    pub soft_labels: Option<Vec<Vec<f64>>>,
    pub inner_lr: f64,
    pub provenance_seed: u64,
}

impl SyntheticSet {
    pub fn items(&self) -> usize {
        self.labels.len()
    }
    pub fn item_frame_len(&self) -> usize {
        self.k * self.dims.frame_len()
    }
    /// Learnable pixel parameters (frames only).
    pub fn learnable_pixels(&self) -> usize {
        self.frames.len()
    }
    pub fn frames_of(&self, item: usize) -> &[f64] {
        let n = self.item_frame_len();
        &self.frames[item * n..(item + 1) * n]
    }
    /// Crossfade item `item` to the full `(f, c, h, w)` video.
    pub fn materialize_item(&self, item: usize) -> Result<Vec<f64>> {
        let arr = Array4::from_shape_vec(
            (self.k, self.dims.c, self.dims.h, self.dims.w),
            self.frames_of(item).to_vec(),
        )
        .expect("shape");
        let out = crossfade(&arr, self.dims.f)?;
        Ok(out.into_raw_vec_and_offset().0)
    }
    /// CRC-32 over the frame bits; used to assert the SFVD-T frozen contract.
    pub fn frames_checksum(&self) -> u32 {
        let mut bytes = Vec::with_capacity(self.frames.len() * 8);
        for &v in &self.frames {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crc32fast::hash(&bytes)
    }

    pub fn engine_labels(&self) -> Labels {
        match &self.soft_labels {
            Some(soft) => Labels::Soft(soft.clone()),
            None => Labels::Hard(self.labels.clone()),
        }
    }
}

/// Frozen frames + sampled real videos + fusion parameters (SFVD-T product).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSyntheticSet {
    pub base: SyntheticSet,
    /// Per-item index into the target dataset's train split.
    pub video_refs: Vec<usize>,
    /// The sampled real videos, embedded in the artifact.
    pub videos: Vec<Vec<f64>>,
    /// Fusion layer parameters (kernel + bias).
    pub fusion: Vec<f64>,
    pub inner_lr: f64,
}

impl FusedSyntheticSet {
    pub fn fusion_layer(&self) -> FusionLayer {
        FusionLayer::new(self.base.dims.c)
    }
    pub fn materialize_item(&self, item: usize) -> Result<Vec<f64>> {
        let frame_video = self.base.materialize_item(item)?;
        let concat = FusionLayer::concat_inputs(&frame_video, &self.videos[item], self.base.dims);
        self.fusion_layer().fuse(&self.fusion, &concat, self.base.dims)
    }
}

/// Initialize synthetic items from real class samples (or noise).
pub fn init_synthetic(
    target: &TargetDataset,
    ipc: usize,
    k: usize,
    seed: u64,
    label_mode: LabelMode,
    init_mode: InitMode,
    inner_lr: f64,
) -> Result<SyntheticSet> {
    if k > target.dims.f {
        return Err(Error::Config(format!(
            "frames_per_item {k} exceeds video length {}",
            target.dims.f
        )));
    }
    let classes = target.num_classes();
    let mut frames = Vec::with_capacity(classes * ipc * k * target.dims.frame_len());
    let mut labels = Vec::with_capacity(classes * ipc);
    for class in 0..classes {
        let members = target.class_train_indices(class);
        if members.len() < ipc {
            return Err(Error::Data(format!(
                "class {class} has {} train videos, need ipc = {ipc}",
                members.len()
            )));
        }
        let mut rng = seeded(derive_seed(seed, 0x1417_0000 ^ class as u64));
        let picks = rand::seq::index::sample(&mut rng, members.len(), ipc);
        for (slot, pick) in picks.into_iter().enumerate() {
            match init_mode {
                InitMode::RealSample => {
                    let video = &target.train[members[pick]].video;
                    let mut frame_rng =
                        seeded(derive_seed(seed, 0x1418_0000 ^ ((class * 1usize << 16) + slot) as u64));
                    let fs = sample_frames(video, k, &mut frame_rng)?;
                    frames.extend_from_slice(fs.frames.as_slice().expect("layout"));
                }
                InitMode::Noise => {
                    let mut noise_rng =
                        seeded(derive_seed(seed, 0x1419_0000 ^ ((class * 1usize << 16) + slot) as u64));
                    for _ in 0..k * target.dims.frame_len() {
                        frames.push(noise_rng.random::<f64>());
                    }
                }
            }
            labels.push(class);
        }
    }
    Ok(SyntheticSet {
        dims: target.dims,
        ipc,
        k,
        num_classes: classes,
        frames,
        labels,
        soft_labels: matches!(label_mode, LabelMode::Soft).then(Vec::new),
        inner_lr,
        provenance_seed: seed,
    })
}

/// Soft labels from an expert snapshot's logits over the materialized items,
/// scaled by `1/temperature`.
pub fn init_soft_labels<B: Backbone>(
    set: &SyntheticSet,
    expert_params: &[f64],
    model: &B,
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    if expert_params.len() != model.param_count() {
        return Err(Error::Format(format!(
            "expert snapshot has {} params, model expects {}",
            expert_params.len(),
            model.param_count()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let mut out = Vec::with_capacity(set.items());
    for item in 0..set.items() {
        let video = set.materialize_item(item)?;
        let logits = model.forward_logits(expert_params, &video);
        out.push(logits.into_iter().map(|z| z / temperature).collect());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic-parameter sources for the engine
// ---------------------------------------------------------------------------

/// Frames-as-learnables: `p` is the flat frame tensor, items are crossfaded.
struct FrameSource {
    dims: Vdim,
    k: usize,
    items: usize,
}

impl SynSource for FrameSource {
    fn param_len(&self) -> usize {
        self.items * self.k * self.dims.frame_len()
    }
    fn item_count(&self) -> usize {
        self.items
    }
    fn materialize(&self, p: &[f64], item: usize) -> Vec<f64> {
        let n = self.k * self.dims.frame_len();
        let frames = &p[item * n..(item + 1) * n];
        if self.k == 1 {
            // duplication fast path
            let mut out = Vec::with_capacity(self.dims.len());
            for _ in 0..self.dims.f {
                out.extend_from_slice(frames);
            }
            return out;
        }
        let arr = Array4::from_shape_vec(
            (self.k, self.dims.c, self.dims.h, self.dims.w),
            frames.to_vec(),
        )
        .expect("shape");
        crossfade(&arr, self.dims.f).expect("validated k <= f").into_raw_vec_and_offset().0
    }
    fn pullback<S: crate::scalar::Real>(&self, item: usize, dvideo: &[S], dp: &mut [S]) {
        let n = self.k * self.dims.frame_len();
        if self.k == 1 {
            // adjoint of duplication: sum over output slots
            let acc = &mut dp[item * n..(item + 1) * n];
            for chunk in dvideo.chunks_exact(n) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            return;
        }
        let up = Array4::from_shape_vec(
            (self.dims.f, self.dims.c, self.dims.h, self.dims.w),
            dvideo.to_vec(),
        )
        .expect("shape");
        let mut grad = Array4::from_elem((self.k, self.dims.c, self.dims.h, self.dims.w), S::zero());
        crate::interpolation::crossfade_pullback(self.k, &up, &mut grad).expect("shape");
        let gs = grad.as_slice().expect("layout");
        for (acc, &g) in dp[item * n..(item + 1) * n].iter_mut().zip(gs) {
            *acc += g;
        }
    }
}

/// Full-video baseline: `p` holds complete `(f, c, h, w)` tensors.
struct FullVideoSource {
    dims: Vdim,
    items: usize,
}

impl SynSource for FullVideoSource {
    fn param_len(&self) -> usize {
        self.items * self.dims.len()
    }
    fn item_count(&self) -> usize {
        self.items
    }
    fn materialize(&self, p: &[f64], item: usize) -> Vec<f64> {
        let n = self.dims.len();
        p[item * n..(item + 1) * n].to_vec()
    }
    fn pullback<S: crate::scalar::Real>(&self, item: usize, dvideo: &[S], dp: &mut [S]) {
        let n = self.dims.len();
        for (acc, &g) in dp[item * n..(item + 1) * n].iter_mut().zip(dvideo) {
            *acc += g;
        }
    }
}

/// Fusion fine-tuning: `p` holds the fusion parameters; frames and real
/// videos are frozen, so the channel concatenations are precomputed.
struct FusionSource {
    dims: Vdim,
    layer: FusionLayer,
    /// Per-item `(f, 2c, h, w)` concatenated inputs.
    concats: Vec<Vec<f64>>,
}

impl SynSource for FusionSource {
    fn param_len(&self) -> usize {
        self.layer.param_count()
    }
    fn item_count(&self) -> usize {
        self.concats.len()
    }
    fn materialize(&self, p: &[f64], item: usize) -> Vec<f64> {
        self.layer
            .fuse(p, &self.concats[item], self.dims)
            .expect("validated shapes")
    }
    fn pullback<S: crate::scalar::Real>(&self, item: usize, dvideo: &[S], dp: &mut [S]) {
        let concat: Vec<S> = self.concats[item]
            .iter()
            .map(|&v| S::from_f64(v))
            .collect();
        self.layer.fuse_backward_params(dvideo, &concat, self.dims, dp);
    }
}

// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn mean_iter_ms(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.wall_ms).sum::<f64>() / self.points.len() as f64
    }
    pub fn mean_loss_of_first(&self, n: usize) -> f64 {
        let take = n.min(self.points.len()).max(1);
        self.points[..take].iter().map(|p| p.loss).sum::<f64>() / take as f64
    }
    pub fn mean_loss_of_last(&self, n: usize) -> f64 {
        let len = self.points.len();
        let take = n.min(len).max(1);
        self.points[len - take..].iter().map(|p| p.loss).sum::<f64>() / take as f64
    }
}

/// Shared outer loop: optimizes `p` (+ labels, inner lr) against segments of
/// the buffer. `progress` observes each iteration (for periodic evaluation).
#[allow(clippy::too_many_arguments)]
fn outer_loop<B: Backbone, M: SynSource>(
    model: &B,
    buffer: &TrajectoryBuffer,
    src: &M,
    p: &mut Vec<f64>,
    labels: &mut Labels,
    inner_lr: &mut f64,
    config: &DistillConfig,
    mut progress: impl FnMut(usize, f64, &[f64], &Labels, f64),
) -> Result<LossCurve> {
    let items = src.item_count();
    let batch_syn = config.batch_syn.min(items);
    if batch_syn == 0 {
        return Err(Error::Config("batch_syn must be >= 1".into()));
    }
    let mut rng = seeded(derive_seed(config.seed, 0xd157_0001));
    let mut curve = LossCurve::default();
    let mut vel_p = vec![0.0; p.len()];
    let mut vel_alpha = 0.0;
    let mut vel_labels: Option<Vec<Vec<f64>>> = match labels {
        Labels::Soft(all) => Some(all.iter().map(|l| vec![0.0; l.len()]).collect()),
        Labels::Hard(_) => None,
    };
    for iteration in 0..config.iterations {
        let start = Instant::now();
        let target = sample_match_target(buffer, config.max_start_epoch, config.match_steps, &mut rng)?;
        let run = unroll_inner(
            model,
            src,
            labels,
            p,
            *inner_lr,
            config.syn_steps,
            batch_syn,
            target.start,
            LossKind::CrossEntropy,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Distill(m) => Error::Distill(format!("iteration {iteration}: {m}")),
            other => other,
        })?;
        let (loss, dtheta_final) =
            trajectory_loss(run.thetas.last().unwrap(), target.start, target.end)?;
        if !loss.is_finite() {
            return Err(Error::Distill(format!(
                "non-finite matching loss at iteration {iteration}"
            )));
        }
        let meta = meta_gradient(
            model,
            src,
            labels,
            p,
            *inner_lr,
            &run,
            dtheta_final,
            LossKind::CrossEntropy,
        );
        let mom = config.outer_momentum;
        for ((pv, vv), g) in p.iter_mut().zip(&mut vel_p).zip(&meta.dp) {
            *vv = mom * *vv + g;
            *pv -= config.lr_img * *vv;
        }
        vel_alpha = mom * vel_alpha + meta.dalpha;
        *inner_lr -= config.lr_lr * vel_alpha;
        if *inner_lr < INNER_LR_FLOOR {
            log::warn!(
                "inner_lr driven to {} at iteration {iteration}; clamping to {INNER_LR_FLOOR}",
                *inner_lr
            );
            *inner_lr = INNER_LR_FLOOR;
        }
        if let (Labels::Soft(all), Some(dl), Some(vl)) =
            (&mut *labels, &meta.dlabels, vel_labels.as_mut())
        {
            for ((lab, vel), grad) in all.iter_mut().zip(vl).zip(dl) {
                for ((x, v), g) in lab.iter_mut().zip(vel).zip(grad) {
                    *v = mom * *v + g;
                    *x -= config.lr_y * *v;
                }
            }
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        curve.points.push(CurvePoint {
            iteration,
            loss,
            wall_ms,
        });
        progress(iteration, loss, p, labels, *inner_lr);
    }
    Ok(curve)
}

fn check_buffer(buffer: &TrajectoryBuffer, want: &str, target: &TargetDataset) -> Result<Model> {
    let first = buffer
        .trajectories
        .first()
        .ok_or_else(|| Error::Config("empty trajectory buffer".into()))?;
    let ok = match (want, first.source_tag) {
        ("interpolated", SourceTag::Interpolated(_)) => true,
        ("target", SourceTag::Target) => true,
        _ => false,
    };
    if !ok {
        return Err(Error::Config(format!(
            "buffer tag mismatch: need a {want} buffer, found {}",
            first.source_tag
        )));
    }
    if first.spec.dims != target.dims || first.spec.num_classes != target.num_classes() {
        return Err(Error::Config(format!(
            "buffer model {} / {} classes does not match dataset {} / {} classes",
            first.spec.dims,
            first.spec.num_classes,
            target.dims,
            target.num_classes()
        )));
    }
    build_model(&first.spec)
}

/// SFVD: learnable frames matched against experts trained on the
/// interpolated dataset.
pub fn distill_sfvd(
    buffer_interp: &TrajectoryBuffer,
    target: &TargetDataset,
    config: &DistillConfig,
    mut progress: impl FnMut(usize, f64, &SyntheticSet),
) -> Result<(SyntheticSet, LossCurve)> {
    config.validate()?;
    let model = check_buffer(buffer_interp, "interpolated", target)?;
    let mut set = init_synthetic(
        target,
        config.ipc,
        config.frames_per_item,
        config.seed,
        config.label_mode,
        config.init_mode,
        config.inner_lr_init,
    )?;
    if matches!(config.label_mode, LabelMode::Soft) {
        let expert = buffer_interp.trajectories[0].snapshots.last().unwrap();
        set.soft_labels = Some(init_soft_labels(&set, expert, &model, config.soft_temperature)?);
    }
    if config.iterations == 0 {
        return Ok((set, LossCurve::default()));
    }
    let src = FrameSource {
        dims: set.dims,
        k: set.k,
        items: set.items(),
    };
    let mut p = std::mem::take(&mut set.frames);
    let mut labels = set.engine_labels();
    let mut inner_lr = set.inner_lr;
    let curve = {
        let set_view = &mut set;
        outer_loop(
            &model,
            buffer_interp,
            &src,
            &mut p,
            &mut labels,
            &mut inner_lr,
            config,
            |it, loss, p_now, labels_now, lr_now| {
                set_view.frames = p_now.to_vec();
                if let Labels::Soft(all) = labels_now {
                    set_view.soft_labels = Some(all.clone());
                }
                set_view.inner_lr = lr_now;
                progress(it, loss, set_view);
            },
        )?
    };
    set.frames = p;
    set.inner_lr = inner_lr;
    if let Labels::Soft(all) = labels {
        set.soft_labels = Some(all);
    }
    Ok((set, curve))
}

/// Full-video baseline: whole `(f, c, h, w)` tensors are learnable, matched
/// against experts trained on the original dataset.
pub fn distill_fullvideo(
    buffer_target: &TrajectoryBuffer,
    target: &TargetDataset,
    config: &DistillConfig,
    mut progress: impl FnMut(usize, f64, &SyntheticSet),
) -> Result<(SyntheticSet, LossCurve)> {
    config.validate()?;
    let model = check_buffer(buffer_target, "target", target)?;
    // init = complete real videos, same per-class selection as init_synthetic
    let mut set = init_synthetic(
        target,
        config.ipc,
        target.dims.f,
        config.seed,
        config.label_mode,
        config.init_mode,
        config.inner_lr_init,
    )?;
    // k = f means the stored frames ARE the full videos (even spacing selects
    // every frame); keep k = f so materialization is the identity.
    if matches!(config.label_mode, LabelMode::Soft) {
        let expert = buffer_target.trajectories[0].snapshots.last().unwrap();
        set.soft_labels = Some(init_soft_labels(&set, expert, &model, config.soft_temperature)?);
    }
    if config.iterations == 0 {
        return Ok((set, LossCurve::default()));
    }
    let src = FullVideoSource {
        dims: set.dims,
        items: set.items(),
    };
    let mut p = std::mem::take(&mut set.frames);
    let mut labels = set.engine_labels();
    let mut inner_lr = set.inner_lr;
    let curve = {
        let set_view = &mut set;
        outer_loop(
            &model,
            buffer_target,
            &src,
            &mut p,
            &mut labels,
            &mut inner_lr,
            config,
            |it, loss, p_now, labels_now, lr_now| {
                set_view.frames = p_now.to_vec();
                if let Labels::Soft(all) = labels_now {
                    set_view.soft_labels = Some(all.clone());
                }
                set_view.inner_lr = lr_now;
                progress(it, loss, set_view);
            },
        )?
    };
    set.frames = p;
    set.inner_lr = inner_lr;
    if let Labels::Soft(all) = labels {
        set.soft_labels = Some(all);
    }
    Ok((set, curve))
}

/// SFVD-T: freeze the frames, sample one real video per item from its own
/// class, and fine-tune only the fusion layer (and inner lr) against experts
/// trained on the original dataset.
pub fn distill_sfvd_t(
    set: &SyntheticSet,
    buffer_target: &TrajectoryBuffer,
    target: &TargetDataset,
    config: &DistillConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(FusedSyntheticSet, LossCurve)> {
    config.validate()?;
    let model = check_buffer(buffer_target, "target", target)?;
    if set.dims != target.dims {
        return Err(Error::Config(format!(
            "synthetic dims {} do not match dataset dims {}",
            set.dims, target.dims
        )));
    }
    let frozen_checksum = set.frames_checksum();
    // sample one real video per item from its class, fixed for the whole run
    let mut video_refs = Vec::with_capacity(set.items());
    let mut videos = Vec::with_capacity(set.items());
    for item in 0..set.items() {
        let class = set.labels[item];
        let members = target.class_train_indices(class);
        if members.is_empty() {
            return Err(Error::Data(format!(
                "class {class} has no train videos to pair with item {item}"
            )));
        }
        let mut rng = seeded(derive_seed(config.seed, 0xf05e_0000 ^ item as u64));
        let pick = members[rng.random_range(0..members.len())];
        video_refs.push(pick);
        videos.push(
            target.train[pick]
                .video
                .data
                .as_slice()
                .expect("layout")
                .to_vec(),
        );
    }
    let layer = FusionLayer::new(set.dims.c);
    let mut concats = Vec::with_capacity(set.items());
    for item in 0..set.items() {
        let frame_video = set.materialize_item(item)?;
        concats.push(FusionLayer::concat_inputs(&frame_video, &videos[item], set.dims));
    }
    let src = FusionSource {
        dims: set.dims,
        layer,
        concats,
    };
    let mut p = layer.passthrough_params();
    let mut labels = set.engine_labels();
    let mut inner_lr = set.inner_lr;
    let curve = if config.iterations == 0 {
        LossCurve::default()
    } else {
        outer_loop(
            &model,
            buffer_target,
            &src,
            &mut p,
            &mut labels,
            &mut inner_lr,
            // fusion parameters move at lr_img; labels stay frozen in SFVD-T
            &DistillConfig {
                label_mode: LabelMode::Hard,
                ..config.clone()
            },
            |it, loss, _, _, _| progress(it, loss),
        )?
    };
    assert_eq!(
        set.frames_checksum(),
        frozen_checksum,
        "frozen frames must not change during SFVD-T"
    );
    Ok((
        FusedSyntheticSet {
            base: set.clone(),
            video_refs,
            videos,
            fusion: p,
            inner_lr,
        },
        curve,
    ))
}

/// Diagnostic helper: matching loss of one unroll from `theta_start`,
/// without any outer updates.
pub fn engine_probe<B: Backbone>(
    model: &B,
    set: &SyntheticSet,
    alpha: f64,
    n_steps: usize,
    theta_start: &[f64],
    theta_end: &[f64],
) -> Result<f64> {
    let src = FrameSource {
        dims: set.dims,
        k: set.k,
        items: set.items(),
    };
    let labels = set.engine_labels();
    let mut rng = seeded(0);
    let run = unroll_inner(
        model,
        &src,
        &labels,
        &set.frames,
        alpha,
        n_steps,
        set.items(),
        theta_start,
        LossKind::CrossEntropy,
        &mut rng,
    )?;
    Ok(trajectory_loss(run.thetas.last().unwrap(), theta_start, theta_end)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use crate::models::{Arch, ModelSpec};
    use crate::trajectories::{train_expert, TrainConfig};
    use engine::{meta_gradient, trajectory_loss, unroll_inner};

    fn toy() -> TargetDataset {
        generate_toy_dataset(&ToySpec {
            classes: 2,
            per_class_train: 4,
            per_class_test: 2,
            f: 4,
            c: 1,
            h: 8,
            w: 8,
            seed: 2,
            imbalance_ratios: None,
        })
        .unwrap()
    }

    fn spec(ds: &TargetDataset, seed: u64) -> ModelSpec {
        ModelSpec {
            arch: Arch::Conv3d,
            width: 4,
            depth: 1,
            num_classes: ds.num_classes(),
            dims: ds.dims,
            init_seed: seed,
        }
    }

    fn buffer(ds: &TargetDataset, tag: SourceTag, experts: usize) -> TrajectoryBuffer {
        let train_ds = match tag {
            SourceTag::Interpolated(n) => {
                crate::data::build_interpolated_dataset(ds, n, 7).unwrap().dataset
            }
            SourceTag::Target => ds.clone(),
        };
        let trajectories = (0..experts)
            .map(|e| {
                train_expert(
                    &train_ds,
                    &spec(ds, 100 + e as u64),
                    &TrainConfig {
                        epochs: 4,
                        batch_size: 4,
                        seed: e as u64,
                        ..TrainConfig::default()
                    },
                    tag,
                )
                .unwrap()
            })
            .collect();
        TrajectoryBuffer { trajectories }
    }

    fn quick_config(iterations: usize) -> DistillConfig {
        DistillConfig {
            iterations,
            syn_steps: 2,
            match_steps: 1,
            max_start_epoch: 2,
            lr_img: 10.0,
            inner_lr_init: 0.02,
            ..DistillConfig::default()
        }
    }

    /// Meta-gradients through N unrolled steps of a real (tiny) conv model
    /// must match central finite differences of the matching loss.
    #[test]
    fn meta_gradient_matches_finite_differences_on_conv_model() {
        use crate::models::ConvNet;
        let dims = Vdim::new(2, 1, 4, 4);
        let spec = ModelSpec {
            arch: Arch::Conv3d,
            width: 1,
            depth: 1,
            num_classes: 2,
            dims,
            init_seed: 1,
        };
        let model = ConvNet::new(&spec).unwrap();
        assert!(model.param_count() <= 50, "oracle model must stay tiny");
        let theta_start = model.init_params(1);
        let theta_end = model.init_params(2);
        let src = FrameSource {
            dims,
            k: 1,
            items: 2,
        };
        let mut rng = seeded(11);
        let p0: Vec<f64> = (0..src.param_len()).map(|_| rng.random::<f64>()).collect();
        let soft0 = vec![vec![0.4, -0.2], vec![-1.0, 0.3]];
        let alpha = 0.05;
        let n_steps = 3;

        let run_loss = |p: &[f64], soft: &[Vec<f64>], a: f64| -> f64 {
            let labels = Labels::Soft(soft.to_vec());
            let run = unroll_inner(
                &model, &src, &labels, p, a, n_steps, 2, &theta_start,
                LossKind::CrossEntropy, &mut seeded(0),
            )
            .unwrap();
            trajectory_loss(run.thetas.last().unwrap(), &theta_start, &theta_end)
                .unwrap()
                .0
        };

        let labels = Labels::Soft(soft0.clone());
        let run = unroll_inner(
            &model, &src, &labels, &p0, alpha, n_steps, 2, &theta_start,
            LossKind::CrossEntropy, &mut seeded(0),
        )
        .unwrap();
        let (_, dfinal) =
            trajectory_loss(run.thetas.last().unwrap(), &theta_start, &theta_end).unwrap();
        let meta = meta_gradient(
            &model, &src, &labels, &p0, alpha, &run, dfinal, LossKind::CrossEntropy,
        );

        let eps = 1e-4;
        // >= 10 random pixels of the synthetic frames, rtol 1e-3
        let mut checked = 0;
        for i in (0..p0.len()).step_by(3) {
            let mut up = p0.clone();
            let mut dn = p0.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (run_loss(&up, &soft0, alpha) - run_loss(&dn, &soft0, alpha)) / (2.0 * eps);
            let rel = (meta.dp[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: meta {} vs fd {}", meta.dp[i], fd);
            checked += 1;
        }
        assert!(checked >= 10);
        // soft-label gradients
        let dl = meta.dlabels.as_ref().unwrap();
        for item in 0..2 {
            for j in 0..2 {
                let mut up = soft0.clone();
                let mut dn = soft0.clone();
                up[item][j] += eps;
                dn[item][j] -= eps;
                let fd = (run_loss(&p0, &up, alpha) - run_loss(&p0, &dn, alpha)) / (2.0 * eps);
                let rel = (dl[item][j] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-3, "label {item}/{j}: {} vs fd {}", dl[item][j], fd);
            }
        }
        // inner-lr gradient
        let fd_a = (run_loss(&p0, &soft0, alpha + eps) - run_loss(&p0, &soft0, alpha - eps))
            / (2.0 * eps);
        let rel = (meta.dalpha - fd_a).abs() / fd_a.abs().max(1e-8);
        assert!(rel < 1e-3, "dalpha {} vs fd {}", meta.dalpha, fd_a);
    }

    /// Minibatched unrolls replay their recorded batches in the reverse
    /// sweep; gradients must still match finite differences.
    #[test]
    fn meta_gradient_with_minibatches_matches_fd() {
        use crate::models::ConvNet;
        let dims = Vdim::new(2, 1, 4, 4);
        let spec = ModelSpec {
            arch: Arch::Conv3d,
            width: 1,
            depth: 1,
            num_classes: 3,
            dims,
            init_seed: 5,
        };
        let model = ConvNet::new(&spec).unwrap();
        let theta_start = model.init_params(3);
        let theta_end = model.init_params(4);
        let src = FrameSource {
            dims,
            k: 1,
            items: 3,
        };
        let mut rng = seeded(17);
        let p0: Vec<f64> = (0..src.param_len()).map(|_| rng.random::<f64>()).collect();
        let labels = Labels::Hard(vec![0, 1, 2]);
        let alpha = 0.04;

        let run_loss = |p: &[f64]| -> f64 {
            let run = unroll_inner(
                &model, &src, &labels, p, alpha, 3, 2, &theta_start,
                LossKind::CrossEntropy, &mut seeded(23),
            )
            .unwrap();
            trajectory_loss(run.thetas.last().unwrap(), &theta_start, &theta_end)
                .unwrap()
                .0
        };
        let run = unroll_inner(
            &model, &src, &labels, &p0, alpha, 3, 2, &theta_start,
            LossKind::CrossEntropy, &mut seeded(23),
        )
        .unwrap();
        assert!(run.batches.iter().all(|b| b.len() == 2));
        let (_, dfinal) =
            trajectory_loss(run.thetas.last().unwrap(), &theta_start, &theta_end).unwrap();
        let meta = meta_gradient(
            &model, &src, &labels, &p0, alpha, &run, dfinal, LossKind::CrossEntropy,
        );
        let eps = 1e-4;
        for i in (0..p0.len()).step_by(5) {
            let mut up = p0.clone();
            let mut dn = p0.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (run_loss(&up) - run_loss(&dn)) / (2.0 * eps);
            let rel = (meta.dp[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: {} vs fd {}", meta.dp[i], fd);
        }
    }

    #[test]
    fn init_synthetic_shapes_and_membership() {
        let ds = toy();
        let set = init_synthetic(&ds, 1, 1, 3, LabelMode::Hard, InitMode::RealSample, 0.02).unwrap();
        assert_eq!(set.items(), 2);
        assert_eq!(set.frames.len(), 2 * ds.dims.frame_len());
        assert_eq!(set.labels, vec![0, 1]);
        // every initial frame is an exact frame of some real video of its class
        for item in 0..set.items() {
            let frame = set.frames_of(item);
            let class = set.labels[item];
            let found = ds
                .train
                .iter()
                .filter(|lv| lv.label == class)
                .any(|lv| {
                    let v = lv.video.data.as_slice().unwrap();
                    (0..ds.dims.f).any(|t| {
                        &v[t * ds.dims.frame_len()..(t + 1) * ds.dims.frame_len()] == frame
                    })
                });
            assert!(found, "item {item} frame is not a real class frame");
        }
        // determinism
        let again = init_synthetic(&ds, 1, 1, 3, LabelMode::Hard, InitMode::RealSample, 0.02).unwrap();
        assert_eq!(set, again);
        // ipc too large
        assert!(init_synthetic(&ds, 5, 1, 3, LabelMode::Hard, InitMode::RealSample, 0.02).is_err());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let ds = toy();
        let buf = buffer(&ds, SourceTag::Interpolated(1), 1);
        let cfg = quick_config(0);
        let (set, curve) = distill_sfvd(&buf, &ds, &cfg, |_, _, _| ()).unwrap();
        let init = init_synthetic(
            &ds, cfg.ipc, cfg.frames_per_item, cfg.seed, cfg.label_mode, cfg.init_mode,
            cfg.inner_lr_init,
        )
        .unwrap();
        assert_eq!(set, init);
        assert!(curve.points.is_empty());
    }

    #[test]
    fn sfvd_runs_and_curve_has_one_row_per_iteration() {
        let ds = toy();
        let buf = buffer(&ds, SourceTag::Interpolated(1), 2);
        let (set, curve) = distill_sfvd(&buf, &ds, &quick_config(5), |_, _, _| ()).unwrap();
        assert_eq!(curve.points.len(), 5);
        assert!(set.inner_lr >= INNER_LR_FLOOR);
        assert!(set.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn buffer_tag_mismatch_is_config_error() {
        let ds = toy();
        let buf_t = buffer(&ds, SourceTag::Target, 1);
        let err = distill_sfvd(&buf_t, &ds, &quick_config(1), |_, _, _| ()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let buf_i = buffer(&ds, SourceTag::Interpolated(1), 1);
        let set = init_synthetic(&ds, 1, 1, 0, LabelMode::Hard, InitMode::RealSample, 0.02).unwrap();
        let err = distill_sfvd_t(&set, &buf_i, &ds, &quick_config(1), |_, _| ()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn fullvideo_items_are_f_times_larger_and_init_is_real_videos() {
        let ds = toy();
        let buf_i = buffer(&ds, SourceTag::Interpolated(1), 1);
        let buf_t = buffer(&ds, SourceTag::Target, 1);
        let cfg = quick_config(0);
        let (sfvd_set, _) = distill_sfvd(&buf_i, &ds, &cfg, |_, _, _| ()).unwrap();
        let (full_set, _) = distill_fullvideo(&buf_t, &ds, &cfg, |_, _, _| ()).unwrap();
        assert_eq!(
            full_set.learnable_pixels(),
            ds.dims.f * sfvd_set.learnable_pixels()
        );
        // baseline init items are bit-exact real videos
        for item in 0..full_set.items() {
            let video = full_set.materialize_item(item).unwrap();
            let found = ds.train.iter().any(|lv| {
                lv.label == full_set.labels[item]
                    && lv.video.data.as_slice().unwrap() == video.as_slice()
            });
            assert!(found);
        }
    }

    #[test]
    fn sfvd_t_freezes_frames_and_pairs_same_class_videos() {
        let ds = toy();
        let buf_i = buffer(&ds, SourceTag::Interpolated(1), 1);
        let buf_t = buffer(&ds, SourceTag::Target, 1);
        let (set, _) = distill_sfvd(&buf_i, &ds, &quick_config(3), |_, _, _| ()).unwrap();
        let before = set.frames_checksum();
        let (fused, curve) = distill_sfvd_t(&set, &buf_t, &ds, &quick_config(3), |_, _| ()).unwrap();
        assert_eq!(fused.base.frames_checksum(), before);
        assert_eq!(curve.points.len(), 3);
        for item in 0..fused.base.items() {
            assert_eq!(ds.train[fused.video_refs[item]].label, fused.base.labels[item]);
        }
    }

    #[test]
    fn sfvd_t_zero_iterations_materializes_like_sfvd() {
        let ds = toy();
        let buf_i = buffer(&ds, SourceTag::Interpolated(1), 1);
        let buf_t = buffer(&ds, SourceTag::Target, 1);
        let (set, _) = distill_sfvd(&buf_i, &ds, &quick_config(2), |_, _, _| ()).unwrap();
        let (fused, _) = distill_sfvd_t(&set, &buf_t, &ds, &quick_config(0), |_, _| ()).unwrap();
        for item in 0..set.items() {
            assert_eq!(
                fused.materialize_item(item).unwrap(),
                set.materialize_item(item).unwrap()
            );
        }
    }

    #[test]
    fn soft_labels_initialize_from_expert_logits() {
        let ds = toy();
        let buf_i = buffer(&ds, SourceTag::Interpolated(1), 1);
        let cfg = DistillConfig {
            label_mode: LabelMode::Soft,
            soft_temperature: 2.0,
            ..quick_config(0)
        };
        let (set, _) = distill_sfvd(&buf_i, &ds, &cfg, |_, _, _| ()).unwrap();
        let soft = set.soft_labels.as_ref().unwrap();
        assert_eq!(soft.len(), set.items());
        let model = build_model(&buf_i.trajectories[0].spec).unwrap();
        let expert = buf_i.trajectories[0].snapshots.last().unwrap();
        for item in 0..set.items() {
            let video = set.materialize_item(item).unwrap();
            let logits = model.forward_logits(expert, &video);
            for (s, z) in soft[item].iter().zip(&logits) {
                assert!((s - z / 2.0).abs() < 1e-12);
            }
        }
    }
}
