//! Expert training and the trajectory buffer: trains models on the target or
//! interpolated dataset, records one parameter snapshot per epoch (including
//! epoch 0), and persists them as matching targets.
//!
//! Buffer directory layout: `traj_<k>.manifest` (UTF-8 `key: value`) plus
//! `traj_<k>.bin` (raw little-endian f64 snapshots). The manifest carries a
//! CRC-32 over the parameter-layout description string; loads verify it.

use crate::data::{TargetDataset, Vdim};
use crate::error::{Error, Result};
use crate::models::{build_model, Arch, Backbone, LossKind, ModelSpec, Target};
use crate::rng::{derive_seed, seeded, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One training item: a flat video plus its target.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub video: Vec<f64>,
    pub target: TrainTarget,
}

#[derive(Clone, Debug)]
pub enum TrainTarget {
    Hard(usize),
    Soft(Vec<f64>),
}

impl TrainTarget {
    pub fn as_target(&self) -> Target<'_, f64> {
        match self {
            TrainTarget::Hard(y) => Target::Hard(*y),
            TrainTarget::Soft(v) => Target::Soft(v),
        }
    }
    pub fn hard_label(&self) -> usize {
        match self {
            TrainTarget::Hard(y) => *y,
            TrainTarget::Soft(v) => {
                let mut best = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }
}

pub fn items_from_split(split: &[crate::data::LabeledVideo]) -> Vec<TrainItem> {
    split
        .iter()
        .map(|lv| TrainItem {
            video: lv.video.data.as_slice().expect("layout").to_vec(),
            target: TrainTarget::Hard(lv.label),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Plain SGD with momentum over cross-entropy; `epoch_hook` observes the
/// parameters after every epoch (epoch index is 1-based there).
pub fn sgd_train<B: Backbone>(
    model: &B,
    params: &mut [f64],
    items: &[TrainItem],
    loss: LossKind,
    cfg: &TrainConfig,
    mut epoch_hook: impl FnMut(usize, &[f64]),
) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Train("no training items".into()));
    }
    if cfg.epochs < 1 {
        return Err(Error::Train("epochs must be >= 1".into()));
    }
    let n = model.param_count();
    let mut velocity = vec![0.0; n];
    let mut grads = vec![0.0; n];
    let batch = cfg.batch_size.max(1).min(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive_seed(cfg.seed, 0xe90c_0000 ^ epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            for g in grads.iter_mut() {
                *g = 0.0;
            }
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let item = &items[idx];
                let res = model.item_loss_grads(
                    params,
                    &item.video,
                    &item.target.as_target(),
                    loss,
                    &mut grads,
                    false,
                );
                batch_loss += res.loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.lr * *v;
            }
        }
        epoch_hook(epoch + 1, params);
    }
    Ok(())
}

/// Top-k accuracy of `params` over labeled items.
pub fn accuracy<B: Backbone>(model: &B, params: &[f64], items: &[TrainItem], k: usize) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for item in items {
        let logits = model.forward_logits(params, &item.video);
        let label = item.target.hard_label();
        let mut better = 0usize;
        for (i, &z) in logits.iter().enumerate() {
            if i != label && z >= logits[label] {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    hits as f64 / items.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    Target,
    Interpolated(usize),
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceTag::Target => write!(f, "target"),
            SourceTag::Interpolated(n) => write!(f, "interpolated:{n}"),
        }
    }
}

impl SourceTag {
    pub fn parse(s: &str) -> Result<SourceTag> {
        if s == "target" {
            return Ok(SourceTag::Target);
        }
        if let Some(n) = s.strip_prefix("interpolated:") {
            return Ok(SourceTag::Interpolated(n.parse().map_err(|_| {
                Error::Format(format!("bad source tag {s:?}"))
            })?));
        }
        Err(Error::Format(format!("bad source tag {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub spec: ModelSpec,
    pub snapshots: Vec<Vec<f64>>,
    pub train_config: TrainConfig,
    pub source_tag: SourceTag,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryBuffer {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBuffer {
    pub fn layout_digest(&self) -> Result<u32> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| Error::Data("empty trajectory buffer".into()))?;
        let model = build_model(&first.spec)?;
        Ok(model.layout().digest())
    }

    pub fn source_tag(&self) -> Option<SourceTag> {
        self.trajectories.first().map(|t| t.source_tag)
    }
}

/// Train one expert on the dataset's train split, snapshotting parameters
/// before training and after each epoch.
pub fn train_expert(
    dataset: &TargetDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    source_tag: SourceTag,
) -> Result<Trajectory> {
    let model = build_model(spec)?;
    let items = items_from_split(&dataset.train);
    let test_items = items_from_split(&dataset.test);
    let mut params = model.init_params(spec.init_seed);
    let mut snapshots = vec![params.clone()];
    sgd_train(
        &model,
        &mut params,
        &items,
        LossKind::CrossEntropy,
        cfg,
        |_, p| snapshots.push(p.to_vec()),
    )?;
    let final_train_acc = accuracy(&model, &params, &items, 1);
    let final_test_acc = accuracy(&model, &params, &test_items, 1);
    log::info!(
        "expert({source_tag}) seed={} train_acc={:.3} test_acc={:.3}",
        cfg.seed,
        final_train_acc,
        final_test_acc
    );
    Ok(Trajectory {
        spec: spec.clone(),
        snapshots,
        train_config: cfg.clone(),
        source_tag,
        final_train_acc,
        final_test_acc,
    })
}

fn manifest_string(traj: &Trajectory, digest: u32) -> String {
    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push_str(": ");
        m.push_str(&v);
        m.push('\n');
    };
    let s = &traj.spec;
    kv("version", "1".into());
    kv("arch", s.arch.to_string());
    kv("width", s.width.to_string());
    kv("depth", s.depth.to_string());
    kv("num_classes", s.num_classes.to_string());
    kv("f", s.dims.f.to_string());
    kv("c", s.dims.c.to_string());
    kv("h", s.dims.h.to_string());
    kv("w", s.dims.w.to_string());
    kv("init_seed", s.init_seed.to_string());
    kv("optimizer", "sgd_momentum".into());
    kv("lr", traj.train_config.lr.to_string());
    kv("momentum", traj.train_config.momentum.to_string());
    kv("batch_size", traj.train_config.batch_size.to_string());
    kv("epochs", traj.train_config.epochs.to_string());
    kv("train_seed", traj.train_config.seed.to_string());
    kv("source", traj.source_tag.to_string());
    kv("snapshots", traj.snapshots.len().to_string());
    kv("param_count", traj.snapshots[0].len().to_string());
    kv("layout_crc32", format!("{digest:08x}"));
    kv("final_train_acc", traj.final_train_acc.to_string());
    kv("final_test_acc", traj.final_test_acc.to_string());
    m
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("manifest line without ':': {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn req<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("trajectory manifest missing key `{key}`")))
}

fn req_parse<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    req(m, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad value for trajectory manifest key `{key}`")))
}

/// Parse one trajectory manifest into its spec, config and metadata.
pub fn decode_manifest(
    text: &str,
) -> Result<(ModelSpec, TrainConfig, SourceTag, usize, usize, u32, f64, f64)> {
    let m = parse_manifest(text)?;
    let version: u32 = req_parse(&m, "version")?;
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported trajectory manifest version {version}"
        )));
    }
    let spec = ModelSpec {
        arch: Arch::parse(req(&m, "arch")?)?,
        width: req_parse(&m, "width")?,
        depth: req_parse(&m, "depth")?,
        num_classes: req_parse(&m, "num_classes")?,
        dims: Vdim::new(
            req_parse(&m, "f")?,
            req_parse(&m, "c")?,
            req_parse(&m, "h")?,
            req_parse(&m, "w")?,
        ),
        init_seed: req_parse(&m, "init_seed")?,
    };
    let cfg = TrainConfig {
        lr: req_parse(&m, "lr")?,
        momentum: req_parse(&m, "momentum")?,
        batch_size: req_parse(&m, "batch_size")?,
        epochs: req_parse(&m, "epochs")?,
        seed: req_parse(&m, "train_seed")?,
    };
    let source = SourceTag::parse(req(&m, "source")?)?;
    let snapshots: usize = req_parse(&m, "snapshots")?;
    let param_count: usize = req_parse(&m, "param_count")?;
    let digest = u32::from_str_radix(req(&m, "layout_crc32")?, 16)
        .map_err(|_| Error::Format("bad layout_crc32".into()))?;
    let train_acc: f64 = req_parse(&m, "final_train_acc")?;
    let test_acc: f64 = req_parse(&m, "final_test_acc")?;
    Ok((spec, cfg, source, snapshots, param_count, digest, train_acc, test_acc))
}

pub fn save_buffer(buffer: &TrajectoryBuffer, dir: &Path) -> Result<()> {
    if buffer.trajectories.is_empty() {
        return Err(Error::Data("cannot save an empty trajectory buffer".into()));
    }
    let digest = buffer.layout_digest()?;
    // reject buffers mixing incompatible layouts
    for traj in &buffer.trajectories {
        let model = build_model(&traj.spec)?;
        if model.layout().digest() != digest {
            return Err(Error::Format(
                "trajectory buffer mixes incompatible parameter layouts".into(),
            ));
        }
        if traj.snapshots.len() != traj.train_config.epochs + 1 {
            return Err(Error::Format(format!(
                "trajectory has {} snapshots for {} epochs",
                traj.snapshots.len(),
                traj.train_config.epochs
            )));
        }
    }
    fs::create_dir_all(dir)?;
    for (k, traj) in buffer.trajectories.iter().enumerate() {
        let manifest = manifest_string(traj, digest);
        let mut bin = Vec::with_capacity(traj.snapshots.len() * traj.snapshots[0].len() * 8);
        for snap in &traj.snapshots {
            for &v in snap {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(format!("traj_{k}.manifest")), manifest)?;
        fs::write(dir.join(format!("traj_{k}.bin")), bin)?;
    }
    Ok(())
}

pub fn load_buffer(dir: &Path) -> Result<TrajectoryBuffer> {
    let mut trajectories = Vec::new();
    for k in 0.. {
        let mpath = dir.join(format!("traj_{k}.manifest"));
        if !mpath.exists() {
            break;
        }
        let text = fs::read_to_string(&mpath)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", mpath.display())))?;
        let (spec, cfg, source, snapshots, param_count, digest, train_acc, test_acc) =
            decode_manifest(&text)?;
        let model = build_model(&spec)?;
        if model.layout().digest() != digest {
            return Err(Error::Format(format!(
                "trajectory {k}: layout digest mismatch (file {digest:08x}, model {:08x})",
                model.layout().digest()
            )));
        }
        if model.param_count() != param_count {
            return Err(Error::Format(format!(
                "trajectory {k}: param count mismatch"
            )));
        }
        let bin = fs::read(dir.join(format!("traj_{k}.bin")))
            .map_err(|e| Error::Format(format!("trajectory {k}: cannot read bin: {e}")))?;
        let expect = snapshots * param_count * 8;
        if bin.len() != expect {
            return Err(Error::Format(format!(
                "trajectory {k}: snapshot payload truncated ({} bytes, expected {expect})",
                bin.len()
            )));
        }
        let mut snaps = Vec::with_capacity(snapshots);
        for s in 0..snapshots {
            let mut vec = Vec::with_capacity(param_count);
            for chunk in bin[s * param_count * 8..(s + 1) * param_count * 8].chunks_exact(8) {
                vec.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            snaps.push(vec);
        }
        trajectories.push(Trajectory {
            spec,
            snapshots: snaps,
            train_config: cfg,
            source_tag: source,
            final_train_acc: train_acc,
            final_test_acc: test_acc,
        });
    }
    if trajectories.is_empty() {
        return Err(Error::Format(format!(
            "no trajectories found under {}",
            dir.display()
        )));
    }
    let buffer = TrajectoryBuffer { trajectories };
    let digest = buffer.layout_digest()?;
    for (k, t) in buffer.trajectories.iter().enumerate() {
        if build_model(&t.spec)?.layout().digest() != digest {
            return Err(Error::Format(format!(
                "trajectory {k} layout incompatible with trajectory 0"
            )));
        }
    }
    Ok(buffer)
}

/// A sampled matching target: start/end snapshots and their trajectory/epoch.
pub struct MatchTarget<'a> {
    pub start: &'a [f64],
    pub end: &'a [f64],
    pub trajectory: usize,
    pub epoch: usize,
}

/// Uniformly sample a trajectory, then a feasible start epoch
/// `t <= max_start_epoch` with `t + m` inside the snapshot list.
pub fn sample_match_target<'a>(
    buffer: &'a TrajectoryBuffer,
    max_start_epoch: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<MatchTarget<'a>> {
    let feasible: Vec<usize> = buffer
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.snapshots.len() > m)
        .map(|(i, _)| i)
        .collect();
    if feasible.is_empty() {
        return Err(Error::Config(format!(
            "no trajectory admits start epoch <= {max_start_epoch} with M = {m}"
        )));
    }
    let ti = feasible[rng.random_range(0..feasible.len())];
    let traj = &buffer.trajectories[ti];
    let max_t = (traj.snapshots.len() - 1 - m).min(max_start_epoch);
    let t = rng.random_range(0..=max_t);
    Ok(MatchTarget {
        start: &traj.snapshots[t],
        end: &traj.snapshots[t + m],
        trajectory: ti,
        epoch: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};

    fn toy() -> TargetDataset {
        generate_toy_dataset(&ToySpec {
            classes: 3,
            per_class_train: 4,
            per_class_test: 2,
            f: 4,
            c: 1,
            h: 8,
            w: 8,
            seed: 1,
            imbalance_ratios: None,
        })
        .unwrap()
    }

    fn tiny_spec(ds: &TargetDataset) -> ModelSpec {
        ModelSpec {
            arch: Arch::Conv3d,
            width: 4,
            depth: 1,
            num_classes: ds.num_classes(),
            dims: ds.dims,
            init_seed: 3,
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 6,
            epochs,
            seed: 9,
        }
    }

    #[test]
    fn snapshot_count_and_initial_snapshot() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let traj = train_expert(&ds, &spec, &tiny_cfg(1), SourceTag::Target).unwrap();
        assert_eq!(traj.snapshots.len(), 2);
        let model = build_model(&spec).unwrap();
        assert_eq!(traj.snapshots[0], model.init_params(3));
        assert!(train_expert(&ds, &spec, &tiny_cfg(0), SourceTag::Target).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let a = train_expert(&ds, &spec, &tiny_cfg(3), SourceTag::Target).unwrap();
        let b = train_expert(&ds, &spec, &tiny_cfg(3), SourceTag::Target).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn expert_beats_chance_on_toy_test_split() {
        let ds = toy();
        let spec = ModelSpec {
            width: 6,
            ..tiny_spec(&ds)
        };
        let traj = train_expert(&ds, &spec, &tiny_cfg(20), SourceTag::Target).unwrap();
        assert!(
            traj.final_test_acc > 1.0 / ds.num_classes() as f64,
            "test acc {} not above chance",
            traj.final_test_acc
        );
    }

    #[test]
    fn buffer_roundtrip_bit_exact() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let t0 = train_expert(&ds, &spec, &tiny_cfg(2), SourceTag::Interpolated(1)).unwrap();
        let t1 = train_expert(
            &ds,
            &ModelSpec { init_seed: 4, ..spec.clone() },
            &tiny_cfg(2),
            SourceTag::Interpolated(1),
        )
        .unwrap();
        let buffer = TrajectoryBuffer {
            trajectories: vec![t0, t1],
        };
        let dir = tempfile::tempdir().unwrap();
        save_buffer(&buffer, dir.path()).unwrap();
        let back = load_buffer(dir.path()).unwrap();
        assert_eq!(back.trajectories.len(), 2);
        for (a, b) in buffer.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a.snapshots, b.snapshots);
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.train_config, b.train_config);
            assert_eq!(a.source_tag, b.source_tag);
        }
    }

    #[test]
    fn mixed_layout_buffers_rejected_on_save() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let t0 = train_expert(&ds, &spec, &tiny_cfg(1), SourceTag::Target).unwrap();
        let wide = ModelSpec { width: 6, ..spec };
        let t1 = train_expert(&ds, &wide, &tiny_cfg(1), SourceTag::Target).unwrap();
        let buffer = TrajectoryBuffer {
            trajectories: vec![t0, t1],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(save_buffer(&buffer, dir.path()).is_err());
    }

    #[test]
    fn truncated_bin_names_trajectory_index() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let t0 = train_expert(&ds, &spec, &tiny_cfg(1), SourceTag::Target).unwrap();
        let buffer = TrajectoryBuffer {
            trajectories: vec![t0],
        };
        let dir = tempfile::tempdir().unwrap();
        save_buffer(&buffer, dir.path()).unwrap();
        let bin_path = dir.path().join("traj_0.bin");
        let bytes = fs::read(&bin_path).unwrap();
        fs::write(&bin_path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_buffer(dir.path()).unwrap_err();
        assert!(err.to_string().contains("trajectory 0"), "{err}");
    }

    #[test]
    fn sample_match_target_forced_and_frequencies() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let t0 = train_expert(&ds, &spec, &tiny_cfg(2), SourceTag::Target).unwrap();
        let single = TrajectoryBuffer {
            trajectories: vec![t0.clone()],
        };
        let mut rng = seeded(0);
        // one trajectory, 3 snapshots, max_start = 0, M = 2: always (0, 2)
        for _ in 0..10 {
            let m = sample_match_target(&single, 0, 2, &mut rng).unwrap();
            assert_eq!(m.epoch, 0);
            assert_eq!(m.start, t0.snapshots[0].as_slice());
            assert_eq!(m.end, t0.snapshots[2].as_slice());
        }
        // M = 0 returns an identical pair
        let m = sample_match_target(&single, 0, 0, &mut rng).unwrap();
        assert_eq!(m.start, m.end);
        // infeasible
        assert!(sample_match_target(&single, 0, 5, &mut rng).is_err());
        // two trajectories drawn 50 +/- 5% over 1000 draws
        let t1 = train_expert(
            &ds,
            &ModelSpec { init_seed: 8, ..spec },
            &tiny_cfg(2),
            SourceTag::Target,
        )
        .unwrap();
        let double = TrajectoryBuffer {
            trajectories: vec![t0, t1],
        };
        let mut counts = [0usize; 2];
        for _ in 0..1000 {
            let m = sample_match_target(&double, 1, 1, &mut rng).unwrap();
            counts[m.trajectory] += 1;
        }
        assert!((450..=550).contains(&counts[0]), "{counts:?}");
    }

    #[test]
    fn accuracy_chance_level_for_equal_logits() {
        let ds = toy();
        let spec = tiny_spec(&ds);
        let model = build_model(&spec).unwrap();
        // zero params -> all logits equal; top-1 counts ties conservatively
        let params = vec![0.0; model.param_count()];
        let items = items_from_split(&ds.test);
        let acc = accuracy(&model, &params, &items, 1);
        assert!(acc <= 1.0 / ds.num_classes() as f64 + 1e-9);
    }
}
