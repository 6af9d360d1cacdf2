//! Evaluation of distilled artifacts and coresets: trains fresh models on
//! the materialized items, measures accuracy on the real test split, and
//! runs the cross-architecture, frame-probe, and ablation protocols.

use crate::data::{build_interpolated_dataset, TargetDataset};
use crate::distill::artifact::DistilledArtifact;
use crate::distill::{
    distill_fullvideo, distill_sfvd, distill_sfvd_t, DistillConfig, LabelMode,
};
use crate::error::{Error, Result};
use crate::models::{build_model, Backbone, LossKind, ModelSpec};
use crate::rng::{derive_seed, seeded};
use crate::trajectories::{
    accuracy, items_from_split, sgd_train, TrainConfig, TrainItem, TrainTarget, TrajectoryBuffer,
};
use serde::Serialize;
use std::collections::HashMap;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Metric {
    Top1,
    Top5,
}

impl Metric {
    pub fn k(&self) -> usize {
        match self {
            Metric::Top1 => 1,
            Metric::Top5 => 5,
        }
    }
}

/// How evaluator models are trained on distilled items.
#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub archs: Vec<ModelSpec>,
    pub train_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub num_runs: usize,
    pub seed_base: u64,
    pub metric: Metric,
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::Config("protocol needs at least one arch".into()));
        }
        if self.num_runs < 1 {
            return Err(Error::Config("num_runs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArchReport {
    pub arch: String,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub provenance: String,
    pub artifact_digest: String,
    pub metric: Metric,
    /// "population" — documented std convention.
    pub std_convention: &'static str,
    pub per_arch: Vec<ArchReport>,
    pub runtime_sec: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

fn per_class_accuracy<B: Backbone>(
    model: &B,
    params: &[f64],
    items: &[TrainItem],
    num_classes: usize,
    topk: usize,
) -> Vec<f64> {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for item in items {
        let label = item.target.hard_label();
        totals[label] += 1;
        let logits = model.forward_logits(params, &item.video);
        let mut better = 0usize;
        for (i, &z) in logits.iter().enumerate() {
            if i != label && z >= logits[label] {
                better += 1;
            }
        }
        if better < topk {
            hits[label] += 1;
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}

/// Train a fresh seeded model on `items` and report test accuracy plus
/// per-class accuracy.
pub fn train_and_test(
    items: &[TrainItem],
    test_items: &[TrainItem],
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    run_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Eval("no items to train on".into()));
    }
    let spec = ModelSpec {
        init_seed: derive_seed(run_seed, 0x11),
        ..spec.clone()
    };
    let model = build_model(&spec)?;
    let mut params = model.init_params(spec.init_seed);
    let cfg = TrainConfig {
        lr: protocol.lr,
        momentum: protocol.momentum,
        batch_size: protocol.batch_size,
        epochs: protocol.train_epochs,
        seed: derive_seed(run_seed, 0x22),
    };
    sgd_train(&model, &mut params, items, LossKind::CrossEntropy, &cfg, |_, _| ()).map_err(
        |e| match e {
            Error::Train(m) => Error::Eval(m),
            other => other,
        },
    )?;
    let acc = accuracy(&model, &params, test_items, protocol.metric.k());
    let per_class = per_class_accuracy(
        &model,
        &params,
        test_items,
        spec.num_classes,
        protocol.metric.k(),
    );
    Ok((acc, per_class))
}

/// Materialize a distilled artifact into training items.
pub fn materialize_items(artifact: &DistilledArtifact) -> Result<Vec<TrainItem>> {
    Ok(artifact
        .materialize()?
        .into_iter()
        .map(|(video, label, soft)| TrainItem {
            video,
            target: match soft {
                Some(logits) => TrainTarget::Soft(logits),
                None => TrainTarget::Hard(label),
            },
        })
        .collect())
}

/// `num_runs` independent seeded evaluations per architecture; primary arch
/// first by convention of the caller's `archs` ordering.
pub fn run_protocol_items(
    items: &[TrainItem],
    test_items: &[TrainItem],
    protocol: &EvalProtocol,
    provenance: &str,
    artifact_digest: &str,
) -> Result<EvalReport> {
    protocol.validate()?;
    let start = Instant::now();
    let mut per_arch = Vec::new();
    let workers = crate::worker_count();
    for (ai, spec) in protocol.archs.iter().enumerate() {
        let run_of = |r: usize| -> Result<RunResult> {
            let seed = derive_seed(protocol.seed_base, (ai * 1000 + r) as u64);
            let (acc, per_class) = train_and_test(items, test_items, spec, protocol, seed)?;
            Ok(RunResult {
                run: r,
                seed,
                accuracy: acc,
                per_class,
            })
        };
        let runs: Vec<RunResult> = if workers > 1 && protocol.num_runs > 1 {
            let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..protocol.num_runs)
                    .map(|r| scope.spawn(move || run_of(r)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker")).collect()
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        } else {
            (0..protocol.num_runs).map(run_of).collect::<Result<Vec<_>>>()?
        };
        let values: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&values);
        per_arch.push(ArchReport {
            arch: spec.arch.to_string(),
            mean,
            std,
            runs,
        });
    }
    Ok(EvalReport {
        provenance: provenance.to_string(),
        artifact_digest: artifact_digest.to_string(),
        metric: protocol.metric,
        std_convention: "population",
        per_arch,
        runtime_sec: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate a distilled artifact against the real test split.
pub fn run_protocol(
    artifact: &DistilledArtifact,
    protocol: &EvalProtocol,
    target: &TargetDataset,
) -> Result<EvalReport> {
    let items = materialize_items(artifact)?;
    let test_items = items_from_split(&target.test);
    let digest = crate::manifest::sha256_hex(&crate::distill::artifact::encode(artifact)?);
    run_protocol_items(
        &items,
        &test_items,
        protocol,
        &format!("distilled:{}", artifact.mode()),
        &digest,
    )
}

/// `ipc` real train videos per class, uniformly without replacement.
pub fn random_coreset(
    target: &TargetDataset,
    ipc: usize,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(target.num_classes() * ipc);
    for class in 0..target.num_classes() {
        let members = target.class_train_indices(class);
        if members.len() < ipc {
            return Err(Error::Data(format!(
                "class {class} has {} train videos, need ipc = {ipc}",
                members.len()
            )));
        }
        let mut rng = seeded(derive_seed(seed, 0xc0e5_0000 ^ class as u64));
        for pick in rand::seq::index::sample(&mut rng, members.len(), ipc) {
            let lv = &target.train[members[pick]];
            items.push(TrainItem {
                video: lv.video.data.as_slice().expect("layout").to_vec(),
                target: TrainTarget::Hard(lv.label),
            });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub n: usize,
    pub pixel_fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
    /// True for the appended full-dataset reference row.
    pub is_reference: bool,
}

/// Frame-information probe: train on the interpolated dataset for each `n`
/// and test on the real split; a full-dataset reference row is appended.
pub fn frame_probe(
    target: &TargetDataset,
    n_values: &[usize],
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let f = target.dims.f;
    for &n in n_values {
        if n > f || n == 0 {
            return Err(Error::Argument(format!("probe n = {n} outside 1..={f}")));
        }
    }
    let test_items = items_from_split(&target.test);
    let spec = protocol
        .archs
        .first()
        .ok_or_else(|| Error::Config("probe needs at least one arch".into()))?;
    let eval_on = |train_items: &[TrainItem]| -> Result<Vec<f64>> {
        (0..protocol.num_runs)
            .map(|r| {
                let run_seed = derive_seed(protocol.seed_base, r as u64);
                train_and_test(train_items, &test_items, spec, protocol, run_seed)
                    .map(|(acc, _)| acc)
            })
            .collect()
    };
    let mut rows = Vec::new();
    for &n in n_values {
        let interp = build_interpolated_dataset(target, n, seed)?;
        let items = items_from_split(&interp.dataset.train);
        let runs = eval_on(&items)?;
        let (mean, std) = mean_std(&runs);
        rows.push(ProbeRow {
            n,
            pixel_fraction: n as f64 / f as f64,
            mean,
            std,
            runs,
            is_reference: false,
        });
    }
    // full-dataset reference (identical to the n = f probe by construction)
    let full_items = items_from_split(&target.train);
    let runs = eval_on(&full_items)?;
    let (mean, std) = mean_std(&runs);
    rows.push(ProbeRow {
        n: f,
        pixel_fraction: 1.0,
        mean,
        std,
        runs,
        is_reference: true,
    });
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationEntry {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    /// (a) component comparison: fullvideo baseline vs sfvd vs sfvd_t.
    pub components: Vec<AblationEntry>,
    /// (b) frames per item k in {1, 2, 3}.
    pub frames_per_item: Vec<AblationEntry>,
    /// (c) hard vs soft labels for sfvd and sfvd_t.
    pub soft_labels: Vec<AblationEntry>,
}

pub struct AblationInputs<'a> {
    pub target: &'a TargetDataset,
    pub buffer_interp: &'a TrajectoryBuffer,
    pub buffer_target: &'a TrajectoryBuffer,
    pub base_config: DistillConfig,
    pub protocol: EvalProtocol,
}

/// Cache key for a distillation sub-run; identical configurations are
/// distilled once and reused across the three ablation axes.
fn config_key(mode: &str, cfg: &DistillConfig) -> String {
    format!(
        "{mode}|ipc={}|k={}|lim={}|ly={}|llr={}|bs={}|N={}|M={}|ms={}|it={}|seed={}|lm={}|mom={}",
        cfg.ipc,
        cfg.frames_per_item,
        cfg.lr_img,
        cfg.lr_y,
        cfg.lr_lr,
        cfg.batch_syn,
        cfg.syn_steps,
        cfg.match_steps,
        cfg.max_start_epoch,
        cfg.iterations,
        cfg.seed,
        cfg.label_mode,
        cfg.outer_momentum
    )
}

/// Runs the three ablation axes of the framework and emits one comparative
/// report. Distillation sub-runs with byte-identical configurations are
/// shared through an in-memory cache.
fn distill_cached(
    cache: &mut HashMap<String, DistilledArtifact>,
    inputs: &AblationInputs<'_>,
    mode: &str,
    cfg: &DistillConfig,
) -> Result<DistilledArtifact> {
    let key = config_key(mode, cfg);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit.clone());
    }
    let artifact = match mode {
        "sfvd" => {
            let (set, _) = distill_sfvd(inputs.buffer_interp, inputs.target, cfg, |_, _, _| ())?;
            DistilledArtifact::Sfvd(set)
        }
        "fullvideo" => {
            let (set, _) = distill_fullvideo(inputs.buffer_target, inputs.target, cfg, |_, _, _| ())?;
            DistilledArtifact::FullVideo(set)
        }
        "sfvd_t" => {
            let base = distill_cached(cache, inputs, "sfvd", cfg)?;
            let set = match base {
                DistilledArtifact::Sfvd(s) => s,
                _ => unreachable!(),
            };
            let (fused, _) =
                distill_sfvd_t(&set, inputs.buffer_target, inputs.target, cfg, |_, _| ())?;
            DistilledArtifact::SfvdT(fused)
        }
        other => return Err(Error::Argument(format!("unknown mode {other}"))),
    };
    cache.insert(key, artifact.clone());
    Ok(artifact)
}

/// Runs the three ablation axes of the framework and emits one comparative
/// report. Distillation sub-runs with identical configurations are shared
/// through a cache keyed by the resolved configuration.
pub fn ablation_suite(inputs: &AblationInputs<'_>) -> Result<AblationReport> {
    let mut cache: HashMap<String, DistilledArtifact> = HashMap::new();
    let eval = |artifact: &DistilledArtifact, name: &str| -> Result<AblationEntry> {
        let report = run_protocol(artifact, &inputs.protocol, inputs.target)?;
        let primary = &report.per_arch[0];
        Ok(AblationEntry {
            name: name.to_string(),
            mean: primary.mean,
            std: primary.std,
            runs: primary.runs.iter().map(|r| r.accuracy).collect(),
        })
    };

    let base = &inputs.base_config;
    // (a) components
    let mut components = Vec::new();
    for mode in ["fullvideo", "sfvd", "sfvd_t"] {
        let artifact = distill_cached(&mut cache, inputs, mode, base)?;
        components.push(eval(&artifact, mode)?);
    }
    // (b) frames per item
    let mut frames_per_item = Vec::new();
    for k in [1usize, 2, 3] {
        let cfg = DistillConfig {
            frames_per_item: k,
            ..base.clone()
        };
        let artifact = distill_cached(&mut cache, inputs, "sfvd", &cfg)?;
        frames_per_item.push(eval(&artifact, &format!("k={k}"))?);
    }
    // (c) hard vs soft labels
    let mut soft_labels = Vec::new();
    for mode in ["sfvd", "sfvd_t"] {
        for lm in [LabelMode::Hard, LabelMode::Soft] {
            let cfg = DistillConfig {
                label_mode: lm,
                ..base.clone()
            };
            let artifact = distill_cached(&mut cache, inputs, mode, &cfg)?;
            soft_labels.push(eval(&artifact, &format!("{mode}/{lm}"))?);
        }
    }
    Ok(AblationReport {
        components,
        frames_per_item,
        soft_labels,
    })
}

/// CSV emission: one row per arch x run.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("arch,run,seed,accuracy\n");
    for arch in &report.per_arch {
        for run in &arch.runs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                arch.arch, run.run, run.seed, run.accuracy
            ));
        }
    }
    out
}
