//! Command-line surface: dataset generation/ingestion, expert training,
//! distillation, evaluation, ablations, bound checking, and frame-grid
//! export. Every command resolves a flat key=value configuration (file +
//! `--set` overrides), runs, and writes a run manifest with digests of all
//! inputs and outputs.

use crate::config::Config;
use crate::data::container::{read_container, write_container};
use crate::data::ingest::{ingest_frame_dirs, IngestLayout};
use crate::data::{generate_toy_dataset, oversample_balance, TargetDataset, ToySpec, Vdim};
use crate::distill::artifact::{read_artifact, write_artifact, DistilledArtifact};
use crate::distill::{
    distill_fullvideo, distill_sfvd, distill_sfvd_t, DistillConfig, InitMode, LabelMode,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_suite, frame_probe, materialize_items, random_coreset, report_csv,
    run_protocol_items, AblationInputs, EvalProtocol, Metric,
};
use crate::manifest::{file_digest, sha256_hex, ManifestBuilder};
use crate::models::{Arch, Backbone, ModelSpec};
use crate::rng::{derive_seed, seeded};
use crate::trajectories::{
    items_from_split, load_buffer, save_buffer, train_expert, SourceTag, TrainConfig,
    TrajectoryBuffer,
};
use crate::{bound, ppm, svg};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sfvd",
    version,
    about = "Desk-scale laboratory for single-frame video set distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Flat key=value configuration file (# comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set lr_img=50 (repeatable; wins over file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed for all stochastic behavior of the command.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set needs key=value, got {s:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.merge(&overrides);
        if let Some(seed) = self.seed {
            cfg.set("seed", seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy video dataset and write a container.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest raw PPM/PGM frame directories into a container.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Root directory of class/video frame folders.
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train seeded expert trajectories and persist the buffer.
    TrainExperts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// target | interp:<n>
        #[arg(long, default_value = "target")]
        source: String,
        #[arg(long)]
        out: PathBuf,
        /// Skip trajectory indices that already exist in the buffer dir.
        #[arg(long)]
        resume: bool,
    },
    /// Distill a synthetic set by trajectory matching.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// sfvd | sfvd_t | fullvideo
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        /// Trajectory buffer directory (interpolated for sfvd, target else).
        #[arg(long)]
        buffer: PathBuf,
        /// Frozen SFVD artifact (required for --mode sfvd_t).
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a distilled artifact or a coreset baseline.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Coreset baseline kind (only `random`).
        #[arg(long)]
        coreset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Add cnn_gru and cnn_lstm transfer rows.
        #[arg(long)]
        cross_arch: bool,
    },
    /// Frame-information probe: train on interpolated data for each n.
    ProbeFrames {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated frame counts, e.g. 1,2,4.
        #[arg(long, default_value = "1,2,4")]
        n_list: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component / frame-count / soft-label ablation suite.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffer_interp: PathBuf,
        #[arg(long)]
        buffer_target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirically verify the interpolation risk-difference bound.
    CheckBound {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Number of random-init probe parameter sets.
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Optional buffer whose expert snapshots join the probe set.
        #[arg(long)]
        buffer: Option<PathBuf>,
        /// Frames per sampled set.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export selected artifact items as a tiled PPM frame grid.
    ExportGrid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
        /// Comma-separated item indices (default: all).
        #[arg(long)]
        items: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => cmd_gen_data(&cfg, &out),
        Command::Ingest { cfg, root, out } => cmd_ingest(&cfg, &root, &out),
        Command::TrainExperts {
            cfg,
            data,
            source,
            out,
            resume,
        } => cmd_train_experts(&cfg, &data, &source, &out, resume),
        Command::Distill {
            cfg,
            mode,
            data,
            buffer,
            frames,
            out,
        } => cmd_distill(&cfg, &mode, &data, &buffer, frames.as_deref(), &out),
        Command::Eval {
            cfg,
            data,
            artifact,
            coreset,
            out,
            cross_arch,
        } => cmd_eval(&cfg, &data, artifact.as_deref(), coreset.as_deref(), &out, cross_arch),
        Command::ProbeFrames {
            cfg,
            data,
            n_list,
            out,
        } => cmd_probe_frames(&cfg, &data, &n_list, &out),
        Command::Ablate {
            cfg,
            data,
            buffer_interp,
            buffer_target,
            out,
        } => cmd_ablate(&cfg, &data, &buffer_interp, &buffer_target, &out),
        Command::CheckBound {
            cfg,
            data,
            probes,
            buffer,
            n,
            out,
        } => cmd_check_bound(&cfg, &data, probes, buffer.as_deref(), n, &out),
        Command::ExportGrid {
            cfg,
            artifact,
            items,
            out,
        } => cmd_export_grid(&cfg, &artifact, items.as_deref(), &out),
    }
}

fn echo_config(builder: &mut ManifestBuilder, cfg: &Config) {
    for (k, v) in cfg.entries() {
        builder.config_kv(k, v);
    }
}

// ---------------------------------------------------------------------------
// gen-data / ingest
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let spec = ToySpec {
        classes: cfg.parse_req("classes")?,
        per_class_train: cfg.parse_or("per_class_train", 20)?,
        per_class_test: cfg.parse_or("per_class_test", 10)?,
        f: cfg.parse_or("f", 8)?,
        c: cfg.parse_or("c", 1)?,
        h: cfg.parse_or("h", 16)?,
        w: cfg.parse_or("w", 16)?,
        seed,
        imbalance_ratios: match cfg.get("imbalance_ratios") {
            None => None,
            Some(raw) => Some(
                raw.split(',')
                    .map(|t| {
                        t.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad imbalance ratio {t:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
        },
    };
    let mut ds = generate_toy_dataset(&spec)?;
    if cfg.parse_or("oversample", false)? {
        let mut rng = seeded(derive_seed(seed, 0x0b5a));
        ds = oversample_balance(&ds, &mut rng)?;
    }
    fs::create_dir_all(out)?;
    let path = out.join("dataset.sfvdds");
    write_container(&ds, &path)?;
    let mut mb = ManifestBuilder::new("gen-data", seed);
    echo_config(&mut mb, &cfg);
    mb.output(&path);
    mb.extra(serde_json::json!({
        "classes": ds.class_names,
        "train_count": ds.train.len(),
        "test_count": ds.test.len(),
        "frame_ambiguous_pairs": ds.frame_ambiguous_pairs,
    }));
    mb.write(out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ingest(args: &ConfigArgs, root: &Path, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let layout = IngestLayout {
        f: cfg.parse_or("f", 8)?,
        h: cfg.parse_or("h", 16)?,
        w: cfg.parse_or("w", 16)?,
    };
    let ds = ingest_frame_dirs(root, &layout)?;
    fs::create_dir_all(out)?;
    let path = out.join("dataset.sfvdds");
    write_container(&ds, &path)?;
    let mut mb = ManifestBuilder::new("ingest", 0);
    echo_config(&mut mb, &cfg);
    mb.config_kv("root", root.display());
    mb.output(&path);
    mb.write(out)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-experts
// ---------------------------------------------------------------------------

fn model_spec_from(cfg: &Config, ds: &TargetDataset, init_seed: u64) -> Result<ModelSpec> {
    Ok(ModelSpec {
        arch: Arch::parse(cfg.get("arch").unwrap_or("conv3d"))?,
        width: cfg.parse_or("width", 8)?,
        depth: cfg.parse_or("depth", 2)?,
        num_classes: ds.num_classes(),
        dims: ds.dims,
        init_seed,
    })
}

fn cmd_train_experts(
    args: &ConfigArgs,
    data: &Path,
    source: &str,
    out: &Path,
    resume: bool,
) -> Result<()> {
    let cfg = args.resolve()?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let ds = read_container(data)?;
    let (tag, train_ds) = if source == "target" {
        (SourceTag::Target, ds.clone())
    } else if let Some(n) = source.strip_prefix("interp:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad --source {source:?}")))?;
        let interp = crate::data::build_interpolated_dataset(&ds, n, derive_seed(seed, 0x1e79))?;
        (SourceTag::Interpolated(n), interp.dataset)
    } else {
        return Err(Error::Config(format!(
            "--source must be `target` or `interp:<n>`, got {source:?}"
        )));
    };
    let n_experts: usize = cfg.parse_or("experts", 5)?;
    let train_cfg_of = |e: usize| -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: cfg.parse_or("expert_lr", 0.05)?,
            momentum: cfg.parse_or("expert_momentum", 0.9)?,
            batch_size: cfg.parse_or("expert_batch", 32)?,
            epochs: cfg.parse_or("expert_epochs", 30)?,
            seed: derive_seed(seed, 0xe0 ^ e as u64),
        })
    };
    fs::create_dir_all(out)?;
    let existing = |k: usize| {
        out.join(format!("traj_{k}.manifest")).exists() && out.join(format!("traj_{k}.bin")).exists()
    };
    let todo: Vec<usize> = (0..n_experts).filter(|&k| !(resume && existing(k))).collect();
    let workers = crate::worker_count().min(todo.len().max(1));
    let run_one = |k: usize| -> Result<crate::trajectories::Trajectory> {
        let spec = model_spec_from(&cfg, &ds, derive_seed(seed, 0x5eed ^ k as u64))?;
        train_expert(&train_ds, &spec, &train_cfg_of(k)?, tag)
    };
    let mut trained: Vec<(usize, crate::trajectories::Trajectory)> = Vec::new();
    if workers > 1 {
        let results: Vec<(usize, Result<crate::trajectories::Trajectory>)> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for chunk in todo.chunks(todo.len().div_ceil(workers)) {
                    let chunk = chunk.to_vec();
                    let run_one = &run_one;
                    handles.push(scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|k| (k, run_one(k)))
                            .collect::<Vec<_>>()
                    }));
                }
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("worker"))
                    .collect()
            });
        for (k, res) in results {
            trained.push((k, res?));
        }
    } else {
        for k in todo {
            trained.push((k, run_one(k)?));
        }
    }
    trained.sort_by_key(|(k, _)| *k);
    // assemble the full buffer: reuse已 existing trajectories on resume
    let mut full = TrajectoryBuffer::default();
    let dir_buffer = if resume && (0..n_experts).any(existing) {
        load_buffer(out).ok()
    } else {
        None
    };
    for k in 0..n_experts {
        if let Some(pos) = trained.iter().position(|(i, _)| *i == k) {
            full.trajectories.push(trained[pos].1.clone());
        } else if let Some(buf) = &dir_buffer {
            full.trajectories.push(buf.trajectories[k].clone());
        }
    }
    save_buffer(&full, out)?;
    let mut mb = ManifestBuilder::new("train-experts", seed);
    echo_config(&mut mb, &cfg);
    mb.config_kv("source", source);
    mb.config_kv("experts", n_experts);
    for k in 0..full.trajectories.len() {
        mb.output(&out.join(format!("traj_{k}.manifest")));
        mb.output(&out.join(format!("traj_{k}.bin")));
    }
    mb.input(data);
    mb.extra(serde_json::json!({
        "final_test_acc": full.trajectories.iter().map(|t| t.final_test_acc).collect::<Vec<_>>(),
    }));
    mb.write(out)?;
    println!("wrote {} trajectories to {}", full.trajectories.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

fn distill_config_from(cfg: &Config) -> Result<DistillConfig> {
    let base = DistillConfig::default();
    Ok(DistillConfig {
        ipc: cfg.parse_or("ipc", base.ipc)?,
        frames_per_item: cfg.parse_or("frames_per_item", base.frames_per_item)?,
        lr_img: cfg.parse_or("lr_img", base.lr_img)?,
        lr_y: cfg.parse_or("lr_y", base.lr_y)?,
        lr_lr: cfg.parse_or("lr_lr", base.lr_lr)?,
        batch_syn: cfg.parse_or("batch_syn", base.batch_syn)?,
        syn_steps: cfg.parse_or("syn_steps", base.syn_steps)?,
        match_steps: cfg.parse_or("match_steps", base.match_steps)?,
        max_start_epoch: cfg.parse_or("max_start_epoch", base.max_start_epoch)?,
        iterations: cfg.parse_or("iterations", base.iterations)?,
        seed: cfg.parse_or("seed", base.seed)?,
        label_mode: match cfg.get("label_mode").unwrap_or("hard") {
            "hard" => LabelMode::Hard,
            "soft" => LabelMode::Soft,
            other => return Err(Error::Config(format!("bad label_mode {other:?}"))),
        },
        init_mode: match cfg.get("init_mode").unwrap_or("real") {
            "real" => InitMode::RealSample,
            "noise" => InitMode::Noise,
            other => return Err(Error::Config(format!("bad init_mode {other:?}"))),
        },
        inner_lr_init: cfg.parse_or("inner_lr_init", base.inner_lr_init)?,
        outer_momentum: cfg.parse_or("outer_momentum", base.outer_momentum)?,
        soft_temperature: cfg.parse_or("soft_temperature", base.soft_temperature)?,
    })
}

fn eval_protocol_from(cfg: &Config, ds: &TargetDataset, cross_arch: bool) -> Result<EvalProtocol> {
    let width = cfg.parse_or("eval_width", 8)?;
    let depth = cfg.parse_or("eval_depth", 2)?;
    let mut archs = vec![ModelSpec {
        arch: Arch::Conv3d,
        width,
        depth,
        num_classes: ds.num_classes(),
        dims: ds.dims,
        init_seed: 0,
    }];
    if cross_arch {
        for arch in [Arch::CnnGru, Arch::CnnLstm] {
            archs.push(ModelSpec {
                arch,
                width,
                depth,
                num_classes: ds.num_classes(),
                dims: ds.dims,
                init_seed: 0,
            });
        }
    }
    let metric = match cfg.get("metric").unwrap_or("top1") {
        "top1" => Metric::Top1,
        "top5" => {
            if ds.num_classes() < 10 {
                return Err(Error::Config(
                    "top5 metric needs at least 10 classes".into(),
                ));
            }
            Metric::Top5
        }
        other => return Err(Error::Config(format!("bad metric {other:?}"))),
    };
    Ok(EvalProtocol {
        archs,
        train_epochs: cfg.parse_or("eval_epochs", 100)?,
        lr: cfg.parse_or("eval_lr", 0.1)?,
        momentum: cfg.parse_or("eval_momentum", 0.9)?,
        batch_size: cfg.parse_or("eval_batch", 16)?,
        num_runs: cfg.parse_or("num_runs", 3)?,
        seed_base: cfg.parse_or("seed", 0)?,
        metric,
    })
}

fn write_curve_outputs(
    out: &Path,
    curve: &crate::distill::LossCurve,
    evals: &[(usize, f64)],
    title: &str,
) -> Result<(PathBuf, PathBuf)> {
    let csv_path = out.join("loss_curve.csv");
    let mut csv = String::from("iteration,loss,wall_ms,eval_acc\n");
    for p in &curve.points {
        let acc = evals
            .iter()
            .find(|(it, _)| *it == p.iteration)
            .map(|(_, a)| a.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}\n", p.iteration, p.loss, p.wall_ms, acc));
    }
    fs::write(&csv_path, csv)?;
    let mut series = vec![svg::Series {
        label: "matching loss".into(),
        points: curve
            .points
            .iter()
            .map(|p| (p.iteration as f64, p.loss))
            .collect(),
    }];
    if !evals.is_empty() {
        series.push(svg::Series {
            label: "eval accuracy".into(),
            points: evals.iter().map(|&(it, acc)| (it as f64, acc)).collect(),
        });
    }
    let chart = svg::Chart {
        title: title.into(),
        x_label: "outer iteration".into(),
        y_label: "loss / accuracy".into(),
        series,
    };
    let svg_path = out.join("loss_curve.svg");
    fs::write(&svg_path, chart.render())?;
    Ok((csv_path, svg_path))
}

fn cmd_distill(
    args: &ConfigArgs,
    mode: &str,
    data: &Path,
    buffer_dir: &Path,
    frames: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = args.resolve()?;
    let dcfg = distill_config_from(&cfg)?;
    let ds = read_container(data)?;
    let buffer = load_buffer(buffer_dir)?;
    fs::create_dir_all(out)?;
    let eval_every: usize = cfg.parse_or("eval_every", 25)?;
    let protocol = eval_protocol_from(&cfg, &ds, false)?;
    let test_items = items_from_split(&ds.test);
    let mut evals: Vec<(usize, f64)> = Vec::new();
    let eval_hook = |it: usize, artifact: &DistilledArtifact, evals: &mut Vec<(usize, f64)>| {
        if eval_every == 0 || (it + 1) % eval_every != 0 {
            return;
        }
        if let Ok(items) = materialize_items(artifact) {
            if let Ok((acc, _)) = crate::evaluation::train_and_test(
                &items,
                &test_items,
                &protocol.archs[0],
                &protocol,
                derive_seed(dcfg.seed, 0xe7a1 ^ it as u64),
            ) {
                evals.push((it, acc));
            }
        }
    };
    let (artifact, curve) = match mode {
        "sfvd" => {
            let (set, curve) = distill_sfvd(&buffer, &ds, &dcfg, |it, _, set| {
                eval_hook(it, &DistilledArtifact::Sfvd(set.clone()), &mut evals)
            })?;
            (DistilledArtifact::Sfvd(set), curve)
        }
        "fullvideo" => {
            let (set, curve) = distill_fullvideo(&buffer, &ds, &dcfg, |it, _, set| {
                eval_hook(it, &DistilledArtifact::FullVideo(set.clone()), &mut evals)
            })?;
            (DistilledArtifact::FullVideo(set), curve)
        }
        "sfvd_t" => {
            let frames_path = frames.ok_or_else(|| {
                Error::Config(
                    "--mode sfvd_t requires --frames pointing at the frozen SFVD artifact".into(),
                )
            })?;
            let base = match read_artifact(frames_path)? {
                DistilledArtifact::Sfvd(set) => set,
                other => {
                    return Err(Error::Config(format!(
                        "--frames must be an sfvd artifact, found {}",
                        other.mode()
                    )))
                }
            };
            let (fused, curve) = distill_sfvd_t(&base, &buffer, &ds, &dcfg, |_, _| ())?;
            (DistilledArtifact::SfvdT(fused), curve)
        }
        other => {
            return Err(Error::Config(format!(
                "--mode must be sfvd | sfvd_t | fullvideo, got {other:?}"
            )))
        }
    };
    let artifact_path = out.join("artifact.sfvdsy");
    write_artifact(&artifact, &artifact_path)?;
    let (csv_path, svg_path) = write_curve_outputs(
        out,
        &curve,
        &evals,
        &format!("{mode} distillation on {} classes", ds.num_classes()),
    )?;
    let mut mb = ManifestBuilder::new("distill", dcfg.seed);
    echo_config(&mut mb, &cfg);
    mb.config_kv("mode", mode);
    mb.input(data);
    mb.output(&artifact_path);
    mb.output(&csv_path);
    mb.output(&svg_path);
    mb.extra(serde_json::json!({
        "mean_iteration_ms": curve.mean_iter_ms(),
        "iterations": curve.points.len(),
        "learnable_pixels": artifact.base().learnable_pixels(),
        "inner_lr_final": match &artifact {
            DistilledArtifact::SfvdT(f) => f.inner_lr,
            a => a.base().inner_lr,
        },
        "final_loss": curve.points.last().map(|p| p.loss),
    }));
    mb.write(out)?;
    println!(
        "wrote {} (mean {:.1} ms/iteration)",
        artifact_path.display(),
        curve.mean_iter_ms()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(
    args: &ConfigArgs,
    data: &Path,
    artifact: Option<&Path>,
    coreset: Option<&str>,
    out: &Path,
    cross_arch: bool,
) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = read_container(data)?;
    let protocol = eval_protocol_from(&cfg, &ds, cross_arch)?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let test_items = items_from_split(&ds.test);
    let (items, provenance, digest) = match (artifact, coreset) {
        (Some(path), None) => {
            let art = read_artifact(path)?;
            let digest = file_digest(path)?;
            (
                materialize_items(&art)?,
                format!("distilled:{}", art.mode()),
                digest,
            )
        }
        (None, Some("random")) => {
            let ipc: usize = cfg.parse_or("ipc", 1)?;
            let items = random_coreset(&ds, ipc, derive_seed(seed, 0xc03e))?;
            let digest = sha256_hex(format!("random:ipc={ipc}:seed={seed}").as_bytes());
            (items, format!("coreset:random:ipc={ipc}"), digest)
        }
        (None, Some(other)) => {
            return Err(Error::Config(format!(
                "unknown coreset kind {other:?} (only `random`)"
            )))
        }
        _ => {
            return Err(Error::Config(
                "eval needs exactly one of --artifact or --coreset".into(),
            ))
        }
    };
    let report = run_protocol_items(&items, &test_items, &protocol, &provenance, &digest)?;
    fs::create_dir_all(out)?;
    let short = &digest[..8.min(digest.len())];
    let csv_path = out.join(format!("eval_{short}.csv"));
    let json_path = out.join(format!("eval_{short}.json"));
    fs::write(&csv_path, report_csv(&report))?;
    fs::write(&json_path, serde_json::to_vec_pretty(&report)?)?;
    let mut mb = ManifestBuilder::new("eval", seed);
    echo_config(&mut mb, &cfg);
    mb.config_kv("provenance", &provenance);
    mb.input(data);
    if let Some(p) = artifact {
        mb.input(p);
    }
    mb.output(&csv_path);
    mb.output(&json_path);
    mb.write(out)?;
    for arch in &report.per_arch {
        println!(
            "{}: {:.4} +/- {:.4} ({} runs)",
            arch.arch,
            arch.mean,
            arch.std,
            arch.runs.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// probe-frames
// ---------------------------------------------------------------------------

fn cmd_probe_frames(args: &ConfigArgs, data: &Path, n_list: &str, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = read_container(data)?;
    let protocol = eval_protocol_from(&cfg, &ds, false)?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let ns: Vec<usize> = n_list
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad n value {t:?}")))
        })
        .collect::<Result<_>>()?;
    let rows = frame_probe(&ds, &ns, &protocol, derive_seed(seed, 0x9a0b))?;
    fs::create_dir_all(out)?;
    let csv_path = out.join("probe.csv");
    let mut csv = String::from("n,pixel_fraction,mean,std,is_reference\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n, r.pixel_fraction, r.mean, r.std, r.is_reference
        ));
    }
    fs::write(&csv_path, csv)?;
    let chart_n = svg::Chart {
        title: "accuracy vs sampled frames".into(),
        x_label: "n (sampled frames)".into(),
        y_label: "top-1 accuracy".into(),
        series: vec![svg::Series {
            label: "interpolated-train accuracy".into(),
            points: rows
                .iter()
                .filter(|r| !r.is_reference)
                .map(|r| (r.n as f64, r.mean))
                .collect(),
        }],
    };
    let chart_frac = svg::Chart {
        title: "accuracy vs stored pixel fraction".into(),
        x_label: "pixel fraction".into(),
        y_label: "top-1 accuracy".into(),
        series: vec![svg::Series {
            label: "interpolated-train accuracy".into(),
            points: rows
                .iter()
                .filter(|r| !r.is_reference)
                .map(|r| (r.pixel_fraction, r.mean))
                .collect(),
        }],
    };
    let svg_n = out.join("probe_n.svg");
    let svg_frac = out.join("probe_fraction.svg");
    fs::write(&svg_n, chart_n.render())?;
    fs::write(&svg_frac, chart_frac.render())?;
    let json_path = out.join("probe.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&rows)?)?;
    let mut mb = ManifestBuilder::new("probe-frames", seed);
    echo_config(&mut mb, &cfg);
    mb.input(data);
    for p in [&csv_path, &svg_n, &svg_frac, &json_path] {
        mb.output(p);
    }
    mb.write(out)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(
    args: &ConfigArgs,
    data: &Path,
    buffer_interp: &Path,
    buffer_target: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = read_container(data)?;
    let base_config = distill_config_from(&cfg)?;
    let protocol = eval_protocol_from(&cfg, &ds, false)?;
    let bi = load_buffer(buffer_interp)?;
    let bt = load_buffer(buffer_target)?;
    let report = ablation_suite(&AblationInputs {
        target: &ds,
        buffer_interp: &bi,
        buffer_target: &bt,
        base_config,
        protocol,
    })?;
    fs::create_dir_all(out)?;
    let json_path = out.join("ablation.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&report)?)?;
    let csv_path = out.join("ablation.csv");
    let mut csv = String::from("axis,name,mean,std\n");
    for (axis, entries) in [
        ("components", &report.components),
        ("frames_per_item", &report.frames_per_item),
        ("soft_labels", &report.soft_labels),
    ] {
        for e in entries {
            csv.push_str(&format!("{axis},{},{},{}\n", e.name, e.mean, e.std));
        }
    }
    fs::write(&csv_path, csv)?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let mut mb = ManifestBuilder::new("ablate", seed);
    echo_config(&mut mb, &cfg);
    mb.input(data);
    mb.output(&json_path);
    mb.output(&csv_path);
    mb.write(out)?;
    println!("wrote {}", json_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// check-bound
// ---------------------------------------------------------------------------

fn cmd_check_bound(
    args: &ConfigArgs,
    data: &Path,
    probes: usize,
    buffer: Option<&Path>,
    n: usize,
    out: &Path,
) -> Result<()> {
    let cfg = args.resolve()?;
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let ds = read_container(data)?;
    let spec = model_spec_from(&cfg, &ds, 0)?;
    let model = crate::models::build_model(&spec)?;
    let mut probe_params: Vec<Vec<f64>> = (0..probes)
        .map(|i| model.init_params(derive_seed(seed, 0xb0 ^ i as u64)))
        .collect();
    if let Some(dir) = buffer {
        let buf = load_buffer(dir)?;
        for traj in &buf.trajectories {
            if traj.snapshots[0].len() == model.param_count() {
                probe_params.push(traj.snapshots.last().unwrap().clone());
            } else {
                return Err(Error::Format(
                    "buffer snapshots do not match the bound-check model layout".into(),
                ));
            }
        }
    }
    let report = bound::check_bound(
        &model,
        &ds,
        n,
        crate::models::LossKind::CrossEntropy,
        &probe_params,
        derive_seed(seed, 0xb0d),
    )?;
    fs::create_dir_all(out)?;
    let json_path = out.join("bound.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&report)?)?;
    let mut mb = ManifestBuilder::new("check-bound", seed);
    echo_config(&mut mb, &cfg);
    mb.config_kv("n", n);
    mb.config_kv("probes", probe_params.len());
    mb.input(data);
    mb.output(&json_path);
    mb.write(out)?;
    println!(
        "bound {} (lhs {:.6} <= rhs {:.6})",
        if report.holds { "holds" } else { "VIOLATED" },
        report.lhs,
        report.rhs
    );
    if !report.holds {
        return Err(Error::Eval("bound violated; see bound.json".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-grid
// ---------------------------------------------------------------------------

/// Tile materialized items into one RGB image: frames left-to-right, items
/// top-to-bottom, 2-pixel separators, values clamped to [0, 1].
pub fn render_grid(videos: &[Vec<f64>], dims: Vdim) -> ppm::Image {
    let sep = 2usize;
    let cols = dims.f;
    let rows = videos.len();
    let width = cols * dims.w + (cols - 1) * sep;
    let height = rows * dims.h + (rows - 1) * sep;
    let mut data = vec![0u8; width * height * 3];
    for (row, video) in videos.iter().enumerate() {
        for t in 0..dims.f {
            let ox = t * (dims.w + sep);
            let oy = row * (dims.h + sep);
            for y in 0..dims.h {
                for x in 0..dims.w {
                    for ch in 0..3 {
                        let src_ch = if dims.c == 3 { ch } else { 0 };
                        let v = video[((t * dims.c + src_ch) * dims.h + y) * dims.w + x];
                        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        data[((oy + y) * width + (ox + x)) * 3 + ch] = byte;
                    }
                }
            }
        }
    }
    ppm::Image::new(3, height, width, data)
}

fn cmd_export_grid(
    args: &ConfigArgs,
    artifact_path: &Path,
    items: Option<&str>,
    out: &Path,
) -> Result<()> {
    let cfg = args.resolve()?;
    let artifact = read_artifact(artifact_path)?;
    let all = artifact.materialize()?;
    let selected: Vec<usize> = match items {
        None => (0..all.len()).collect(),
        Some(raw) => raw
            .split(',')
            .map(|t| {
                let idx: usize = t
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad item index {t:?}")))?;
                if idx >= all.len() {
                    return Err(Error::Argument(format!(
                        "item index {idx} out of range (artifact has {} items)",
                        all.len()
                    )));
                }
                Ok(idx)
            })
            .collect::<Result<_>>()?,
    };
    let videos: Vec<Vec<f64>> = selected.iter().map(|&i| all[i].0.clone()).collect();
    let image = render_grid(&videos, artifact.base().dims);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, ppm::write(&image)?)?;
    let out_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut mb = ManifestBuilder::new("export-grid", 0);
    echo_config(&mut mb, &cfg);
    mb.input(artifact_path);
    mb.output(out);
    mb.write(&out_dir)?;
    println!("wrote {}", out.display());
    Ok(())
}
