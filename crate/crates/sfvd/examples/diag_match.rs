//! Matching-regime explorer: caches expert buffers, then sweeps the inner
//! loop settings and reports achievable matching losses.
use sfvd::data::{generate_toy_dataset, ToySpec, build_interpolated_dataset};
use sfvd::distill::{init_synthetic, InitMode, LabelMode, DistillConfig, distill_sfvd};
use sfvd::distill::artifact::DistilledArtifact;
use sfvd::evaluation::{run_protocol_items, materialize_items, EvalProtocol, Metric};
use sfvd::models::{build_model, Arch, Backbone, ModelSpec};
use sfvd::trajectories::{train_expert, items_from_split, load_buffer, save_buffer, sample_match_target, SourceTag, TrainConfig, TrajectoryBuffer};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let exp_lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let exp_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let ds = generate_toy_dataset(&ToySpec::default()).unwrap();
    let spec_of = |seed| ModelSpec { arch: Arch::Conv3d, width: 8, depth: 2, num_classes: 10, dims: ds.dims, init_seed: seed };
    let exp_m: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let exp_b: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let tc = |seed| TrainConfig { lr: exp_lr, momentum: exp_m, batch_size: exp_b, epochs: exp_epochs, seed };
    let tag = format!("lr{exp_lr}_ep{exp_epochs}_m{exp_m}_b{exp_b}");
    let dir_i = format!("/tmp/buf_i_{tag}");
    let dir_t = format!("/tmp/buf_t_{tag}");
    let buf_i = if Path::new(&dir_i).join("traj_0.manifest").exists() {
        load_buffer(Path::new(&dir_i)).unwrap()
    } else {
        let interp = build_interpolated_dataset(&ds, 1, 99).unwrap();
        let handles: Vec<_> = (0..5).map(|e| {
            let d = interp.dataset.clone(); let spec = spec_of(100+e as u64); let c = tc(e as u64);
            std::thread::spawn(move || train_expert(&d, &spec, &c, SourceTag::Interpolated(1)).unwrap())
        }).collect();
        let buf = TrajectoryBuffer { trajectories: handles.into_iter().map(|h| h.join().unwrap()).collect() };
        save_buffer(&buf, Path::new(&dir_i)).unwrap(); buf
    };
    let buf_t = if Path::new(&dir_t).join("traj_0.manifest").exists() {
        load_buffer(Path::new(&dir_t)).unwrap()
    } else {
        let handles: Vec<_> = (0..5).map(|e| {
            let d = ds.clone(); let spec = spec_of(200+e as u64); let c = tc(10+e as u64);
            std::thread::spawn(move || train_expert(&d, &spec, &c, SourceTag::Target).unwrap())
        }).collect();
        let buf = TrajectoryBuffer { trajectories: handles.into_iter().map(|h| h.join().unwrap()).collect() };
        save_buffer(&buf, Path::new(&dir_t)).unwrap(); buf
    };
    println!("interp accs {:?}", buf_i.trajectories.iter().map(|t| (t.final_test_acc*100.0).round()).collect::<Vec<_>>());
    println!("target accs {:?}", buf_t.trajectories.iter().map(|t| (t.final_test_acc*100.0).round()).collect::<Vec<_>>());
    let tr = &buf_i.trajectories[0];
    for t in [0usize, 2, 5, 10, 20, 40] {
        if t + 2 < tr.snapshots.len() {
            let d: f64 = tr.snapshots[t].iter().zip(&tr.snapshots[t+2]).map(|(a,b)| (a-b)*(a-b)).sum::<f64>().sqrt();
            println!("  segment t={t}: D = {d:.4}");
        }
    }
    // achievable-at-init losses for (alpha, N) grid
    let set = init_synthetic(&ds, 1, 1, 0, LabelMode::Hard, InitMode::RealSample, 0.05).unwrap();
    let model = build_model(&spec_of(0)).unwrap();
    use sfvd::distill::engine_probe;
    for n in [10usize, 20, 30] {
        for alpha in [0.005, 0.01, 0.02] {
            let mut rng = sfvd::rng::seeded(7);
            let mut losses = Vec::new();
            for _ in 0..12 {
                let m = sample_match_target(&buf_i, 20, 2, &mut rng).unwrap();
                let l = engine_probe(&model, &set, alpha, n, m.start, m.end).unwrap();
                losses.push(l);
            }
            let mean: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
            println!("N={n} alpha={alpha}: init matching loss {mean:.4}");
        }
    }
    // short outer runs for promising combos
    let eval_spec = ModelSpec { arch: Arch::Conv3d, width: 12, depth: 2, num_classes: 10, dims: ds.dims, init_seed: 0 };
    let proto = EvalProtocol { archs: vec![eval_spec], train_epochs: 100, lr: 0.1, momentum: 0.9, batch_size: 16, num_runs: 3, seed_base: 5, metric: Metric::Top1 };
    let test_items = items_from_split(&ds.test);
    for (alpha, n, lr_img) in [(0.01, 20, 100.0), (0.01, 20, 300.0), (0.01, 20, 1000.0)] {
        let cfg = DistillConfig {
            ipc: 1, frames_per_item: 1, lr_img, lr_y: 1.0, lr_lr: 1e-5,
            batch_syn: usize::MAX, syn_steps: n, match_steps: 2, max_start_epoch: 20,
            iterations: 300, seed: 0, label_mode: LabelMode::Hard, init_mode: InitMode::RealSample,
            inner_lr_init: alpha, outer_momentum: 0.5, soft_temperature: 1.0,
        };
        let (set, curve) = distill_sfvd(&buf_i, &ds, &cfg, |_,_,_| ()).unwrap();
        let items = materialize_items(&DistilledArtifact::Sfvd(set.clone())).unwrap();
        let rep = run_protocol_items(&items, &test_items, &proto, "sfvd", "x").unwrap();
        println!("alpha={alpha} N={n} lr_img={lr_img}: loss {:.3}->{:.3} acc {:.3} inner_lr {:.4} ({:.0}ms/it)",
            curve.mean_loss_of_first(20), curve.mean_loss_of_last(20), rep.per_arch[0].mean, set.inner_lr, curve.mean_iter_ms());
    }
}
