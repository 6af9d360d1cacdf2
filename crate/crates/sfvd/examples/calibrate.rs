//! Scratch experiment harness used while tuning toy-scale defaults.
use sfvd::data::{generate_toy_dataset, ToySpec, build_interpolated_dataset};
use sfvd::distill::{distill_sfvd, distill_fullvideo, distill_sfvd_t, DistillConfig, LabelMode, InitMode};
use sfvd::distill::artifact::DistilledArtifact;
use sfvd::evaluation::{run_protocol_items, materialize_items, random_coreset, EvalProtocol, Metric, mean_std};
use sfvd::models::{Arch, ModelSpec};
use sfvd::trajectories::{train_expert, items_from_split, SourceTag, TrainConfig, TrajectoryBuffer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr_img: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100.0);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let inner_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let syn_steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lr_lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let skip_full: bool = args.get(7).map(|s| s == "nofull").unwrap_or(false);
    let ds = generate_toy_dataset(&ToySpec::default()).unwrap();
    println!("dataset: {} train, {} test", ds.train.len(), ds.test.len());
    let spec_of = |seed| ModelSpec { arch: Arch::Conv3d, width: 8, depth: 2, num_classes: 10, dims: ds.dims, init_seed: seed };
    let tc_of = |seed| TrainConfig { lr: 0.01, momentum: 0.9, batch_size: 16, epochs: 100, seed };
    let t0 = Instant::now();
    let interp = build_interpolated_dataset(&ds, 1, 99).unwrap();
    let buf_i = TrajectoryBuffer { trajectories: (0..5).map(|e| train_expert(&interp.dataset, &spec_of(100+e), &tc_of(e), SourceTag::Interpolated(1)).unwrap()).collect() };
    let buf_t = TrajectoryBuffer { trajectories: (0..5).map(|e| train_expert(&ds, &spec_of(200+e), &tc_of(10+e), SourceTag::Target).unwrap()).collect() };
    println!("experts done in {:.1}s; interp test accs: {:?}", t0.elapsed().as_secs_f64(),
        buf_i.trajectories.iter().map(|t| (t.final_test_acc*100.0).round()/100.0).collect::<Vec<_>>());
    println!("target test accs: {:?}", buf_t.trajectories.iter().map(|t| (t.final_test_acc*100.0).round()/100.0).collect::<Vec<_>>());
    // displacement scale of expert segments (M = 2) at a few start epochs
    for t in [0usize, 5, 10] {
        let tr = &buf_i.trajectories[0];
        let a = &tr.snapshots[t];
        let b = &tr.snapshots[t + 2];
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        println!("  interp expert segment t={t}: ||start-end|| = {d:.4}");
    }

    let eval_spec = ModelSpec { arch: Arch::Conv3d, width: 12, depth: 2, num_classes: 10, dims: ds.dims, init_seed: 0 };
    let proto = EvalProtocol {
        archs: vec![eval_spec], train_epochs: 100, lr: 0.1, momentum: 0.9,
        batch_size: 16, num_runs: 3, seed_base: 5, metric: Metric::Top1,
    };
    let test_items = items_from_split(&ds.test);

    // random coreset baseline
    let coreset = random_coreset(&ds, 1, 3).unwrap();
    let rep = run_protocol_items(&coreset, &test_items, &proto, "random", "x").unwrap();
    println!("random coreset ipc=1: {:.3} +/- {:.3}", rep.per_arch[0].mean, rep.per_arch[0].std);

    for seed in 0..seeds {
        let cfg = DistillConfig {
            ipc: 1, frames_per_item: 1, lr_img, lr_y: 1.0, lr_lr,
            batch_syn: usize::MAX, syn_steps, match_steps: 2, max_start_epoch: 40,
            iterations: iters, seed, label_mode: LabelMode::Hard, init_mode: InitMode::RealSample,
            inner_lr_init: inner_lr, outer_momentum: 0.0, soft_temperature: 1.0,
        };
        let t1 = Instant::now();
        let (set, curve) = distill_sfvd(&buf_i, &ds, &cfg, |_,_,_| ()).unwrap();
        let sfvd_ms = curve.mean_iter_ms();
        let items = materialize_items(&DistilledArtifact::Sfvd(set.clone())).unwrap();
        let rep_s = run_protocol_items(&items, &test_items, &proto, "sfvd", "x").unwrap();
        println!("seed {seed} SFVD: acc {:.3}+/-{:.3}  loss {:.3}->{:.3}  inner_lr {:.4}  {:.0}ms/it  total {:.0}s",
            rep_s.per_arch[0].mean, rep_s.per_arch[0].std,
            curve.mean_loss_of_first(20), curve.mean_loss_of_last(20), set.inner_lr, sfvd_ms, t1.elapsed().as_secs_f64());

        if skip_full {
            let (fused, _) = distill_sfvd_t(&set, &buf_t, &ds, &cfg, |_,_| ()).unwrap();
            let titems = materialize_items(&DistilledArtifact::SfvdT(fused)).unwrap();
            let rep_t = run_protocol_items(&titems, &test_items, &proto, "sfvd_t", "x").unwrap();
            println!("seed {seed} SFVD-T: acc {:.3}+/-{:.3}", rep_t.per_arch[0].mean, rep_t.per_arch[0].std);
            continue;
        }
        let t2 = Instant::now();
        let (fset, fcurve) = distill_fullvideo(&buf_t, &ds, &cfg, |_,_,_| ()).unwrap();
        let full_ms = fcurve.mean_iter_ms();
        let fitems = materialize_items(&DistilledArtifact::FullVideo(fset)).unwrap();
        let rep_f = run_protocol_items(&fitems, &test_items, &proto, "fullvideo", "x").unwrap();
        println!("seed {seed} FULL: acc {:.3}+/-{:.3}  loss {:.3}->{:.3}  {:.0}ms/it  total {:.0}s",
            rep_f.per_arch[0].mean, rep_f.per_arch[0].std,
            fcurve.mean_loss_of_first(20), fcurve.mean_loss_of_last(20), full_ms, t2.elapsed().as_secs_f64());

        let (fused, _) = distill_sfvd_t(&set, &buf_t, &ds, &cfg, |_,_| ()).unwrap();
        let titems = materialize_items(&DistilledArtifact::SfvdT(fused)).unwrap();
        let rep_t = run_protocol_items(&titems, &test_items, &proto, "sfvd_t", "x").unwrap();
        // ambiguous-subset accuracy
        let ambig: Vec<usize> = ds.frame_ambiguous_pairs.iter().flat_map(|&(a,b)| [a,b]).collect();
        let sub = |rep: &sfvd::evaluation::EvalReport| {
            let vals: Vec<f64> = rep.per_arch[0].runs.iter().map(|r| {
                ambig.iter().map(|&c| r.per_class[c]).sum::<f64>() / ambig.len() as f64
            }).collect();
            mean_std(&vals).0
        };
        println!("seed {seed} SFVD-T: acc {:.3}+/-{:.3}; ambig subset sfvd {:.3} vs sfvd_t {:.3}",
            rep_t.per_arch[0].mean, rep_t.per_arch[0].std, sub(&rep_s), sub(&rep_t));
    }
}
