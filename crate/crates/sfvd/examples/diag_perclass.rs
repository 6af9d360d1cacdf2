use sfvd::data::{generate_toy_dataset, ToySpec, build_interpolated_dataset};
use sfvd::models::{Arch, ModelSpec, LossKind, Backbone, build_model};
use sfvd::trajectories::{items_from_split, sgd_train, TrainConfig, TrainItem};

fn per_class(model: &sfvd::models::Model, params: &[f64], test: &[TrainItem], classes: usize) -> Vec<f64> {
    let mut hits = vec![0.0; classes];
    let mut tot = vec![0.0; classes];
    for item in test {
        let label = item.target.hard_label();
        tot[label] += 1.0;
        let logits = model.forward_logits(params, &item.video);
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() { if z > logits[best] { best = i; } }
        if best == label { hits[label] += 1.0; }
    }
    hits.iter().zip(&tot).map(|(h, t)| h / t).collect()
}

fn main() {
    let ds = generate_toy_dataset(&ToySpec::default()).unwrap();
    let interp = build_interpolated_dataset(&ds, 1, 99).unwrap();
    let test = items_from_split(&ds.test);
    for (name, items) in [("interp-n1", items_from_split(&interp.dataset.train)), ("real", items_from_split(&ds.train))] {
        for (width, depth) in [(8usize, 2usize), (16, 2)] {
            let spec = ModelSpec { arch: Arch::Conv3d, width, depth, num_classes: 10, dims: ds.dims, init_seed: 1 };
            let model = build_model(&spec).unwrap();
            let mut params = model.init_params(1);
            let cfg = TrainConfig { lr: 0.1, momentum: 0.9, batch_size: 16, epochs: 100, seed: 3 };
            sgd_train(&model, &mut params, &items, LossKind::CrossEntropy, &cfg, |_,_| ()).unwrap();
            let pc = per_class(&model, &params, &test, 10);
            let overall: f64 = pc.iter().sum::<f64>() / 10.0;
            println!("{name} w{width}d{depth}: overall {overall:.2} per-class {:?}", pc.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
        }
    }
    println!("classes: {:?}", ds.class_names);
}
