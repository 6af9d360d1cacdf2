use sfvd::data::{generate_toy_dataset, ToySpec};
use sfvd::models::{Arch, ModelSpec};
use sfvd::evaluation::{train_and_test, EvalProtocol, Metric};
use sfvd::trajectories::items_from_split;

fn main() {
    let ds = generate_toy_dataset(&ToySpec {
        classes: 3, per_class_train: 6, per_class_test: 4,
        f: 4, c: 1, h: 8, w: 8, seed: 4, imbalance_ratios: None,
    }).unwrap();
    let items = items_from_split(&ds.train);
    let test_items = items_from_split(&ds.test);
    for (width, depth, lr, epochs) in [
        (6usize, 1usize, 0.05f64, 25usize), (6, 1, 0.1, 40), (8, 2, 0.05, 40),
        (8, 2, 0.1, 40), (12, 2, 0.1, 60), (8, 2, 0.15, 60), (16, 2, 0.1, 60),
    ] {
        let spec = ModelSpec { arch: Arch::Conv3d, width, depth, num_classes: 3, dims: ds.dims, init_seed: 0 };
        let proto = EvalProtocol {
            archs: vec![spec.clone()], train_epochs: epochs, lr, momentum: 0.9,
            batch_size: 8, num_runs: 1, seed_base: 7, metric: Metric::Top1,
        };
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let (acc, _) = train_and_test(&items, &test_items, &spec, &proto, seed).unwrap();
            accs.push(acc);
        }
        println!("w={width} d={depth} lr={lr} ep={epochs}: accs={accs:?}");
    }
}
