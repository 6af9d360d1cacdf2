use sfvd::data::{generate_toy_dataset, ToySpec, build_interpolated_dataset};
use sfvd::models::{Arch, ModelSpec, Backbone, LossKind};
use sfvd::trajectories::{items_from_split, sgd_train, accuracy, TrainConfig};
use sfvd::models::build_model;

fn main() {
    let ds = generate_toy_dataset(&ToySpec::default()).unwrap();
    let interp = build_interpolated_dataset(&ds, 1, 99).unwrap();
    let train_i = items_from_split(&interp.dataset.train);
    let train_r = items_from_split(&ds.train);
    let test = items_from_split(&ds.test);
    for (name, items) in [("interp-n1", &train_i), ("real", &train_r)] {
        for (lr, epochs, batch) in [(0.05, 30, 32), (0.1, 60, 16), (0.1, 100, 16), (0.2, 100, 16), (0.05, 100, 8)] {
            let spec = ModelSpec { arch: Arch::Conv3d, width: 8, depth: 2, num_classes: 10, dims: ds.dims, init_seed: 1 };
            let model = build_model(&spec).unwrap();
            let mut params = model.init_params(1);
            let cfg = TrainConfig { lr, momentum: 0.9, batch_size: batch, epochs, seed: 3 };
            sgd_train(&model, &mut params, items, LossKind::CrossEntropy, &cfg, |_,_| ()).unwrap();
            let tr = accuracy(&model, &params, items, 1);
            let te = accuracy(&model, &params, &test, 1);
            println!("{name} lr={lr} ep={epochs} b={batch}: train {tr:.3} test {te:.3}");
        }
    }
}
