use sfvd::data::Vdim;
use sfvd::models::{Arch, Backbone, ConvNet, LossKind, ModelSpec, Target};
use std::time::Instant;

fn main() {
    for (width, depth, h) in [(6usize, 2usize, 16usize), (8, 2, 16), (8, 3, 16), (12, 2, 16)] {
        let spec = ModelSpec {
            arch: Arch::Conv3d, width, depth, num_classes: 10,
            dims: Vdim::new(8, 1, h, h), init_seed: 0,
        };
        let net = ConvNet::new(&spec).unwrap();
        let params = net.init_params(0);
        let video: Vec<f64> = (0..spec.dims.len()).map(|i| (i % 97) as f64 / 97.0).collect();
        let mut dp = vec![0.0; net.param_count()];
        let start = Instant::now();
        let iters = 200;
        for _ in 0..iters {
            let _ = net.item_loss_grads(&params, &video, &Target::Hard(3), LossKind::CrossEntropy, &mut dp, true);
        }
        let el = start.elapsed().as_secs_f64();
        println!("w={width} d={depth} h={h}: {:.3} ms/item fwd+bwd+dinput, params={}", el / iters as f64 * 1e3, net.param_count());
    }
}
