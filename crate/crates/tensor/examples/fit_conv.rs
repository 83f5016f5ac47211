//! Fits a single 3x3 convolution to a fixed target filter with Adam and
//! checks its gradients against central differences first.

use dehaze_tensor::{conv_kernel, gradcheck_params, AdamConfig, AdamState, Graph, ModelParams, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dehaze_tensor::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn([4, 2, 10, 10], |_| rng.random_range(-1.0..1.0));
    let target_k = conv_kernel(&mut rng, 3, 2, 3);

    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(target_k));
    let y = g.conv2d(xv, kv, None, 1, 1)?;
    let target = g.value(y).clone();

    let mut params = ModelParams::new();
    let w = params.add("w", conv_kernel(&mut rng, 3, 2, 3));
    let loss_fn = |g: &mut Graph, b: &dehaze_tensor::Bound| {
        let xv = g.constant(x.clone());
        let t = g.constant(target.clone());
        let y = g.conv2d(xv, b[w], None, 1, 1)?;
        let d = g.sub(y, t)?;
        let d = g.square(d);
        Ok(g.mean(d))
    };

    let coords: Vec<_> = (0..18).map(|i| (w, i)).collect();
    let report = gradcheck_params(&mut params, loss_fn, &coords, 1e-5, 1e-6)?;
    println!("gradcheck: {} coords, max rel error {:.2e}", report.checked, report.max_rel_error);

    let mut adam = AdamState::new(&params, AdamConfig { learning_rate: 0.05, ..AdamConfig::default() });
    for step in 0..=300 {
        let mut g = Graph::new();
        let b = g.bind(&params);
        let loss = loss_fn(&mut g, &b)?;
        g.backward(loss)?;
        g.collect_grads(&b, &mut params);
        adam.update(&mut params)?;
        if step % 50 == 0 {
            println!("step {step:3}  mse {:.3e}", g.value(loss).data()[0]);
        }
    }
    Ok(())
}
