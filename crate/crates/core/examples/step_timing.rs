//! Times forward and backward of one training batch of the reduced network.
use std::time::Instant;

use capsnet::capsule::RoutingConfig;
use capsnet::network::{loss, ArchitectureSpec, Model};
use capsnet::{Tape, Tensor};

fn main() -> capsnet::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let model = Model::<f32>::build(ArchitectureSpec::reduced(), 7)?;
    println!("parameters: {}", model.parameter_count());
    let images = Tensor::from_fn(vec![batch, 1, 32, 32], |ix| ((ix[0] * 7 + ix[2] * 3 + ix[3]) % 11) as f32 / 10.0);
    let targets: Vec<usize> = (0..batch).map(|b| b % 10).collect();
    let routing = RoutingConfig::default();
    for _ in 0..3 {
        let t0 = Instant::now();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = tape.constant(images.clone());
        let out = model.forward(&bound, x, &routing, Some(&targets))?;
        let l = loss(out.class_activations, out.reconstructions, x, &targets, 0.2, 0.512)?;
        let t1 = Instant::now();
        let grads = tape.backward(l)?;
        let t2 = Instant::now();
        let gnorm: f32 = bound.vars().iter().map(|v| grads.wrt(*v).unwrap().data().iter().map(|g| g * g).sum::<f32>()).sum();
        println!(
            "loss {:.4} |g| {:.4} forward {:?} backward {:?} per-sample {:?}",
            l.value().item(),
            gnorm.sqrt(),
            t1 - t0,
            t2 - t1,
            (t2 - t0) / batch as u32
        );
        println!("class act[0] {:?}", &out.class_activations.value().data()[..10]);
    }
    Ok(())
}
