//! A few DP-SGD steps on synthetic blobs, micro-batched, with and without
//! FP4 compute on the first layer.

use dpquant::data::{poisson_sample, synth_dataset};
use dpquant::optim::{logical_step, DpSgdConfig, StepRngs, UpdateRule};
use dpquant::{build_network, substream, QuantGrid, QuantPolicy};

const ARCH: &str = "dense in=16 out=32\nrelu\ndense in=32 out=4\n";

fn main() -> dpquant::Result<()> {
    let data = synth_dataset(4, 500, &[16], 3.0, 1)?;
    let cfg = DpSgdConfig {
        lr: 0.5,
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        logical_batch: 128,
        physical_batch: 64,
    };
    let q = cfg.logical_batch as f64 / data.len() as f64;
    let grid = QuantGrid::fp4();

    for policy in [QuantPolicy::empty(), QuantPolicy::singleton(0)] {
        let mut net = build_network(ARCH, 3)?;
        let mut sampling = substream(3, 1);
        let mut noise = substream(3, 2);
        let mut quant = substream(3, 3);
        for step in 0..40 {
            let batch = poisson_sample(data.len(), q, &mut sampling);
            let out = logical_step(
                &mut net,
                &data,
                &batch,
                &cfg,
                UpdateRule::DpSgd,
                &policy,
                &grid,
                StepRngs {
                    noise: &mut noise,
                    quant: &mut quant,
                },
                false,
            )?;
            if step % 10 == 0 && out.examples > 0 {
                println!(
                    "policy {:?} step {step}: {} examples, loss {:.4}",
                    policy.ids().collect::<Vec<_>>(),
                    out.examples,
                    out.loss_sum / out.examples as f64
                );
            }
        }
        let (x, y) = data.batch(&(0..data.len()).collect::<Vec<_>>())?;
        let correct = net.predict(&x)?.iter().zip(&y).filter(|(a, b)| a == b).count();
        println!("train accuracy {:.3}", correct as f64 / data.len() as f64);
    }
    Ok(())
}
