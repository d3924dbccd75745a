//! One privatized loss-impact measurement on the desk network, followed by
//! softmax layer selection.

use std::path::Path;

use dpquant::accountant::PrivacyLedger;
use dpquant::config::RunConfig;
use dpquant::data::poisson_sample;
use dpquant::quant::build_grid;
use dpquant::scheduler::{compute_loss_impact, layer_probabilities, select_targets, ImpactTable, MeasureEnv};
use dpquant::train::load_data;
use dpquant::{build_network, substream};

fn main() -> dpquant::Result<()> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml"))?;
    let (train, _) = load_data(&cfg)?;
    let mut net = build_network(&cfg.architecture_text()?, cfg.seed)?;
    let grid = build_grid(&cfg.quantizer);
    let q = cfg.dpsgd.logical_batch as f64 / train.len() as f64;
    let mut rng = substream(cfg.seed, 5);
    let batches = vec![poisson_sample(train.len(), q, &mut rng)];
    let env = MeasureEnv {
        data: &train,
        dp: &cfg.dpsgd,
        quantizer: &grid,
        batch_rate: q,
    };
    let mut table = ImpactTable::singletons(&net, cfg.scheduler.ema_decay)?;
    let mut ledger = PrivacyLedger::new(cfg.delta);
    let round = compute_loss_impact(&mut net, &env, &batches, &cfg.scheduler, &mut table, &mut ledger, &mut rng)?;

    let pi = layer_probabilities(table.values(), cfg.scheduler.temperature)?;
    println!("layer  raw_impact  privatized  probability");
    for (i, p) in table.policies().iter().enumerate() {
        println!(
            "{:>5}  {:>10.2e}  {:>10.2e}  {:>11.4}",
            p.ids().next().unwrap_or(0),
            round.raw[i],
            round.privatized[i],
            pi[i]
        );
    }
    let k = cfg.scheduler.layers_to_quantize(table.len())?;
    for _ in 0..3 {
        let chosen = select_targets(&table, cfg.scheduler.temperature, k, &mut rng)?;
        println!("selected {:?}", chosen.ids().collect::<Vec<_>>());
    }
    println!("measurement eps so far {:.4}", ledger.epsilon()?);
    Ok(())
}
