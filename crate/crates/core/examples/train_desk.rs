//! End-to-end run of the desk configuration in every mode, writing the
//! record files of the scheduler run into `out/train_desk`.

use std::path::Path;

use dpquant::config::RunConfig;
use dpquant::scheduler::Mode;
use dpquant::train::{load_data, run_training, train_model};

fn main() -> dpquant::Result<()> {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml"))?;
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    cfg.epochs = epochs;
    let (train, val) = load_data(&cfg)?;
    let arch = cfg.architecture_text()?;
    for mode in [Mode::BaselineFp, Mode::StaticRandomK, Mode::PlsOnly, Mode::FullScheduler] {
        cfg.mode = mode;
        let out = train_model(&cfg, &arch, &train, &val, None)?;
        let last = out.records.last().expect("at least one epoch");
        println!(
            "{mode:<15} val acc {:.4}  eps {:.3}  layers {:?}",
            last.val_accuracy, last.eps_total, last.layers
        );
    }
    let metrics = run_training(&cfg, Path::new("out/train_desk"))?;
    println!("records in {}", metrics.display());
    Ok(())
}
