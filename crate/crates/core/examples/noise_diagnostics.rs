//! Gradient-to-noise statistics of a short DP-SGD run and the DP over SGD
//! raw-gradient norm ratio.

use std::path::Path;

use dpquant::config::RunConfig;
use dpquant::diagnostics::norm_amplification_report;
use dpquant::optim::UpdateRule;
use dpquant::records::histogram_text;
use dpquant::scheduler::Mode;
use dpquant::train::{load_data, train_model};

fn main() -> dpquant::Result<()> {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml"))?;
    cfg.epochs = 3;
    cfg.mode = Mode::BaselineFp;
    cfg.step_stats = true;
    let (train, val) = load_data(&cfg)?;
    let arch = cfg.architecture_text()?;

    let dp = train_model(&cfg, &arch, &train, &val, None)?;
    cfg.optimizer = UpdateRule::Sgd;
    let sgd = train_model(&cfg, &arch, &train, &val, None)?;

    for s in dp.step_stats.iter().step_by(20) {
        println!(
            "step {:>3}: |g|inf raw {:.3e}, clipped {:.3e}, noise {:.3e}, median log2|g/n| {:.2}",
            s.step, s.norm_inf_raw, s.norm_inf_clip, s.norm_inf_noise, s.median_log2_ratio
        );
    }
    print!("{}", histogram_text(&dp.histogram));
    let report = norm_amplification_report(&sgd.step_stats, &dp.step_stats)?;
    println!("DP/SGD raw norm ratio: mean {:.2}, max {:.2}", report.mean_ratio, report.max_ratio);
    Ok(())
}
