//! Cost-model speedups for the profiled overheads and the desk network's
//! quantized compute share.

use std::path::Path;

use dpquant::arch::parse_architecture;
use dpquant::diagnostics::{
    expected_compute_fraction, quantized_compute_fraction, speedup_estimate, CostModelInput, PROFILED_OVERHEAD_PERCENT,
};
use dpquant::QuantPolicy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:<22} {:>8} {:>8} {:>8}", "model", "a=0%", "a=5%", "a=15%");
    for (name, overhead) in PROFILED_OVERHEAD_PERCENT {
        let row: Vec<String> = [0.0, 5.0, 15.0]
            .iter()
            .map(|&analysis| {
                speedup_estimate(&CostModelInput {
                    t_train: 100.0,
                    t_overhead: overhead,
                    t_analysis: analysis,
                    p: 0.9,
                    speedup_factor: 4.0,
                })
                .map(|e| format!("{:.3}", e.speedup))
            })
            .collect::<dpquant::Result<_>>()?;
        println!("{name:<22} {:>8} {:>8} {:>8}", row[0], row[1], row[2]);
    }

    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk_cnn.arch"))?;
    let arch = parse_architecture(&text)?;
    let first_two = QuantPolicy::from_ids([0, 2]);
    println!("desk: conv layers carry {:.3} of the MACs", quantized_compute_fraction(&arch, &first_two));
    for k in [2, 4, 7] {
        println!("desk: expected share with k={k} random layers {:.3}", expected_compute_fraction(&arch, k));
    }
    Ok(())
}
