//! RDP accounting for a training run with periodic measurements.

use dpquant::accountant::{default_orders, rdp_sgm, EventTag, PrivacyLedger, SgmEvent};

fn main() -> dpquant::Result<()> {
    let n: f64 = 9000.0;
    let q = 256.0 / n;
    let steps = (n / 256.0).ceil() as u64;

    let curve = rdp_sgm(q, 1.0, &default_orders())?;
    for (a, v) in curve.orders.iter().zip(&curve.values).take(4) {
        println!("RDP({a}) per step = {v:.6e}");
    }

    let mut ledger = PrivacyLedger::new(1e-5);
    for epoch in 0..10 {
        if epoch % 2 == 0 {
            ledger.record(SgmEvent::new(EventTag::Measure, q, 0.5, 1)?)?;
        }
        ledger.record(SgmEvent::new(EventTag::Train, q, 1.0, steps)?)?;
        println!(
            "epoch {epoch}: eps {:.3} (train {:.3}, measure {:.3}, fraction {:.3})",
            ledger.epsilon()?,
            ledger.epsilon_for(EventTag::Train)?,
            ledger.epsilon_for(EventTag::Measure)?,
            ledger.analysis_fraction()?
        );
    }
    for e in ledger.events().iter().take(3) {
        println!("{} {} {} {}", e.tag, e.q, e.sigma, e.steps);
    }
    Ok(())
}
