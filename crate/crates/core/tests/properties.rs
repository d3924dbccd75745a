use proptest::prelude::*;
use rand::SeedableRng;

use dpquant::accountant::{default_orders, eps_at_delta, rdp_sgm_order, EventTag, PrivacyLedger, SgmEvent};
use dpquant::diagnostics::{speedup_estimate, CostModelInput};
use dpquant::optim::clip_per_example;
use dpquant::quant::quantize;
use dpquant::records::MetricsRecord;
use dpquant::scheduler::{layer_probabilities, sample_without_replacement};
use dpquant::{DetRng, PerExampleGrads, QuantGrid, Tensor};

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_values_lie_on_scaled_grid(x in finite_vec(64), seed in any::<u64>()) {
        let grid = QuantGrid::fp4();
        let levels = grid.levels();
        let t = Tensor::from_vec(x.clone());
        let s = t.norm_inf();
        let q = quantize(&t, &grid, &mut DetRng::seed_from_u64(seed)).unwrap();
        for (qi, xi) in q.data().iter().zip(&x) {
            prop_assert!(qi.abs() <= s);
            prop_assert!(*qi == 0.0 || qi.signum() == xi.signum());
            if s > 0.0 {
                prop_assert!(levels.contains(&(qi / s)));
            }
        }
    }

    #[test]
    fn quantizer_commutes_with_power_of_two_scaling(x in finite_vec(32), e in -10i32..=10, seed in any::<u64>()) {
        let grid = QuantGrid::fp4();
        let lambda = 2f64.powi(e);
        let scaled = Tensor::from_vec(x.iter().map(|v| v * lambda).collect());
        let a = quantize(&scaled, &grid, &mut DetRng::seed_from_u64(seed)).unwrap();
        let b = quantize(&Tensor::from_vec(x), &grid, &mut DetRng::seed_from_u64(seed)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(*u, lambda * v);
        }
    }

    #[test]
    fn grid_points_pass_through(idx in prop::collection::vec(0usize..15, 1..20), scale in 1e-3f64..1e3) {
        let levels = QuantGrid::fp4().levels();
        let mut x: Vec<f64> = idx.iter().map(|&i| levels[i] * scale).collect();
        x.push(scale);
        let t = Tensor::from_vec(x.clone());
        let q = quantize(&t, &QuantGrid::fp4(), &mut DetRng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(q.data(), &x[..]);
    }

    #[test]
    fn rdp_is_monotone(q in 0.001f64..0.5, sigma in 0.6f64..4.0, order_idx in 0usize..20) {
        let orders: Vec<f64> = (2..=22).map(|a| a as f64).collect();
        let a = orders[order_idx];
        let base = rdp_sgm_order(q, sigma, a).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(rdp_sgm_order((q * 1.5).min(1.0), sigma, a).unwrap() >= base);
        prop_assert!(rdp_sgm_order(q, sigma * 1.2, a).unwrap() <= base);
        prop_assert!(rdp_sgm_order(q, sigma, orders[order_idx + 1]).unwrap() >= base);
    }

    #[test]
    fn ledger_order_does_not_matter(
        events in prop::collection::vec((0.001f64..0.2, 0.5f64..3.0, 1u64..200, any::<bool>()), 1..6)
    ) {
        let evs: Vec<SgmEvent> = events
            .iter()
            .map(|&(q, s, n, m)| SgmEvent::new(if m { EventTag::Measure } else { EventTag::Train }, q, s, n).unwrap())
            .collect();
        let mut fwd = PrivacyLedger::new(1e-5);
        let mut rev = PrivacyLedger::new(1e-5);
        evs.iter().for_each(|e| fwd.record(*e).unwrap());
        evs.iter().rev().for_each(|e| rev.record(*e).unwrap());
        let (a, b) = (fwd.epsilon().unwrap(), rev.epsilon().unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let f = fwd.analysis_fraction().unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn larger_delta_gives_smaller_epsilon(q in 0.001f64..0.2, steps in 1u64..1000) {
        let mut ledger = PrivacyLedger::new(1e-5);
        ledger.record(SgmEvent::new(EventTag::Train, q, 1.0, steps).unwrap()).unwrap();
        let curve = ledger.curve();
        let mut last = f64::INFINITY;
        for delta in [1e-8, 1e-6, 1e-5, 1e-3, 0.1] {
            let (eps, _) = eps_at_delta(&curve, delta).unwrap();
            prop_assert!(eps <= last);
            last = eps;
        }
        prop_assert_eq!(curve.orders.len(), default_orders().len());
    }

    #[test]
    fn clipping_bounds_every_row(rows in prop::collection::vec(finite_vec(8).prop_map(|mut v| { v.resize(8, 0.0); v }), 1..10), c in 0.01f64..10.0) {
        let b = rows.len();
        let mut g = PerExampleGrads::new(b, 8, rows.concat()).unwrap();
        let before = clip_per_example(&mut g, c);
        for (i, row) in g.rows().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= c * (1.0 + 1e-12));
            if before[i] <= c {
                prop_assert_eq!(row, &rows[i][..]);
            }
        }
    }

    #[test]
    fn probabilities_are_a_distribution_ordered_by_impact(v in prop::collection::vec(-1.0f64..1.0, 2..10), s in 0.0f64..50.0) {
        let p = layer_probabilities(&v, s).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn sampling_without_replacement_is_distinct(w in prop::collection::vec(0.01f64..1.0, 1..10), seed in any::<u64>(), m_frac in 0.0f64..=1.0) {
        let m = ((w.len() as f64) * m_frac).round() as usize;
        let picked = sample_without_replacement(&w, m, &mut DetRng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(picked.len(), m);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        prop_assert!(picked.iter().all(|&i| i < w.len()));
    }

    #[test]
    fn speedup_is_monotone(p in 0.0f64..0.99, o in 0.0f64..50.0, a in 0.0f64..30.0, f in 1.0f64..16.0) {
        let est = |p: f64, o: f64, a: f64| speedup_estimate(&CostModelInput {
            t_train: 100.0, t_overhead: o, t_analysis: a, p, speedup_factor: f,
        }).unwrap().speedup;
        let s = est(p, o, a);
        prop_assert!(est(p + 0.01, o, a) >= s);
        prop_assert!(est(p, o + 1.0, a) <= s * (1.0 + 1e-12));
        prop_assert!(est(p, o, a + 1.0) < s);
    }

    #[test]
    fn metrics_lines_round_trip(epoch in 0usize..1000, steps in 0usize..1000, loss in 0.0f64..10.0, layers in prop::collection::vec(0usize..64, 0..5)) {
        let r = MetricsRecord {
            epoch,
            steps,
            train_loss: (loss * 1e6).round() / 1e6,
            val_accuracy: 0.5,
            eps_total: 1.25,
            eps_measure: 0.25,
            layers,
            wall_s: 0.125,
        };
        prop_assert_eq!(MetricsRecord::parse_line(&r.to_line()).unwrap(), r);
    }
}
