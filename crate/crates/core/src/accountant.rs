//! Rényi-DP accounting for sampled Gaussian mechanisms.
//!
//! Every private release (a DP-SGD step or a loss-impact measurement) is an
//! SGM event `(q, σ, steps)`. Per-step RDP curves are computed over a fixed
//! grid of Rényi orders, summed across events, and converted to `(ε, δ)` via
//! `ε = min_α [ RDP(α) + ln(1/δ)/(α − 1) ]`.
//!
//! Integer orders use the binomial expansion of `E_{z∼μ0}[(μ(z)/μ0(z))^α]`
//! with `μ0 = N(0, σ²)` and `μ = (1 − q)·μ0 + q·N(1, σ²)`; fractional
//! orders integrate the same expectation numerically. All sums are taken in
//! log space.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default Rényi orders: 1.25, 1.5, 2..=64, 96, 128.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5];
    orders.extend((2..=64).map(f64::from));
    orders.extend([96.0, 128.0]);
    orders
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventTag {
    Train,
    Measure,
}

impl fmt::Display for EventTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventTag::Train => "train",
            EventTag::Measure => "measure",
        })
    }
}

impl FromStr for EventTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EventTag::Train),
            "measure" => Ok(EventTag::Measure),
            other => Err(Error::Privacy(format!("unknown event tag `{other}`"))),
        }
    }
}

/// `steps` compositions of a sampled Gaussian mechanism with rate `q`
/// and noise multiplier `sigma`.
///
/// `sigma == 0` is allowed and denotes a release without noise; its RDP is
/// infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgmEvent {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub tag: EventTag,
}

impl SgmEvent {
    pub fn new(tag: EventTag, q: f64, sigma: f64, steps: u64) -> Result<Self> {
        let event = Self {
            q,
            sigma,
            steps,
            tag,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Privacy(format!("sample rate {} outside (0, 1]", self.q)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Privacy(format!("invalid noise scale {}", self.sigma)));
        }
        if self.steps == 0 {
            return Err(Error::Privacy("event must cover at least one step".into()));
        }
        Ok(())
    }
}

/// RDP values over a set of orders.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub values: Vec<f64>,
}

impl RdpCurve {
    pub fn zeros(orders: &[f64]) -> Self {
        Self {
            orders: orders.to_vec(),
            values: vec![0.0; orders.len()],
        }
    }

    /// `self += times · other`; orders must match.
    pub fn add_scaled(&mut self, other: &RdpCurve, times: f64) {
        debug_assert_eq!(self.orders, other.orders);
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += times * o;
        }
    }

    pub fn scaled(&self, times: f64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().map(|v| v * times).collect(),
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    // Σ ln((n − i)/(i + 1)) is exact enough for n ≤ a few hundred.
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// `ln E_{z∼μ0}[(μ/μ0)^α]` for integer `α` by binomial expansion.
fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k)
            + (alpha - k) as f64 * ln_1mq
            + kf * ln_q
            + (kf * kf - kf) / two_var;
        acc = log_add_exp(acc, term);
    }
    acc
}

fn log_mu0(z: f64, sigma: f64) -> f64 {
    -z * z / (2.0 * sigma * sigma) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// `ln(μ(z)/μ0(z)) = ln(1 − q + q·exp((2z − 1)/(2σ²)))`
fn log_ratio(z: f64, q: f64, sigma: f64) -> f64 {
    let r = (2.0 * z - 1.0) / (2.0 * sigma * sigma);
    if r < 1.0 {
        // keeps relative precision where the ratio is close to one
        (q * r.exp_m1()).ln_1p()
    } else {
        log_add_exp((-q).ln_1p(), q.ln() + r)
    }
}

/// Log-integrand `ln[μ0(z) · (μ(z)/μ0(z))^α]`.
fn log_integrand(z: f64, q: f64, sigma: f64, alpha: f64) -> f64 {
    log_mu0(z, sigma) + alpha * log_ratio(z, q, sigma)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol || delta.abs() <= 1e-15 * (left.abs() + right.abs()) {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

fn integrate_panels<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, panels: usize, tol: f64) -> f64 {
    let width = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * width;
        let b = a + width;
        let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
        let whole = width / 6.0 * (fa + 4.0 * fm + fb);
        total += adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, 30);
    }
    total
}

/// `ln E_{z∼μ0}[(μ/μ0)^α]` for any `α > 1` by adaptive Simpson quadrature.
///
/// The integrand has its mass near `z = 0` and near `z = α`, each with
/// width `σ`; the integration range covers both with 16σ margins. When the
/// result is close to zero the expectation of `(μ/μ0)^α − 1` is integrated
/// instead so that the small logarithm keeps its relative precision.
fn log_a_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    const PANELS: usize = 256;
    let lo = -16.0 * sigma - 1.0;
    let hi = alpha + 16.0 * sigma + 1.0;
    let step = (hi - lo) / (4 * PANELS) as f64;
    let peak = (0..=4 * PANELS)
        .map(|i| log_integrand(lo + i as f64 * step, q, sigma, alpha))
        .chain([
            log_integrand(0.0, q, sigma, alpha),
            log_integrand(alpha, q, sigma, alpha),
        ])
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = |z: f64| (log_integrand(z, q, sigma, alpha) - peak).exp();
    let log_a = peak + integrate_panels(&scaled, lo, hi, PANELS, 1e-15).ln();
    if log_a.abs() >= 0.1 {
        return log_a;
    }
    let excess = |z: f64| log_mu0(z, sigma).exp() * (alpha * log_ratio(z, q, sigma)).exp_m1();
    let tol = 1e-13 * log_a.abs().max(f64::MIN_POSITIVE) / PANELS as f64;
    integrate_panels(&excess, lo, hi, PANELS, tol).ln_1p()
}

/// Per-step RDP of one order; `+∞` when `sigma == 0`.
pub fn rdp_sgm_order(q: f64, sigma: f64, order: f64) -> Result<f64> {
    if !(order > 1.0) {
        return Err(Error::Privacy(format!("Rényi order must exceed 1, got {order}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Privacy(format!("sample rate {q} outside (0, 1]")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if !(sigma > 0.0) {
        return Err(Error::Privacy(format!("invalid noise scale {sigma}")));
    }
    if q == 1.0 {
        return Ok(order / (2.0 * sigma * sigma));
    }
    let log_a = if order.fract() == 0.0 {
        log_a_integer(q, sigma, order as u64)
    } else {
        log_a_quadrature(q, sigma, order)
    };
    Ok((log_a / (order - 1.0)).max(0.0))
}

/// Per-step RDP curve of the sampled Gaussian mechanism.
pub fn rdp_sgm(q: f64, sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    let values = orders
        .iter()
        .map(|&a| rdp_sgm_order(q, sigma, a))
        .collect::<Result<_>>()?;
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

/// `(ε, best order)` for the given curve and δ.
pub fn eps_at_delta(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Privacy(format!("delta {delta} outside (0, 1)")));
    }
    let ln_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, f64::NAN);
    for (&order, &rdp) in curve.orders.iter().zip(&curve.values) {
        let eps = rdp + ln_inv_delta / (order - 1.0);
        if eps < best.0 {
            best = (eps, order);
        }
    }
    if best.1.is_nan() {
        best.1 = *curve.orders.last().unwrap_or(&f64::NAN);
    }
    Ok(best)
}

/// Append-only record of SGM events.
#[derive(Debug, Clone)]
pub struct PrivacyLedger {
    events: Vec<SgmEvent>,
    delta: f64,
    orders: Vec<f64>,
    cache: HashMap<(u64, u64), RdpCurve>,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Self {
        Self::with_orders(delta, default_orders())
    }

    pub fn with_orders(delta: f64, orders: Vec<f64>) -> Self {
        Self {
            events: Vec::new(),
            delta,
            orders,
            cache: HashMap::new(),
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn events(&self) -> &[SgmEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn record(&mut self, event: SgmEvent) -> Result<()> {
        event.validate()?;
        self.step_curve(event.q, event.sigma)?;
        self.events.push(event);
        Ok(())
    }

    /// Cached per-step curve for `(q, σ)` on this ledger's orders.
    pub fn step_curve(&mut self, q: f64, sigma: f64) -> Result<RdpCurve> {
        let key = (q.to_bits(), sigma.to_bits());
        if let Some(curve) = self.cache.get(&key) {
            return Ok(curve.clone());
        }
        let curve = rdp_sgm(q, sigma, &self.orders)?;
        self.cache.insert(key, curve.clone());
        Ok(curve)
    }

    fn curve_where(&self, keep: impl Fn(&SgmEvent) -> bool) -> RdpCurve {
        let mut total = RdpCurve::zeros(&self.orders);
        for e in self.events.iter().filter(|e| keep(e)) {
            let step = match self.cache.get(&(e.q.to_bits(), e.sigma.to_bits())) {
                Some(c) => c.clone(),
                None => rdp_sgm(e.q, e.sigma, &self.orders).expect("validated on record"),
            };
            total.add_scaled(&step, e.steps as f64);
        }
        total
    }

    /// Composed curve of every recorded event.
    pub fn curve(&self) -> RdpCurve {
        self.curve_where(|_| true)
    }

    pub fn curve_for(&self, tag: EventTag) -> RdpCurve {
        self.curve_where(|e| e.tag == tag)
    }

    pub fn epsilon(&self) -> Result<f64> {
        Ok(eps_at_delta(&self.curve(), self.delta)?.0)
    }

    /// ε of the events carrying `tag` alone.
    pub fn epsilon_for(&self, tag: EventTag) -> Result<f64> {
        if !self.events.iter().any(|e| e.tag == tag) {
            return Ok(0.0);
        }
        Ok(eps_at_delta(&self.curve_for(tag), self.delta)?.0)
    }

    /// ε the ledger would report after additionally recording `extra`.
    pub fn epsilon_with(&mut self, extra: &[SgmEvent]) -> Result<f64> {
        let mut total = self.curve();
        for e in extra {
            e.validate()?;
            let step = self.step_curve(e.q, e.sigma)?;
            total.add_scaled(&step, e.steps as f64);
        }
        Ok(eps_at_delta(&total, self.delta)?.0)
    }

    /// `ε(measurement events only) / ε(all events)`, zero when nothing was measured.
    pub fn analysis_fraction(&self) -> Result<f64> {
        let measure = self.epsilon_for(EventTag::Measure)?;
        if measure == 0.0 {
            return Ok(0.0);
        }
        Ok(measure / self.epsilon()?)
    }

    /// Share of total ε attributable to measurement: `(ε_all − ε_train) / ε_all`.
    pub fn incremental_analysis_fraction(&self) -> Result<f64> {
        if !self.events.iter().any(|e| e.tag == EventTag::Measure) {
            return Ok(0.0);
        }
        let all = self.epsilon()?;
        let train = eps_at_delta(&self.curve_for(EventTag::Train), self.delta)?.0;
        Ok((all - train) / all)
    }

    /// Writes one `tag q sigma steps` line per event.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# tag q sigma steps\n");
        for e in &self.events {
            out.push_str(&format!("{} {} {} {}\n", e.tag, e.q, e.sigma, e.steps));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, delta: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, delta).map_err(|err| match err {
            Error::Format { offset, message, .. } => Error::Format {
                path: path.to_path_buf(),
                offset,
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str, delta: f64) -> Result<Self> {
        let mut ledger = Self::new(delta);
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let content = line.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Format {
                path: "<ledger>".into(),
                offset: start,
                message,
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected `tag q sigma steps`, got `{content}`")));
            }
            let tag = fields[0].parse().map_err(|e: Error| bad(e.to_string()))?;
            let q = fields[1].parse().map_err(|_| bad(format!("bad q `{}`", fields[1])))?;
            let sigma = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad sigma `{}`", fields[2])))?;
            let steps = fields[3]
                .parse()
                .map_err(|_| bad(format!("bad steps `{}`", fields[3])))?;
            let event = SgmEvent::new(tag, q, sigma, steps).map_err(|e| bad(e.to_string()))?;
            ledger.record(event)?;
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_plain_gaussian() {
        for &sigma in &[0.5, 1.0, 3.0] {
            let curve = rdp_sgm(1.0, sigma, &default_orders()).unwrap();
            for (&a, &v) in curve.orders.iter().zip(&curve.values) {
                assert!((v - a / (2.0 * sigma * sigma)).abs() <= 1e-12 * v);
            }
        }
    }

    #[test]
    fn order_must_exceed_one() {
        assert!(rdp_sgm(0.1, 1.0, &[1.0]).is_err());
        assert!(rdp_sgm(0.1, 1.0, &[0.5]).is_err());
    }

    #[test]
    fn quadrature_matches_binomial_at_integer_orders() {
        for &(q, sigma) in &[(0.01, 1.0), (0.1, 0.5), (0.001, 2.0), (0.3, 0.8)] {
            for alpha in [2u64, 3, 8, 32] {
                let exact = log_a_integer(q, sigma, alpha);
                let quad = log_a_quadrature(q, sigma, alpha as f64);
                assert!(
                    (exact - quad).abs() <= 1e-9 * exact.abs().max(1e-12),
                    "q={q} sigma={sigma} alpha={alpha}: {exact} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn zero_curve_epsilon() {
        let orders: Vec<f64> = (2..=64).map(f64::from).collect();
        let (eps, order) = eps_at_delta(&RdpCurve::zeros(&orders), 1e-5).unwrap();
        assert!((eps - 1e5f64.ln() / 63.0).abs() < 1e-12);
        assert!((eps - 0.18274).abs() < 1e-5);
        assert_eq!(order, 64.0);
    }

    #[test]
    fn single_order_epsilon() {
        let curve = RdpCurve {
            orders: vec![2.0],
            values: vec![1.0],
        };
        let (eps, _) = eps_at_delta(&curve, 1e-5).unwrap();
        assert!((eps - (1.0 + 1e5f64.ln())).abs() < 1e-12);
        assert!((eps - 12.5129).abs() < 1e-4);
    }

    #[test]
    fn composition_is_additive() {
        let mut a = PrivacyLedger::new(1e-5);
        a.record(SgmEvent::new(EventTag::Train, 0.01, 1.0, 2).unwrap()).unwrap();
        let mut b = PrivacyLedger::new(1e-5);
        b.record(SgmEvent::new(EventTag::Train, 0.01, 1.0, 1).unwrap()).unwrap();
        b.record(SgmEvent::new(EventTag::Train, 0.01, 1.0, 1).unwrap()).unwrap();
        assert_eq!(a.curve(), b.curve());
    }

    #[test]
    fn empty_ledger_is_delta_bound_only() {
        let ledger = PrivacyLedger::new(1e-5);
        assert!(ledger.curve().values.iter().all(|&v| v == 0.0));
        assert!((ledger.epsilon().unwrap() - 1e5f64.ln() / 127.0).abs() < 1e-12);
        assert_eq!(ledger.analysis_fraction().unwrap(), 0.0);
    }

    #[test]
    fn train_only_fraction_is_zero() {
        let mut ledger = PrivacyLedger::new(1e-5);
        ledger.record(SgmEvent::new(EventTag::Train, 0.02, 1.0, 100).unwrap()).unwrap();
        assert_eq!(ledger.analysis_fraction().unwrap(), 0.0);
        assert_eq!(ledger.incremental_analysis_fraction().unwrap(), 0.0);
    }

    #[test]
    fn noiseless_event_is_infinite() {
        let mut ledger = PrivacyLedger::new(1e-5);
        ledger.record(SgmEvent::new(EventTag::Measure, 0.02, 0.0, 1).unwrap()).unwrap();
        assert_eq!(ledger.epsilon().unwrap(), f64::INFINITY);
    }

    #[test]
    fn event_validation() {
        assert!(SgmEvent::new(EventTag::Train, 0.0, 1.0, 1).is_err());
        assert!(SgmEvent::new(EventTag::Train, 1.5, 1.0, 1).is_err());
        assert!(SgmEvent::new(EventTag::Train, 0.5, -1.0, 1).is_err());
        assert!(SgmEvent::new(EventTag::Train, 0.5, 1.0, 0).is_err());
    }

    #[test]
    fn ledger_text_round_trip() {
        let mut ledger = PrivacyLedger::new(1e-5);
        ledger.record(SgmEvent::new(EventTag::Train, 0.0284, 1.0, 35).unwrap()).unwrap();
        ledger.record(SgmEvent::new(EventTag::Measure, 0.0284, 0.5, 1).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.txt");
        ledger.save(&path).unwrap();
        let loaded = PrivacyLedger::load(&path, 1e-5).unwrap();
        assert_eq!(loaded.events(), ledger.events());
        assert!(PrivacyLedger::parse("train 0.1 1.0\n", 1e-5).is_err());
        let err = PrivacyLedger::parse("# header\ntrain 0.1 1 1\nfoo 0.1 1 1\n", 1e-5).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 23, .. }), "{err}");
    }
}
