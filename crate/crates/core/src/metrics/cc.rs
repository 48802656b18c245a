//! The cache-change metric: a weight-averaged fraction of squashed access and
//! transmit instructions that left a fill behind at each cache level, with
//! levels closer to the core weighted heavier.
//!
//!     cc = sum_i N[i] * (K - i + 1) / (N_total * sum_i i),  i = 1..=K
//!
//! Evaluation is exact rational; the decimal rendering rounds to six places.
//! Note this normalizes by `N_total * K(K+1)/2`, not by `N_total * K` — for
//! K=2 and (N1, N2, N_total) = (0, 15, 32) the value is 15/96 = 0.15625,
//! where the alternative normalization would give 15/64.

use crate::error::SimError;

/// Exact rational metric value in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcValue {
    pub num: u64,
    pub den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl CcValue {
    pub fn new(num: u64, den: u64) -> CcValue {
        assert!(den != 0);
        let g = gcd(num, den);
        CcValue {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }

    /// Decimal rendering to six places, rounding half away from zero.
    pub fn to_decimal_string(self) -> String {
        let scaled = self.num as u128 * 1_000_000 + self.den as u128 / 2;
        let v = scaled / self.den as u128;
        format!("{}.{:06}", v / 1_000_000, v % 1_000_000)
    }
}

impl std::fmt::Display for CcValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_decimal_string())
    }
}

/// Evaluate the metric for per-level counts `n` (index 0 is level 1, the
/// closest to the core).
pub fn compute_cc(n: &[u64], n_total: u64, k: u8) -> Result<CcValue, SimError> {
    if n.len() != k as usize {
        return Err(SimError::Schema(format!(
            "per-level counts: got {} entries for K={k}",
            n.len()
        )));
    }
    if n_total == 0 {
        return Err(SimError::UndefinedMetric);
    }
    for (i, &ni) in n.iter().enumerate() {
        if ni > n_total {
            return Err(SimError::Schema(format!(
                "N[{}] = {ni} exceeds N_total = {n_total}",
                i + 1
            )));
        }
    }
    let k = k as u64;
    let numerator: u64 = n
        .iter()
        .enumerate()
        .map(|(idx, &ni)| ni * (k - idx as u64))
        .sum();
    let denominator = n_total * (k * (k + 1) / 2);
    Ok(CcValue::new(numerator, denominator))
}

/// Final report: per-level counts, the total, and the metric value (`None`
/// when no squashed access/transmit instruction exists to normalize by).
#[derive(Debug, Clone)]
pub struct CcReport {
    pub k: u8,
    pub n: Vec<u64>,
    pub n_total: u64,
    pub cc: Option<CcValue>,
}

impl CcReport {
    pub fn compute(n: Vec<u64>, n_total: u64, k: u8) -> CcReport {
        let cc = if n_total == 0 {
            None
        } else {
            Some(compute_cc(&n, n_total, k).expect("counts validated by construction"))
        };
        CcReport { k, n, n_total, cc }
    }
}
