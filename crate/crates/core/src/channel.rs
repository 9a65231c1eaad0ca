//! AWGN uplink model: Shannon capacity and the per-sample Top-k budget
//! `k = ⌊η·C·T / d⌋`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub bandwidth_hz: f64,
    /// Linear power ratio, not dB.
    pub snr_linear: f64,
    /// Fraction of the link allocated to this client, in (0, 1).
    pub eta: f64,
    /// Transmission time allowed per round, seconds.
    pub time_budget_s: f64,
    /// Bits to encode one logit value and its index.
    pub bits_per_entry: u32,
}

impl ChannelState {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ChannelState";
        if !(self.bandwidth_hz >= 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::input(OP, "bandwidth must be finite and >= 0"));
        }
        if !(self.snr_linear >= 0.0 && self.snr_linear.is_finite()) {
            return Err(Error::input(OP, "SNR must be finite and >= 0"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::input(OP, "eta must lie in (0, 1)"));
        }
        if !(self.time_budget_s > 0.0 && self.time_budget_s.is_finite()) {
            return Err(Error::input(OP, "time budget must be positive"));
        }
        if self.bits_per_entry < 2 {
            return Err(Error::input(OP, "bits_per_entry must be at least 2"));
        }
        Ok(())
    }

    /// `η·C·T`: bits this client may send in one round.
    pub fn bit_budget(&self) -> f64 {
        self.eta * capacity(self) * self.time_budget_s
    }
}

/// `C = B·log₂(1 + SNR)` in bits per second.
pub fn capacity(state: &ChannelState) -> f64 {
    state.bandwidth_hz * (1.0 + state.snr_linear).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// Number of logits per sample the client may send, `1..=dim_c`.
    TopK(usize),
    /// `η·C·T < d`: not even one entry fits; the caller decides what to do.
    Zero,
}

/// Largest `k` with `k·d ≤ η·C·T`, clamped to `dim_c`.
pub fn top_k_budget(state: &ChannelState, dim_c: usize) -> Result<Budget> {
    if dim_c == 0 {
        return Err(Error::input("top_k_budget", "dim_c must be at least 1"));
    }
    let bits = state.bit_budget();
    let d = f64::from(state.bits_per_entry);
    if !(bits >= d) {
        return Ok(Budget::Zero);
    }
    let mut k = (bits / d).floor();
    // floor(bits/d) can land one off when the quotient rounds across an integer
    while k * d > bits {
        k -= 1.0;
    }
    while (k + 1.0) * d <= bits {
        k += 1.0;
    }
    if k < 1.0 {
        return Ok(Budget::Zero);
    }
    let k = if k >= dim_c as f64 { dim_c } else { k as usize };
    Ok(Budget::TopK(k))
}

/// Ranges for per-(client, round) channel draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelConfig {
    pub bandwidth_hz: f64,
    /// Inclusive SNR range in dB; drawn uniformly, then converted to linear.
    pub snr_db: (f64, f64),
    pub eta: (f64, f64),
    pub time_budget_s: f64,
    pub bits_per_entry: u32,
    pub seed: u64,
}

impl Default for ChannelModelConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1.0e6,
            snr_db: (0.0, 20.0),
            eta: (0.1, 0.9),
            time_budget_s: 8.0e-5,
            bits_per_entry: 64,
            seed: 0,
        }
    }
}

impl ChannelModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ChannelModelConfig";
        let (lo, hi) = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::input(OP, "snr_db range must be finite with lo <= hi"));
        }
        let (lo, hi) = self.eta;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::input(OP, "eta range must satisfy 0 < lo <= hi < 1"));
        }
        ChannelState {
            bandwidth_hz: self.bandwidth_hz,
            snr_linear: 1.0,
            eta: lo,
            time_budget_s: self.time_budget_s,
            bits_per_entry: self.bits_per_entry,
        }
        .validate()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Deterministic in `(cfg.seed, client_id, round)`.
pub fn sample_channel_state(cfg: &ChannelModelConfig, client_id: usize, round: u32) -> ChannelState {
    let mut rng = stream_rng(cfg.seed, Stream::Channel, &[client_id as u64, u64::from(round)]);
    let snr_db = uniform(&mut rng, cfg.snr_db);
    let eta = uniform(&mut rng, cfg.eta);
    ChannelState {
        bandwidth_hz: cfg.bandwidth_hz,
        snr_linear: 10f64.powf(snr_db / 10.0),
        eta,
        time_budget_s: cfg.time_budget_s,
        bits_per_entry: cfg.bits_per_entry,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(bandwidth_hz: f64, snr_linear: f64, eta: f64, time_budget_s: f64, d: u32) -> ChannelState {
        ChannelState { bandwidth_hz, snr_linear, eta, time_budget_s, bits_per_entry: d }
    }

    #[test]
    fn capacity_spot_values() {
        assert_eq!(capacity(&state(1e6, 15.0, 0.5, 1.0, 64)), 4e6);
        assert_eq!(capacity(&state(1e6, 1.0, 0.5, 1.0, 64)), 1e6);
        assert_eq!(capacity(&state(0.0, 15.0, 0.5, 1.0, 64)), 0.0);
        assert_eq!(capacity(&state(1e6, 0.0, 0.5, 1.0, 64)), 0.0);
    }

    #[test]
    fn capacity_concavity_instance() {
        let c = |snr| capacity(&state(2.5e5, snr, 0.5, 1.0, 64));
        assert!(c(3.0) + c(0.0) <= 2.0 * c(1.0));
    }

    #[test]
    fn budget_examples() {
        // eta·C·T / d = 0.5 · 4e6 · 1e-3 / 64 = 31.25
        let s = state(1e6, 15.0, 0.5, 1e-3, 64);
        assert_eq!(top_k_budget(&s, 100).unwrap(), Budget::TopK(31));
        assert_eq!(top_k_budget(&s, 10).unwrap(), Budget::TopK(10));
        let tiny = state(1e3, 1.0, 0.5, 1e-3, 64);
        assert_eq!(top_k_budget(&tiny, 10).unwrap(), Budget::Zero);
        assert!(top_k_budget(&s, 0).is_err());
    }

    #[test]
    fn degenerate_ranges_are_constant() {
        let cfg = ChannelModelConfig { snr_db: (10.0, 10.0), eta: (0.3, 0.3), ..Default::default() };
        let a = sample_channel_state(&cfg, 0, 0);
        let b = sample_channel_state(&cfg, 7, 3);
        assert_eq!(a, b);
        assert!((a.snr_linear - 10.0).abs() < 1e-12);
    }

    #[test]
    fn draws_are_deterministic() {
        let cfg = ChannelModelConfig { seed: 42, ..Default::default() };
        assert_eq!(sample_channel_state(&cfg, 3, 9), sample_channel_state(&cfg, 3, 9));
        assert_ne!(sample_channel_state(&cfg, 3, 9), sample_channel_state(&cfg, 3, 10));
    }

    #[test]
    fn snr_db_mean_near_midpoint() {
        let cfg = ChannelModelConfig { snr_db: (5.0, 25.0), seed: 3, ..Default::default() };
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| 10.0 * sample_channel_state(&cfg, i % 100, (i / 100) as u32).snr_linear.log10())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 15.0).abs() <= 0.02 * 15.0, "mean {mean}");
    }

    proptest! {
        #[test]
        fn budget_is_tight(b in 0.0f64..1e7, snr in 0.0f64..1e3, eta in 0.001f64..0.999, t in 1e-6f64..1e-2, d in 2u32..256, c in 1usize..2000) {
            let s = state(b, snr, eta, t, d);
            let bits = s.bit_budget();
            match top_k_budget(&s, c).unwrap() {
                Budget::Zero => prop_assert!(bits < f64::from(d)),
                Budget::TopK(k) => {
                    prop_assert!(k >= 1 && k <= c);
                    if k < c {
                        prop_assert!(k as f64 * f64::from(d) <= bits);
                        prop_assert!(bits < (k + 1) as f64 * f64::from(d));
                    }
                }
            }
        }

        #[test]
        fn budget_is_monotone(b in 0.0f64..1e6, snr in 0.0f64..100.0, eta in 0.01f64..0.5, t in 1e-5f64..1e-3, d in 2u32..128, f in 1.0f64..3.0) {
            let k = |s: &ChannelState| match top_k_budget(s, 10_000).unwrap() { Budget::Zero => 0, Budget::TopK(k) => k };
            let s = state(b, snr, eta, t, d);
            let base = k(&s);
            let more_eta = ChannelState { eta: (eta * f).min(0.999), ..s };
            let more_b = ChannelState { bandwidth_hz: b * f, ..s };
            let more_snr = ChannelState { snr_linear: snr * f, ..s };
            let more_t = ChannelState { time_budget_s: t * f, ..s };
            let wider = ChannelState { bits_per_entry: d + 1, ..s };
            prop_assert!(k(&more_eta) >= base);
            prop_assert!(k(&more_b) >= base);
            prop_assert!(k(&more_snr) >= base);
            prop_assert!(k(&more_t) >= base);
            prop_assert!(k(&wider) <= base);
        }
    }
}
