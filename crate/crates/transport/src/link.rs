//! Link impairment model: per-frame delay, jitter, bandwidth and loss.
//!
//! The default profile reproduces a 5G standalone link as measured on a
//! desk test bed: 15–37 ms ping round trips (7.5–18.5 ms one way),
//! 2.5–18.31 ms jitter, 306.01 Mbps down and 52.43 Mbps up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("invalid link profile: {0}")]
    InvalidProfile(String),
    #[error("frames must be at least one byte long")]
    EmptyFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Towards the cloud.
    Up,
    Down,
}

impl Direction {
    fn slot(self) -> usize {
        match self {
            Direction::Up => 0,
            Direction::Down => 1,
        }
    }
}

/// One-way delay ~ Uniform[delay_min_ms, delay_max_ms]; jitter ~
/// Exponential(jitter_mean_ms) truncated at jitter_cap_ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub delay_min_ms: f64,
    pub delay_max_ms: f64,
    pub jitter_mean_ms: f64,
    pub jitter_cap_ms: f64,
    pub bw_up_bps: f64,
    pub bw_down_bps: f64,
    pub loss_rate: f64,
    pub seed: u64,
}

pub fn default_5g_sa_profile() -> LinkProfile {
    LinkProfile {
        delay_min_ms: 7.5,
        delay_max_ms: 18.5,
        jitter_mean_ms: 5.0,
        jitter_cap_ms: 18.31,
        bw_up_bps: 52.43e6,
        bw_down_bps: 306.01e6,
        loss_rate: 0.0,
        seed: 0,
    }
}

impl Default for LinkProfile {
    fn default() -> Self {
        default_5g_sa_profile()
    }
}

impl LinkProfile {
    /// No delay, no jitter, unlimited bandwidth.
    pub fn zero_impairment() -> Self {
        Self {
            delay_min_ms: 0.0,
            delay_max_ms: 0.0,
            jitter_mean_ms: 0.0,
            jitter_cap_ms: 0.0,
            bw_up_bps: f64::INFINITY,
            bw_down_bps: f64::INFINITY,
            loss_rate: 0.0,
            seed: 0,
        }
    }

    /// No delay or jitter, finite symmetric bandwidth in bits/s.
    pub fn zero_impairment_with_bandwidth(bps: f64) -> Self {
        Self {
            bw_up_bps: bps,
            bw_down_bps: bps,
            ..Self::zero_impairment()
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |m: &str| Err(LinkError::InvalidProfile(m.to_string()));
        if !(self.delay_min_ms >= 0.0 && self.delay_min_ms.is_finite()) {
            return bad("delay_min_ms must be finite and >= 0");
        }
        if !(self.delay_max_ms >= self.delay_min_ms && self.delay_max_ms.is_finite()) {
            return bad("delay_max_ms must be finite and >= delay_min_ms");
        }
        if !(self.jitter_mean_ms >= 0.0 && self.jitter_mean_ms.is_finite()) {
            return bad("jitter_mean_ms must be finite and >= 0");
        }
        if !(self.jitter_cap_ms >= 0.0) {
            return bad("jitter_cap_ms must be >= 0");
        }
        if !(self.bw_up_bps > 0.0 && self.bw_down_bps > 0.0) {
            return bad("bandwidths must be > 0");
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return bad("loss_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn bandwidth(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Up => self.bw_up_bps,
            Direction::Down => self.bw_down_bps,
        }
    }

    /// Serialization time in seconds for `len` bytes.
    pub fn serialization_s(&self, len: usize, dir: Direction) -> f64 {
        8.0 * len as f64 / self.bandwidth(dir)
    }

    /// Maps u ∈ [0, 1) to a pre-jitter one-way delay in ms.
    pub fn delay_quantile(&self, u: f64) -> f64 {
        self.delay_min_ms + u * (self.delay_max_ms - self.delay_min_ms)
    }

    /// Inverse CDF of the truncated exponential jitter, in ms.
    pub fn jitter_quantile(&self, u: f64) -> f64 {
        let mean = self.jitter_mean_ms;
        if mean == 0.0 || self.jitter_cap_ms == 0.0 {
            return 0.0;
        }
        let mass = -(-self.jitter_cap_ms / mean).exp_m1();
        (-mean * (-u * mass).ln_1p()).min(self.jitter_cap_ms)
    }

    /// Mean of the truncated jitter distribution, in ms.
    pub fn jitter_mean_truncated_ms(&self) -> f64 {
        let (mu, c) = (self.jitter_mean_ms, self.jitter_cap_ms);
        if mu == 0.0 || c == 0.0 {
            return 0.0;
        }
        if c.is_infinite() {
            return mu;
        }
        mu - c * (-c / mu).exp() / -(-c / mu).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheduled {
    /// Delivery instant, seconds on the link clock.
    pub at: f64,
    pub serialization_s: f64,
    pub delay_ms: f64,
    pub jitter_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Delivered(Scheduled),
    Dropped,
}

impl Delivery {
    pub fn at(&self) -> Option<f64> {
        match self {
            Delivery::Delivered(s) => Some(s.at),
            Delivery::Dropped => None,
        }
    }
}

/// Deterministic per-link scheduler with one FIFO queue per direction.
#[derive(Debug, Clone)]
pub struct LinkScheduler {
    profile: LinkProfile,
    rng: ChaCha8Rng,
    busy_until: [f64; 2],
    last_delivery: [f64; 2],
}

impl LinkScheduler {
    pub fn new(profile: LinkProfile) -> Result<Self, LinkError> {
        profile.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            profile,
            busy_until: [f64::NEG_INFINITY; 2],
            last_delivery: [f64::NEG_INFINITY; 2],
        })
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    /// Every frame consumes three draws (loss, delay, jitter) so one drop
    /// does not shift the randomness of later frames.
    pub fn schedule(&mut self, frame_len: usize, dir: Direction, now: f64) -> Result<Delivery, LinkError> {
        if frame_len == 0 {
            return Err(LinkError::EmptyFrame);
        }
        let u_loss: f64 = self.rng.random();
        let u_delay: f64 = self.rng.random();
        let u_jitter: f64 = self.rng.random();
        if u_loss < self.profile.loss_rate {
            return Ok(Delivery::Dropped);
        }
        let slot = dir.slot();
        let ser = self.profile.serialization_s(frame_len, dir);
        let start = now.max(self.busy_until[slot]);
        self.busy_until[slot] = start + ser;
        let delay_ms = self.profile.delay_quantile(u_delay);
        let jitter_ms = self.profile.jitter_quantile(u_jitter);
        // TCP keeps order, so a frame never overtakes its predecessor
        let at = (start + ser + (delay_ms + jitter_ms) / 1e3).max(self.last_delivery[slot]);
        self.last_delivery[slot] = at;
        Ok(Delivery::Delivered(Scheduled {
            at,
            serialization_s: ser,
            delay_ms,
            jitter_ms,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_matches_measurements() {
        let p = default_5g_sa_profile();
        assert_eq!(p.bw_up_bps, 52.43e6);
        assert_eq!(p.bw_down_bps, 306.01e6);
        assert_eq!((p.delay_min_ms * 2.0, p.delay_max_ms * 2.0), (15.0, 37.0));
        assert_eq!(p.jitter_cap_ms, 18.31);
        assert_eq!(p.loss_rate, 0.0);
        p.validate().unwrap();
    }

    #[test]
    fn jitter_quantile_bounds() {
        let p = default_5g_sa_profile();
        assert_eq!(p.jitter_quantile(0.0), 0.0);
        assert!((p.jitter_quantile(1.0 - 1e-16) - 18.31).abs() < 1e-9);
        let median = p.jitter_quantile(0.5);
        assert!(median > 0.0 && median < 5.0 * 2f64.ln());
        assert_eq!(LinkProfile::zero_impairment().jitter_quantile(0.7), 0.0);
    }

    #[test]
    fn truncated_mean_by_quadrature() {
        let p = default_5g_sa_profile();
        let n = 200_000;
        let q: f64 = (0..n)
            .map(|i| p.jitter_quantile((i as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((q - p.jitter_mean_truncated_ms()).abs() < 1e-4);
    }

    #[test]
    fn zero_impairment_is_identity() {
        let mut s = LinkScheduler::new(LinkProfile::zero_impairment()).unwrap();
        assert_eq!(s.schedule(1500, Direction::Up, 3.25).unwrap().at(), Some(3.25));
    }

    #[test]
    fn megabyte_uplink_serialization() {
        let mut s = LinkScheduler::new(default_5g_sa_profile()).unwrap();
        let Delivery::Delivered(d) = s.schedule(1 << 20, Direction::Up, 0.0).unwrap() else {
            panic!("dropped")
        };
        assert!((d.serialization_s - 8.0 * 1048576.0 / 52.43e6).abs() < 1e-12);
        assert!((d.serialization_s - 0.15999).abs() < 1e-5);
    }

    #[test]
    fn same_instant_frames_stay_ordered() {
        let mut s = LinkScheduler::new(default_5g_sa_profile()).unwrap();
        let a = s.schedule(100, Direction::Down, 1.0).unwrap().at().unwrap();
        let b = s.schedule(100, Direction::Down, 1.0).unwrap().at().unwrap();
        assert!(b >= a);
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = default_5g_sa_profile();
        p.loss_rate = 1.0;
        assert!(LinkScheduler::new(p).is_err());
        let mut p = default_5g_sa_profile();
        p.delay_max_ms = 1.0;
        assert!(p.validate().is_err());
        assert_eq!(
            LinkScheduler::new(default_5g_sa_profile())
                .unwrap()
                .schedule(0, Direction::Up, 0.0),
            Err(LinkError::EmptyFrame)
        );
    }
}
