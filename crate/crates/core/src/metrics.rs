//! Power loss probability, SNR scaling, frame timing and spectral efficiency.

use std::f64::consts::PI;
use std::time::Duration;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{inner, BeamIndex};
use crate::database::top_k;
use crate::error::{invalid, Error, Result};
use crate::scene::SPEED_OF_LIGHT;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

/// Strongest beam of a row-major power plane; ties go to the smaller `(i, j)`.
pub fn best_beam(powers: &[f64], c_phi: usize) -> Result<BeamIndex> {
    if powers.is_empty() {
        return Err(invalid("empty power plane"));
    }
    Ok(BeamIndex::from_flat(top_k(powers, 1)[0], c_phi))
}

/// `1 − P_s`, with `P_s` the fraction of evaluation points where the best
/// recommended beam reaches the maximum power over the whole codebook.
/// `truth[k]` holds the noiseless powers of every beam at point `k`. A beam
/// tied with the maximum counts as a hit.
pub fn power_loss_probability(truth: &[Vec<f64>], recommended: &[&[BeamIndex]], c_phi: usize) -> Result<f64> {
    if truth.len() != recommended.len() {
        return Err(invalid(format!("{} truth planes for {} recommendation sets", truth.len(), recommended.len())));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("power loss probability over an empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for (powers, rec) in truth.iter().zip(recommended) {
        let best = powers[best_beam(powers, c_phi)?.flat(c_phi)];
        let reached = rec.iter().map(|b| b.flat(c_phi)).filter(|&k| k < powers.len()).any(|k| powers[k] == best);
        if reached {
            hits += 1;
        }
    }
    Ok(1.0 - hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBudget {
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub antenna_efficiency: f64,
    pub distance_m: f64,
}

impl LinkBudget {
    /// 1.76 GHz at 58.68 GHz, −174 dBm/Hz, ζ = 1.
    pub fn reference(distance_m: f64) -> Self {
        Self {
            bandwidth_hz: 1.76e9,
            carrier_hz: 58.68e9,
            noise_psd_dbm_hz: -174.0,
            antenna_efficiency: 1.0,
            distance_m,
        }
    }

    pub fn with_distance(self, distance_m: f64) -> Self {
        Self { distance_m, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bandwidth", self.bandwidth_hz), ("carrier", self.carrier_hz), ("distance", self.distance_m)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.antenna_efficiency > 0.0 && self.antenna_efficiency <= 1.0) {
            return Err(invalid(format!("antenna efficiency must lie in (0, 1], got {}", self.antenna_efficiency)));
        }
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(invalid("noise PSD must be finite"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn noise_psd_w_hz(&self) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_hz)
    }
}

/// `η = Λ²ζ / (8π d² N_0 B)`
pub fn snr_scale(budget: &LinkBudget) -> f64 {
    let lambda = budget.wavelength();
    lambda * lambda * budget.antenna_efficiency
        / (8.0 * PI * budget.distance_m * budget.distance_m * budget.noise_psd_w_hz() * budget.bandwidth_hz)
}

/// Frame structure; kept in integer time so `f_comm` is exact for
/// microsecond-scale slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTiming {
    pub microslot: Duration,
    pub frame: Duration,
}

impl Default for FrameTiming {
    /// 10 µs microslots in a 5 ms frame.
    fn default() -> Self {
        Self { microslot: Duration::from_micros(10), frame: Duration::from_millis(5) }
    }
}

impl FrameTiming {
    pub fn training(&self, n_tr: usize) -> Result<Duration> {
        if self.microslot.is_zero() {
            return Err(invalid("microslot must be positive"));
        }
        let n = u32::try_from(n_tr).map_err(|_| invalid(format!("n_tr {n_tr} too large")))?;
        let t = self.microslot * n;
        if t > self.frame {
            return Err(invalid(format!("training time {t:?} exceeds frame {:?}", self.frame)));
        }
        Ok(t)
    }

    /// `(T_frame − N_tr·δ_S) / T_frame`
    pub fn f_comm(&self, n_tr: usize) -> Result<f64> {
        let train = self.training(n_tr)?;
        Ok((self.frame - train).as_nanos() as f64 / self.frame.as_nanos() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub rate_bps: f64,
    pub throughput_bps: f64,
    pub f_comm: f64,
}

impl Rate {
    /// `R̄ / B` in bit/s/Hz.
    pub fn spectral_efficiency(&self, bandwidth_hz: f64) -> f64 {
        self.throughput_bps / bandwidth_hz
    }
}

/// `R = B·log2(1 + η·P_t·|wᴴh|²)` and `R̄ = R·f_comm`. `h` must carry no
/// path loss of its own; `η` accounts for it.
pub fn spectral_efficiency(
    budget: &LinkBudget,
    timing: &FrameTiming,
    p_t: f64,
    w: &[Complex64],
    h: &[Complex64],
    n_tr: usize,
) -> Result<Rate> {
    budget.validate()?;
    if !(p_t >= 0.0) {
        return Err(invalid(format!("transmit power must be non-negative, got {p_t}")));
    }
    if w.len() != h.len() {
        return Err(invalid(format!("beam has {} entries, channel {}", w.len(), h.len())));
    }
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("beam must have unit norm, got {norm}")));
    }
    let f_comm = timing.f_comm(n_tr)?;
    let gain = inner(w, h).norm_sqr();
    let rate_bps = budget.bandwidth_hz * (snr_scale(budget) * p_t * gain).ln_1p() / std::f64::consts::LN_2;
    Ok(Rate { rate_bps, throughput_bps: rate_bps * f_comm, f_comm })
}
