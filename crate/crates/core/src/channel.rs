//! Link budget, jamming and the attacker's radiometer.
//!
//! All links are deterministic path loss `d^-beta` plus AWGN; there is no
//! fading. The jammer draws its power uniformly on `[0, p_J_max]` every slot
//! and never coordinates with the server.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("server power {0} W outside [0, {1}] W")]
    ServerPower(f64, f64),
    #[error("jammer power {0} W outside [0, {1}] W")]
    JammerPower(f64, f64),
    #[error("invalid link geometry: {0}")]
    Geometry(String),
    #[error("invalid radio parameters: {0}")]
    Radio(String),
    #[error("invalid detector: {0}")]
    Detector(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    User,
    Attacker,
}

/// Distances in meters between server (S), jammer (J), user (U) and one
/// attacker (A).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkGeometry {
    pub d_su: f64,
    pub d_sa: f64,
    pub d_ju: f64,
    pub d_ja: f64,
    pub beta: f64,
}

impl Default for LinkGeometry {
    fn default() -> Self {
        Self { d_su: 1.0, d_sa: 1.2, d_ju: 1.8, d_ja: 1.2, beta: 2.0 }
    }
}

impl LinkGeometry {
    pub fn validate(&self) -> Result<(), ChannelError> {
        for (name, d) in [("d_su", self.d_su), ("d_sa", self.d_sa), ("d_ju", self.d_ju), ("d_ja", self.d_ja)] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(ChannelError::Geometry(format!("{name} = {d} must be > 0")));
            }
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(ChannelError::Geometry(format!("beta = {} must be >= 1", self.beta)));
        }
        Ok(())
    }

    /// Same user side, different attacker position.
    pub fn with_attacker(&self, d_sa: f64, d_ja: f64) -> Self {
        Self { d_sa, d_ja, ..*self }
    }

    /// Path gains `(server -> x, jammer -> x)`.
    pub fn gains(&self, at: Receiver) -> (f64, f64) {
        let (ds, dj) = match at {
            Receiver::User => (self.d_su, self.d_ju),
            Receiver::Attacker => (self.d_sa, self.d_ja),
        };
        (ds.powf(-self.beta), dj.powf(-self.beta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioParams {
    pub bandwidth_hz: f64,
    pub sigma2_user_w: f64,
    pub sigma2_attacker_w: f64,
    pub p_s_max_w: f64,
    pub p_j_max_w: f64,
    pub latency_threshold_s: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 2_000.0,
            sigma2_user_w: dbm_to_watts(-30.0),
            sigma2_attacker_w: dbm_to_watts(-30.0),
            p_s_max_w: 1.0,
            p_j_max_w: 1.0,
            latency_threshold_s: 0.2,
        }
    }
}

impl RadioParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        for (name, v) in [
            ("bandwidth_hz", self.bandwidth_hz),
            ("sigma2_user_w", self.sigma2_user_w),
            ("sigma2_attacker_w", self.sigma2_attacker_w),
            ("p_s_max_w", self.p_s_max_w),
            ("p_j_max_w", self.p_j_max_w),
            ("latency_threshold_s", self.latency_threshold_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ChannelError::Radio(format!("{name} = {v} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn noise(&self, at: Receiver) -> f64 {
        match at {
            Receiver::User => self.sigma2_user_w,
            Receiver::Attacker => self.sigma2_attacker_w,
        }
    }
}

/// How the attacker sets its energy threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorPolicy {
    /// Knows the instantaneous jamming power; threshold sits `margin_w` above
    /// the jamming-plus-noise floor.
    OracleMargin { margin_w: f64 },
    /// Knows only the jamming distribution; threshold is the `false_alarm_q`
    /// quantile of the idle-slot received power.
    Quantile { false_alarm_q: f64 },
}

impl Default for DetectorPolicy {
    fn default() -> Self {
        DetectorPolicy::Quantile { false_alarm_q: 0.95 }
    }
}

impl DetectorPolicy {
    pub const DEFAULT_MARGIN_W: f64 = 0.01;

    pub fn validate(&self) -> Result<(), ChannelError> {
        match *self {
            DetectorPolicy::OracleMargin { margin_w } if !(margin_w >= 0.0 && margin_w.is_finite()) => {
                Err(ChannelError::Detector(format!("margin_w = {margin_w} must be >= 0")))
            }
            DetectorPolicy::Quantile { false_alarm_q } if !(false_alarm_q > 0.0 && false_alarm_q < 1.0) => {
                Err(ChannelError::Detector(format!("false_alarm_q = {false_alarm_q} must be in (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    let exp = (dbm - 30.0) / 10.0;
    if exp.fract() == 0.0 && exp.abs() < 300.0 {
        // Integer decades: 1 / 10^n is correctly rounded, so -30 dBm is
        // exactly the literal 1e-6.
        let n = exp as i32;
        if n < 0 {
            1.0 / 10f64.powi(-n)
        } else {
            10f64.powi(n)
        }
    } else {
        10f64.powf(exp)
    }
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

fn check_powers(p_s: f64, p_j: f64, radio: &RadioParams) -> Result<(), ChannelError> {
    if !(0.0..=radio.p_s_max_w).contains(&p_s) {
        return Err(ChannelError::ServerPower(p_s, radio.p_s_max_w));
    }
    if !(0.0..=radio.p_j_max_w).contains(&p_j) {
        return Err(ChannelError::JammerPower(p_j, radio.p_j_max_w));
    }
    Ok(())
}

/// Total received power `p_S d_S^-beta + p_J d_J^-beta + sigma^2` at `at`.
pub fn received_power(
    p_s: f64,
    p_j: f64,
    geom: &LinkGeometry,
    at: Receiver,
    radio: &RadioParams,
) -> Result<f64, ChannelError> {
    check_powers(p_s, p_j, radio)?;
    let (gs, gj) = geom.gains(at);
    Ok(p_s * gs + p_j * gj + radio.noise(at))
}

/// Shannon rate in bit/s with jamming treated as noise.
pub fn downlink_rate(
    p_s: f64,
    p_j: f64,
    geom: &LinkGeometry,
    at: Receiver,
    radio: &RadioParams,
) -> Result<f64, ChannelError> {
    check_powers(p_s, p_j, radio)?;
    if p_s == 0.0 {
        return Ok(0.0);
    }
    let (gs, gj) = geom.gains(at);
    let sinr = p_s * gs / (p_j * gj + radio.noise(at));
    Ok(radio.bandwidth_hz * (1.0 + sinr).log2())
}

/// Seconds needed to push `payload_bits` at `rate`; infinite at zero rate.
pub fn latency(payload_bits: u32, rate: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        f64::from(payload_bits) / rate
    }
}

/// Delivery succeeds when the latency does not exceed the threshold.
pub fn within_deadline(latency_s: f64, radio: &RadioParams) -> bool {
    latency_s <= radio.latency_threshold_s
}

pub fn jammer_draw<R: Rng + ?Sized>(rng: &mut R, radio: &RadioParams) -> f64 {
    rng.random::<f64>() * radio.p_j_max_w
}

/// Energy threshold `epsilon_n` for the current slot.
pub fn detector_threshold(policy: &DetectorPolicy, p_j_current: f64, geom: &LinkGeometry, radio: &RadioParams) -> f64 {
    let (_, gj) = geom.gains(Receiver::Attacker);
    let floor = radio.sigma2_attacker_w;
    match *policy {
        DetectorPolicy::OracleMargin { margin_w } => floor + p_j_current * gj + margin_w,
        // Quantile of Uniform[0, p_max] scaled by the jammer gain.
        DetectorPolicy::Quantile { false_alarm_q } => floor + false_alarm_q * radio.p_j_max_w * gj,
    }
}

/// Radiometer decision: `true` when `zeta_a >= epsilon_n`.
pub fn detect(zeta_a: f64, epsilon_n: f64) -> bool {
    zeta_a >= epsilon_n
}
