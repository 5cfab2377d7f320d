//! FDMA uplink channel model: distance path loss, Rayleigh fading, Shannon
//! rate and delay against a per-round budget.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Two,
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub total_bandwidth_hz: f64,
    pub pathloss_exponent: f64,
    pub pathloss_ref: f64,
    pub log_base: LogBase,
}

impl Default for LinkBudget {
    fn default() -> Self {
        LinkBudget {
            tx_power_dbm: 30.0,
            noise_psd_dbm_hz: -143.0,
            total_bandwidth_hz: 1e8,
            pathloss_exponent: 2.0,
            pathloss_ref: 1e-3,
            log_base: LogBase::Two,
        }
    }
}

impl LinkBudget {
    pub fn tx_power_w(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    pub fn noise_psd_w_hz(&self) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_hz)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_bandwidth_hz > 0.0) {
            return Err(Error::config("link.total_bandwidth_hz", "must be > 0"));
        }
        for (name, v) in [
            ("link.tx_power_dbm", self.tx_power_dbm),
            ("link.noise_psd_dbm_hz", self.noise_psd_dbm_hz),
            ("link.pathloss_exponent", self.pathloss_exponent),
        ] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if !(self.pathloss_ref > 0.0) {
            return Err(Error::config("link.pathloss_ref", "must be > 0"));
        }
        Ok(())
    }
}

/// Channel power gain of one device in one round (path loss times fading).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraw {
    pub distance_m: f64,
    pub gain: f64,
}

pub fn path_loss(distance_m: f64, budget: &LinkBudget) -> f64 {
    budget.pathloss_ref * distance_m.powf(-budget.pathloss_exponent)
}

/// Path loss times an `Exp(1)` fading power.
pub fn sample_channel<R: Rng + ?Sized>(distance_m: f64, budget: &LinkBudget, rng: &mut R) -> ChannelDraw {
    let fading: f64 = Exp1.sample(rng);
    channel_with_fading(distance_m, budget, fading)
}

pub fn channel_with_fading(distance_m: f64, budget: &LinkBudget, fading: f64) -> ChannelDraw {
    ChannelDraw {
        distance_m,
        gain: path_loss(distance_m, budget) * fading,
    }
}

/// `W log(1 + P g / (W N0))` in bits/s (nats/s with [`LogBase::E`]).
pub fn rate_bps(bandwidth_hz: f64, budget: &LinkBudget, gain: f64) -> f64 {
    rate_from_rx_power(
        bandwidth_hz,
        budget.tx_power_w() * gain,
        budget.noise_psd_w_hz(),
        budget.log_base,
    )
}

/// Rate from received power `P g` (watts) and noise PSD (W/Hz).
pub fn rate_from_rx_power(bandwidth_hz: f64, rx_power_w: f64, noise_psd: f64, base: LogBase) -> f64 {
    if bandwidth_hz <= 0.0 || rx_power_w <= 0.0 {
        return 0.0;
    }
    let snr = rx_power_w / (bandwidth_hz * noise_psd);
    let nats = if snr.is_finite() {
        snr.ln_1p()
    } else {
        // W so small that the SNR overflows; log(1 + s) = log(s) there
        rx_power_w.ln() - bandwidth_hz.ln() - noise_psd.ln()
    };
    match base {
        LogBase::Two => bandwidth_hz * nats / std::f64::consts::LN_2,
        LogBase::E => bandwidth_hz * nats,
    }
}

/// Seconds to push `bits` at `rate`; `f64::INFINITY` when the rate is zero.
pub fn tx_delay(bits: u64, rate_bps: f64) -> f64 {
    if rate_bps > 0.0 {
        bits as f64 / rate_bps
    } else {
        f64::INFINITY
    }
}

pub fn transmission_ok(bits: u64, bandwidth_hz: f64, budget: &LinkBudget, gain: f64, tau: f64) -> bool {
    tx_delay(bits, rate_bps(bandwidth_hz, budget, gain)) <= tau
}

/// Area-uniform placement in the annulus `[r_min, r_max]`.
pub fn place_devices<R: Rng + ?Sized>(n: usize, r_min: f64, r_max: f64, rng: &mut R) -> Vec<f64> {
    let (a, b) = (r_min * r_min, r_max * r_max);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (a + u * (b - a)).sqrt()
        })
        .collect()
}

/// One line of a channel trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub round: usize,
    pub device: usize,
    pub distance_m: f64,
    pub gain: f64,
}

/// Recorded channels keyed by `(round, device)`, for replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelTrace {
    records: BTreeMap<(usize, usize), ChannelRecord>,
}

impl ChannelTrace {
    pub fn insert(&mut self, rec: ChannelRecord) {
        self.records.insert((rec.round, rec.device), rec);
    }

    pub fn get(&self, round: usize, device: usize) -> Option<&ChannelRecord> {
        self.records.get(&(round, device))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ChannelRecord> {
        self.records.values()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in self.records.values() {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut trace = ChannelTrace::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ChannelRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            trace.insert(rec);
        }
        Ok(trace)
    }
}
