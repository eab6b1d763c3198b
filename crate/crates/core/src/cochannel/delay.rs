use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BYTES_PER_MB: f64 = 1e6;
/// 4G through 5G link rates.
pub const BANDWIDTH_PRESETS_MBPS: [f64; 4] = [5.0, 15.0, 50.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub bandwidth_bytes_per_sec: f64,
    pub cloud_compute_ms: f64,
    pub tolerance_ms: f64,
    /// Upper bound of uniform extra delay per transfer; zero disables jitter.
    pub jitter_ms: f64,
    pub jitter_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::with_bandwidth_mbps(BANDWIDTH_PRESETS_MBPS[0])
    }
}

impl ChannelConfig {
    pub fn with_bandwidth_mbps(mbps: f64) -> Self {
        Self {
            bandwidth_bytes_per_sec: mbps * BYTES_PER_MB,
            cloud_compute_ms: 1.18,
            tolerance_ms: 4.21,
            jitter_ms: 0.0,
            jitter_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.bandwidth_bytes_per_sec, self.cloud_compute_ms, self.tolerance_ms]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || !(self.jitter_ms >= 0.0) {
            return Err(Error::config(format!("channel settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Transfer time in milliseconds for `size_bytes` at the configured bandwidth.
pub fn simulate_delay(size_bytes: usize, config: &ChannelConfig) -> f64 {
    size_bytes as f64 / config.bandwidth_bytes_per_sec * 1e3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub upload_ms: f64,
    pub compute_ms: f64,
    pub download_ms: f64,
    pub total_ms: f64,
    pub within_tolerance: bool,
}

/// Delay from hidden-state upload to correction arrival. With jitter enabled
/// each request index draws its own reproducible extra delays.
pub fn delay_report(upload_bytes: usize, download_bytes: usize, config: &ChannelConfig, request: u64) -> DelayReport {
    let mut upload_ms = simulate_delay(upload_bytes, config);
    let mut download_ms = simulate_delay(download_bytes, config);
    if config.jitter_ms > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.jitter_seed ^ request.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        upload_ms += rng.random_range(0.0..config.jitter_ms);
        download_ms += rng.random_range(0.0..config.jitter_ms);
    }
    let compute_ms = config.cloud_compute_ms;
    let total_ms = upload_ms + compute_ms + download_ms;
    DelayReport {
        upload_ms,
        compute_ms,
        download_ms,
        total_ms,
        within_tolerance: total_ms <= config.tolerance_ms,
    }
}

/// One bandwidth column of the delay table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub bandwidth_mbps: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    #[serde(flatten)]
    pub report: DelayReport,
}

pub fn write_delay_csv<W: Write>(rows: &[DelayRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "bandwidth_mbps",
        "upload_bytes",
        "download_bytes",
        "upload_ms",
        "compute_ms",
        "download_ms",
        "total_ms",
        "within_tolerance",
    ])
    .map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record([
            r.bandwidth_mbps.to_string(),
            r.upload_bytes.to_string(),
            r.download_bytes.to_string(),
            format!("{:.4}", r.report.upload_ms),
            format!("{:.4}", r.report.compute_ms),
            format!("{:.4}", r.report.download_ms),
            format!("{:.4}", r.report.total_ms),
            r.report.within_tolerance.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_fixtures() {
        let c = ChannelConfig::with_bandwidth_mbps(5.0);
        assert!((simulate_delay(2560, &c) - 0.512).abs() < 1e-12);
        assert!((simulate_delay(4160, &c) - 0.832).abs() < 1e-12);
        let fast = ChannelConfig::with_bandwidth_mbps(100.0);
        assert!((simulate_delay(2560, &fast) - 0.0256).abs() < 1e-12);
    }

    #[test]
    fn jitter_is_seeded() {
        let mut c = ChannelConfig::default();
        c.jitter_ms = 0.5;
        assert_eq!(delay_report(100, 100, &c, 3), delay_report(100, 100, &c, 3));
        assert_ne!(delay_report(100, 100, &c, 3), delay_report(100, 100, &c, 4));
    }

    #[test]
    fn zero_bandwidth_rejected() {
        let mut c = ChannelConfig::default();
        c.bandwidth_bytes_per_sec = 0.0;
        assert!(c.validate().is_err());
    }
}
