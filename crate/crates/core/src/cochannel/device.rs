use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::delay::{delay_report, ChannelConfig, DelayReport};
use super::service::{CloudClient, CloudService};
use super::wire::{decode_correction, encode_upload, HEADER_LEN};
use crate::gcn::CorrectionBundle;
use crate::numerics::{softmax, Tensor};
use crate::scn::ScnModel;
use crate::Result;

/// Transport between the device and the correction service.
#[derive(Clone)]
pub enum Channel {
    /// Zero-latency link; the correction is always in time.
    InProcess(Arc<CloudService>),
    /// In-process service with delays taken from the analytic link model.
    Simulated { service: Arc<CloudService>, config: ChannelConfig },
    /// Length-prefixed frames over TCP, timed against the wall clock.
    Tcp { addr: SocketAddr, connect_timeout: Duration },
}

#[derive(Clone, Debug, PartialEq)]
pub enum RoundTrip {
    Corrected { bundle: CorrectionBundle, delay: Option<DelayReport> },
    TimedOut { delay: Option<DelayReport> },
    Failed(String),
}

/// A request already issued on a channel.
enum Pending {
    Ready(RoundTrip),
    InFlight(mpsc::Receiver<Result<CorrectionBundle>>),
}

fn exchange(service: &CloudService, upload: &[u8], fusion: (f32, f32)) -> (Result<CorrectionBundle>, usize) {
    let response = service.handle(upload);
    (decode_correction(&response, fusion.0, fusion.1), response.len())
}

fn issue(hidden: &Tensor<f32>, heads: usize, channel: &Channel, fusion: (f32, f32), tolerance_ms: f64, request: u64) -> Pending {
    let upload = match encode_upload(hidden, heads) {
        Ok(u) => u,
        Err(e) => return Pending::Ready(RoundTrip::Failed(e.to_string())),
    };
    match channel {
        Channel::InProcess(service) => Pending::Ready(match exchange(service, &upload, fusion).0 {
            Ok(bundle) => RoundTrip::Corrected { bundle, delay: None },
            Err(e) => RoundTrip::Failed(e.to_string()),
        }),
        Channel::Simulated { service, config } => {
            let (bundle, response_len) = exchange(service, &upload, fusion);
            let delay = delay_report(
                upload.len() - HEADER_LEN,
                response_len.saturating_sub(HEADER_LEN),
                config,
                request,
            );
            Pending::Ready(match bundle {
                Ok(bundle) if delay.total_ms <= tolerance_ms => RoundTrip::Corrected {
                    bundle,
                    delay: Some(delay),
                },
                Ok(_) => RoundTrip::TimedOut { delay: Some(delay) },
                Err(e) => RoundTrip::Failed(e.to_string()),
            })
        }
        Channel::Tcp { addr, connect_timeout } => {
            let (tx, rx) = mpsc::channel();
            let (addr, timeout) = (*addr, *connect_timeout);
            thread::spawn(move || {
                let result = CloudClient::connect(addr, timeout)
                    .and_then(|mut c| c.request(&upload))
                    .and_then(|resp| decode_correction(&resp, fusion.0, fusion.1));
                let _ = tx.send(result);
            });
            Pending::InFlight(rx)
        }
    }
}

fn settle(pending: Pending, deadline: Instant) -> RoundTrip {
    match pending {
        Pending::Ready(r) => r,
        Pending::InFlight(rx) => match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(Ok(bundle)) => RoundTrip::Corrected { bundle, delay: None },
            Ok(Err(e)) => RoundTrip::Failed(e.to_string()),
            Err(mpsc::RecvTimeoutError::Timeout) => RoundTrip::TimedOut { delay: None },
            Err(mpsc::RecvTimeoutError::Disconnected) => RoundTrip::Failed("transport thread exited".into()),
        },
    }
}

/// Uploads `hidden` and waits at most `tolerance_ms` for its correction.
/// `fusion` holds the device's fusion scalars (P, Q).
pub fn device_roundtrip(
    hidden: &Tensor<f32>,
    heads: usize,
    channel: &Channel,
    tolerance_ms: f64,
    fusion: (f32, f32),
) -> RoundTrip {
    let deadline = Instant::now() + Duration::from_secs_f64(tolerance_ms.max(0.0) / 1e3);
    settle(issue(hidden, heads, channel, fusion, tolerance_ms, 0), deadline)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub requests: u64,
    pub corrected: u64,
    pub timeouts: u64,
    pub failures: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    /// Softmax over the requested candidates.
    pub scores: Vec<f32>,
    pub corrected: bool,
    pub delay: Option<DelayReport>,
}

/// On-device model with a correction channel. Fast weights restart from the
/// trained initial state on every request.
pub struct Device {
    scn: ScnModel,
    fusion: (f32, f32),
    channel: Channel,
    tolerance_ms: f64,
    stats: DeviceStats,
}

impl Device {
    pub fn new(scn: ScnModel, fusion: (f32, f32), channel: Channel, tolerance_ms: f64) -> Self {
        Self {
            scn,
            fusion,
            channel,
            tolerance_ms,
            stats: DeviceStats::default(),
        }
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    pub fn model(&self) -> &ScnModel {
        &self.scn
    }

    /// Scores `candidates` after `ids`, fusing the cloud correction if it
    /// arrives before the deadline and falling back to the plain model otherwise.
    pub fn recommend(&mut self, ids: &[u32], candidates: &[u32]) -> Result<Recommendation> {
        let hidden = self.scn.hidden_state(ids)?;
        let deadline = Instant::now() + Duration::from_secs_f64(self.tolerance_ms.max(0.0) / 1e3);
        let pending = issue(
            &hidden,
            self.scn.config.heads,
            &self.channel,
            self.fusion,
            self.tolerance_ms,
            self.stats.requests,
        );
        self.stats.requests += 1;
        let fallback = self.scn.forward(ids, candidates, None)?;
        match settle(pending, deadline) {
            RoundTrip::Corrected { bundle, delay } => {
                let logits = self.scn.logits_from_hidden(&hidden, candidates, Some(&bundle))?;
                self.stats.corrected += 1;
                Ok(Recommendation {
                    scores: softmax(&logits)?.into_data(),
                    corrected: true,
                    delay,
                })
            }
            RoundTrip::TimedOut { delay } => {
                self.stats.timeouts += 1;
                Ok(Recommendation {
                    scores: fallback,
                    corrected: false,
                    delay,
                })
            }
            RoundTrip::Failed(reason) => {
                log::warn!("correction unavailable: {reason}");
                self.stats.failures += 1;
                Ok(Recommendation {
                    scores: fallback,
                    corrected: false,
                    delay: None,
                })
            }
        }
    }
}
