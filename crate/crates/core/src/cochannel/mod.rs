//! Device-cloud correction loop: wire codec, delay simulation, the cloud
//! service and the device-side round trip with a tolerance deadline.

mod delay;
mod device;
mod service;
mod wire;

pub use delay::{delay_report, simulate_delay, write_delay_csv, ChannelConfig, DelayReport, DelayRow, BANDWIDTH_PRESETS_MBPS, BYTES_PER_MB};
pub use device::{device_roundtrip, Channel, Device, DeviceStats, Recommendation, RoundTrip};
pub use service::{serve_cloud, CloudClient, CloudHandle, CloudService};
pub use wire::{
    decode, decode_correction, decode_upload, encode_correction, encode_error, encode_upload, read_frame, write_frame,
    MessageKind, WireMessage, HEADER_LEN, MAGIC, MAX_FRAME_LEN, WIRE_VERSION,
};
