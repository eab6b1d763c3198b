mod common;

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::time::Duration;

use cocorrec::cochannel::{
    decode, decode_correction, decode_upload, delay_report, device_roundtrip, encode_correction, encode_upload,
    simulate_delay, write_delay_csv, Channel, ChannelConfig, CloudClient, CloudHandle, CloudService, DelayRow, Device,
    RoundTrip, WireMessage, BANDWIDTH_PRESETS_MBPS, HEADER_LEN,
};
use cocorrec::gcn::{CorrectionBundle, GcnConfig, GcnModel};
use cocorrec::numerics::Tensor;
use cocorrec::scn::{ScnConfig, ScnModel};
use cocorrec::Error;
use proptest::prelude::*;
use rand::Rng;

use common::{rng, uniform};

const N: usize = 10;
const D: usize = 64;
const HEADS: usize = 4;

fn gcn_config() -> GcnConfig {
    GcnConfig {
        seq_len: N,
        model_dim: D,
        heads: HEADS,
        hidden: 16,
    }
}

/// Correction network with every weight random so corrections are non-trivial.
fn random_gcn(seed: u64) -> GcnModel {
    let mut gcn = GcnModel::new(gcn_config(), seed).unwrap();
    let mut r = rng(seed);
    for p in gcn.params.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = uniform(&mut r, shape[0], shape[1], 0.2);
    }
    gcn.set_fusion_scalars(0.3, -0.2).unwrap();
    gcn
}

fn scn() -> ScnModel {
    ScnModel::new(
        ScnConfig {
            vocab_size: 50,
            model_dim: D,
            heads: HEADS,
            seq_len: N,
            mini_batch: 5,
        },
        3,
    )
    .unwrap()
}

fn bits(t: &[f32]) -> Vec<u32> {
    t.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn payload_sizes_match_the_link_budget() {
    let up = encode_upload(&Tensor::zeros(&[N, D]), HEADS).unwrap();
    assert_eq!(up.len() - HEADER_LEN, 2560);
    let down = encode_correction(&CorrectionBundle::neutral(&gcn_config())).unwrap();
    assert_eq!(down.len() - HEADER_LEN, 4160);
    assert!(down[HEADER_LEN..].iter().all(|&b| b == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn upload_round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..16, d in 1usize..24) {
        let mut r = rng(seed);
        let h = Tensor::from_fn(n, d, |_, _| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff) * if r.random() { 1.0 } else { -1.0 });
        let (back, heads) = decode_upload(&encode_upload(&h, 2).unwrap()).unwrap();
        prop_assert_eq!(heads, 2);
        prop_assert_eq!(back.shape(), h.shape());
        prop_assert_eq!(bits(back.data()), bits(h.data()));
    }

    #[test]
    fn correction_round_trip_is_bit_exact(seed in any::<u64>()) {
        let cfg = gcn_config();
        let mut r = rng(seed);
        let flat: Vec<f32> = (0..cfg.payload_len()).map(|_| r.random_range(-1e3f32..1e3)).collect();
        let bundle = CorrectionBundle::from_flat(&cfg, &flat, 0.5, 0.25).unwrap();
        let back = decode_correction(&encode_correction(&bundle).unwrap(), 0.5, 0.25).unwrap();
        prop_assert_eq!(bits(&back.to_flat()), bits(&flat));
    }

    #[test]
    fn every_truncation_is_a_protocol_error(cut in 1usize..200) {
        let bytes = encode_correction(&CorrectionBundle::neutral(&gcn_config())).unwrap();
        let r = decode(&bytes[..bytes.len() - cut]);
        prop_assert!(matches!(r, Err(Error::Protocol(_))));
    }
}

#[test]
fn delay_table_cells() {
    let up = [0.51, 0.17, 0.051, 0.026];
    let down = [0.83, 0.28, 0.083, 0.042];
    let mut rows = Vec::new();
    for (i, &mbps) in BANDWIDTH_PRESETS_MBPS.iter().enumerate() {
        let cfg = ChannelConfig::with_bandwidth_mbps(mbps);
        assert!((simulate_delay(2560, &cfg) - up[i]).abs() <= 0.01);
        assert!((simulate_delay(4160, &cfg) - down[i]).abs() <= 0.01);
        let report = delay_report(2560, 4160, &cfg, 0);
        assert_eq!(report.total_ms, report.upload_ms + report.compute_ms + report.download_ms);
        assert!(report.within_tolerance);
        assert_eq!(report, delay_report(2560, 4160, &cfg, 0));
        rows.push(DelayRow {
            bandwidth_mbps: mbps,
            upload_bytes: 2560,
            download_bytes: 4160,
            report,
        });
    }
    assert!((rows[0].report.total_ms - 2.52).abs() <= 0.01);
    let mut csv = Vec::new();
    write_delay_csv(&rows, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
}

#[test]
fn service_answers_and_survives_bad_requests() {
    let gcn = random_gcn(1);
    let h = uniform::<f32>(&mut rng(2), N, D, 1.0);
    let expected = gcn.correct_flat(&h).unwrap();
    let cloud = CloudHandle::spawn("127.0.0.1:0", Arc::new(CloudService::new(gcn))).unwrap();
    let mut client = CloudClient::connect(cloud.addr(), Duration::from_secs(5)).unwrap();

    let mut bad = encode_upload(&h, HEADS).unwrap();
    bad[0] = b'Z';
    assert!(matches!(decode(&client.request(&bad).unwrap()).unwrap(), WireMessage::Error(_)));

    let wrong_shape = encode_upload(&Tensor::zeros(&[N + 1, D]), HEADS).unwrap();
    assert!(matches!(decode(&client.request(&wrong_shape).unwrap()).unwrap(), WireMessage::Error(_)));

    let resp = client.request(&encode_upload(&h, HEADS).unwrap()).unwrap();
    assert_eq!(resp.len() - HEADER_LEN, 4160);
    let bundle = decode_correction(&resp, 0.0, 0.0).unwrap();
    assert_eq!(bits(&bundle.to_flat()), bits(&expected));
    client.close();
    cloud.shutdown().unwrap();
}

#[test]
fn interleaved_clients_get_their_own_corrections() {
    let gcn = random_gcn(4);
    let ha = uniform::<f32>(&mut rng(5), N, D, 1.0);
    let hb = uniform::<f32>(&mut rng(6), N, D, 1.0);
    let (ea, eb) = (gcn.correct_flat(&ha).unwrap(), gcn.correct_flat(&hb).unwrap());
    assert_ne!(bits(&ea), bits(&eb));
    let cloud = CloudHandle::spawn("127.0.0.1:0", Arc::new(CloudService::new(gcn))).unwrap();
    let mut a = CloudClient::connect(cloud.addr(), Duration::from_secs(5)).unwrap();
    let mut b = CloudClient::connect(cloud.addr(), Duration::from_secs(5)).unwrap();
    a.send(&encode_upload(&ha, HEADS).unwrap()).unwrap();
    b.send(&encode_upload(&hb, HEADS).unwrap()).unwrap();
    let rb = decode_correction(&b.receive().unwrap(), 0.0, 0.0).unwrap();
    let ra = decode_correction(&a.receive().unwrap(), 0.0, 0.0).unwrap();
    assert_eq!(bits(&ra.to_flat()), bits(&ea));
    assert_eq!(bits(&rb.to_flat()), bits(&eb));
}

#[test]
fn simulated_4g_link_is_in_time() {
    let gcn = random_gcn(7);
    let service = Arc::new(CloudService::new(gcn));
    let channel = Channel::Simulated {
        service,
        config: ChannelConfig::with_bandwidth_mbps(5.0),
    };
    let h = uniform::<f32>(&mut rng(8), N, D, 1.0);
    match device_roundtrip(&h, HEADS, &channel, 4.21, (0.3, -0.2)) {
        RoundTrip::Corrected { delay: Some(d), .. } => assert!((d.total_ms - 2.524).abs() < 1e-9),
        other => panic!("expected a correction, got {other:?}"),
    }
    assert!(matches!(
        device_roundtrip(&h, HEADS, &channel, 1.0, (0.3, -0.2)),
        RoundTrip::TimedOut { .. }
    ));
}

#[test]
fn timeout_falls_back_to_the_plain_model() {
    let model = scn();
    let ids: Vec<u32> = (1..=N as u32).collect();
    let cands: Vec<u32> = (20..41).collect();
    let pure = model.forward(&ids, &cands, None).unwrap();
    let channel = Channel::Simulated {
        service: Arc::new(CloudService::new(random_gcn(9))),
        config: ChannelConfig::with_bandwidth_mbps(5.0),
    };
    let mut device = Device::new(model, (0.3, -0.2), channel, 1.0);
    let rec = device.recommend(&ids, &cands).unwrap();
    assert!(!rec.corrected);
    assert_eq!(bits(&rec.scores), bits(&pure));
    assert_eq!(device.stats().timeouts, 1);
}

#[test]
fn in_process_link_equals_direct_fusion() {
    let model = scn();
    let gcn = random_gcn(10);
    let ids: Vec<u32> = (5..5 + N as u32).collect();
    let cands: Vec<u32> = (1..30).collect();
    let h = model.hidden_state(&ids).unwrap();
    let direct = model.forward(&ids, &cands, Some(&gcn.bundle(&h).unwrap())).unwrap();
    let pure = model.forward(&ids, &cands, None).unwrap();
    assert_ne!(bits(&direct), bits(&pure));

    let fusion = gcn.fusion_scalars();
    let service = Arc::new(CloudService::new(gcn));
    let mut device = Device::new(model.clone(), fusion, Channel::InProcess(Arc::clone(&service)), 4.21);
    let rec = device.recommend(&ids, &cands).unwrap();
    assert!(rec.corrected);
    assert_eq!(bits(&rec.scores), bits(&direct));

    let cloud = CloudHandle::spawn("127.0.0.1:0", service).unwrap();
    let tcp = Channel::Tcp {
        addr: cloud.addr(),
        connect_timeout: Duration::from_secs(5),
    };
    let mut remote = Device::new(model, fusion, tcp, 10_000.0);
    let rec = remote.recommend(&ids, &cands).unwrap();
    assert!(rec.corrected);
    assert_eq!(bits(&rec.scores), bits(&direct));
}

#[test]
fn transport_failure_falls_back_and_is_counted() {
    let addr: SocketAddr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let model = scn();
    let ids: Vec<u32> = (1..=N as u32).collect();
    let cands: Vec<u32> = (1..12).collect();
    let pure = model.forward(&ids, &cands, None).unwrap();
    let channel = Channel::Tcp {
        addr,
        connect_timeout: Duration::from_millis(200),
    };
    let mut device = Device::new(model, (0.1, 0.1), channel, 5_000.0);
    let rec = device.recommend(&ids, &cands).unwrap();
    assert!(!rec.corrected);
    assert_eq!(bits(&rec.scores), bits(&pure));
    assert_eq!(device.stats().failures, 1);
}
