mod common;

use common::traces::random_trace;
use leopard_core::simulator::*;
use leopard_core::Error;

fn bytes(t: &WorkloadTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    t.write_to(&mut buf).unwrap();
    buf
}

fn trace_field(r: leopard_core::Result<WorkloadTrace>) -> String {
    match r {
        Err(Error::Trace { field, .. }) => field,
        other => panic!("expected a trace error, got {other:?}"),
    }
}

/// Rewrites the JSON header of a serialized trace.
fn edit_header(buf: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&buf[12..12 + len]).unwrap();
    f(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = buf[..8].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buf[12 + len..]);
    out
}

#[test]
fn round_trip_is_lossless() {
    for seed in 0..30 {
        let t = random_trace(seed);
        let buf = bytes(&t);
        assert_eq!(&buf[..8], &TRACE_MAGIC);
        assert_eq!(WorkloadTrace::read_from(buf.as_slice()).unwrap(), t);
        assert_eq!(bytes(&t), buf);
    }
}

#[test]
fn file_round_trip() {
    let t = synthetic_trace(&SyntheticSpec::memn2n()).unwrap();
    let path = std::env::temp_dir().join(format!("leopard-trace-{}.bin", std::process::id()));
    t.save(&path).unwrap();
    assert_eq!(WorkloadTrace::load(&path).unwrap(), t);
    std::fs::remove_file(&path).unwrap();
    assert!(matches!(WorkloadTrace::load(&path), Err(Error::Io(_))));
}

#[test]
fn header_is_self_describing() {
    let buf = bytes(&random_trace(3));
    edit_header(&buf, |h| {
        assert_eq!(h["format"], TRACE_FORMAT);
        assert_eq!(h["version"], TRACE_VERSION);
        assert_eq!(h["endianness"], "little");
        assert_eq!(h["payload_dtype"], "i32");
        assert!(h["layers"][0]["threshold"].is_number());
        assert!(h["layers"][0]["heads"][0]["valid_len"].is_number());
    });
}

#[test]
fn corrupt_files_name_the_bad_field() {
    let t = random_trace(5);
    let buf = bytes(&t);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert_eq!(trace_field(WorkloadTrace::read_from(bad.as_slice())), "magic");
    assert_eq!(trace_field(WorkloadTrace::read_from(&buf[..4])), "magic");
    assert!(trace_field(WorkloadTrace::read_from(&buf[..buf.len() - 1])).contains(".v"));
    let mut long = buf.clone();
    long.push(0);
    assert_eq!(trace_field(WorkloadTrace::read_from(long.as_slice())), "payload");
    let v2 = edit_header(&buf, |h| h["version"] = 2.into());
    assert_eq!(trace_field(WorkloadTrace::read_from(v2.as_slice())), "version");
    let be = edit_header(&buf, |h| h["endianness"] = "big".into());
    assert_eq!(trace_field(WorkloadTrace::read_from(be.as_slice())), "endianness");
    let fmt = edit_header(&buf, |h| h["format"] = "other".into());
    assert_eq!(trace_field(WorkloadTrace::read_from(fmt.as_slice())), "format");
    let garbage = edit_header(&buf, |h| *h = serde_json::json!({"format": 1}));
    assert_eq!(trace_field(WorkloadTrace::read_from(garbage.as_slice())), "header");
    let valid = edit_header(&buf, |h| h["layers"][0]["heads"][0]["valid_len"] = 10_000.into());
    assert_eq!(trace_field(WorkloadTrace::read_from(valid.as_slice())), "layers[0].heads[0].valid_len");
}

#[test]
fn validation_rejects_inconsistent_traces() {
    let t = synthetic_trace(&SyntheticSpec {
        layers: 2,
        heads: 2,
        seq_len: 6,
        d: 4,
        d_v: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let check = |f: &dyn Fn(&mut WorkloadTrace), field: &str| {
        let mut bad = t.clone();
        f(&mut bad);
        assert_eq!(trace_field(bad.validate().map(|_| bad.clone())), field);
        assert!(bad.write_to(Vec::new()).is_err());
    };
    check(&|t| t.layers[1].threshold = f64::NAN, "layers[1].threshold");
    check(&|t| t.layers[1].threshold = f64::INFINITY, "layers[1].threshold");
    check(&|t| t.layers[0].heads[1].k[[0, 0]] = 4096, "layers[0].heads[1].k");
    check(&|t| t.layers[1].heads[0].q = ndarray::Array2::zeros((6, 5)), "layers[1].heads[0].k");
    check(&|t| t.layers[1].heads[0].v = ndarray::Array2::zeros((5, 3)), "layers[1].heads[0].v");
    check(&|t| t.layers[0].heads[0].v_scale = 0.0, "layers[0].heads[0].v_scale");
    check(&|t| t.layers[0].heads[0].valid_len = 7, "layers[0].heads[0].valid_len");
}

#[test]
fn thresholds_can_be_replaced() {
    let mut t = synthetic_trace(&SyntheticSpec { layers: 3, ..SyntheticSpec::default() }).unwrap();
    t.set_thresholds(&[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(t.layers.iter().map(|l| l.threshold).collect::<Vec<_>>(), vec![0.1, 0.2, 0.3]);
    assert!(matches!(t.set_thresholds(&[0.1]), Err(Error::Dimension(_))));
}

#[test]
fn synthetic_targets() {
    let t = synthetic_trace(&SyntheticSpec { target_pruning: 0.0, ..SyntheticSpec::default() }).unwrap();
    let r = simulate_tile(&t, &TileConfig::ae(), &EnergyTable::default()).unwrap();
    assert_eq!(r.pruning_rate, 0.0);
    let t = synthetic_trace(&SyntheticSpec::memn2n()).unwrap();
    let r = simulate_tile(&t, &TileConfig::ae(), &EnergyTable::default()).unwrap();
    assert!((r.pruning_rate - 0.917).abs() <= 0.01);
    assert!(bytes(&t) == bytes(&synthetic_trace(&SyntheticSpec::memn2n()).unwrap()));
    for bad in [-0.1, 1.5, f64::NAN] {
        let spec = SyntheticSpec { target_pruning: bad, ..SyntheticSpec::default() };
        assert!(matches!(synthetic_trace(&spec), Err(Error::Parameter(_))));
    }
    let spec = SyntheticSpec { valid_len: Some(100), ..SyntheticSpec::default() };
    assert!(matches!(synthetic_trace(&spec), Err(Error::Parameter(_))));
}
