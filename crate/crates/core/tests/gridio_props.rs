use dsr_core::gridio::{
    decode_grid, encode_grid, parse_stations, parse_time, read_grid, read_stations, write_grid, write_stations, GridError,
    GridField, StationRecord, GRD1_FIXED_HEADER, GRD1_NAME_BYTES,
};
use dsr_core::tensornet::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Tensor, TensorError};
use ndarray::Array4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(nv: usize, t: usize, h: usize, w: usize, seed: u64) -> GridField {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = Array4::from_shape_fn((nv, t, h, w), |_| r.gen_range(-300.0f32..300.0));
    let names = (0..nv).map(|i| format!("V{i}")).collect();
    GridField::new(names, data, 35.5, -99.25, -0.01, 0.01, 1_677_628_800, 3600).unwrap()
}

/// One variable, one frame, one cell holding 3.5, laid out by hand.
fn fixture_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"GRD1");
    for v in [1u32, 1, 1, 1, 1] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in [40.0f64, -105.0, 0.25, 0.5] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&1_000i64.to_le_bytes());
    b.extend_from_slice(&3600u32.to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b.extend_from_slice(b"TMP\0\0\0\0\0\0\0\0\0\0\0\0\0");
    b.extend_from_slice(&[0x00, 0x00, 0x60, 0x40]);
    b
}

#[test]
fn hand_built_fixture_decodes() {
    let bytes = fixture_bytes();
    assert_eq!(bytes.len(), 72 + 16 + 4);
    let g = decode_grid(&bytes).unwrap();
    assert_eq!(g.variables(), ["TMP"]);
    assert_eq!(g.data().dim(), (1, 1, 1, 1));
    assert_eq!(g.data()[[0, 0, 0, 0]], 3.5);
    let geo = g.geometry();
    assert_eq!((geo.lat0, geo.lon0, geo.dlat, geo.dlon), (40.0, -105.0, 0.25, 0.5));
    assert_eq!((g.t0(), g.dt()), (1_000, 3600));
    assert_eq!(encode_grid(&g), bytes);
}

#[test]
fn header_and_payload_lengths() {
    assert_eq!((GRD1_FIXED_HEADER, GRD1_NAME_BYTES), (72, 16));
    let g = field(7, 2, 3, 5, 1);
    let bytes = encode_grid(&g);
    assert_eq!(bytes.len(), 72 + 7 * 16 + 7 * 2 * 3 * 5 * 4);
    assert_eq!(&bytes[72..74], b"V0");
    assert_eq!(encode_grid(&g), bytes);
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.grd");
    let mut g = field(3, 4, 5, 6, 2);
    g.data_mut()[[0, 0, 0, 0]] = -0.0;
    g.data_mut()[[1, 1, 1, 1]] = f32::MIN_POSITIVE / 4.0;
    write_grid(&g, &p).unwrap();
    let back = read_grid(&p).unwrap();
    assert_eq!(encode_grid(&back), encode_grid(&g));
    assert_eq!(back.data()[[0, 0, 0, 0]].to_bits(), (-0.0f32).to_bits());
    assert!(matches!(read_grid(dir.path().join("missing.grd")), Err(GridError::Io(_))));
}

#[test]
fn malformed_grids_are_typed() {
    let good = encode_grid(&field(2, 2, 2, 2, 3));
    let mut bad = good.clone();
    bad[3] = b'X';
    assert!(matches!(decode_grid(&bad), Err(GridError::Format(_))));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(decode_grid(&bad), Err(GridError::Format(_))));
    for cut in [0, 10, 71, 90, good.len() - 1] {
        assert!(matches!(decode_grid(&good[..cut]), Err(GridError::Io(_))), "cut {cut}");
    }
    let mut bad = good.clone();
    bad.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_grid(&bad), Err(GridError::Corruption(_))));
    let mut bad = good.clone();
    bad[68] = 1;
    assert!(matches!(decode_grid(&bad), Err(GridError::Corruption(_))));
    let mut bad = good.clone();
    bad[72 + 5] = b'Z';
    assert!(matches!(decode_grid(&bad), Err(GridError::Corruption(_))));
    let mut bad = good;
    bad[64..68].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_grid(&bad), Err(GridError::Corruption(_))));
}

#[test]
fn invalid_fields_are_rejected() {
    let d = Array4::<f32>::zeros((2, 1, 2, 2));
    let mk = |names: Vec<&str>, dlat: f64, dt: u32| {
        GridField::new(names.into_iter().map(String::from).collect(), d.clone(), 0.0, 0.0, dlat, 1.0, 0, dt)
    };
    assert!(mk(vec!["A", "B"], 1.0, 1).is_ok());
    assert!(matches!(mk(vec!["A"], 1.0, 1), Err(GridError::Invalid(_))));
    assert!(matches!(mk(vec!["A", "A"], 1.0, 1), Err(GridError::Invalid(_))));
    assert!(matches!(mk(vec!["A", "SEVENTEEN_BYTES__"], 1.0, 1), Err(GridError::Invalid(_))));
    assert!(matches!(mk(vec!["A", "B"], 0.0, 1), Err(GridError::Invalid(_))));
    assert!(matches!(mk(vec!["A", "B"], 1.0, 0), Err(GridError::Invalid(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn encode_decode_is_identity(
        nv in 1usize..4, t in 1usize..4, h in 1usize..6, w in 1usize..6,
        bits in proptest::collection::vec(any::<u32>(), 300),
        lat0 in -80.0f64..80.0, dlat in prop_oneof![-1.0f64..-1e-3, 1e-3f64..1.0],
        t0 in any::<i64>(), dt in 1u32..100_000,
    ) {
        let n = nv * t * h * w;
        let data = Array4::from_shape_vec((nv, t, h, w), bits[..n].iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let names = (0..nv).map(|i| format!("VAR_{i:012}")).collect();
        let g = GridField::new(names, data, lat0, 10.0, dlat, 0.5, t0, dt).unwrap();
        let bytes = encode_grid(&g);
        let back = decode_grid(&bytes).unwrap();
        prop_assert_eq!(encode_grid(&back), bytes);
        prop_assert_eq!(back.variables(), g.variables());
        prop_assert_eq!(back.geometry(), g.geometry());
    }
}

#[test]
fn nearest_sampling_matches_exhaustive_search() {
    let g = field(1, 3, 9, 13, 4);
    let geo = g.geometry();
    let (la, lb) = geo.lat_bounds();
    let (oa, ob) = geo.lon_bounds();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let (lat, lon) = (r.gen_range(la..=lb), r.gen_range(oa..=ob));
        let time = r.gen_range(g.t0()..=g.time_of(2));
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..geo.h {
            for j in 0..geo.w {
                let d = (geo.lat(i) - lat).powi(2) + (geo.lon(j) - lon).powi(2);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let frame = (0..3).min_by_key(|&f| ((g.time_of(f) - time).abs(), f)).unwrap();
        assert_eq!(g.sample_nearest("V0", lat, lon, time).unwrap(), g.data()[[0, frame, best.1, best.2]]);
    }
}

#[test]
fn nearest_sampling_at_and_near_centres() {
    let g = field(2, 2, 4, 4, 6);
    let geo = g.geometry();
    for i in 0..4 {
        for j in 0..4 {
            let want = g.data()[[1, 1, i, j]];
            assert_eq!(g.sample_nearest("V1", geo.lat(i), geo.lon(j), g.time_of(1)).unwrap(), want);
            let nudged = geo.lat(i) + 0.49 * geo.dlat * if i == 3 { -1.0 } else { 1.0 };
            assert_eq!(g.sample_nearest("V1", nudged, geo.lon(j), g.time_of(1)).unwrap(), want);
        }
    }
    let (_, lb) = geo.lat_bounds();
    assert!(matches!(g.sample_nearest("V0", lb + 1e-6, geo.lon(0), g.t0()), Err(GridError::Range(_))));
    assert!(matches!(g.sample_nearest("V0", geo.lat(0), geo.lon(0), g.t0() - 1), Err(GridError::Range(_))));
    assert!(matches!(g.sample_nearest("V0", geo.lat(0), geo.lon(0), g.time_of(1) + 1), Err(GridError::Range(_))));
    assert!(g.sample_nearest("NOPE", geo.lat(0), geo.lon(0), g.t0()).is_err());
}

const HEADER: &str = "station_id,lat,lon,valid_time,variable,value\n";

#[test]
fn station_csv_parses_rows_and_times() {
    assert!(parse_stations(HEADER).unwrap().is_empty());
    let text = format!("{HEADER}KDEN,39.85,-104.65,2023-03-01T06:00:00Z,TMP,271.5\n");
    let recs = parse_stations(&text).unwrap();
    assert_eq!(
        recs,
        [StationRecord {
            station_id: "KDEN".into(),
            lat: 39.85,
            lon: -104.65,
            valid_time: 1_677_650_400,
            variable: "TMP".into(),
            value: 271.5,
        }]
    );
    let reordered = "value,variable,valid_time,lon,lat,station_id,extra\n271.5,TMP,2023-03-01T06:00:00Z,-104.65,39.85,KDEN,x\n";
    assert_eq!(parse_stations(reordered).unwrap(), recs);
    assert_eq!(parse_time("2023-03-01T06:00:00+01:00").unwrap(), 1_677_650_400 - 3600);
    assert_eq!(parse_time("2023-03-01 06:00:00").unwrap(), 1_677_650_400);
}

#[test]
fn station_csv_errors_are_located() {
    let missing = "station_id,lat,lon,valid_time,value\nA,1,2,2023-03-01T00:00:00Z,3\n";
    assert!(matches!(parse_stations(missing), Err(GridError::Schema(_))));
    let cases = [
        ("A,95,2,2023-03-01T00:00:00Z,TMP,1\n", 3),
        ("A,10,2,yesterday,TMP,1\n", 3),
        ("A,10,2,2023-03-01T00:00:00Z,TMP,warm\n", 3),
        ("A,10,abc,2023-03-01T00:00:00Z,TMP,1\n", 3),
    ];
    for (row, line) in cases {
        let text = format!("{HEADER}B,1,2,2023-03-01T00:00:00Z,TMP,1\n{row}");
        match parse_stations(&text) {
            Err(GridError::Row { line: l, .. }) => assert_eq!(l, line, "{row}"),
            other => panic!("{row}: {other:?}"),
        }
    }
}

#[test]
fn station_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let recs: Vec<StationRecord> = (0..50)
        .map(|i| StationRecord {
            station_id: format!("S{i:03}"),
            lat: r.gen_range(-90.0..=90.0),
            lon: r.gen_range(-180.0..180.0),
            valid_time: r.gen_range(0..2_000_000_000),
            variable: ["TMP", "APCP"][i % 2].into(),
            value: r.gen_range(-50.0..350.0),
        })
        .collect();
    write_stations(&recs, &p).unwrap();
    assert_eq!(read_stations(&p).unwrap(), recs);
}

fn ckpt_entries() -> Vec<(String, Tensor<f32>)> {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    vec![
        ("enc.0.conv.w".into(), Tensor::randn(&[4, 2, 3, 3, 3], &mut r)),
        ("enc.0.conv.b".into(), Tensor::randn(&[4], &mut r)),
        ("scalar".into(), Tensor::new(&[], vec![2.5]).unwrap()),
    ]
}

#[test]
fn checkpoint_layout_and_round_trip() {
    let e = ckpt_entries();
    let bytes = encode_checkpoint(&e);
    assert_eq!(&bytes[..4], b"CKPT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
    assert_eq!(&bytes[16..28], b"enc.0.conv.w");
    let header_of = |name: &str, rank: usize| 4 + name.len() + 4 + 4 * rank;
    let want = 12 + header_of("enc.0.conv.w", 5) + 216 * 4 + header_of("enc.0.conv.b", 1) + 16 + header_of("scalar", 0) + 4;
    assert_eq!(bytes.len(), want);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    write_checkpoint(&p, &e).unwrap();
    let back = read_checkpoint(&p).unwrap();
    assert_eq!(back, e);
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn malformed_checkpoints_are_typed() {
    let good = encode_checkpoint(&ckpt_entries());
    for cut in [2, 11, 20, good.len() - 1] {
        assert!(matches!(decode_checkpoint(&good[..cut]), Err(TensorError::Io(_))), "cut {cut}");
    }
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(TensorError::Format(_))));
    let mut bad = good.clone();
    bad[8] = 2;
    assert!(matches!(decode_checkpoint(&bad), Err(TensorError::Format(_))));
    let mut bad = good;
    bad[16] = 0xff;
    assert!(matches!(decode_checkpoint(&bad), Err(TensorError::Format(_))));
}
