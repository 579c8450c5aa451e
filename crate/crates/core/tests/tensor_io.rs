use proptest::prelude::*;
use psol_core::tensor_io::{
    decode_tensors, encode_tensors, encoded_len, open_tensor_file, read_pooled_features, read_tensor_file,
    write_pooled_features, write_tensor_file, FeatureMap, PooledFeature,
};
use psol_core::Error;

fn arb_maps() -> impl Strategy<Value = Vec<FeatureMap>> {
    (1usize..6).prop_flat_map(|d| {
        prop::collection::vec(
            (1usize..5, 1usize..5, "[a-z0-9_/]{0,12}").prop_flat_map(move |(h, w, id)| {
                prop::collection::vec(-1e6f32..1e6, h * w * d)
                    .prop_map(move |values| FeatureMap::new(id.clone(), h, w, d, values).unwrap())
            }),
            0..6,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn round_trip_is_bit_exact(maps in arb_maps()) {
        let mut bytes = Vec::new();
        encode_tensors(&maps, &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), encoded_len(&maps));
        let back = decode_tensors(&bytes).unwrap();
        prop_assert_eq!(back.len(), maps.len());
        for (a, b) in maps.iter().zip(&back) {
            prop_assert_eq!(&a.image_id, &b.image_id);
            prop_assert_eq!((a.h, a.w, a.d), (b.h, b.w, b.d));
            let bits = |m: &FeatureMap| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn every_proper_prefix_is_rejected(maps in arb_maps()) {
        prop_assume!(!maps.is_empty());
        let mut bytes = Vec::new();
        encode_tensors(&maps, &mut bytes).unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(decode_tensors(&bytes[..cut]).is_err(), "prefix of {} bytes accepted", cut);
        }
    }
}

#[test]
fn file_round_trip_and_streaming_reader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps.psol");
    let maps: Vec<FeatureMap> = (0..4)
        .map(|i| FeatureMap::new(format!("img{i}"), 2, 3, 2, (0..12).map(|v| (v * i) as f32).collect()).unwrap())
        .collect();
    write_tensor_file(&maps, &path).unwrap();
    assert_eq!(read_tensor_file(&path).unwrap(), maps);

    let reader = open_tensor_file(&path).unwrap();
    assert_eq!(reader.record_count(), 4);
    let streamed: Vec<FeatureMap> = reader.map(Result::unwrap).collect();
    assert_eq!(streamed, maps);
}

#[test]
fn truncated_file_names_the_record() {
    let maps: Vec<FeatureMap> = (0..3).map(|i| FeatureMap::zeros(format!("r{i}"), 2, 2, 3)).collect();
    let mut bytes = Vec::new();
    encode_tensors(&maps, &mut bytes).unwrap();
    let err = decode_tensors(&bytes[..bytes.len() - 5]).unwrap_err();
    assert!(matches!(err, Error::Truncated { record: 2, .. }), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_tensor_file("/definitely/not/here.psol").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn pooled_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pooled.psol");
    let feats = vec![
        PooledFeature {
            image_id: "a".into(),
            v: vec![0.5, -1.25, 3.0],
        },
        PooledFeature {
            image_id: "b".into(),
            v: vec![1.0, 2.0, 4.0],
        },
    ];
    write_pooled_features(&feats, &path).unwrap();
    assert_eq!(read_pooled_features(&path).unwrap(), feats);

    // a spatial map is not a pooled feature
    write_tensor_file(&[FeatureMap::zeros("a", 2, 1, 3)], &path).unwrap();
    assert!(matches!(read_pooled_features(&path), Err(Error::Format(_))));
}
