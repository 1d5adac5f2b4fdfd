mod common;

use multiflow::tensorstore::{
    decode_container, encode_container, read_container, select_bottomk, select_topk,
    write_container, DenseTensor, TensorMap,
};
use multiflow::Error;
use proptest::prelude::*;

fn small_values(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    // A few distinct levels so ties are common.
    prop::collection::vec((-3i8..=3).prop_map(|v| f32::from(v) * 0.5), 0..=max_len)
}

fn tensor() -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(0usize..4, 0..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop_oneof![
            prop::collection::vec(any::<f32>(), n).prop_map({
                let shape = shape.clone();
                move |d| DenseTensor::f32(shape.clone(), d).unwrap()
            }),
            prop::collection::vec(any::<u8>(), n).prop_map(move |d| DenseTensor::u8(
                shape.clone(),
                d
            )
            .unwrap()),
        ]
    })
}

fn tensor_map() -> impl Strategy<Value = TensorMap> {
    (
        prop::collection::btree_map("[a-z][a-z0-9._]{0,8}", tensor(), 0..6),
        prop::collection::btree_map("[a-z_]{1,6}", "[ -~]{0,12}", 0..3),
    )
        .prop_map(|(entries, meta)| {
            let mut tm = TensorMap::new();
            for (k, v) in entries {
                tm.insert(k, v);
            }
            for (k, v) in meta {
                tm.set_metadata(k, v);
            }
            tm
        })
}

proptest! {
    #[test]
    fn topk_matches_sort_oracle(values in small_values(20), frac in 0.0f64..=1.0) {
        let k = (frac * values.len() as f64).round() as usize;
        let sel = select_topk(&values, k).unwrap();
        prop_assert_eq!(&sel.kept_indices, &common::oracle_topk(&values, k));
        if k > 0 {
            let threshold = sel.kept_indices.iter().map(|&i| values[i]).fold(f32::INFINITY, f32::min);
            prop_assert_eq!(sel.threshold_value, threshold);
            prop_assert_eq!(sel.tie_count_at_threshold, values.iter().filter(|&&v| v == threshold).count());
        } else {
            prop_assert_eq!(sel.threshold_value, f32::INFINITY);
        }
    }

    #[test]
    fn bottomk_matches_negated_oracle(values in small_values(20), frac in 0.0f64..=1.0) {
        let k = (frac * values.len() as f64).round() as usize;
        let negated: Vec<f32> = values.iter().map(|v| -v).collect();
        prop_assert_eq!(select_bottomk(&values, k).unwrap().kept_indices, common::oracle_topk(&negated, k));
    }

    #[test]
    fn topk_partition_property(values in prop::collection::vec(-100.0f32..100.0, 1..300), frac in 0.0f64..=1.0) {
        let k = (frac * values.len() as f64).round() as usize;
        let sel = select_topk(&values, k).unwrap();
        prop_assert_eq!(sel.kept_indices.len(), k);
        let mut kept = vec![false; values.len()];
        for &i in &sel.kept_indices {
            kept[i] = true;
        }
        let min_kept = sel.kept_indices.iter().map(|&i| values[i]).fold(f32::INFINITY, f32::min);
        for (i, &v) in values.iter().enumerate().filter(|(i, _)| !kept[*i]) {
            prop_assert!(v <= min_kept);
            if v == min_kept {
                // Every kept entry at the threshold precedes every dropped one.
                prop_assert!(sel.kept_indices.iter().filter(|&&j| values[j] == v).all(|&j| j < i));
            }
        }
    }

    #[test]
    fn container_round_trip(tm in tensor_map()) {
        let bytes = encode_container(&tm).unwrap();
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(&back, &tm);
        prop_assert_eq!(encode_container(&back).unwrap(), bytes);
    }
}

#[test]
fn topk_is_independent_of_thread_count() {
    let values: Vec<f32> = (0..50_000).map(|i| ((i * 7919) % 1013) as f32).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| select_topk(&values, 12_345).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut tm = TensorMap::new();
    tm.insert(
        "w",
        DenseTensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    tm.insert("m", DenseTensor::u8(vec![3], vec![1, 0, 1]).unwrap());
    tm.set_metadata("k", "v");
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    write_container(&tm, &a).unwrap();
    write_container(&read_container(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&a).unwrap(), encode_container(&tm).unwrap());
}

fn raw(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

#[test]
fn malformed_files_are_rejected() {
    let w = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#;
    let err = decode_container(&raw(w, &[0; 12])).unwrap_err();
    assert!(err.to_string().contains("size mismatch"), "{err}");

    let short = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
    assert!(matches!(
        decode_container(&raw(short, &[0; 8])),
        Err(Error::Truncated(_))
    ));

    let bf16 = r#"{"w":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#;
    assert!(matches!(
        decode_container(&raw(bf16, &[0; 4])),
        Err(Error::Format(_))
    ));

    let overlap = r#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}}"#;
    assert!(matches!(
        decode_container(&raw(overlap, &[0; 6])),
        Err(Error::Format(_))
    ));

    assert!(matches!(
        decode_container(&raw("{not json", &[])),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        decode_container(&[1, 2, 3]),
        Err(Error::Truncated(_))
    ));
}

#[test]
fn one_tensor_decodes_row_major() {
    let h = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
    let data: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let tm = decode_container(&raw(h, &data)).unwrap();
    let w = tm.get("w").unwrap();
    assert_eq!(w.shape(), &[2, 2]);
    assert_eq!(w.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
}
