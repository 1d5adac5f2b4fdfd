mod common;

use std::collections::BTreeMap;

use multiflow::budgeting::{budgets_uniform, BudgetPolicy};
use multiflow::masking::{
    apply_mask, build_layer_mask, build_mask, read_mask, verify_mask, write_mask, LayerMask,
    Violation,
};
use multiflow::modelspec::{resolve_tying, LayerSpec, PrunableModel};
use multiflow::pipeline::{prune, PruneRequest};
use multiflow::scoring::{Criterion, ScoreMatrix};
use multiflow::tensorstore::{DenseTensor, TensorMap};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores(rows: usize, cols: usize, values: Vec<f32>) -> ScoreMatrix {
    ScoreMatrix {
        layer: "l".into(),
        criterion: Criterion::Magnitude,
        rows,
        cols,
        values,
        rng_seed: None,
    }
}

fn score_layer() -> impl Strategy<Value = (ScoreMatrix, usize)> {
    (1usize..=12, 1usize..=12)
        .prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                prop::collection::vec(0u16..200, r * c),
                0..=r * c,
            )
        })
        .prop_map(|(r, c, v, k)| (scores(r, c, v.into_iter().map(f32::from).collect()), k))
}

proptest! {
    #[test]
    fn layer_masks_keep_exactly_k((s, k) in score_layer(), invert in any::<bool>()) {
        let m = build_layer_mask(&s, k, invert).unwrap();
        prop_assert_eq!(m.kept(), k);
        prop_assert!(m.bits.iter().all(|&b| b <= 1));
        let keys: Vec<f32> = s.values.iter().map(|&v| if invert { -v } else { v }).collect();
        let expect = common::oracle_topk(&keys, k);
        let got: Vec<usize> = (0..m.size()).filter(|&i| m.bits[i] == 1).collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn normal_and_inverted_masks_are_disjoint((s, k) in score_layer()) {
        prop_assume!(2 * k <= s.values.len());
        let top = build_layer_mask(&s, k, false).unwrap();
        let bottom = build_layer_mask(&s, k, true).unwrap();
        for i in 0..s.values.len() {
            if top.bits[i] == 1 && bottom.bits[i] == 1 {
                // Only possible when the entry ties with an entry on the other side.
                let v = s.values[i];
                let tied = (0..s.values.len()).any(|j| j != i && s.values[j] == v);
                prop_assert!(tied, "entry {} kept by both without a tie", i);
            }
        }
    }

    #[test]
    fn distinct_scores_give_strictly_disjoint_masks(n in 2usize..100, seed in any::<u64>(), frac in 0.0f64..=0.5) {
        use rand::seq::SliceRandom;
        let mut values: Vec<f32> = (0..n).map(|i| i as f32).collect();
        values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = scores(1, n, values);
        let k = (frac * n as f64).floor() as usize;
        let top = build_layer_mask(&s, k, false).unwrap();
        let bottom = build_layer_mask(&s, k, true).unwrap();
        prop_assert!(top.bits.iter().zip(&bottom.bits).all(|(a, b)| a & b == 0));
    }

    #[test]
    fn positive_rescaling_keeps_masks_bit_identical((s, k) in score_layer(), c in prop::sample::select(vec![0.5f32, 3.0, 7.25, 1000.0])) {
        let scaled = scores(s.rows, s.cols, s.values.iter().map(|v| v * c).collect());
        for invert in [false, true] {
            prop_assert_eq!(build_layer_mask(&s, k, invert).unwrap(), build_layer_mask(&scaled, k, invert).unwrap());
        }
    }

    #[test]
    fn power_of_two_rescaling_of_arbitrary_scores(values in prop::collection::vec(0.0f32..1e6, 1..200), e in -20i32..20, frac in 0.0f64..=1.0) {
        let c = 2f32.powi(e);
        let k = (frac * values.len() as f64).round() as usize;
        let a = scores(1, values.len(), values.clone());
        let b = scores(1, values.len(), values.iter().map(|v| v * c).collect());
        prop_assert_eq!(build_layer_mask(&a, k, false).unwrap(), build_layer_mask(&b, k, false).unwrap());
    }

    #[test]
    fn pipeline_masks_satisfy_budgets_and_tying(seed in any::<u64>(), sparsity in 0.0f64..=1.0, policy in prop::sample::select(BudgetPolicy::ALL.to_vec()), invert in any::<bool>()) {
        let (model, tm) = tied_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = common::random_stats(&mut rng, &model);
        let mut req = PruneRequest::new(Criterion::Multiflow, policy, sparsity);
        req.invert = invert;
        let out = prune(&model, &tm, Some(&stats), &req).unwrap();
        prop_assert!(out.violations.is_empty(), "{:?}", out.violations);
        prop_assert_eq!(&out.mask.layers["enc"], &out.mask.layers["dec"]);
        for (name, &k) in &out.budgets.per_layer {
            prop_assert_eq!(out.mask.layers[name].kept(), k);
        }
    }
}

/// Three modalities with "enc"/"dec" tied; weights random.
fn tied_model(seed: u64) -> (PrunableModel, TensorMap) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs = [
        ("img", "vision", 4, 6, None),
        ("enc", "text", 3, 5, Some("shared")),
        ("mid", "text", 5, 3, None),
        ("dec", "text", 3, 5, Some("shared")),
        ("fuse", "fusion", 2, 8, None),
    ];
    let mut tm = TensorMap::new();
    let mut layers = Vec::new();
    let mut depth = BTreeMap::new();
    for (name, modality, r, c, tie) in defs {
        let w: Vec<f32> = (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        tm.insert(name, DenseTensor::f32(vec![r, c], w).unwrap());
        let d = depth.entry(modality).or_insert(0usize);
        layers.push(LayerSpec {
            name: name.into(),
            out_dim: r,
            in_dim: c,
            modality: modality.into(),
            depth_index: *d,
            tie_group: tie.map(String::from),
        });
        *d += 1;
    }
    let modalities = vec!["vision".into(), "text".into(), "fusion".into()];
    (PrunableModel::new(modalities, layers).unwrap(), tm)
}

#[test]
fn hand_case_masks() {
    let s = scores(2, 2, vec![5.0, 30.0, 33.0, 132.0]);
    assert_eq!(
        build_layer_mask(&s, 2, false).unwrap().bits,
        vec![0, 0, 1, 1]
    );
    assert_eq!(
        build_layer_mask(&s, 2, true).unwrap().bits,
        vec![1, 1, 0, 0]
    );
    assert_eq!(
        build_layer_mask(&s, 4, false).unwrap(),
        LayerMask::ones(2, 2)
    );
}

#[test]
fn build_mask_follows_the_plan() {
    let (model, _) = tied_model(1);
    let plan = budgets_uniform(&model, 0.4).unwrap();
    let all: BTreeMap<String, ScoreMatrix> = model
        .layers
        .iter()
        .map(|l| {
            let values = (0..l.size()).map(|i| i as f32).collect();
            (
                l.name.clone(),
                scores(l.out_dim, l.in_dim, values).named(&l.name),
            )
        })
        .collect();
    let mask = build_mask(&all, &plan, false).unwrap();
    assert!(verify_mask(&mask, &plan, &[]).is_empty());
    let mut missing = all.clone();
    missing.remove("img");
    assert!(build_mask(&missing, &plan, false).is_err());
}

#[test]
fn apply_zeroes_exactly_the_pruned_weights() {
    let (model, tm) = tied_model(3);
    let req = PruneRequest::new(
        Criterion::Magnitude,
        BudgetPolicy::MultimodalMagnitude,
        0.75,
    );
    let out = prune(&model, &tm, None, &req).unwrap();
    let mut ck = tm.clone();
    ck.insert(
        "bias",
        DenseTensor::f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
    );
    let pruned = apply_mask(&ck, &out.mask).unwrap();
    assert_eq!(pruned.get("bias"), ck.get("bias"));
    for (name, lm) in &out.mask.layers {
        let before = ck.get(name).unwrap().as_f32().unwrap();
        let after = pruned.get(name).unwrap().as_f32().unwrap();
        for i in 0..lm.size() {
            let expect = if lm.bits[i] == 1 { before[i] } else { 0.0 };
            assert_eq!(after[i].to_bits(), expect.to_bits());
        }
    }
    assert_eq!(apply_mask(&pruned, &out.mask).unwrap(), pruned);

    let mut dense = out.mask.clone();
    for lm in dense.layers.values_mut() {
        lm.bits.fill(1);
    }
    assert_eq!(apply_mask(&ck, &dense).unwrap(), ck);
}

#[test]
fn apply_hand_case() {
    let mut ck = TensorMap::new();
    ck.insert(
        "w",
        DenseTensor::f32(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap(),
    );
    let mut mask =
        multiflow::masking::PruneMask::new(Criterion::Multiflow, BudgetPolicy::Uniform, 0.5, false);
    mask.layers.insert(
        "w".into(),
        LayerMask {
            rows: 2,
            cols: 2,
            bits: vec![0, 0, 1, 1],
        },
    );
    let out = apply_mask(&ck, &mask).unwrap();
    assert_eq!(
        out.get("w").unwrap().as_f32().unwrap(),
        &[0.0, 0.0, 3.0, 4.0]
    );
}

#[test]
fn verify_reports_corruption() {
    let (model, tm) = tied_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats = common::random_stats(&mut rng, &model);
    let req = PruneRequest::new(Criterion::Multiflow, BudgetPolicy::MultimodalMagnitude, 0.5);
    let out = prune(&model, &tm, Some(&stats), &req).unwrap();
    let groups = resolve_tying(&model);
    assert!(verify_mask(&out.mask, &out.budgets, &groups).is_empty());

    let mut flipped = out.mask.clone();
    let bits = &mut flipped.layers.get_mut("img").unwrap().bits;
    bits[0] ^= 1;
    let v = verify_mask(&flipped, &out.budgets, &groups);
    assert_eq!(v.len(), 1);
    assert!(matches!(&v[0], Violation::BudgetMismatch { layer, .. } if layer == "img"));

    // Swap two bits of a tied member: counts still match, tying does not.
    let mut untied = out.mask.clone();
    let dec = &mut untied.layers.get_mut("dec").unwrap().bits;
    let one = dec.iter().position(|&b| b == 1).unwrap();
    let zero = dec.iter().position(|&b| b == 0).unwrap();
    dec.swap(one, zero);
    let v = verify_mask(&untied, &out.budgets, &groups);
    assert_eq!(v.len(), 1);
    assert!(matches!(&v[0], Violation::TieViolation { member, .. } if member == "dec"));
    assert!(v[0].to_string().contains("tie violation"));
}

#[test]
fn mask_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, tm) = tied_model(9);
    let mut req = PruneRequest::new(Criterion::Magnitude, BudgetPolicy::GlobalMagnitude, 0.63);
    req.label = Some("omp".into());
    let out = prune(&model, &tm, None, &req).unwrap();
    let p = dir.path().join("m.safetensors");
    write_mask(&out.mask, &p).unwrap();
    let back = read_mask(&p).unwrap();
    assert_eq!(back, out.mask);
    assert_eq!(back.series_name(), "omp");
    let q = dir.path().join("again.safetensors");
    write_mask(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}
