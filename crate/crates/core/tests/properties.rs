//! Property tests for the pipeline invariants.

use std::path::Path;

use proptest::prelude::*;
use strokeseg::checkpoint::ModelCheckpoint;
use strokeseg::manifest::{kfold_split, CaseRecord, Manifest};
use strokeseg::metrics::{classify_lesion_size, dice_coefficient, overlap_map, summarize, wilcoxon_ranksum};
use strokeseg::ninepath::{aggregate_intersection, aggregate_majority, aggregate_union};
use strokeseg::optim::OptimizerConfig;
use strokeseg::preprocess::{flip_lr, normalize_f64, restack, slice_volume, NormScheme, Plane};
use strokeseg::train::{dice_soft, loss_post};
use strokeseg::volume::{decode_volume, encode_volume, DType, Modality, Volume};
use strokeseg::Tensor;

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    (1usize..6, 1usize..6, 1usize..6).prop_map(|(a, b, c)| [a, b, c])
}

fn masks_strategy(count: usize) -> impl Strategy<Value = ([usize; 3], Vec<Vec<bool>>)> {
    dims_strategy().prop_flat_map(move |d| {
        let n = d[0] * d[1] * d[2];
        (Just(d), prop::collection::vec(prop::collection::vec(any::<bool>(), n), count))
    })
}

fn to_masks(dims: [usize; 3], bits: &[Vec<bool>]) -> Vec<Volume> {
    bits.iter()
        .map(|b| {
            let data = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            Volume::new(dims, [1.0; 3], Modality::Mask, data).unwrap()
        })
        .collect()
}

fn subset(a: &Volume, b: &Volume) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| *x <= *y)
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    dims_strategy().prop_flat_map(|d| {
        let n = d[0] * d[1] * d[2];
        prop::collection::vec(-100.0f32..100.0, n).prop_map(move |data| Volume::new(d, [1.0, 0.5, 2.0], Modality::T1, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_containment((dims, bits) in masks_strategy(9)) {
        let masks = to_masks(dims, &bits);
        let union = aggregate_union(&masks).unwrap();
        let majority = aggregate_majority(&masks).unwrap();
        let all = aggregate_intersection(&masks).unwrap();
        prop_assert!(subset(&majority, &union));
        prop_assert!(subset(&all, &majority));
    }

    #[test]
    fn majority_permutation_invariant((dims, bits) in masks_strategy(9), rot in 0usize..9) {
        let masks = to_masks(dims, &bits);
        let mut permuted = masks.clone();
        permuted.rotate_left(rot);
        permuted.swap(0, 8);
        prop_assert_eq!(aggregate_majority(&masks).unwrap(), aggregate_majority(&permuted).unwrap());
    }

    #[test]
    fn dice_symmetric_and_bounded((dims, bits) in masks_strategy(2)) {
        let m = to_masks(dims, &bits);
        let ab = dice_coefficient("c", &m[0], &m[1]).unwrap().dice;
        let ba = dice_coefficient("c", &m[1], &m[0]).unwrap().dice;
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_coefficient("c", &m[0], &m[0]).unwrap().dice, 1.0);
    }

    #[test]
    fn soft_dice_symmetric_for_binary((dims, bits) in masks_strategy(2)) {
        let m = to_masks(dims, &bits);
        let t = |v: &Volume| Tensor::new(&[v.len()], v.data().iter().map(|&x| x as f64).collect()).unwrap();
        let (a, b) = (t(&m[0]), t(&m[1]));
        let d = dice_soft(&a, &b).unwrap();
        prop_assert!((d - dice_soft(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn loss_post_zero_iff_exact((dims, bits) in masks_strategy(2)) {
        let m = to_masks(dims, &bits);
        let t = |v: &Volume| Tensor::new(&[v.len()], v.data().iter().map(|&x| x as f64).collect()).unwrap();
        let (p, r) = (t(&m[0]), t(&m[1]));
        let q = p.map(|v| 1.0 - v);
        let loss = loss_post(&p, &q, &r).unwrap();
        prop_assert!((0.0..=2.0).contains(&loss));
        prop_assert_eq!(loss == 0.0, m[0] == m[1]);
    }

    #[test]
    fn overlap_additive_and_permutation_invariant((dims, bits) in masks_strategy(4)) {
        let m = to_masks(dims, &bits);
        let whole = overlap_map(&m).unwrap();
        let left = overlap_map(&m[..2]).unwrap();
        let right = overlap_map(&m[2..]).unwrap();
        for i in 0..whole.len() {
            prop_assert_eq!(whole.data()[i], left.data()[i] + right.data()[i]);
            prop_assert!(whole.data()[i] <= 4.0);
        }
        let rev: Vec<Volume> = m.iter().rev().cloned().collect();
        prop_assert_eq!(overlap_map(&rev).unwrap(), whole);
    }

    #[test]
    fn size_class_translation_invariant(
        size in (1usize..12, 1usize..12, 1usize..12),
        shift in (0usize..8, 0usize..8, 0usize..8),
        mm in (0.5f32..3.0, 0.5f32..3.0, 0.5f32..3.0),
    ) {
        let dims = [20, 20, 20];
        let make = |o: (usize, usize, usize)| {
            let mut d = vec![0.0; 8000];
            for z in 0..size.2 { for y in 0..size.1 { for x in 0..size.0 {
                d[(x + o.0) + 20 * ((y + o.1) + 20 * (z + o.2))] = 1.0;
            }}}
            Volume::new(dims, [mm.0, mm.1, mm.2], Modality::Mask, d).unwrap()
        };
        prop_assert_eq!(classify_lesion_size(&make((0, 0, 0))), classify_lesion_size(&make(shift)));
    }

    #[test]
    fn summary_is_ordered(values in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = summarize(&values).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
    }

    #[test]
    fn wilcoxon_swap_symmetric(
        a in prop::collection::vec(0.0f64..1.0, 1..15),
        b in prop::collection::vec(0.0f64..1.0, 1..15),
    ) {
        let x = wilcoxon_ranksum(&a, &b).unwrap();
        let y = wilcoxon_ranksum(&b, &a).unwrap();
        prop_assert!((x.p_two_sided - y.p_two_sided).abs() < 1e-12);
        prop_assert!(x.p_two_sided > 0.0 && x.p_two_sided <= 1.0);
    }

    #[test]
    fn slice_restack_identity(v in volume_strategy()) {
        for plane in Plane::ALL {
            let back = restack(&slice_volume(&v, plane), plane, v.dims(), v.voxel_mm(), v.modality()).unwrap();
            prop_assert_eq!(&back, &v);
        }
    }

    #[test]
    fn flip_is_an_involution(v in volume_strategy()) {
        prop_assert_eq!(flip_lr(&flip_lr(&v)), v);
    }

    #[test]
    fn in_plane_normalization_moments(v in volume_strategy()) {
        for plane in Plane::ALL {
            let n = normalize_f64(&v, plane, NormScheme::InPlane);
            let nv = Volume::new(v.dims(), v.voxel_mm(), Modality::T1, n.iter().map(|&x| x as f32).collect()).unwrap();
            for (raw, s) in slice_volume(&v, plane).iter().zip(slice_volume(&nv, plane)) {
                let len = raw.len() as f64;
                let mean = raw.data().iter().map(|&x| x as f64).sum::<f64>() / len;
                let sd = (raw.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / len).sqrt();
                if sd > 1e-3 {
                    let m = s.data().iter().map(|&x| x as f64).sum::<f64>() / len;
                    prop_assert!(m.abs() < 1e-4, "slice mean {m}");
                }
            }
        }
    }

    #[test]
    fn mvol_roundtrip_bit_exact(v in volume_strategy()) {
        let bytes = encode_volume(&v, DType::F32).unwrap();
        let back = decode_volume(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.voxel_mm(), v.voxel_mm());
        let bits = |x: &Volume| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn npck_roundtrip_bit_exact(values in prop::collection::vec(prop::num::f32::ANY, 1..50), split in 1usize..4) {
        let mut c = ModelCheckpoint::new();
        for (k, chunk) in values.chunks(split).enumerate() {
            c.insert(format!("t{k}"), Tensor::new(&[chunk.len()], chunk.to_vec()).unwrap()).unwrap();
        }
        let back = ModelCheckpoint::decode(&c.encode().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode().unwrap(), c.encode().unwrap());
    }

    #[test]
    fn kfold_partitions(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let m = Manifest::new((0..n).map(|i| CaseRecord {
            case_id: format!("c{i}"),
            input_volume_path: "x".into(),
            second_input_path: None,
            truth_mask_path: "y".into(),
            split_tag: "A".into(),
        }).collect()).unwrap();
        let folds = kfold_split(&m, k, seed).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.test.len(), n);
        }
    }
}

#[test]
fn learning_rate_sequence() {
    let c = OptimizerConfig::default();
    let lrs: Vec<f64> = (0..50).map(|e| c.learning_rate(e)).collect();
    assert_eq!(lrs[0], 0.01);
    for (e, lr) in lrs.iter().enumerate() {
        assert!((lr - 0.01 * 0.97f64.powi(e as i32)).abs() < 1e-12);
    }
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert!((lrs[49] - 0.01 * 0.97f64.powi(49)).abs() < 1e-12);
}
