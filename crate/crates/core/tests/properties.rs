use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;

use imask::analysis::class_frequency;
use imask::archspec::{total_training_flops, unet_cost, ArchConfig};
use imask::augment::{self, AugmentationSpec, ConcreteAugmentation};
use imask::dataset_io::{self, split_dataset, DatasetManifest, MaskMode, Split};
use imask::mask_core::{hard_vote, im_binary, im_multiclass};
use imask::metrics::{self, count_components, dice, iou, mcce, Connectivity};
use imask::morphology::{dilate, erode, refine_im, RefineParams, StructuringElement};
use imask::pseudo_label::{blackout, make_pair, remap_with_im, unmap_im};
use imask::quality::{oracle_score, threshold_filter};
use imask::raster::Raster;
use imask::synth::{noisy_oracle_predict, NoiseModel};
use imask::{BinaryMask, ClassMask, Image};

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..14, 1usize..14)
}

fn bits(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(0u8..2, h * w).prop_map(move |d| BinaryMask::from_vec(h, w, d).unwrap())
}

fn labels(h: usize, w: usize, classes: u8) -> impl Strategy<Value = ClassMask> {
    prop::collection::vec(0..classes, h * w).prop_map(move |d| ClassMask::from_vec(h, w, d).unwrap())
}

fn binary_ensemble() -> impl Strategy<Value = Vec<BinaryMask>> {
    (dims(), 2usize..6).prop_flat_map(|((h, w), n)| prop::collection::vec(bits(h, w), n))
}

fn class_ensemble() -> impl Strategy<Value = (Vec<ClassMask>, u8)> {
    (dims(), 2usize..6, 2u8..8).prop_flat_map(|((h, w), n, c)| (prop::collection::vec(labels(h, w, c), n), Just(c)))
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    dims().prop_flat_map(|(h, w)| (bits(h, w), bits(h, w)))
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(any::<u8>(), h * w * 3).prop_map(move |d| Raster::new(h, w, 3, d).unwrap())
}

fn odd_kernel() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![0usize, 1, 3, 5, 7])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binary_consensus_ignores_member_order(masks in binary_ensemble(), shift in 0usize..5) {
        let mut rotated = masks.clone();
        rotated.rotate_left(shift % masks.len());
        rotated.reverse();
        prop_assert_eq!(im_binary(&masks).unwrap(), im_binary(&rotated).unwrap());
    }

    #[test]
    fn multiclass_consensus_ignores_member_order((masks, _) in class_ensemble(), shift in 0usize..5) {
        let mut rotated = masks.clone();
        rotated.rotate_left(shift % masks.len());
        rotated.reverse();
        prop_assert_eq!(im_multiclass(&masks).unwrap(), im_multiclass(&rotated).unwrap());
    }

    #[test]
    fn final_and_im_are_disjoint((masks, _) in class_ensemble()) {
        let c = im_multiclass(&masks).unwrap();
        prop_assert!(c.check_disjoint().is_ok());
        let b = im_binary(&masks.iter().map(|m| BinaryMask::from_fn(m.height(), m.width(), |i| m.data()[i] > 0)).collect::<Vec<_>>()).unwrap();
        prop_assert!(b.check_disjoint().is_ok());
    }

    #[test]
    fn unanimous_background_is_confident(masks in binary_ensemble()) {
        let c = im_binary(&masks).unwrap();
        let sums = c.vote_sum.as_ref().unwrap();
        for (i, &s) in sums.iter().enumerate() {
            if s == 0 {
                prop_assert_eq!(c.final_mask.data()[i], 0);
                prop_assert!(!c.im.is_set(i));
            }
        }
    }

    #[test]
    fn hard_vote_is_final_mask(masks in binary_ensemble()) {
        prop_assert_eq!(hard_vote(&masks).unwrap(), im_binary(&masks).unwrap().final_binary().unwrap());
    }

    #[test]
    fn refinement_identity_and_totality((masks, classes) in class_ensemble(), e in odd_kernel(), d in odd_kernel()) {
        let c = im_multiclass(&masks).unwrap();
        prop_assert_eq!(&refine_im(&c, RefineParams::new(0, 0).unwrap()).unwrap(), &c);
        let r = refine_im(&c, RefineParams::new(e, d).unwrap()).unwrap();
        prop_assert!(r.check_disjoint().is_ok());
        prop_assert!(r.final_mask.data().iter().all(|&v| v < classes));
    }

    #[test]
    fn larger_dilation_never_shrinks_im((masks, _) in class_ensemble(), e in odd_kernel()) {
        let c = im_multiclass(&masks).unwrap();
        let mut prev: Option<BinaryMask> = None;
        for d in [0, 3, 5, 7] {
            let im = refine_im(&c, RefineParams::new(e, d).unwrap()).unwrap().im;
            if let Some(p) = &prev {
                prop_assert!(p.is_subset_of(&im), "d={}", d);
            }
            prev = Some(im);
        }
    }

    #[test]
    fn larger_erosion_never_grows_im_before_dilation((masks, _) in class_ensemble()) {
        let c = im_multiclass(&masks).unwrap();
        let mut prev: Option<BinaryMask> = None;
        for e in [0, 3, 5, 7] {
            let im = refine_im(&c, RefineParams::new(e, 0).unwrap()).unwrap().im;
            if let Some(p) = &prev {
                prop_assert!(im.is_subset_of(p), "e={}", e);
            }
            prev = Some(im);
        }
    }

    #[test]
    fn erosion_dilation_duality_inside(((h, w), m) in dims().prop_flat_map(|(h, w)| (Just((h, w)), bits(h, w))), k in prop::sample::select(vec![3usize, 5])) {
        let se = StructuringElement::new(k).unwrap();
        let e = erode(&m, se);
        let dual = dilate(&m.complement(), se).complement();
        let r = k / 2;
        for y in r..h.saturating_sub(r) {
            for x in r..w.saturating_sub(r) {
                prop_assert_eq!(e.at(y, x), dual.at(y, x));
            }
        }
    }

    #[test]
    fn photometric_changes_leave_masks_alone((_, img, mask) in dims().prop_flat_map(|(h, w)| (Just((h, w)), image(h, w), labels(h, w, 4))), seed in any::<u64>()) {
        let spec = AugmentationSpec { allow_hflip: false, allow_vflip: false, allow_rot90: false, ..*augment::GenerationSchedule::preset("isic2018").unwrap().max_row() };
        let aug = augment::sample(&spec, seed);
        let (_, out) = augment::apply(&img, Some(&mask), &aug).unwrap();
        prop_assert_eq!(out.unwrap(), mask);
    }

    #[test]
    fn geometric_changes_move_image_and_mask_together(((h, w), mask) in dims().prop_flat_map(|(h, w)| (Just((h, w)), labels(h, w, 4))), hf in any::<bool>(), vf in any::<bool>(), rot in 0u8..4) {
        let img: Image = Raster::new(h, w, 3, mask.data().iter().flat_map(|&v| [v * 60, v, 255 - v]).collect()).unwrap();
        let aug = ConcreteAugmentation::geometric(hf, vf, rot);
        let (out_img, out_mask) = augment::apply(&img, Some(&mask), &aug).unwrap();
        let out_mask = out_mask.unwrap();
        prop_assert_eq!(out_img.dims(), out_mask.dims());
        for (i, &v) in out_mask.data().iter().enumerate() {
            prop_assert_eq!(out_img.pixel(i), &[v * 60, v, 255 - v][..]);
        }
        prop_assert_eq!(augment::map_back(&out_mask, &aug), mask);
    }

    #[test]
    fn identity_augmentation_is_identity((_, img, mask) in dims().prop_flat_map(|(h, w)| (Just((h, w)), image(h, w), labels(h, w, 3))), seed in any::<u64>()) {
        let aug = augment::sample(&AugmentationSpec::IDENTITY, seed);
        let (out_img, out_mask) = augment::apply(&img, Some(&mask), &aug).unwrap();
        prop_assert_eq!(out_img, img);
        prop_assert_eq!(out_mask.unwrap(), mask);
    }

    #[test]
    fn augmentation_is_seeded((_, img) in dims().prop_flat_map(|(h, w)| (Just((h, w)), image(h, w))), seed in any::<u64>()) {
        let spec = *augment::GenerationSchedule::preset("hela").unwrap().max_row();
        let a = augment::sample(&spec, seed);
        prop_assert_eq!(a, augment::sample(&spec, seed));
        let once = augment::apply::<ClassMask>(&img, None, &a).unwrap().0;
        prop_assert_eq!(once, augment::apply::<ClassMask>(&img, None, &a).unwrap().0);
    }

    #[test]
    fn overlap_metrics_are_symmetric((a, b) in mask_pair()) {
        prop_assert_eq!(iou::<f64>(&a, &b).unwrap(), iou::<f64>(&b, &a).unwrap());
        prop_assert_eq!(dice::<f64>(&a, &b).unwrap(), dice::<f64>(&b, &a).unwrap());
        let i = iou::<f64>(&a, &b).unwrap();
        prop_assert!((dice::<f64>(&a, &b).unwrap() - 2.0 * i / (1.0 + i)).abs() < 1e-12);
    }

    #[test]
    fn mcce_zero_iff_counts_match(pred in prop::collection::vec(prop::collection::vec(0usize..6, 3), 1..5), flip in any::<bool>()) {
        let gt = if flip { pred.clone() } else { pred.iter().map(|c| c.iter().map(|v| v + 1).collect()).collect() };
        let e = mcce::<f64>(&pred, &gt).unwrap();
        prop_assert_eq!(e == 0.0, pred == gt);
    }

    #[test]
    fn oracle_score_is_the_metric((a, b) in mask_pair()) {
        let (ca, cb) = (a.to_class_mask(), b.to_class_mask());
        prop_assert_eq!(oracle_score(&ca, &cb, 2, true).unwrap(), iou::<f64>(&a, &b).unwrap());
        if b.count_ones() > 0 || b.len() > b.count_ones() {
            prop_assert_eq!(oracle_score(&ca, &cb, 2, false).unwrap(), metrics::miou::<f64>(&ca, &cb, 2).unwrap());
        }
    }

    #[test]
    fn threshold_filter_is_monotone(scores in prop::collection::vec(0.0f64..=1.0, 1..20), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let map: BTreeMap<String, f64> = scores.iter().enumerate().map(|(i, &s)| (format!("p{i}"), s)).collect();
        let ids: Vec<&str> = map.keys().map(String::as_str).collect();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let kept_lo = threshold_filter(ids.iter().copied(), &map, lo).unwrap();
        let kept_hi = threshold_filter(ids.iter().copied(), &map, hi).unwrap();
        prop_assert!(kept_hi.iter().all(|id| kept_lo.contains(id)));
    }

    #[test]
    fn remap_round_trips_outside_im((masks, classes) in class_ensemble()) {
        let c = im_multiclass(&masks).unwrap();
        let shifted = remap_with_im(&c.final_mask, &c.im, classes as usize).unwrap();
        let (back, im) = unmap_im(&shifted);
        prop_assert_eq!(&im, &c.im);
        for i in 0..back.len() {
            if !c.im.is_set(i) {
                prop_assert_eq!(back.data()[i], c.final_mask.data()[i]);
            }
        }
    }

    #[test]
    fn pairs_are_blacked_out_and_filtered(((h, w), img, masks) in dims().prop_flat_map(|(h, w)| (Just((h, w)), image(h, w), prop::collection::vec(bits(h, w), 2..4)))) {
        let c = im_binary(&masks).unwrap();
        let fg = c.foreground_count();
        let im = c.im_count();
        match make_pair("x", &img, &c, 2).unwrap().accepted() {
            Some(p) => {
                prop_assert!(fg > im);
                prop_assert!(p.blackout_holds());
                for i in 0..h * w {
                    if c.im.is_set(i) {
                        prop_assert!(p.image.pixel(i).iter().all(|&v| v == 0));
                    } else {
                        prop_assert_eq!(p.image.pixel(i), img.pixel(i));
                    }
                }
            }
            None => prop_assert!(fg <= im),
        }
        prop_assert_eq!(blackout(&img, &BinaryMask::zeros(h, w)).unwrap(), img);
    }

    #[test]
    fn cost_grows_with_width(alpha in 0.25f64..2.0, base in 8usize..32) {
        let input = (64, 64, 3);
        let cost = |a: f64, b: usize| unet_cost(&ArchConfig::new(a, b, input, 1).unwrap()).unwrap();
        let c = cost(alpha, base);
        let wider = cost(alpha, base + 1);
        prop_assert!(wider.params > c.params && wider.flops_fwd > c.flops_fwd);
        let doubled = cost(alpha * 2.0, base);
        prop_assert!(doubled.params > c.params && doubled.flops_fwd > c.flops_fwd);
    }

    #[test]
    fn budget_is_exact(num in 1i64..1_000_000, den in 1i64..1_000_000, steps in 1u64..10_000, epochs in 1u64..500) {
        let f = BigRational::new(BigInt::from(num), BigInt::from(den));
        let b = total_training_flops(f.clone(), steps, epochs);
        prop_assert_eq!(b.total, f * BigInt::from(steps) * BigInt::from(epochs));
    }

    #[test]
    fn noisy_oracle_is_seeded((_, gt) in dims().prop_flat_map(|(h, w)| (Just((h, w)), labels(h, w, 3))), seed in any::<u64>(), p in 0.0f64..=1.0) {
        let noise = NoiseModel::PixelFlip { p };
        prop_assert_eq!(noisy_oracle_predict(&gt, 3, false, &noise, seed).unwrap(), noisy_oracle_predict(&gt, 3, false, &noise, seed).unwrap());
    }

    #[test]
    fn rounded_frequencies_sum_to_100((masks, classes) in class_ensemble(), im_aware in any::<bool>()) {
        let classes = classes as usize - im_aware as usize;
        prop_assume!(classes >= 1);
        let t = class_frequency(&masks, classes, im_aware).unwrap();
        let total: f64 = t.rounded_shares().iter().sum();
        prop_assert!((total - 100.0).abs() <= 0.1, "{}", total);
    }

    #[test]
    fn splits_are_seeded(n in 3usize..60, ld in 1usize..3, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:03}")).collect();
        let make = || {
            let mut m = DatasetManifest::new("synthetic", (8, 8, 3), MaskMode::Multiclass, 1);
            m.set_split(Split::FD, ids.clone());
            split_dataset(m, &ids, ld, seed).unwrap()
        };
        let (a, b) = (make(), make());
        prop_assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let uld = a.split(Split::ULD);
        prop_assert!(a.split(Split::LD).iter().all(|id| !uld.contains(id)));
        prop_assert_eq!(a.split(Split::LD).len() + uld.len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn masks_and_images_round_trip_through_png((_, img, mask, bin) in dims().prop_flat_map(|(h, w)| (Just((h, w)), image(h, w), labels(h, w, 9), bits(h, w)))) {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pm, pb) = (dir.path().join("i.png"), dir.path().join("m.png"), dir.path().join("b.png"));
        dataset_io::write_image(&pi, &img).unwrap();
        dataset_io::write_class_mask(&pm, &mask).unwrap();
        dataset_io::write_binary_mask(&pb, &bin).unwrap();
        prop_assert_eq!(dataset_io::read_image(&pi).unwrap(), img);
        prop_assert_eq!(dataset_io::read_class_mask(&pm, 9).unwrap(), mask);
        prop_assert_eq!(dataset_io::read_binary_mask(&pb).unwrap(), bin);
    }

    #[test]
    fn components_are_counted_per_connectivity((_, m) in dims().prop_flat_map(|(h, w)| (Just((h, w)), bits(h, w)))) {
        let four = count_components(&m, Connectivity::Four, 1);
        let eight = count_components(&m, Connectivity::Eight, 1);
        prop_assert!(eight <= four);
        prop_assert!(four <= m.count_ones());
        prop_assert_eq!(eight == 0, m.count_ones() == 0);
    }
}
