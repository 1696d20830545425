use proptest::prelude::*;

use promptseg::eval_harness::dice;
use promptseg::synth_data::{generate_scene, SceneConfig, Split, SplitCounts, UnitClass};
use promptseg::task_engine::{compute_task_mask, sample_point, Point, PromptBank, TaskSpec, TASK_IDS};
use promptseg::Mask;

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |d| Mask::from_vec(h, w, d).unwrap())
}

fn class() -> impl Strategy<Value = UnitClass> {
    (0usize..4).prop_map(|i| UnitClass::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn set_identities_on_random_masks(u in mask(12, 12), n in mask(12, 12), seed in any::<u64>()) {
        use rand::SeedableRng;
        let masks = promptseg::synth_data::SceneMasks { unit_mask: u, nuclei_mask: n, unit_class: UnitClass::Pt };
        let t = |task, p| compute_task_mask(&masks, &TaskSpec::new(task, UnitClass::Pt, p).unwrap()).unwrap();
        let (t1, t2, t3, t4, t5) = (t(1, None), t(2, None), t(3, None), t(4, None), t(5, None));
        prop_assert_eq!(t3, t1.union(&t2).unwrap());
        prop_assert_eq!(t4.union(&t5).unwrap(), t2.clone());
        prop_assert!(t4.is_disjoint(&t5));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        if let Ok(p) = sample_point(&masks, 7, &mut rng) {
            let (t7, t8, t9) = (t(7, Some(p)), t(8, Some(p)), t(9, Some(p)));
            prop_assert!(t7.is_subset_of(&t1));
            prop_assert!(t8.is_subset_of(&t7));
            prop_assert_eq!(t8.union(&t9).unwrap(), t2.clone());
            prop_assert!(t8.is_disjoint(&t9));
        }
        if let Ok(p) = sample_point(&masks, 6, &mut rng) {
            prop_assert!(t(6, Some(p)).is_subset_of(&t2));
        }
    }

    #[test]
    fn sampled_points_land_on_the_source_mask(u in mask(9, 7), seed in any::<u64>()) {
        use rand::SeedableRng;
        let masks = promptseg::synth_data::SceneMasks { unit_mask: u.clone(), nuclei_mask: u.clone(), unit_class: UnitClass::Dt };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        match sample_point(&masks, 7, &mut rng) {
            Ok(p) => {
                prop_assert!(p.in_unit_square());
                let (r, c) = p.to_pixel(9, 7).unwrap();
                prop_assert!(u.get(r, c));
            }
            Err(_) => prop_assert!(u.is_empty()),
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(8, 8), b in mask(8, 8)) {
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pixel_centres_round_trip(r in 0usize..50, c in 0usize..50) {
        let p = Point::pixel_center(r, c, 50, 50);
        prop_assert_eq!(p.to_pixel(50, 50).unwrap(), (r, c));
    }

    #[test]
    fn scaled_counts_stay_within_one_of_exact(scale in 0.0f64..2.0) {
        let s = SplitCounts::REFERENCE.scaled(scale).unwrap();
        prop_assert_eq!(s.total(), (2083.0 * scale + 1e-9).floor() as usize);
        for class in UnitClass::ALL {
            for split in [Split::Train, Split::Val, Split::Test] {
                let exact = SplitCounts::REFERENCE.get(class, split) as f64 * scale;
                prop_assert!((s.get(class, split) as f64 - exact).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn bank_renders_substitute_the_class(task_idx in 0usize..9, variant in 0usize..20, c in class()) {
        let bank = PromptBank::builtin();
        let text = bank.text(TASK_IDS[task_idx], c, variant).unwrap();
        prop_assert!(!text.contains("<class>"));
        prop_assert!(text.contains(c.display_name()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_satisfy_their_invariants(c in class(), seed in any::<u64>()) {
        let config = SceneConfig::default();
        let (patch, masks) = generate_scene(&config, c, seed).unwrap();
        prop_assert_eq!(patch.pixels.len(), 64 * 64 * 3);
        prop_assert!(patch.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(masks.unit_class, c);
        prop_assert!(!masks.unit_mask.is_empty());
        let nuclei = masks.nuclei_mask.components();
        let units = masks.unit_mask.components();
        for u in 1..=units.count as u32 {
            let unit = units.mask(u, 64, 64);
            prop_assert!((1..=nuclei.count as u32).any(|n| nuclei.mask(n, 64, 64).is_subset_of(&unit)));
        }
    }
}
