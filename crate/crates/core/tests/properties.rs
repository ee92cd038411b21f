//! Randomized properties of checkpoints, extrapolation and decoding.

mod common;

use common::{random_like, random_map, random_prompt, rel_error, RandomProvider};
use epicode_core::checkpoint::{check_compat, from_bytes, to_bytes};
use epicode_core::decode::{
    contrast_logits, greedy_decode, greedy_decode_steps, plausibility_mask, strong_only_decode, DecodePolicy,
    GenerationLimits, LogitProvider, LogitVector,
};
use epicode_core::extrapolate::{extrapolate, interpolate, param_distance, ExtrapolationConfig};
use proptest::prelude::*;

fn ep(mu: f32) -> ExtrapolationConfig {
    ExtrapolationConfig::new(mu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let m = random_map(seed);
        let bytes = to_bytes(&m).unwrap();
        prop_assert!(from_bytes(&bytes).unwrap().bit_eq(&m));
        prop_assert_eq!(to_bytes(&m).unwrap(), bytes);
    }

    #[test]
    fn compat_is_symmetric_and_empty_on_self(a in any::<u64>(), b in any::<u64>()) {
        let (ma, mb) = (random_map(a), random_map(b));
        prop_assert!(check_compat(&ma, &ma).is_empty());
        prop_assert_eq!(check_compat(&ma, &mb).is_empty(), check_compat(&mb, &ma).is_empty());
    }

    #[test]
    fn mu_zero_is_identity(seed in any::<u64>()) {
        let s = random_map(seed);
        let w = random_like(&s, seed ^ 1);
        prop_assert!(extrapolate(&s, &w, ep(0.0)).unwrap().bit_eq(&s));
    }

    #[test]
    fn interpolation_inverts_extrapolation(seed in any::<u64>(), mu in 0.0f32..2.0) {
        let s = random_map(seed);
        let w = random_like(&s, seed ^ 1);
        let e = extrapolate(&s, &w, ep(mu)).unwrap();
        let back = interpolate(&e, &w, 1.0 / (1.0 + mu)).unwrap();
        prop_assert!(rel_error(&back, &s) <= 1e-6, "rel error {}", rel_error(&back, &s));
    }

    #[test]
    fn extrapolation_is_interpolation_past_one(seed in any::<u64>(), mu in 0.0f32..2.0) {
        let s = random_map(seed);
        let w = random_like(&s, seed ^ 1);
        let e = extrapolate(&s, &w, ep(mu)).unwrap();
        let i = interpolate(&s, &w, 1.0 + mu).unwrap();
        prop_assert!(rel_error(&i, &e) <= 1e-6);
    }

    #[test]
    fn repeated_extrapolation_composes(seed in any::<u64>(), m1 in 0.0f32..1.0, m2 in 0.0f32..1.0) {
        let s = random_map(seed);
        let w = random_like(&s, seed ^ 1);
        let twice = extrapolate(&extrapolate(&s, &w, ep(m1)).unwrap(), &w, ep(m2)).unwrap();
        let once = extrapolate(&s, &w, ep(m1 + m2 + m1 * m2)).unwrap();
        prop_assert!(rel_error(&twice, &once) <= 1e-6);
    }

    #[test]
    fn distance_scales_with_one_plus_mu(seed in any::<u64>(), mu in 0.0f32..3.0) {
        let s = random_map(seed);
        let w = random_like(&s, seed ^ 1);
        let e = extrapolate(&s, &w, ep(mu)).unwrap();
        let d = param_distance(&e, &w).unwrap();
        let expected = f64::from(1.0 + mu) * param_distance(&s, &w).unwrap();
        prop_assert!((d - expected).abs() <= 1e-5 * expected.max(1.0));
    }

    #[test]
    fn decoding_respects_the_mask(
        seed in any::<u64>(),
        lambda in prop::sample::select(vec![0.1f32, 0.5, 1.0, 4.0]),
        alpha in prop::sample::select(vec![0.1f32, 0.5, 0.9]),
    ) {
        let strong = RandomProvider { vocab: 12, seed, scale: 3.0 };
        let weak = RandomProvider { vocab: 12, seed: seed ^ 0xabc, scale: 3.0 };
        let prompt = random_prompt(seed, 12);
        let policy = DecodePolicy::new(lambda, alpha, 6, None).unwrap();
        let mut seq = prompt.clone();
        for step in greedy_decode_steps(&strong, &weak, &prompt, &policy).unwrap() {
            let ls = strong.next_logits(&seq).unwrap();
            let mask = plausibility_mask(&ls, alpha);
            prop_assert!(mask[step.token as usize]);
            prop_assert!(mask[ls.argmax() as usize]);
            seq.push(step.token);
        }
    }

    #[test]
    fn lambda_zero_is_strong_only(seed in any::<u64>(), alpha in 0.0f32..=1.0) {
        let strong = RandomProvider { vocab: 10, seed, scale: 2.0 };
        let weak = RandomProvider { vocab: 10, seed: !seed, scale: 2.0 };
        let prompt = random_prompt(seed, 10);
        let policy = DecodePolicy::new(0.0, alpha, 8, Some(1)).unwrap();
        let limits = GenerationLimits::from(&policy);
        prop_assert_eq!(
            greedy_decode(&strong, &weak, &prompt, &policy).unwrap(),
            strong_only_decode(&strong, &prompt, limits).unwrap()
        );
    }

    #[test]
    fn identical_models_decode_like_the_strong_model(seed in any::<u64>(), lambda in 0.0f32..5.0, alpha in 0.0f32..=1.0) {
        let strong = RandomProvider { vocab: 10, seed, scale: 2.0 };
        let prompt = random_prompt(seed, 10);
        let policy = DecodePolicy::new(lambda, alpha, 8, Some(1)).unwrap();
        let limits = GenerationLimits::from(&policy);
        prop_assert_eq!(
            greedy_decode(&strong, &strong.clone(), &prompt, &policy).unwrap(),
            strong_only_decode(&strong, &prompt, limits).unwrap()
        );
    }

    /// Logits and shifts on a quarter grid keep every operation exact, so
    /// the selection must not move when either model's logits shift.
    #[test]
    fn selection_ignores_constant_shifts(
        ls in prop::collection::vec(-40i32..40, 8),
        lw in prop::collection::vec(-40i32..40, 8),
        c1 in -40i32..40,
        c2 in -40i32..40,
        lambda in prop::sample::select(vec![0.0f32, 0.25, 0.5, 1.0, 2.0]),
        alpha in prop::sample::select(vec![0.1f32, 0.5, 0.9]),
    ) {
        let q = |v: &[i32], c: i32| LogitVector::new(v.iter().map(|&x| (x + c) as f32 * 0.25).collect()).unwrap();
        let policy = DecodePolicy::new(lambda, alpha, 1, None).unwrap();
        let base = contrast_logits(&q(&ls, 0), &q(&lw, 0), &policy).unwrap();
        let shifted = contrast_logits(&q(&ls, c1), &q(&lw, c2), &policy).unwrap();
        prop_assert_eq!(&base.allowed, &shifted.allowed);
        prop_assert_eq!(base.select(), shifted.select());
    }
}
