use ebl_core::ebl::{init_heads, EblPair};
use ebl_core::margin::spherical_triangle_check;
use ebl_core::metrics::{auc, rer};
use ebl_core::numerics::{Mat64, Rng};
use ebl_core::stream::{decode_frame, encode_frame, FrameKind, WireFrame};
use ebl_core::temporal::{LstmModel, SimilarityWindow};
use ebl_core::trainer::{exclude_extreme_poses, pose_deviation_deg, NormalSource};
use ebl_core::world::{PoseWalk, World, WorldConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn brute_auc(s: &[(f64, u8)]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for a in s.iter().filter(|x| x.1 == 1) {
        for b in s.iter().filter(|x| x.1 == 0) {
            den += 1.0;
            if a.0 > b.0 {
                num += 1.0;
            } else if a.0 == b.0 {
                num += 0.5;
            }
        }
    }
    num / den
}

// Coarse values so ties are common.
fn scored() -> impl Strategy<Value = Vec<(f64, u8)>> {
    prop::collection::vec(((0i32..20).prop_map(|v| v as f64 / 4.0), 0u8..2), 2..120)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0))
}

fn small_pair() -> &'static EblPair {
    static P: OnceLock<EblPair> = OnceLock::new();
    P.get_or_init(|| init_heads(&Rng::new(5), &[16, 16, 16, 16, 16]).unwrap())
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| World::build(WorldConfig { num_identities: 6, ..Default::default() }).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_equals_pairwise_count(s in scored()) {
        prop_assert_eq!(auc(&s).unwrap(), brute_auc(&s));
    }

    #[test]
    fn auc_ignores_strictly_increasing_maps(s in scored()) {
        let mapped: Vec<(f64, u8)> = s.iter().map(|&(v, l)| ((v * 0.7).exp() + 3.0, l)).collect();
        prop_assert_eq!(auc(&s).unwrap(), auc(&mapped).unwrap());
    }

    #[test]
    fn negating_scores_reflects_auc(s in scored()) {
        let neg: Vec<(f64, u8)> = s.iter().map(|&(v, l)| (-v, l)).collect();
        prop_assert!((auc(&s).unwrap() + auc(&neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rer_is_zero_on_equal_inputs_and_one_at_perfection(b in 0.0f64..0.99) {
        prop_assert_eq!(rer(b, b).unwrap(), 0.0);
        prop_assert!((rer(1.0, b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_outputs_are_unit_norm(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let x = Mat64::from_fn(4, 257, |_, _| rng.normal() * 3.0);
        for h in [&small_pair().h1, &small_pair().h2] {
            let e = h.forward(&x).unwrap();
            for r in 0..4 {
                let n: f64 = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
        let s = small_pair().similarity(x.row(0), x.row(1)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn exclusion_keeps_an_ordered_subsequence(seed in 0u64..10_000, thr in 1.0f64..60.0) {
        let w = world();
        let s = w.sample_session(1, 2, 60, &PoseWalk::default(), &mut Rng::new(seed)).unwrap();
        let kept = exclude_extreme_poses(&s.frames, &s.reference, NormalSource::Oracle, thr);
        let ts: Vec<usize> = kept.iter().map(|f| f.t).collect();
        prop_assert!(ts.windows(2).all(|p| p[0] < p[1]));
        for f in &kept {
            prop_assert!(pose_deviation_deg(f, &s.reference, NormalSource::Oracle).unwrap() <= thr + 1e-9);
        }
        let dropped = s.frames.iter().filter(|f| !ts.contains(&f.t));
        for f in dropped {
            prop_assert!(pose_deviation_deg(f, &s.reference, NormalSource::Oracle).unwrap() > thr);
        }
    }

    #[test]
    fn lstm_output_is_a_probability(seed in 0u64..10_000, len in 1usize..30) {
        let mut rng = Rng::new(seed);
        let m = LstmModel::new(2, 5, 2, 0.3, &mut rng).unwrap();
        let w = SimilarityWindow {
            phis: (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            yaws: Some((0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect()),
            label: 0,
        };
        let y = m.forward(&w).unwrap();
        prop_assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn frame_codec_round_trips_and_detects_flips(
        kind in 1u8..4, sid in any::<u64>(), t in any::<u32>(),
        payload in prop::collection::vec(-1e6f64..1e6, 0..64), flip in any::<prop::sample::Index>(),
    ) {
        let kind = [FrameKind::Handshake, FrameKind::Latent, FrameKind::End][kind as usize - 1];
        let f = WireFrame { kind, session_id: sid, t, payload };
        let bytes = encode_frame(&f);
        let (g, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&g, &f);
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 0x01;
        prop_assert!(decode_frame(&bad).is_err());
    }

    #[test]
    fn triangle_inequality_on_random_triples(seed in any::<u64>(), dim in 3usize..64) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (rng.unit_vec(dim), rng.unit_vec(dim), rng.unit_vec(dim));
        prop_assert!(spherical_triangle_check(&a, &b, &c).unwrap());
    }
}
