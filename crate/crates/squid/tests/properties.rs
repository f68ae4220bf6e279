use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use squid::digitanatomy::{sample_abnormal_conditions, AnomalyKind, AnomalyMix, GenConfig};
use squid::eval::{roc_auc, roc_curve, trapezoid, Calibration};
use squid::memory::{gumbel_shrinkage, hard_shrinkage, MemoryQueue, Shrinkage};
use squid::networks::{divide_patches, reverse_patches};
use squid::Mode;
use tch::{Device, Kind, Tensor};

fn values(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(t.to_kind(Kind::Double).flatten(0, -1)).unwrap()
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| (prop::collection::vec(0u8..8, n), prop::collection::vec(any::<bool>(), n))).prop_map(|(s, mut l)| {
        l[0] = true;
        l[1] = false;
        (s.into_iter().map(|v| v as f64 / 8.0).collect(), l)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrinkage_keeps_the_k_largest_and_sums_to_one(w in prop::collection::vec(-5.0f64..5.0, 1..30), k in 1i64..30) {
        let t = Tensor::from_slice(&w);
        for out in [gumbel_shrinkage(&t, k).unwrap(), hard_shrinkage(&t, k).unwrap()] {
            let v = values(&out);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().filter(|&&x| x != 0.0).count() as i64 <= k);
            let kept_min = w.iter().zip(&v).filter(|(_, &y)| y != 0.0).map(|(&x, _)| x).fold(f64::INFINITY, f64::min);
            let dropped_max = w.iter().zip(&v).filter(|(_, &y)| y == 0.0).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms((s, l) in scored_labels(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = roc_auc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        prop_assert_eq!(roc_auc(&affine, &l).unwrap(), base);
        prop_assert_eq!(roc_auc(&exp, &l).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn reversed_scores_complement_auc((s, l) in scored_labels()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_area_matches_auc((s, l) in scored_labels()) {
        let area = trapezoid(&roc_curve(&s, &l).unwrap());
        prop_assert!((area - roc_auc(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn patches_round_trip(rows in 1usize..4, cols in 1usize..4, side in 1i64..6, batch in 1i64..3, channels in 1i64..3) {
        let x = Tensor::randn([batch, channels, rows as i64 * side, cols as i64 * side], (Kind::Float, Device::Cpu));
        let p = divide_patches(&x, rows, cols).unwrap();
        prop_assert_eq!(p.size(), vec![batch * (rows * cols) as i64, channels, side, side]);
        prop_assert!(reverse_patches(&p, rows, cols).unwrap().equal(&x));
    }

    #[test]
    fn queue_query_is_row_equivariant(seed in 0u64..1000, n in 1i64..12, k in 1i64..8) {
        tch::manual_seed(seed as i64);
        let q = MemoryQueue::from_patterns(&Tensor::randn([2, 6, 5], (Kind::Double, Device::Cpu))).unwrap();
        let f = Tensor::randn([n, 5], (Kind::Double, Device::Cpu));
        let perm = Tensor::randperm(n, (Kind::Int64, Device::Cpu));
        let direct = q.query_assemble(1, &f, k, Shrinkage::Gumbel).unwrap().index_select(0, &perm);
        let permuted = q.query_assemble(1, &f.index_select(0, &perm), k, Shrinkage::Gumbel).unwrap();
        prop_assert!(direct.allclose(&permuted, 1e-12, 1e-12, false));
    }

    #[test]
    fn queue_keeps_the_newest_rows(capacity in 1usize..8, batches in prop::collection::vec(1i64..5, 1..6)) {
        let mut q = MemoryQueue::from_patterns(&Tensor::zeros([1, capacity as i64, 1], (Kind::Float, Device::Cpu))).unwrap();
        let mut seen = Vec::new();
        for b in batches {
            let rows: Vec<f32> = (0..b).map(|i| (seen.len() as i64 + i + 1) as f32).collect();
            q.update(0, &Tensor::from_slice(&rows).view([b, 1]), Mode::Train).unwrap();
            seen.extend(rows);
        }
        let mut stored = Vec::<f32>::try_from(q.region(0).flatten(0, -1)).unwrap();
        stored.retain(|&v| v != 0.0);
        stored.sort_by(f32::total_cmp);
        let newest: Vec<f32> = seen[seen.len().saturating_sub(capacity)..].to_vec();
        prop_assert_eq!(stored, newest);
        prop_assert_eq!(q.pointer(0), seen.len() % capacity);
    }

    #[test]
    fn calibrated_score_is_monotone(raw in prop::collection::vec(0.0f64..1.0, 3..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assume!(raw.iter().any(|&x| x != raw[0]));
        let cal = Calibration::from_raw(&raw).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cal.score(lo) <= cal.score(hi));
    }
}

#[test]
fn one_sigma_above_the_mean_scores_sigmoid_one() {
    let cal = Calibration::from_raw(&[1.0, 2.0, 3.0]).unwrap();
    assert!((cal.score(cal.mu + cal.sigma) - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert_eq!(cal.score(cal.mu), 0.5);
}

#[test]
fn anomaly_kinds_follow_the_mix() {
    let cfg = GenConfig { mix: "missing=0.25,misorder=0.25,flipped=0.25,novel=0.25".parse::<AnomalyMix>().unwrap(), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 4];
    for _ in 0..1000 {
        for c in sample_abnormal_conditions(&cfg, &mut rng).unwrap() {
            if let Some(kind) = c.kind() {
                counts[AnomalyKind::ALL.iter().position(|&k| k == kind).unwrap()] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    for (count, weight) in counts.iter().zip(cfg.mix.weights()) {
        let expected = total as f64 * weight;
        let sd = (total as f64 * weight * (1.0 - weight)).sqrt();
        assert!((*count as f64 - expected).abs() <= 3.0 * sd, "{counts:?}");
    }
}
