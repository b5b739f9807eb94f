use hybrid_core::cdmoe::{brute_force_topk, product_key_topk};
use hybrid_core::rope::{self, RopeConfig};
use hybrid_core::ssd::{ssd_chunked, ssd_quadratic, ssd_recurrent};
use hybrid_core::tasks::{generate_mqar, validate_dataset, MqarConfig, Split};
use hybrid_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
}

struct Scan {
    x: Tensor,
    dt: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

fn scan(seed: u64, bs: usize, t: usize, h: usize, p: usize, n: usize) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Scan {
        x: Tensor::randn(&[bs, t, h, p], 1.0, &mut rng),
        dt: Tensor::randn(&[bs, t, h], 1.0, &mut rng).softplus(),
        a: Tensor::rand_uniform(&[h], -2.0, -0.1, &mut rng),
        b: Tensor::randn(&[bs, t, h, n], 1.0, &mut rng),
        c: Tensor::randn(&[bs, t, h, n], 1.0, &mut rng),
        d: Tensor::randn(&[h], 1.0, &mut rng),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunked_scan_matches_quadratic(seed in any::<u64>(), t in 1usize..24, cl in 1usize..9, h in 1usize..3, n in 1usize..5) {
        let s = scan(seed, 1, t, h, 2, n);
        let q = ssd_quadratic(&s.x, &s.dt, &s.a, &s.b, &s.c, &s.d).unwrap();
        let c = ssd_chunked(&s.x, &s.dt, &s.a, &s.b, &s.c, &s.d, cl).unwrap();
        prop_assert!(rel(&c, &q) < 1e-10);
    }

    #[test]
    fn recurrent_scan_resumes_from_state(seed in any::<u64>(), t in 2usize..20, split in 1usize..19) {
        let split = split.min(t - 1);
        let s = scan(seed, 2, t, 2, 3, 4);
        let (full, end) = ssd_recurrent(&s.x, &s.dt, &s.a, &s.b, &s.c, &s.d, None).unwrap();
        let part = |x: &Tensor, lo: usize, hi: usize| x.slice(1, lo, hi).unwrap();
        let (y1, mid) = ssd_recurrent(
            &part(&s.x, 0, split), &part(&s.dt, 0, split), &s.a,
            &part(&s.b, 0, split), &part(&s.c, 0, split), &s.d, None,
        ).unwrap();
        let (y2, end2) = ssd_recurrent(
            &part(&s.x, split, t), &part(&s.dt, split, t), &s.a,
            &part(&s.b, split, t), &part(&s.c, split, t), &s.d, Some(&mid),
        ).unwrap();
        let joined = Tensor::concat(&[y1, y2], 1).unwrap();
        prop_assert!(rel(&joined, &full) < 1e-12);
        prop_assert!(rel(&end2.tensor(), &end.tensor()) < 1e-12);
    }

    #[test]
    fn product_key_topk_is_exhaustive(
        sx in prop::collection::vec(-3.0f64..3.0, 1..20),
        seed in any::<u64>(),
        k in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sy: Vec<f64> = (0..sx.len()).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let k = k.min(sx.len());
        let fast = product_key_topk(&sx, &sy, k);
        let slow = brute_force_topk(&sx, &sy, k);
        prop_assert_eq!(fast.iter().map(|p| p.1).collect::<Vec<_>>(), slow.iter().map(|p| p.1).collect::<Vec<_>>());
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a.0 - b.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rotary_scores_depend_on_offset_only(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        m in 0usize..200, n in 0usize..200, shift in 0usize..300,
    ) {
        let cfg = RopeConfig::new(8, 1024);
        let a = rope::relative_score_oracle(&q, &k, m, n, &cfg);
        let b = rope::relative_score_oracle(&q, &k, m + shift, n + shift, &cfg);
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 5.0, &mut rng);
        let y = x.softmax_lastdim().unwrap().to_vec();
        for r in y.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn matmul_transpose_identity(seed in any::<u64>(), m in 1usize..7, k in 1usize..7, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let lhs = a.matmul(&b).unwrap().t().unwrap();
        let rhs = b.t().unwrap().matmul(&a.t().unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn mqar_samples_validate(seed in any::<u64>(), t in prop::sample::select(vec![16usize, 32, 64])) {
        let cfg = MqarConfig { n_train: 20, n_test: 4, ..MqarConfig::desk(128, t, seed) };
        let ds = generate_mqar(&cfg, Split::Train).unwrap();
        prop_assert!(validate_dataset(&ds).is_ok());
    }
}
