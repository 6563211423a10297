use proptest::prelude::*;
use rand::Rng;

use super::*;

fn dims(n_t: usize, n_c: usize) -> CsiDims {
    CsiDims::new(n_t, n_c).unwrap()
}

fn tagged_pool(indoor: usize, outdoor: usize) -> Dataset {
    let n = indoor + outdoor;
    let mut envs = vec![Env::Indoor; indoor];
    envs.extend(std::iter::repeat(Env::Outdoor).take(outdoor));
    Dataset {
        dims: dims(2, 2),
        samples: Tensor::from_fn([n, 2, 2, 2], |i| (i / 8) as f32),
        envs,
        normalization: Normalization::IDENTITY,
    }
}

#[test]
fn single_broadside_path_is_flat() {
    let g = Complex64::new(0.3, -1.2);
    let h = channel_from_paths(&[Path { gain: g, angle: 0.0, delay: 0.0 }], dims(4, 6));
    assert!(h.data.iter().all(|&z| (z - g).norm() < 1e-15));
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let d = dims(8, 8);
    assert_eq!(synth_channel(Env::Indoor, d, 9), synth_channel(Env::Indoor, d, 9));
    assert_ne!(synth_channel(Env::Indoor, d, 9), synth_channel(Env::Indoor, d, 10));
    assert_ne!(synth_channel(Env::Indoor, d, 9), synth_channel(Env::Outdoor, d, 9));
    assert_ne!(sample_seed(1, Env::Indoor, "train", 0), sample_seed(1, Env::Indoor, "test", 0));
    let a = RawPool::generate(d, 3, 2, 4, "train");
    let b = RawPool::generate(d, 3, 5, 4, "train");
    // Samples depend on their own index only, not on the pool size.
    assert_eq!(a.values[..3 * 128], b.values[..3 * 128]);
    assert!(a.values.iter().all(|v| v.is_finite()));
}

#[test]
fn indoor_paths_stay_in_the_first_taps() {
    let d = dims(4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert!(PathModel::for_env(Env::Indoor).draw(d, &mut rng).iter().all(|p| p.delay < 4.0));
        let paths = PathModel::for_env(Env::Outdoor).draw(d, &mut rng);
        assert_eq!(paths.len(), 8);
        assert!(paths.iter().all(|p| p.delay < 16.0 && p.angle.abs() <= PI / 3.0));
    }
    assert_eq!(PathModel::for_env(Env::Indoor).taps(4), 1);
}

#[test]
fn dft_of_constant_is_dc() {
    let mut h = ComplexMatrix::zeros(4, 8);
    h.data.iter_mut().for_each(|z| *z = Complex64::new(1.5, -0.5));
    let x = dft2_angular_delay(&h);
    let dc = Complex64::new(1.5, -0.5) * (32f64).sqrt();
    assert!((x.at(0, 0) - dc).norm() < 1e-12);
    assert!(x.data[1..].iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn on_grid_delay_lands_in_its_bin() {
    let h = channel_from_paths(&[Path { gain: Complex64::new(1.0, 0.0), angle: 0.0, delay: 3.0 }], dims(4, 8));
    let x = dft2_angular_delay(&h);
    let (r, c) = (0..32).map(|i| (i / 8, i % 8)).max_by(|a, b| x.at(a.0, a.1).norm().total_cmp(&x.at(b.0, b.1).norm())).unwrap();
    assert_eq!((r, c), (0, 3));
    assert!((x.at(0, 3).norm() - h.frobenius()).abs() < 1e-12);
}

#[test]
fn minmax_examples() {
    let v = vec![0.0, 0.25, 1.0, 0.5];
    let (n, t) = normalize_minmax(&v).unwrap();
    assert_eq!(n, v);
    assert_eq!(t, Normalization::IDENTITY);
    let v = vec![-3.0, 2.0, 0.125, 7.5];
    let (n, t) = normalize_minmax(&v).unwrap();
    assert_eq!((n[0], n[3]), (0.0, 1.0));
    for (a, b) in denormalize(&n, &t).iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(normalize_minmax(&[2.0, 2.0]), Err(Error::ZeroRange { value }) if value == 2.0));
    assert!(normalize_minmax(&[]).is_err());
}

#[test]
fn paper_ratio_table() {
    let spec = PartitionSpec::noniid(10, 13_000, 0);
    let expected_indoor = [12_350, 11_050, 9_750, 8_450, 7_150, 5_850, 4_550, 3_250, 1_950, 650];
    assert_eq!(spec.indoor_counts(13_000), expected_indoor);
    let shards = partition_noniid(&tagged_pool(65_000, 65_000), &spec).unwrap();
    for (s, &k) in shards.iter().zip(&expected_indoor) {
        assert_eq!((s.len(), s.count(Env::Indoor), s.count(Env::Outdoor)), (13_000, k, 13_000 - k));
    }
    let desk = PartitionSpec::noniid(10, 1_300, 0);
    assert_eq!(desk.indoor_counts(1_300)[0], 1_235);
    assert_eq!(desk.indoor_counts(1_300)[9], 65);
}

#[test]
fn even_split_and_interpolated_tables() {
    let shards = partition_noniid(&tagged_pool(10, 10), &PartitionSpec::uniform(2, 5.0, 10, 1)).unwrap();
    assert!(shards.iter().all(|s| s.count(Env::Indoor) == 5 && s.count(Env::Outdoor) == 5));
    let four = PartitionSpec::noniid(4, 10, 0);
    assert_eq!(four.indoor_ratios, vec![9.5, 6.5, 3.5, 0.5]);
    assert_eq!(PartitionSpec::noniid(1, 10, 0).indoor_ratios, vec![5.0]);
}

#[test]
fn pool_exhaustion_reports_counts() {
    let err = partition_noniid(&tagged_pool(10, 3), &PartitionSpec::uniform(2, 5.0, 8, 0)).unwrap_err();
    assert!(matches!(err, Error::InsufficientData { ref env, needed: 8, available: 3 } if env == "outdoor"));
    let mut bad = PartitionSpec::uniform(2, 5.0, 8, 0);
    bad.indoor_ratios[1] = 11.0;
    assert!(bad.validate().is_err());
}

#[test]
fn partition_is_seeded() {
    let pool = tagged_pool(40, 40);
    let spec = PartitionSpec::noniid(3, 10, 5);
    assert_eq!(partition_noniid(&pool, &spec).unwrap(), partition_noniid(&pool, &spec).unwrap());
    let other = PartitionSpec { seed: 6, ..spec.clone() };
    assert_ne!(partition_noniid(&pool, &spec).unwrap(), partition_noniid(&pool, &other).unwrap());
}

#[test]
fn test_shards_share_the_fleet_mixture() {
    let spec = PartitionSpec::noniid(3, 20, 2);
    let fd = generate_fleet_data(dims(4, 8), &spec, 10).unwrap();
    assert_eq!(fd.train.len(), 3);
    for (tr, te) in fd.train.iter().zip(&fd.test) {
        assert_eq!(tr.samples.shape(), &[20, 2, 4, 8]);
        assert_eq!(te.samples.shape(), &[10, 2, 4, 8]);
    }
    assert_eq!(fd.train[0].count(Env::Indoor), 19);
    assert_eq!(fd.train[2].count(Env::Indoor), 1);
    for te in &fd.test {
        assert_eq!(te.count(Env::Indoor), 5);
    }
    let all = fd.train.iter().chain(&fd.test).flat_map(|s| s.samples.data().iter().copied());
    let (lo, hi) = all.fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(v), h.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));
    assert!(generate_fleet_data(dims(4, 8), &spec, 0).is_err());
    assert_eq!(fd, generate_fleet_data(dims(4, 8), &spec, 10).unwrap());
}

proptest! {
    #[test]
    fn dft_preserves_frobenius_norm(n_t in 1usize..10, n_c in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = ComplexMatrix::zeros(n_t, n_c);
        for z in &mut h.data {
            *z = Complex64::new(rng.random_range(-1.0f64..1.0), rng.random_range(-1.0f64..1.0));
        }
        let x = dft2_angular_delay(&h);
        prop_assert!((x.frobenius() - h.frobenius()).abs() <= 1e-6 * h.frobenius());
    }

    #[test]
    fn normalized_values_lie_in_unit_interval(v in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        prop_assume!(v.iter().any(|&x| x != v[0]));
        let (n, t) = normalize_minmax(&v).unwrap();
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        for (a, b) in denormalize(&n, &t).iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}
