//! Generator, transform and file-format checks against independent oracles.

use std::collections::HashSet;
use std::f64::consts::PI;

use csilocal::data::*;
use csilocal::model::CsiDims;
use csilocal::{Error, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `X[m, d] = Σ_a Σ_k H[a, k] e^{−2πi am/n_t} e^{+2πi kd/n_c} / √(n_t n_c)`.
fn direct_dft(h: &ComplexMatrix) -> ComplexMatrix {
    let (nt, nc) = (h.rows, h.cols);
    let mut x = ComplexMatrix::zeros(nt, nc);
    for m in 0..nt {
        for d in 0..nc {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..nt {
                for k in 0..nc {
                    let ph = -2.0 * PI * (a * m) as f64 / nt as f64 + 2.0 * PI * (k * d) as f64 / nc as f64;
                    acc += h.at(a, k) * Complex64::from_polar(1.0, ph);
                }
            }
            x.data[m * nc + d] = acc / ((nt * nc) as f64).sqrt();
        }
    }
    x
}

#[test]
fn fft_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (nt, nc) in [(8, 8), (8, 8), (8, 8), (4, 6), (5, 3)] {
        let mut h = ComplexMatrix::zeros(nt, nc);
        for z in &mut h.data {
            *z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let (a, b) = (dft2_angular_delay(&h), direct_dft(&h));
        let err = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{nt}x{nc}: {err:e}");
    }
}

/// Fraction of energy in the first quarter of delay bins, from the
/// per-bin energy histogram summed over angles.
fn first_quarter_share(x: &ComplexMatrix) -> f64 {
    let mut hist = vec![0.0; x.cols];
    for a in 0..x.rows {
        for (d, h) in hist.iter_mut().enumerate() {
            *h += x.at(a, d).norm_sqr();
        }
    }
    let total: f64 = hist.iter().sum();
    hist[..x.cols / 4].iter().sum::<f64>() / total
}

#[test]
fn indoor_energy_concentrates_in_early_delays() {
    let dims = CsiDims::new(32, 32).unwrap();
    let share = |env| -> Vec<f64> {
        (0..1000)
            .map(|i| first_quarter_share(&dft2_angular_delay(&synth_channel(env, dims, sample_seed(7, env, "oracle", i)))))
            .collect()
    };
    let (indoor, outdoor) = (share(Env::Indoor), share(Env::Outdoor));
    assert!(indoor.iter().all(|&s| s >= 0.9));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&outdoor) < 0.9);
    assert!(mean(&outdoor) < mean(&indoor));
    assert!(outdoor.iter().filter(|&&s| s < 0.9).count() > 500);
}

#[test]
fn generated_data_spans_exactly_the_unit_interval() {
    let fd = generate_fleet_data(CsiDims::new(8, 8).unwrap(), &PartitionSpec::noniid(4, 30, 3), 10).unwrap();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for s in fd.train.iter().chain(&fd.test) {
        for &v in s.samples.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    assert_eq!((lo, hi), (0.0, 1.0));
    assert!(fd.normalization.scale > 0.0);
}

#[test]
fn shards_never_share_samples() {
    let dims = CsiDims::new(4, 4).unwrap();
    let raw = RawPool::generate(dims, 300, 300, 0, "pool");
    let pool = raw.normalized(&Normalization::fit(&raw.values).unwrap());
    for spec in [PartitionSpec::noniid(10, 50, 1), PartitionSpec::uniform(6, 5.0, 100, 2)] {
        let shards = partition_noniid(&pool, &spec).unwrap();
        let mut seen = HashSet::new();
        for s in &shards {
            for (j, &id) in s.ids.iter().enumerate() {
                assert!(seen.insert(id), "sample {id} appears twice");
                assert_eq!(pool.envs[id], s.envs[j]);
                assert_eq!(s.samples.slice_rows(j..j + 1).unwrap().data(), pool.samples.slice_rows(id..id + 1).unwrap().data());
            }
        }
        assert_eq!(seen.len(), spec.ues() * spec.samples_per_ue);
    }
}

fn example_shards() -> (Vec<DatasetShard>, Normalization) {
    let fd = generate_fleet_data(CsiDims::new(4, 8).unwrap(), &PartitionSpec::noniid(3, 6, 9), 2).unwrap();
    (fd.train, fd.normalization)
}

#[test]
fn files_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csid");
    let (shards, norm) = example_shards();
    write_shards(&path, &shards, norm).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 24 + 4 * 18 * 2 * 4 * 8);
    let (back, norm_back) = read_shards(&path).unwrap();
    assert_eq!(norm_back, norm);
    for (a, b) in shards.iter().zip(&back) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.samples), bits(&b.samples));
        assert_eq!(a.envs, b.envs);
    }

    let odd = Tensor::from_fn([3, 2, 1, 5], |i| if i == 4 { f32::NAN } else { -(i as f32) * 1e-30 });
    let p = dir.path().join("odd.csid");
    write_samples(&p, &odd).unwrap();
    let back = read_samples(&p).unwrap();
    assert_eq!(back.shape(), odd.shape());
    assert!(back.data().iter().zip(odd.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let (one, id) = read_shards(&p).unwrap();
    assert_eq!((one.len(), id), (1, Normalization::IDENTITY));
}

#[test]
fn damaged_files_fail_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csid");
    write_samples(&path, &Tensor::from_fn([2, 2, 2, 2], |i| i as f32)).unwrap();
    let good = std::fs::read(&path).unwrap();
    let write = |bytes: &[u8]| {
        std::fs::write(&path, bytes).unwrap();
        read_samples(&path).unwrap_err()
    };

    let mut b = good.clone();
    b[0] = b'X';
    assert!(matches!(write(&b), Error::BadMagic { .. }));
    let mut b = good.clone();
    b[4] = 2;
    assert!(matches!(write(&b), Error::VersionMismatch { found: 2, expected: 1, .. }));
    assert!(matches!(write(&good[..good.len() - 3]), Error::Truncated { expected: 88, found: 85, .. }));
    assert!(matches!(write(&good[..10]), Error::Truncated { expected: 24, .. }));
    let mut b = good.clone();
    b.push(0);
    assert!(matches!(write(&b), Error::Malformed { .. }));
    let mut b = good.clone();
    b[12] = 3;
    assert!(matches!(write(&b), Error::Malformed { .. }));
}

#[test]
fn inconsistent_sidecar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csid");
    let (shards, norm) = example_shards();
    write_shards(&path, &shards, norm).unwrap();
    let side = sidecar_path(&path);
    let text = std::fs::read_to_string(&side).unwrap();
    std::fs::write(&side, text.replace("ues = 3", "ues = 4")).unwrap();
    assert!(matches!(read_shards(&path), Err(Error::Malformed { .. })));
    std::fs::write(&side, format!("{text}\nextra = 1\n")).unwrap();
    assert!(matches!(read_shards(&path), Err(Error::Malformed { .. })));
}
