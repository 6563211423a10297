//! Synthetic multipath CSI, angular-delay conversion, normalization and
//! per-UE partitioning.

mod io;

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use io::{read_samples, read_shards, sidecar_path, write_samples, write_shards, EnvRun, Sidecar, FORMAT_VERSION, HEADER_LEN, MAGIC};

use crate::error::{Error, Result};
use crate::model::CsiDims;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Env {
    Indoor,
    Outdoor,
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Env::Indoor => "indoor",
            Env::Outdoor => "outdoor",
        })
    }
}

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `(2, rows, cols)`: real parts, then imaginary parts.
    pub fn to_real_parts(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.data.iter().map(|z| z.re).collect();
        out.extend(self.data.iter().map(|z| z.im));
        out
    }
}

/// One propagation path of a uniform linear array with half-wavelength
/// spacing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    /// Departure angle in radians, 0 at broadside.
    pub angle: f64,
    /// Delay in sampling periods of the symbol window.
    pub delay: f64,
}

/// `H[a, k] = Σ_l g_l · exp(−jπ a sin θ_l) · exp(−j2π k τ_l / n_c)`.
pub fn channel_from_paths(paths: &[Path], dims: CsiDims) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(dims.n_t, dims.n_c);
    for p in paths {
        let s = p.angle.sin();
        for a in 0..dims.n_t {
            let steer = p.gain * Complex64::from_polar(1.0, -PI * a as f64 * s);
            for k in 0..dims.n_c {
                let phase = -2.0 * PI * k as f64 * p.delay / dims.n_c as f64;
                h.data[a * dims.n_c + k] += steer * Complex64::from_polar(1.0, phase);
            }
        }
    }
    h
}

/// Path count and delay spread of an environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathModel {
    pub paths: usize,
    /// Fraction of the symbol window covered by path delays.
    pub delay_spread: f64,
    /// Half-width of the angular sector in radians.
    pub half_sector: f64,
}

impl PathModel {
    pub fn for_env(env: Env) -> Self {
        let half_sector = PI / 3.0;
        match env {
            Env::Indoor => PathModel {
                paths: 3,
                delay_spread: 1.0 / 8.0,
                half_sector,
            },
            Env::Outdoor => PathModel {
                paths: 8,
                delay_spread: 0.5,
                half_sector,
            },
        }
    }

    /// Delay window in whole taps, at least one.
    pub fn taps(&self, n_c: usize) -> usize {
        ((self.delay_spread * n_c as f64).round() as usize).max(1)
    }

    /// Integer tap delays uniform over the window; complex standard
    /// normal gains with amplitude `exp(−τ / 2W)`, an exponential
    /// power-delay profile; angles uniform over the sector.
    pub fn draw(&self, dims: CsiDims, rng: &mut impl Rng) -> Vec<Path> {
        let w = self.taps(dims.n_c);
        (0..self.paths)
            .map(|_| {
                let delay = rng.random_range(0..w) as f64;
                let angle = rng.random_range(-self.half_sector..self.half_sector);
                let (re, im): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let amp = (-delay / (2.0 * w as f64)).exp() / 2f64.sqrt();
                Path {
                    gain: Complex64::new(re, im) * amp,
                    angle,
                    delay,
                }
            })
            .collect()
    }
}

/// Spatial-frequency channel of one sample, a pure function of its inputs.
pub fn synth_channel(env: Env, dims: CsiDims, seed: u64) -> ComplexMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    channel_from_paths(&PathModel::for_env(env).draw(dims, &mut rng), dims)
}

/// Seed of sample `index` in a pool, independent of every other sample.
pub fn sample_seed(seed: u64, env: Env, split: &str, index: usize) -> u64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = env as u8;
    let tag = split.as_bytes();
    let n = tag.len().min(15);
    key[9..9 + n].copy_from_slice(&tag[..n]);
    key[24..].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key).next_u64()
}

/// Unitary DFT along antennas, unitary inverse DFT along subcarriers.
pub fn dft2_angular_delay(h: &ComplexMatrix) -> ComplexMatrix {
    let (rows, cols) = (h.rows, h.cols);
    let mut planner = FftPlanner::<f64>::new();
    let mut out = h.clone();

    let fwd = planner.plan_fft_forward(rows);
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    let sr = 1.0 / (rows as f64).sqrt();
    for c in 0..cols {
        for (r, v) in col.iter_mut().enumerate() {
            *v = out.data[r * cols + c];
        }
        fwd.process(&mut col);
        for (r, v) in col.iter().enumerate() {
            out.data[r * cols + c] = v * sr;
        }
    }

    let inv = planner.plan_fft_inverse(cols);
    let sc = 1.0 / (cols as f64).sqrt();
    for row in out.data.chunks_mut(cols) {
        inv.process(row);
        row.iter_mut().for_each(|z| *z *= sc);
    }
    out
}

/// Affine map `x ↦ (x − offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { offset: 0.0, scale: 1.0 };

    /// Global min-max over `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if values.is_empty() || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::ZeroRange { value: lo });
        }
        Ok(Normalization { offset: lo, scale: hi - lo })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }
}

/// Maps real and imaginary parts into `[0, 1]` with one dataset-wide
/// min-max transform.
pub fn normalize_minmax(values: &[f64]) -> Result<(Vec<f64>, Normalization)> {
    let n = Normalization::fit(values)?;
    Ok((values.iter().map(|&v| n.apply(v)).collect(), n))
}

pub fn denormalize(values: &[f64], n: &Normalization) -> Vec<f64> {
    values.iter().map(|&v| n.invert(v)).collect()
}

/// Raw angular-delay samples before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPool {
    pub dims: CsiDims,
    pub envs: Vec<Env>,
    /// `(count, 2, n_t, n_c)` sample-major.
    pub values: Vec<f64>,
}

impl RawPool {
    /// `indoor` indoor samples followed by `outdoor` outdoor ones.
    pub fn generate(dims: CsiDims, indoor: usize, outdoor: usize, seed: u64, split: &str) -> Self {
        let mut envs = vec![Env::Indoor; indoor];
        envs.extend(std::iter::repeat(Env::Outdoor).take(outdoor));
        let mut values = Vec::with_capacity(envs.len() * dims.flat_len());
        let mut per_env = [0usize; 2];
        for &env in &envs {
            let i = &mut per_env[env as usize];
            let h = synth_channel(env, dims, sample_seed(seed, env, split, *i));
            *i += 1;
            values.extend(dft2_angular_delay(&h).to_real_parts());
        }
        RawPool { dims, envs, values }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn normalized(&self, n: &Normalization) -> Dataset {
        let flat = self.dims.flat_len();
        let data = self.values.iter().map(|&v| n.apply(v) as f32).collect();
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.dims.sample_shape());
        debug_assert_eq!(self.values.len(), self.len() * flat);
        Dataset {
            dims: self.dims,
            samples: Tensor::new(shape, data).expect("pool values match its shape"),
            envs: self.envs.clone(),
            normalization: *n,
        }
    }
}

/// Normalized samples with their environment tags; sample ids are row
/// indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: CsiDims,
    /// `(count, 2, n_t, n_c)`.
    pub samples: Tensor<f32>,
    pub envs: Vec<Env>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

/// One UE's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub ue: usize,
    /// Row indices into the pool, ascending.
    pub ids: Vec<usize>,
    pub envs: Vec<Env>,
    /// `(M, 2, n_t, n_c)`.
    pub samples: Tensor<f32>,
}

impl DatasetShard {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count(&self, env: Env) -> usize {
        self.envs.iter().filter(|&&e| e == env).count()
    }
}

/// Per-UE indoor shares out of 10 (outdoor is the remainder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub indoor_ratios: Vec<f64>,
    pub samples_per_ue: usize,
    pub seed: u64,
}

/// Indoor shares of the ten-UE non-IID setup, 9.5:0.5 down to 0.5:9.5.
pub const PAPER_INDOOR_RATIOS: [f64; 10] = [9.5, 8.5, 7.5, 6.5, 5.5, 4.5, 3.5, 2.5, 1.5, 0.5];

impl PartitionSpec {
    pub fn uniform(ues: usize, indoor: f64, samples_per_ue: usize, seed: u64) -> Self {
        PartitionSpec {
            indoor_ratios: vec![indoor; ues],
            samples_per_ue,
            seed,
        }
    }

    /// The paper's table for `ues = 10`; other fleet sizes interpolate the
    /// same linear sweep from 9.5 to 0.5.
    pub fn noniid(ues: usize, samples_per_ue: usize, seed: u64) -> Self {
        let indoor_ratios = if ues == 10 {
            PAPER_INDOOR_RATIOS.to_vec()
        } else if ues == 1 {
            vec![5.0]
        } else {
            (0..ues).map(|i| 9.5 - 9.0 * i as f64 / (ues - 1) as f64).collect()
        };
        PartitionSpec {
            indoor_ratios,
            samples_per_ue,
            seed,
        }
    }

    pub fn ues(&self) -> usize {
        self.indoor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indoor_ratios.is_empty() {
            return Err(Error::config("data.indoor_ratios", "needs one ratio per UE"));
        }
        if let Some(r) = self.indoor_ratios.iter().find(|r| !(0.0..=10.0).contains(*r)) {
            return Err(Error::config("data.indoor_ratios", format!("{r} is outside 0..=10")));
        }
        if self.samples_per_ue == 0 {
            return Err(Error::config("fleet.samples_per_ue", "must be at least 1"));
        }
        Ok(())
    }

    /// `round(M · r / 10)` indoor samples for each UE.
    pub fn indoor_counts(&self, samples_per_ue: usize) -> Vec<usize> {
        self.indoor_ratios
            .iter()
            .map(|r| (samples_per_ue as f64 * r / 10.0).round() as usize)
            .collect()
    }
}

/// Draws each UE's indoor and outdoor samples from the pool without
/// replacement.
pub fn partition_noniid(pool: &Dataset, spec: &PartitionSpec) -> Result<Vec<DatasetShard>> {
    spec.validate()?;
    let m = spec.samples_per_ue;
    let indoor = spec.indoor_counts(m);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_env = [Vec::new(), Vec::new()];
    for (i, &e) in pool.envs.iter().enumerate() {
        by_env[e as usize].push(i);
    }
    for (ids, env) in by_env.iter_mut().zip([Env::Indoor, Env::Outdoor]) {
        let needed: usize = indoor.iter().map(|&k| if env == Env::Indoor { k } else { m - k }).sum();
        if needed > ids.len() {
            return Err(Error::InsufficientData {
                env: env.to_string(),
                needed,
                available: ids.len(),
            });
        }
        ids.shuffle(&mut rng);
    }
    let mut cursor = [0usize; 2];
    indoor
        .iter()
        .enumerate()
        .map(|(ue, &k)| {
            let mut ids = Vec::with_capacity(m);
            for (env, take) in [(Env::Indoor, k), (Env::Outdoor, m - k)] {
                let c = &mut cursor[env as usize];
                ids.extend_from_slice(&by_env[env as usize][*c..*c + take]);
                *c += take;
            }
            ids.sort_unstable();
            Ok(DatasetShard {
                ue,
                envs: ids.iter().map(|&i| pool.envs[i]).collect(),
                samples: pool.samples.gather_rows(&ids)?,
                ids,
            })
        })
        .collect()
}

/// Training and held-out shards for a fleet, normalized together.
#[derive(Clone, Debug, PartialEq)]
pub struct FleetData {
    pub train: Vec<DatasetShard>,
    pub test: Vec<DatasetShard>,
    pub normalization: Normalization,
}

/// Generates exactly the samples the partition needs and fits one min-max
/// transform over both splits. Every held-out shard has the fleet's mean
/// indoor share, so a UE is tested on the overall mixture rather than on
/// its own.
pub fn generate_fleet_data(dims: CsiDims, spec: &PartitionSpec, test_per_ue: usize) -> Result<FleetData> {
    spec.validate()?;
    if test_per_ue == 0 {
        return Err(Error::config("data.test_per_ue", "must be at least 1"));
    }
    let pools: Vec<(RawPool, PartitionSpec)> = [("train", spec.samples_per_ue), ("test", test_per_ue)]
        .iter()
        .enumerate()
        .map(|(i, &(split, m))| {
            let mut part = PartitionSpec {
                samples_per_ue: m,
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            if split == "test" {
                let mean = spec.indoor_ratios.iter().sum::<f64>() / spec.ues() as f64;
                part.indoor_ratios = vec![mean; spec.ues()];
            }
            let indoor: usize = part.indoor_counts(m).iter().sum();
            let pool = RawPool::generate(dims, indoor, spec.ues() * m - indoor, spec.seed, split);
            (pool, part)
        })
        .collect();
    let all: Vec<f64> = pools.iter().flat_map(|(p, _)| p.values.iter().copied()).collect();
    let normalization = Normalization::fit(&all)?;
    let mut splits = pools
        .iter()
        .map(|(pool, part)| partition_noniid(&pool.normalized(&normalization), part))
        .collect::<Result<Vec<_>>>()?;
    let test = splits.pop().expect("test split");
    let train = splits.pop().expect("train split");
    Ok(FleetData {
        train,
        test,
        normalization,
    })
}

#[cfg(test)]
mod tests;
