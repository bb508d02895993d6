//! Synthetic spurious-correlation benchmarks with binary `y` and `a`.
//!
//! Features are `[core | spurious | noise]` blocks plus isotropic Gaussian
//! noise. The spurious block is `μ_sp·(2a − 1)` on every coordinate. The core
//! block depends on the variant:
//!
//! * `linear-spurious`: every core coordinate is `μ_core·(2y − 1)`.
//! * `xor-core`: the first two core coordinates are `±μ_core` with signs
//!   whose XOR is `y`; remaining core coordinates carry only noise. No linear
//!   function of the raw input recovers `y` on group-balanced data.
//!
//! The training split has majority groups (`y = a`) of size
//! `round(n·ρ/2)` and minority groups of size `round(n·(1 − ρ)/2)`.
//! Validation and test splits are exactly group-balanced.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};

const GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LinearSpurious,
    XorCore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousGenSpec {
    pub variant: Variant,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of training examples with `y = a`.
    pub rho: f64,
    pub d_core: usize,
    pub d_sp: usize,
    pub d_noise: usize,
    pub mu_core: f64,
    pub mu_sp: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SpuriousGenSpec {
    fn default() -> Self {
        SpuriousGenSpec {
            variant: Variant::XorCore,
            n_train: 4000,
            n_val: 2000,
            n_test: 2000,
            rho: 0.95,
            d_core: 4,
            d_sp: 2,
            d_noise: 10,
            mu_core: 1.0,
            mu_sp: 1.0,
            sigma: 0.6,
            seed: 0,
        }
    }
}

impl SpuriousGenSpec {
    pub fn dim(&self) -> usize {
        self.d_core + self.d_sp + self.d_noise
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data.generator.{m}")));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho: {} not in [0, 1]", self.rho));
        }
        if self.variant == Variant::XorCore && self.d_core < 2 {
            return bad("d_core: xor-core needs at least 2 core dimensions".into());
        }
        if self.d_core + self.d_sp == 0 {
            return bad("d_core: no signal dimensions".into());
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return bad("sigma: must be >= 0".into());
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if n < GROUPS {
                return bad(format!("{name}: {n} examples cannot cover {GROUPS} groups"));
            }
        }
        for (name, n) in [("n_val", self.n_val), ("n_test", self.n_test)] {
            if n % GROUPS != 0 {
                return bad(format!(
                    "{name}: {n} is not divisible into {GROUPS} equal groups"
                ));
            }
        }
        Ok(())
    }
}

/// Training group counts in group order `(0,0), (0,1), (1,0), (1,1)`.
/// Rounding leftovers (at most one per group) go to majority groups first.
pub fn train_group_counts(n: usize, rho: f64) -> Result<[usize; GROUPS]> {
    if n < GROUPS {
        return Err(Error::Config(format!(
            "{n} examples cannot cover {GROUPS} groups"
        )));
    }
    let majority = (n as f64 * rho / 2.0).round() as usize;
    let minority = (n as f64 * (1.0 - rho) / 2.0).round() as usize;
    let mut counts = [majority, minority, minority, majority];
    let order = [0, 3, 1, 2];
    let mut step = 0;
    loop {
        let total: usize = counts.iter().sum();
        if total == n {
            break;
        }
        let g = order[step % GROUPS];
        if total < n {
            counts[g] += 1;
        } else if counts[g] > 0 {
            counts[g] -= 1;
        }
        step += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSplits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

fn sample_split(
    spec: &SpuriousGenSpec,
    counts: [usize; GROUPS],
    split: Split,
    stream: Stream,
) -> Result<GroupedDataset> {
    let mut rng = stream_rng(spec.seed, stream);
    let d = spec.dim();
    let n: usize = counts.iter().sum();
    let mut rows: Vec<(Vec<f64>, usize, usize)> = Vec::with_capacity(n);
    for (g, &count) in counts.iter().enumerate() {
        let (y, a) = (g / 2, g % 2);
        for k in 0..count {
            let mut x = vec![0.0; d];
            match spec.variant {
                Variant::LinearSpurious => {
                    for v in &mut x[..spec.d_core] {
                        *v = spec.mu_core * sign(y);
                    }
                }
                Variant::XorCore => {
                    let first = k % 2;
                    let second = first ^ y;
                    x[0] = spec.mu_core * sign(first);
                    x[1] = spec.mu_core * sign(second);
                }
            }
            for v in &mut x[spec.d_core..spec.d_core + spec.d_sp] {
                *v = spec.mu_sp * sign(a);
            }
            if spec.sigma > 0.0 {
                for v in &mut x {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += spec.sigma * z;
                }
            }
            rows.push((x, y, a));
        }
    }
    rows.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for (x, y, a) in rows {
        data.extend(x);
        labels.push(y);
        attributes.push(a);
    }
    GroupedDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels,
        attributes,
        2,
        2,
        split,
    )
}

fn sign(bit: usize) -> f64 {
    if bit == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Draws the three splits. Pure function of `spec`.
pub fn generate(spec: &SpuriousGenSpec) -> Result<GeneratedSplits> {
    spec.validate()?;
    let train_counts = train_group_counts(spec.n_train, spec.rho)?;
    let balanced = |n: usize| [n / GROUPS; GROUPS];
    Ok(GeneratedSplits {
        train: sample_split(spec, train_counts, Split::Train, Stream::DataTrain)?,
        val: sample_split(spec, balanced(spec.n_val), Split::Val, Stream::DataVal)?,
        test: sample_split(spec, balanced(spec.n_test), Split::Test, Stream::DataTest)?,
    })
}
