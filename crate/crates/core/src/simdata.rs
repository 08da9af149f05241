//! Synthetic data: the three-tree spatial benchmark and the Friedman function.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{omega_factor, DEFAULT_NUGGET};
use crate::io::{Dataset, Design};

/// A simulated data set; `truth` is `y` without the observation noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    pub design: Design,
    pub y: Vec<f64>,
    pub truth: Vec<f64>,
}

impl SimData {
    pub fn to_dataset(&self) -> Dataset {
        let names = (1..=self.design.n_cols()).map(|j| format!("x{j}")).collect();
        Dataset::new(names, "y".into(), self.design.clone(), self.y.clone())
            .expect("generated data are consistent")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n: usize,
    /// `[component][region]` constant means; region 0 is where the
    /// component's indicator holds.
    pub means: [[f64; 2]; 3],
    pub phi: f64,
    pub nu: f64,
    pub tau: f64,
}

impl BenchmarkSpec {
    pub fn new(n: usize) -> Self {
        BenchmarkSpec {
            n,
            means: [[-10.0, 5.0], [0.0, 20.0], [10.0, -15.0]],
            phi: 3.0,
            nu: 0.1,
            tau: 10.0,
        }
    }
}

/// Region of each benchmark component: `0` when `x1 <= x2`, `x1 <= -x2`
/// and `x1 <= 0` respectively, else `1`.
pub fn benchmark_regions(x1: f64, x2: f64) -> [usize; 3] {
    [
        (x1 > x2) as usize,
        (x1 > -x2) as usize,
        (x1 > 0.0) as usize,
    ]
}

/// Sum of the component means at `(x1, x2)`.
pub fn benchmark_mean(spec: &BenchmarkSpec, x1: f64, x2: f64) -> f64 {
    benchmark_regions(x1, x2)
        .iter()
        .enumerate()
        .map(|(c, &r)| spec.means[c][r])
        .sum()
}

/// One draw of a zero-mean GP with the benchmark kernel over the rows of `x`.
pub fn spatial_draw<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    phi: f64,
    nu: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if x.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = omega_factor(x, &vec![phi; x.ncols()], nu, DEFAULT_NUGGET)?;
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

pub fn gen_benchmark<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<SimData> {
    let n = spec.n;
    if n < 2 {
        return Err(Error::InvalidInput("the benchmark needs at least two rows".into()));
    }
    let values: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let design = Design::continuous(n, 2, values)?;
    let regions: Vec<[usize; 3]> = (0..n)
        .map(|i| benchmark_regions(design.get(i, 0), design.get(i, 1)))
        .collect();
    let mut truth = vec![0.0; n];
    for c in 0..3 {
        for region in 0..2 {
            let rows: Vec<usize> = (0..n).filter(|&i| regions[i][c] == region).collect();
            let x = design.gp_matrix(&rows, &[0, 1]);
            let s = spatial_draw(&x, spec.phi, spec.nu, rng)?;
            for (k, &i) in rows.iter().enumerate() {
                truth[i] += spec.means[c][region] + s[k];
            }
        }
    }
    let sd = spec.tau.recip().sqrt();
    let y = truth
        .iter()
        .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(SimData { design, y, truth })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanSpec {
    pub n: usize,
    pub p: usize,
    pub tau: f64,
}

impl FriedmanSpec {
    pub fn new(n: usize, p: usize) -> Self {
        FriedmanSpec { n, p, tau: 100.0 }
    }
}

/// `10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5`; further columns are
/// ignored.
pub fn friedman_mean(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

pub fn gen_friedman<R: Rng + ?Sized>(spec: &FriedmanSpec, rng: &mut R) -> Result<SimData> {
    if spec.p < 5 {
        return Err(Error::InvalidInput(format!(
            "the Friedman function needs p >= 5, got {}",
            spec.p
        )));
    }
    if spec.n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let values: Vec<f64> = (0..spec.n * spec.p).map(|_| rng.random::<f64>()).collect();
    let design = Design::continuous(spec.n, spec.p, values)?;
    let truth: Vec<f64> = (0..spec.n).map(|i| friedman_mean(design.row(i))).collect();
    let sd = spec.tau.recip().sqrt();
    let y = truth
        .iter()
        .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(SimData { design, y, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::build_omega;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn benchmark_region_means() {
        let spec = BenchmarkSpec::new(10);
        // x1 <= x2, x1 <= -x2, x1 <= 0
        assert_eq!(benchmark_mean(&spec, -0.5, 0.1), 0.0);
        // x1 > x2, x1 > -x2, x1 > 0
        assert_eq!(benchmark_mean(&spec, 0.5, 0.1), 10.0);
    }

    #[test]
    fn benchmark_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = gen_benchmark(&BenchmarkSpec::new(10_000), &mut rng).unwrap();
        let e: Vec<f64> = d.y.iter().zip(&d.truth).map(|(a, b)| a - b).collect();
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Var of the sample variance of normals: 2 sigma^4 / (n - 1).
        let se = (2.0 * 0.1f64.powi(2) / (n - 1.0)).sqrt();
        assert!((var - 0.1).abs() < 3.0 * se, "variance {var}");
    }

    #[test]
    fn benchmark_is_deterministic_and_regions_partition() {
        let spec = BenchmarkSpec::new(200);
        let a = gen_benchmark(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gen_benchmark(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            let mut count = [0usize; 2];
            for i in 0..spec.n {
                let x = a.design.row(i);
                let r = benchmark_regions(x[0], x[1])[c];
                let in_first = match c {
                    0 => x[0] <= x[1],
                    1 => x[0] <= -x[1],
                    _ => x[0] <= 0.0,
                };
                assert_eq!(r == 0, in_first);
                count[r] += 1;
            }
            assert_eq!(count[0] + count[1], spec.n);
        }
        assert!(a.design.values().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn friedman_examples() {
        assert!((friedman_mean(&[0.5; 5]) - 14.57107).abs() < 1e-5);
        assert_eq!(friedman_mean(&[0.0, 0.7, 0.5, 0.0, 0.0]), 0.0);
        let mut x = vec![0.3, 0.6, 0.2, 0.9, 0.4, 0.1, 0.2, 0.3, 0.4, 0.5];
        let before = friedman_mean(&x);
        for v in &mut x[5..] {
            *v = 0.99;
        }
        assert_eq!(friedman_mean(&x), before);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_friedman(&FriedmanSpec::new(10, 4), &mut rng).is_err());
        let d = gen_friedman(&FriedmanSpec::new(10, 10), &mut rng).unwrap();
        assert_eq!(d.design.n_cols(), 10);
        for i in 0..10 {
            assert_eq!(d.truth[i], friedman_mean(d.design.row(i)));
        }
    }

    #[test]
    fn spatial_covariance_matches_kernel() {
        let n = 500;
        let reps = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let omega = build_omega(&x, &[3.0, 3.0], 0.1, 0.0).unwrap();
        let mut acc = DMatrix::<f64>::zeros(n, n);
        for _ in 0..reps {
            let s = spatial_draw(&x, 3.0, 0.1, &mut rng).unwrap();
            acc.ger(1.0, &s, &s, 1.0);
        }
        acc /= reps as f64;
        // Zero-mean Gaussian: Var(s_i s_k) = Omega_ik^2 + Omega_ii Omega_kk.
        let mut within3 = 0usize;
        let mut worst = 0.0f64;
        for i in 0..n {
            for k in 0..n {
                let se = ((omega[(i, k)].powi(2) + omega[(i, i)] * omega[(k, k)]) / reps as f64).sqrt();
                let z = (acc[(i, k)] - omega[(i, k)]).abs() / se;
                within3 += (z < 3.0) as usize;
                worst = worst.max(z);
            }
        }
        let frac = within3 as f64 / (n * n) as f64;
        assert!(frac >= 0.99, "fraction within 3 SE {frac}");
        assert!(worst < 6.0, "largest z {worst}");
    }
}
