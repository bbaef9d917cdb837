//! Seed-addressed Gaussian perturbations.
//!
//! A perturbation direction `z ~ N(0, I_n)` is never stored. It is identified by
//! a 64-bit [`PerturbationSeed`] and regenerated on demand, in fixed-size chunks,
//! whenever the optimizer needs to perturb, restore, or update the parameters.
//!
//! Generator: each seed keys a ChaCha8 stream (`ChaCha8Rng::seed_from_u64`).
//! Consecutive pairs of 64-bit outputs `(a, b)` are mapped to uniforms
//! `u1 = ((a >> 11) + 1) / 2^53 ∈ (0, 1]`, `u2 = (b >> 11) / 2^53 ∈ [0, 1)` and
//! then to two standard normals with the Box–Muller transform
//! `sqrt(-2 ln u1) · (cos 2πu2, sin 2πu2)`. The transform consumes a fixed number
//! of draws per output, so entry `i` of a vector depends only on `(seed, i)`.

use std::f64::consts::TAU;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Coefficients with magnitude at or below this are skipped entirely.
pub const SKIP_THRESHOLD: f64 = 1e-10;

/// Default number of entries regenerated per chunk.
pub const DEFAULT_CHUNK: usize = 256;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationSeed(pub u64);

impl From<u64> for PerturbationSeed {
    fn from(v: u64) -> Self {
        PerturbationSeed(v)
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an index.
///
/// `derive_seed(p, i) = mix64(mix64(p + φ) ^ mix64((i + 1) · φ))` where `φ` is
/// the 64-bit golden-ratio constant. Used for run → step → direction splitting,
/// so any step can be replayed from `(run_seed, step)` alone.
#[inline]
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    mix64(mix64(parent.wrapping_add(GOLDEN)) ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Sequential standard-normal stream for one seed.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: PerturbationSeed) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
            spare: None,
        }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (a, b) = self.next_pair();
        self.spare = Some(b);
        a
    }

    #[inline]
    fn next_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.next_normal();
        }
    }
}

/// Materializes `Randn(n, seed)`.
///
/// Only tests, oracles and small problems should call this; the optimizer path
/// regenerates directions in chunks instead.
pub fn gaussian_vector(seed: PerturbationSeed, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("gaussian_vector: n must be at least 1"));
    }
    let mut out = vec![0.0; n];
    GaussianStream::new(seed).fill(&mut out);
    Ok(out)
}

/// Outcome of one in-place displacement.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Displacement {
    /// Number of directions that were regenerated (coefficients above the skip threshold).
    pub active: usize,
    /// Squared Euclidean norm of the displacement that was added to θ.
    pub norm_sq: f64,
}

/// A set of `k` directions in parameter space that can displace θ in place.
pub trait Basis {
    /// Subspace dimension.
    fn k(&self) -> usize;

    /// `θ ← θ + scale · Σ_i coeffs_i · z_i`.
    ///
    /// Applying the same call with `-scale` restores θ up to one rounding per
    /// entry, because the displacement is recomputed bit-identically.
    fn displace(&self, theta: &mut [f64], coeffs: &[f64], scale: f64) -> Result<Displacement>;
}

fn check_coeffs(k: usize, coeffs: &[f64], scale: f64) -> Result<()> {
    if coeffs.len() != k {
        return Err(invalid(format!(
            "expected {k} coefficients, got {}",
            coeffs.len()
        )));
    }
    if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(invalid(format!("non-finite perturbation coefficient {c}")));
    }
    if !scale.is_finite() {
        return Err(invalid(format!("non-finite perturbation scale {scale}")));
    }
    Ok(())
}

/// `θ ← θ + scale · Σ_i coeffs_i · Randn(n, seeds_i)` with streaming regeneration.
///
/// Coefficients with `|c| ≤ 1e-10` are skipped without touching their stream.
/// Extra memory is one chunk of `min(chunk, n)` values plus one stream state
/// per active seed.
pub fn apply_scaled_perturbations_chunked(
    theta: &mut [f64],
    seeds: &[PerturbationSeed],
    coeffs: &[f64],
    scale: f64,
    chunk: usize,
) -> Result<Displacement> {
    check_coeffs(seeds.len(), coeffs, scale)?;
    if chunk == 0 {
        return Err(invalid("chunk size must be at least 1"));
    }

    let mut streams: Vec<(f64, GaussianStream)> = seeds
        .iter()
        .zip(coeffs)
        .filter(|(_, c)| c.abs() > SKIP_THRESHOLD)
        .map(|(s, &c)| (c, GaussianStream::new(*s)))
        .collect();
    let active = streams.len();
    if active == 0 || theta.is_empty() {
        return Ok(Displacement {
            active,
            norm_sq: 0.0,
        });
    }

    let mut delta = vec![0.0; chunk.min(theta.len())];
    let mut norm_sq = 0.0;
    for block in theta.chunks_mut(delta.len()) {
        let delta = &mut delta[..block.len()];
        delta.fill(0.0);
        for (c, stream) in streams.iter_mut() {
            for d in delta.iter_mut() {
                *d += *c * stream.next_normal();
            }
        }
        for (t, d) in block.iter_mut().zip(delta.iter()) {
            let step = scale * d;
            *t += step;
            norm_sq += step * step;
        }
    }
    Ok(Displacement { active, norm_sq })
}

/// [`apply_scaled_perturbations_chunked`] with [`DEFAULT_CHUNK`].
pub fn apply_scaled_perturbations(
    theta: &mut [f64],
    seeds: &[PerturbationSeed],
    coeffs: &[f64],
    scale: f64,
) -> Result<Displacement> {
    apply_scaled_perturbations_chunked(theta, seeds, coeffs, scale, DEFAULT_CHUNK)
}

/// The `k` seeded directions `B = [z_1, …, z_k]` of one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceBasis {
    seeds: Vec<PerturbationSeed>,
    chunk: usize,
}

impl SubspaceBasis {
    pub fn new(seeds: Vec<PerturbationSeed>) -> Self {
        SubspaceBasis {
            seeds,
            chunk: DEFAULT_CHUNK,
        }
    }

    /// Seeds `derive_seed(step_seed, i)` for `i = 0..k`.
    pub fn from_step_seed(step_seed: u64, k: usize) -> Self {
        Self::new(
            (0..k as u64)
                .map(|i| PerturbationSeed(derive_seed(step_seed, i)))
                .collect(),
        )
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn seeds(&self) -> &[PerturbationSeed] {
        &self.seeds
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }
}

impl Basis for SubspaceBasis {
    fn k(&self) -> usize {
        self.seeds.len()
    }

    fn displace(&self, theta: &mut [f64], coeffs: &[f64], scale: f64) -> Result<Displacement> {
        apply_scaled_perturbations_chunked(theta, &self.seeds, coeffs, scale, self.chunk)
    }
}

/// Explicitly stored directions. Costs `O(nk)` memory; intended for tests,
/// hand traces and tiny problems.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBasis {
    columns: Vec<Vec<f64>>,
}

impl DenseBasis {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map(Vec::len).unwrap_or(0);
        if columns.is_empty() || n == 0 {
            return Err(invalid("dense basis needs at least one non-empty column"));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(invalid("dense basis columns differ in length"));
        }
        Ok(DenseBasis { columns })
    }

    /// Materializes a seeded basis; useful as an oracle for [`SubspaceBasis`].
    pub fn from_seeds(seeds: &[PerturbationSeed], n: usize) -> Result<Self> {
        let columns = seeds
            .iter()
            .map(|s| gaussian_vector(*s, n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(columns)
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }
}

impl Basis for DenseBasis {
    fn k(&self) -> usize {
        self.columns.len()
    }

    fn displace(&self, theta: &mut [f64], coeffs: &[f64], scale: f64) -> Result<Displacement> {
        check_coeffs(self.columns.len(), coeffs, scale)?;
        if theta.len() != self.columns[0].len() {
            return Err(invalid(format!(
                "dense basis has dimension {}, parameters have {}",
                self.columns[0].len(),
                theta.len()
            )));
        }
        let active: Vec<(f64, &Vec<f64>)> = coeffs
            .iter()
            .zip(&self.columns)
            .filter(|(c, _)| c.abs() > SKIP_THRESHOLD)
            .map(|(&c, z)| (c, z))
            .collect();
        let mut norm_sq = 0.0;
        if !active.is_empty() {
            for (j, t) in theta.iter_mut().enumerate() {
                let d: f64 = active.iter().fold(0.0, |acc, (c, z)| acc + c * z[j]);
                let step = scale * d;
                *t += step;
                norm_sq += step * step;
            }
        }
        Ok(Displacement {
            active: active.len(),
            norm_sq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ulp(x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            f64::MIN_POSITIVE
        } else {
            f64::from_bits(x.to_bits() + 1) - x
        }
    }

    #[test]
    fn same_seed_same_vector() {
        let a = gaussian_vector(PerturbationSeed(7), 4).unwrap();
        let b = gaussian_vector(PerturbationSeed(7), 4).unwrap();
        assert_eq!(a, b);
        // prefix property: a longer draw starts with the shorter one
        let c = gaussian_vector(PerturbationSeed(7), 9).unwrap();
        assert_eq!(&c[..4], &a[..]);
    }

    #[test]
    fn zero_length_is_rejected() {
        assert!(gaussian_vector(PerturbationSeed(7), 0).is_err());
    }

    #[test]
    fn moments_of_ten_thousand_draws() {
        let n = 10_000;
        let z = gaussian_vector(PerturbationSeed(7), n).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn distinct_seeds_are_nearly_orthogonal() {
        let n = 10_000;
        let a = gaussian_vector(PerturbationSeed(7), n).unwrap();
        let b = gaussian_vector(PerturbationSeed(8), n).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 0.05);
    }

    #[test]
    fn zero_coefficients_touch_nothing() {
        let mut theta = vec![1.0, -2.0, 3.5];
        let before = theta.clone();
        let seeds = [PerturbationSeed(1), PerturbationSeed(2)];
        let d = apply_scaled_perturbations(&mut theta, &seeds, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(d.active, 0);
        assert_eq!(theta, before);
    }

    #[test]
    fn skip_threshold_is_inclusive() {
        let mut theta = vec![0.0; 8];
        let seeds = [PerturbationSeed(3)];
        let d = apply_scaled_perturbations(&mut theta, &seeds, &[1e-10], 1.0).unwrap();
        assert_eq!(d.active, 0);
        let d = apply_scaled_perturbations(&mut theta, &seeds, &[-1e-10], 1.0).unwrap();
        assert_eq!(d.active, 0);
        let d = apply_scaled_perturbations(&mut theta, &seeds, &[-2e-10], 1.0).unwrap();
        assert_eq!(d.active, 1);
    }

    #[test]
    fn single_direction_matches_randn() {
        let n = 1000;
        let eps = 1e-3;
        let seed = PerturbationSeed(11);
        let mut theta: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let base = theta.clone();
        apply_scaled_perturbations_chunked(&mut theta, &[seed], &[1.0], eps, 7).unwrap();
        let z = gaussian_vector(seed, n).unwrap();
        for j in 0..n {
            assert_eq!(theta[j], base[j] + eps * z[j]);
        }
    }

    #[test]
    fn chunk_size_does_not_change_the_result() {
        let seeds: Vec<_> = (0..3).map(PerturbationSeed).collect();
        let coeffs = [0.5, -1.25, 2.0];
        let mut a = vec![0.25; 1001];
        let mut b = a.clone();
        apply_scaled_perturbations_chunked(&mut a, &seeds, &coeffs, 0.3, 1).unwrap();
        apply_scaled_perturbations_chunked(&mut b, &seeds, &coeffs, 0.3, 4096).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_and_dense_bases_agree() {
        let n = 300;
        let sb = SubspaceBasis::from_step_seed(42, 4);
        let db = DenseBasis::from_seeds(sb.seeds(), n).unwrap();
        let coeffs = [0.1, 0.0, -0.7, 1.3];
        let mut a = vec![1.0; n];
        let mut b = a.clone();
        let da = sb.displace(&mut a, &coeffs, 0.01).unwrap();
        let dbb = db.displace(&mut b, &coeffs, 0.01).unwrap();
        assert_eq!(da.active, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 4.0 * ulp(*x));
        }
        assert!((da.norm_sq - dbb.norm_sq).abs() < 1e-12 * da.norm_sq);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut theta = vec![0.0; 4];
        let seeds = [PerturbationSeed(1)];
        assert!(apply_scaled_perturbations(&mut theta, &seeds, &[f64::NAN], 1.0).is_err());
        assert!(apply_scaled_perturbations(&mut theta, &seeds, &[1.0, 2.0], 1.0).is_err());
        assert!(apply_scaled_perturbations(&mut theta, &seeds, &[1.0], f64::INFINITY).is_err());
        assert!(DenseBasis::new(vec![]).is_err());
        assert!(DenseBasis::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..64).map(|i| derive_seed(5, i)).collect();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), s.len());
        assert_ne!(derive_seed(5, 0), derive_seed(6, 0));
    }
}
