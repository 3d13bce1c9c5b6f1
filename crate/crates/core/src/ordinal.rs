//! Ordinal probit data augmentation: cut points, latent continuous
//! responses and their full-conditional updates, and the per-rating
//! likelihood used for WAIC.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Increasing interior cut points `gamma_1 < ... < gamma_{K-1}`; `gamma_0 =
/// -inf` and `gamma_K = +inf` are implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CutPoints(Vec<f64>);

impl TryFrom<Vec<f64>> for CutPoints {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        CutPoints::new(v)
    }
}

impl From<CutPoints> for Vec<f64> {
    fn from(c: CutPoints) -> Self {
        c.0
    }
}

impl CutPoints {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Config("need at least one cut point".into()));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("cut points must be finite".into()));
        }
        if gamma.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("cut points must be strictly increasing: {gamma:?}")));
        }
        Ok(Self(gamma))
    }

    /// Cut points of the simulation study, `(-2.0, -0.5, 0.1, 1.1)`.
    pub fn simulation_default() -> Self {
        Self(vec![-2.0, -0.5, 0.1, 1.1])
    }

    /// Standard-normal quantiles of the cumulative level frequencies. Empty
    /// extreme levels are nudged so the result stays strictly increasing.
    pub fn from_frequencies(counts: &[usize]) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if counts.len() < 2 || n == 0 {
            return Err(Error::Config("cannot initialise cut points without ratings".into()));
        }
        let total = n as f64 + 1.0;
        let mut cum = 0.0;
        let mut gamma = Vec::with_capacity(counts.len() - 1);
        for &c in &counts[..counts.len() - 1] {
            cum += c as f64;
            // Half-count offset keeps the quantile finite at 0 and n.
            let g = normal::quantile((cum + 0.5) / total);
            let g = match gamma.last() {
                Some(&prev) if g <= prev => prev + 0.1,
                _ => g,
            };
            gamma.push(g);
        }
        Self::new(gamma)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Number of ordinal levels `K`.
    pub fn levels(&self) -> usize {
        self.0.len() + 1
    }

    /// `gamma_{k-1}` for level `k` in `1..=K`.
    #[inline]
    pub fn lower(&self, level: usize) -> f64 {
        if level <= 1 {
            f64::NEG_INFINITY
        } else {
            self.0[level - 2]
        }
    }

    /// `gamma_k` for level `k` in `1..=K`.
    #[inline]
    pub fn upper(&self, level: usize) -> f64 {
        if level >= self.levels() {
            f64::INFINITY
        } else {
            self.0[level - 1]
        }
    }
}

/// Ordinal level of a latent value: the `k` with `gamma_{k-1} < z <= gamma_k`.
pub fn bin_latent(z: f64, gamma: &CutPoints) -> usize {
    // Cut points are sorted; count how many lie strictly below z.
    gamma.0.partition_point(|&g| g < z) + 1
}

/// Draw from `N(mean, sd^2)` truncated to `[lo, hi]`.
///
/// Inverse-CDF sampling in the body; one-sided exponential rejection when the
/// whole interval sits more than 5 standard deviations into a tail.
pub fn sample_truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi && sd > 0.0);
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let x = if a >= 5.0 {
        upper_tail(rng, a, b)
    } else if b <= -5.0 {
        -upper_tail(rng, -b, -a)
    } else if a > 0.0 {
        let (pa, pb) = (normal::cdf(-b), normal::cdf(-a));
        -normal::quantile(pa + rng.random::<f64>() * (pb - pa))
    } else {
        let (pa, pb) = (normal::cdf(a), normal::cdf(b));
        normal::quantile(pa + rng.random::<f64>() * (pb - pa))
    };
    (mean + sd * x).clamp(lo, hi)
}

/// Standard normal truncated to `[a, b]` with `a >= 5`: shifted exponential
/// proposal with optimal rate, itself truncated to the interval.
fn upper_tail<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    let mass = if b.is_finite() { -(-lambda * (b - a)).exp_m1() } else { 1.0 };
    loop {
        let u: f64 = rng.random();
        let x = a - (-u * mass).ln_1p() / lambda;
        let accept = (-0.5 * (x - lambda).powi(2)).exp();
        if rng.random::<f64>() <= accept && x <= b {
            return x;
        }
    }
}

/// Redraw every cut point from its full conditional
/// `U(max(Z*_r | Y_r = k), min(Z*_r | Y_r > k))`, in increasing order.
///
/// An empty level borrows the neighbouring cut point as its bound, which
/// keeps the sequence ordered.
pub fn update_cutpoints<R: Rng + ?Sized>(z: &[f64], levels: &[usize], gamma: &CutPoints, rng: &mut R) -> CutPoints {
    let k_count = gamma.levels();
    let mut max_at = vec![f64::NEG_INFINITY; k_count + 1];
    let mut min_above = vec![f64::INFINITY; k_count + 2];
    for (&zr, &y) in z.iter().zip(levels) {
        max_at[y] = max_at[y].max(zr);
        min_above[y] = min_above[y].min(zr);
    }
    // min over levels > k
    for y in (1..=k_count).rev() {
        min_above[y] = min_above[y].min(min_above[y + 1]);
    }
    let old = gamma.as_slice();
    let mut new = Vec::with_capacity(old.len());
    for k in 1..k_count {
        let prev = if k > 1 { new[k - 2] } else { f64::NEG_INFINITY };
        let next_old = if k + 1 < k_count { old[k] } else { f64::INFINITY };
        let mut lo = max_at[k].max(prev);
        let mut hi = min_above[k + 1].min(next_old);
        if !lo.is_finite() {
            lo = hi.min(old[k - 1]) - 1.0;
        }
        if !hi.is_finite() {
            hi = lo.max(old[k - 1]) + 1.0;
        }
        let g = if hi > lo { lo + rng.random::<f64>() * (hi - lo) } else { lo };
        new.push(g);
    }
    CutPoints(new)
}

/// Conditional mean and variance of `z_r` given the rest under `N(mu, Lambda^{-1})`.
pub fn conditional_moments(precision: &DMatrix<f64>, mu: &DVector<f64>, z: &DVector<f64>, r: usize) -> Result<(f64, f64)> {
    let lrr = precision[(r, r)];
    if !(lrr > 0.0) {
        return Err(Error::Numerical(format!("precision diagonal {r} is {lrr}")));
    }
    let col = precision.column(r);
    let mut acc = 0.0;
    for s in 0..z.len() {
        if s != r {
            acc += col[s] * (z[s] - mu[s]);
        }
    }
    Ok((mu[r] - acc / lrr, 1.0 / lrr))
}

/// One sequential Gibbs sweep over the latent vector: each `z_r` is redrawn
/// from `N(c_r, 1 / Lambda_rr)` truncated to its level's interval, with
/// `c_r = mu_r - (1 / Lambda_rr) sum_{s != r} Lambda_rs (z_s - mu_s)`.
///
/// `order` gives the visiting order (ascending index when `None`).
pub fn update_latent<R: Rng + ?Sized>(
    z: &mut DVector<f64>,
    levels: &[usize],
    gamma: &CutPoints,
    precision: &DMatrix<f64>,
    mu: &DVector<f64>,
    order: Option<&[usize]>,
    rng: &mut R,
) -> Result<()> {
    let n = z.len();
    let mut resid: DVector<f64> = &*z - mu;
    let ascending: Vec<usize>;
    let order = match order {
        Some(o) => o,
        None => {
            ascending = (0..n).collect();
            &ascending
        }
    };
    for &r in order {
        let lrr = precision[(r, r)];
        if !(lrr > 0.0) {
            return Err(Error::Numerical(format!("precision diagonal {r} is {lrr}")));
        }
        let dot = precision.column(r).dot(&resid) - lrr * resid[r];
        let mean = mu[r] - dot / lrr;
        let sd = (1.0 / lrr).sqrt();
        let level = levels[r];
        let zr = sample_truncated_normal(rng, mean, sd, gamma.lower(level), gamma.upper(level));
        z[r] = zr;
        resid[r] = zr - mu[r];
    }
    Ok(())
}

/// `P(Y = level | mean)` with unit latent variance:
/// `Phi(gamma_Y - mean) - Phi(gamma_{Y-1} - mean)`.
pub fn pointwise_likelihood(level: usize, x: &[f64], beta: &[f64], ztilde: f64, gamma: &CutPoints) -> f64 {
    let mean: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + ztilde;
    level_probability(level, mean, 1.0, gamma)
}

/// `P(Y = level)` for a latent `N(mean, sd^2)`.
pub fn level_probability(level: usize, mean: f64, sd: f64, gamma: &CutPoints) -> f64 {
    let lo = (gamma.lower(level) - mean) / sd;
    let hi = (gamma.upper(level) - mean) / sd;
    normal::interval_prob(lo, hi)
}
