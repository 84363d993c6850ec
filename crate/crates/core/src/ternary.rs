//! Optimal single-scale ternarization.
//!
//! For a fixed support `I_T = {i : |w_i| > T}` the best scale is the mean
//! magnitude over the support, and the squared error drops to
//! `‖w‖² - (Σ_{I_T} |w_i|)² / |I_T|`. Only thresholds sitting between two
//! distinct magnitudes change the support, so scanning the sorted magnitudes
//! with a running prefix sum finds the exact optimum in `O(n log n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ternary approximation `alpha * signs` of a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernaryLevel {
    pub alpha: f32,
    pub signs: Vec<i8>,
    /// Magnitudes strictly above this value were kept.
    pub threshold: f32,
}

impl TernaryLevel {
    pub fn zero(len: usize) -> Self {
        Self {
            alpha: 0.0,
            signs: vec![0; len],
            threshold: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.signs.iter().filter(|&&s| s != 0).count()
    }

    /// `‖alpha * signs‖²`.
    pub fn energy(&self) -> f64 {
        let a = f64::from(self.alpha);
        a * a * self.nnz() as f64
    }

    /// Adds `alpha * signs` into `acc`.
    pub fn accumulate(&self, acc: &mut [f64]) {
        let a = f64::from(self.alpha);
        for (dst, &s) in acc.iter_mut().zip(&self.signs) {
            *dst += a * f64::from(s);
        }
    }

    /// Subtracts `alpha * signs` from `residual`.
    pub fn subtract_from(&self, residual: &mut [f64]) {
        let a = f64::from(self.alpha);
        for (dst, &s) in residual.iter_mut().zip(&self.signs) {
            *dst -= a * f64::from(s);
        }
    }
}

/// Ternarizes `w` with the error-minimizing threshold.
///
/// Among thresholds with equal objective the larger one (sparser support)
/// wins. An all-zero input yields the zero level.
pub fn ternarize(w: &[f32]) -> Result<TernaryLevel> {
    check_input(w)?;
    let wide: Vec<f64> = w.iter().map(|&x| f64::from(x)).collect();
    Ok(ternarize_f64(&wide))
}

pub(crate) fn ternarize_f64(w: &[f64]) -> TernaryLevel {
    let mut mags: Vec<f64> = w.iter().map(|x| x.abs()).filter(|&m| m > 0.0).collect();
    if mags.is_empty() {
        return TernaryLevel::zero(w.len());
    }
    mags.sort_unstable_by(|a, b| b.total_cmp(a));

    let mut prefix = 0.0;
    let mut best = (f64::NEG_INFINITY, 0usize, 0.0f64);
    for m in 1..=mags.len() {
        prefix += mags[m - 1];
        // equal magnitudes enter or leave the support together
        if m < mags.len() && mags[m] == mags[m - 1] {
            continue;
        }
        let score = prefix * prefix / m as f64;
        if score > best.0 {
            best = (score, m, prefix);
        }
    }
    let (_, keep, sum) = best;
    let threshold = if keep < mags.len() { mags[keep] } else { 0.0 };
    let alpha = (sum / keep as f64) as f32;
    if alpha == 0.0 {
        return TernaryLevel::zero(w.len());
    }
    let signs = w
        .iter()
        .map(|&x| if x.abs() > threshold { sign_of(x) } else { 0 })
        .collect();
    TernaryLevel {
        alpha,
        signs,
        threshold: threshold as f32,
    }
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn check_input(w: &[f32]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("cannot ternarize an empty vector"));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("cannot ternarize non-finite values"));
    }
    Ok(())
}

/// Largest input accepted by [`oracle_best_support`].
pub const ORACLE_MAX_LEN: usize = 12;

/// Exhaustive reference: tries every support set `S` (signs follow `w` on `S`,
/// scale is the mean magnitude over `S`) and returns the global minimizer of
/// `‖w - alpha * signs‖²`. Exponential; meant for checking [`ternarize`].
pub fn oracle_best_support(w: &[f32]) -> Result<(f32, Vec<i8>)> {
    check_input(w)?;
    if w.len() > ORACLE_MAX_LEN {
        return Err(Error::invalid(format!(
            "oracle supports at most {ORACLE_MAX_LEN} elements, got {}",
            w.len()
        )));
    }
    let n = w.len();
    let mut best_err = w.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>();
    let mut best = (0.0f32, vec![0i8; n]);
    for mask in 1u32..(1 << n) {
        let members = (0..n).filter(|i| mask >> i & 1 == 1);
        let count = mask.count_ones() as f64;
        let alpha = members.map(|i| f64::from(w[i].abs())).sum::<f64>() / count;
        let signs: Vec<i8> = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    sign_of(f64::from(w[i]))
                } else {
                    0
                }
            })
            .collect();
        let err: f64 = w
            .iter()
            .zip(&signs)
            .map(|(&x, &s)| (f64::from(x) - alpha * f64::from(s)).powi(2))
            .sum();
        if err < best_err {
            best_err = err;
            best = (alpha as f32, signs);
        }
    }
    Ok(best)
}

/// `Σ (w_i - alpha * signs_i)²`, accumulated in f64.
pub fn level_error(w: &[f32], level: &TernaryLevel) -> Result<f64> {
    if w.len() != level.len() {
        return Err(Error::invalid(format!(
            "vector has {} elements, level has {}",
            w.len(),
            level.len()
        )));
    }
    let a = f64::from(level.alpha);
    Ok(w.iter()
        .zip(&level.signs)
        .map(|(&x, &s)| (f64::from(x) - a * f64::from(s)).powi(2))
        .sum())
}
