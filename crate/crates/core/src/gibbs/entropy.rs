//! Ornstein–Weiss recurrence-time entropy: for a typical symbol sequence the
//! first return time `R_n` of the opening `n`-block grows like `e^{nh}`, so
//! increments of `E log R_n` in `n` estimate `h`. At finite `n` the mean is
//! biased low by roughly Euler's constant, which cancels in the increments;
//! the remaining bias comes from partitions that are not generating.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{BoxRegion, Point};

/// Fraction of first-half starts whose block must recur for a window to count.
pub const MIN_RESOLVED: f64 = 0.99;
/// Relative spread allowed across a plateau.
pub const PLATEAU_SPREAD: f64 = 0.1;
const PLATEAU_LEN: usize = 3;
/// Increments below this mean no entropy at all.
const ZERO_ENTROPY: f64 = 1e-3;

/// Grid cell index of each point, `cells` per axis.
pub fn symbolize<'a, I>(region: &BoxRegion, cells: usize, points: I) -> Result<Vec<u32>>
where
    I: IntoIterator<Item = &'a Point>,
{
    let d = region.dim();
    if cells < 2 || (cells as f64).powi(d as i32) > u32::MAX as f64 {
        return Err(Error::invalid(format!("{cells} cells per axis is not a usable symbolization in dimension {d}")));
    }
    Ok(points
        .into_iter()
        .map(|p| {
            (0..d).fold(0u32, |acc, i| {
                let t = (p[i] - region.lower[i]) / region.width(i);
                let k = ((t * cells as f64).floor() as i64).clamp(0, cells as i64 - 1) as u32;
                acc * cells as u32 + k
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrencePoint {
    pub n: usize,
    pub mean_log_return: f64,
    pub resolved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub symbols: usize,
    pub alphabet: usize,
    pub points: Vec<RecurrencePoint>,
    /// `(E log R_{n_{k+1}} − E log R_{n_k}) / (n_{k+1} − n_k)`.
    pub increments: Vec<f64>,
    /// A run of at least three increments agreeing within 10% closes the sweep.
    pub plateau: bool,
    pub estimate: f64,
    pub caveat: String,
}

/// Sweeps `n = 1, 2, …` until fewer than [`MIN_RESOLVED`] of the block
/// starts in the first half of `symbols` recur, or `n_max` is reached.
pub fn recurrence_entropy(symbols: &[u32], alphabet: usize, n_max: usize) -> Result<EntropyReport> {
    if symbols.len() < 1000 {
        return Err(Error::InsufficientSample(format!("{} symbols; recurrence entropy needs 1000", symbols.len())));
    }
    if alphabet < 1 || symbols.iter().any(|&s| s as usize >= alphabet) {
        return Err(Error::invalid("symbol outside the alphabet"));
    }
    let mut points = Vec::new();
    for n in 1..=n_max.max(1) {
        let p = returns(symbols, alphabet, n);
        if p.resolved_fraction < MIN_RESOLVED {
            break;
        }
        points.push(p);
    }
    let increments: Vec<f64> = points
        .windows(2)
        .map(|w| (w[1].mean_log_return - w[0].mean_log_return) / (w[1].n - w[0].n) as f64)
        .collect();
    let (plateau, estimate) = plateau_of(&increments);
    Ok(EntropyReport {
        symbols: symbols.len(),
        alphabet,
        points,
        increments,
        plateau,
        estimate,
        caveat: "grid symbols only see the entropy of the partition; a non-generating grid biases the estimate low".into(),
    })
}

fn plateau_of(inc: &[f64]) -> (bool, f64) {
    if inc.is_empty() {
        return (false, 0.0);
    }
    if inc.len() >= PLATEAU_LEN && inc.iter().all(|v| v.abs() < ZERO_ENTROPY) {
        return (true, 0.0);
    }
    // longest stable suffix
    for start in 0..=inc.len().saturating_sub(PLATEAU_LEN) {
        let tail = &inc[start..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(*v), a.1.max(*v)));
        if mean > 0.0 && (hi - lo) <= PLATEAU_SPREAD * mean {
            return (true, mean);
        }
    }
    (false, *inc.last().unwrap())
}

fn returns(symbols: &[u32], alphabet: usize, n: usize) -> RecurrencePoint {
    let len = symbols.len();
    let blocks = len + 1 - n;
    // exact base-`alphabet` code when it fits, a polynomial hash otherwise
    let exact = (alphabet as f64).powi(n as i32) < u64::MAX as f64;
    let mult: u64 = if exact { alphabet as u64 } else { 0x9e37_79b9_7f4a_7c15 };
    let top = mult.wrapping_pow(n as u32 - 1);
    let mut keys: Vec<(u64, u32)> = Vec::with_capacity(blocks);
    let mut h = 0u64;
    for (i, &s) in symbols.iter().enumerate() {
        if i >= n {
            h = h.wrapping_sub(top.wrapping_mul(symbols[i - n] as u64 + u64::from(!exact)));
        }
        h = h.wrapping_mul(mult).wrapping_add(s as u64 + u64::from(!exact));
        if i + 1 >= n {
            keys.push((h, (i + 1 - n) as u32));
        }
    }
    keys.par_sort_unstable();
    let half = len / 2;
    let (mut sum, mut resolved) = (0.0, 0usize);
    for w in keys.windows(2) {
        if w[0].0 == w[1].0 && (w[0].1 as usize) < half {
            sum += ((w[1].1 - w[0].1) as f64).ln();
            resolved += 1;
        }
    }
    RecurrencePoint {
        n,
        mean_log_return: if resolved > 0 { sum / resolved as f64 } else { 0.0 },
        resolved_fraction: resolved as f64 / half as f64,
    }
}

/// The entropy estimate against `Σλ⁺`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaReport {
    pub entropy_estimate: f64,
    pub positive_exponent_sum: f64,
    /// `|h − Σλ⁺|/Σλ⁺`; zero when both vanish.
    pub relative_gap: f64,
    pub plateau: bool,
    /// No positive exponents and no entropy.
    pub vacuous: bool,
    /// `None` when the sweep found no plateau.
    pub holds: Option<bool>,
}

/// Compares a recurrence estimate with the positive part of `exponents`;
/// the formula holds when the relative gap is below `tol`.
pub fn pesin_formula_check(entropy: &EntropyReport, exponents: &[f64], tol: f64) -> Result<FormulaReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid("entropy tolerance must be positive"));
    }
    let sum: f64 = exponents.iter().filter(|&&l| l > 0.0).fold(0.0, |a, l| a + l);
    let h = entropy.estimate;
    let vacuous = sum == 0.0 && h.abs() < ZERO_ENTROPY;
    let relative_gap = if sum > 0.0 {
        (h - sum).abs() / sum
    } else if vacuous {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(FormulaReport {
        entropy_estimate: h,
        positive_exponent_sum: sum,
        relative_gap,
        plateau: entropy.plateau,
        vacuous,
        holds: entropy.plateau.then_some(relative_gap < tol),
    })
}
