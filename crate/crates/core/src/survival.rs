//! Discrete-time survival objective: logits → hazards → survival curve →
//! risk, the censored negative log-likelihood, and the concordance index.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{sigmoid, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalOutput<T> {
    pub logits: Vec<T>,
    pub hazards: Vec<T>,
    pub survival: Vec<T>,
    pub risk: T,
}

impl<T: Real> SurvivalOutput<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        let hazards: Vec<T> = logits.iter().map(|&l| sigmoid(l)).collect();
        let survival: Vec<T> = hazards
            .iter()
            .scan(T::one(), |s, &h| {
                *s *= T::one() - h;
                Some(*s)
            })
            .collect();
        let risk = -survival.iter().copied().sum::<T>();
        SurvivalOutput {
            logits: logits.to_vec(),
            hazards,
            survival,
            risk,
        }
    }
}

/// `r̂ = −Σ_j Π_{k≤j} (1 − σ(logit_k))`. Higher means earlier expected event.
pub fn risk_score<T: Real>(logits: &[T]) -> T {
    SurvivalOutput::from_logits(logits).risk
}

/// Censored discrete-time NLL of a `1×B` logit row, recorded on the tape.
///
/// With hazards `h = σ(logits)` and survival `S(j) = Π_{k≤j}(1 − h_k)`,
/// `S(−1) = 1`, all clamped to `[eps, 1 − eps]`:
/// censored patients contribute `−log S(bin)`, uncensored ones
/// `−log S(bin − 1) − log h(bin)`.
pub fn nll_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, bin: usize, censored: bool, eps: T) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.rows != 1 {
        return Err(Error::Contract(format!("nll_loss expects a 1xB logit row, got {shape}")));
    }
    if bin >= shape.cols {
        return Err(Error::Contract(format!("bin {bin} out of range for {} bins", shape.cols)));
    }
    let hazards = tape.sigmoid(logits);
    let survival_step = tape.rsub(T::one(), hazards);
    let survival = tape.cumprod(survival_step);
    let survival = tape.clamp(survival, eps, T::one() - eps);
    let loss = if censored {
        let s = tape.pick(survival, 0, bin)?;
        tape.log(s)
    } else {
        let h = tape.clamp(hazards, eps, T::one() - eps);
        let h = tape.pick(h, 0, bin)?;
        let log_h = tape.log(h);
        if bin == 0 {
            log_h
        } else {
            let s_prev = tape.pick(survival, 0, bin - 1)?;
            let log_s = tape.log(s_prev);
            tape.add(log_s, log_h)?
        }
    };
    Ok(tape.scale(loss, -T::one()))
}

/// Harrell's concordance index over comparable pairs: `(i, j)` with
/// `times[i] < times[j]` and `i` uncensored. A pair scores 1 when
/// `risks[i] > risks[j]` and ½ on a risk tie.
pub fn concordance_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || censored.len() != n {
        return Err(Error::Contract(format!(
            "concordance inputs differ in length: {n}, {}, {}",
            times.len(),
            censored.len()
        )));
    }
    // Counted in half-credits so the sum is exact.
    let (mut credit, mut pairs) = (0u64, 0u64);
    for i in (0..n).filter(|&i| !censored[i]) {
        for j in 0..n {
            if times[i] < times[j] {
                pairs += 1;
                if risks[i] > risks[j] {
                    credit += 2;
                } else if risks[i] == risks[j] {
                    credit += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(credit as f64 / (2 * pairs) as f64)
}
