//! Nyström-approximated softmax attention.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

/// Iterative Moore-Penrose pseudo-inverse of a square matrix:
/// `z ← ¼·z·(13I − xz(15I − xz(7I − xz)))`, starting from
/// `z₀ = xᵀ / (max row-sum · max col-sum)`.
pub fn pinv_newton_schulz<T: Real>(tape: &mut Tape<'_, T>, x: Var, iterations: usize) -> Result<Var> {
    let mut z = tape.pinv_init(x);
    for _ in 0..iterations {
        let xz = tape.matmul(x, z)?;
        let inner = tape.identity_minus(T::lit(7.0), xz)?;
        let inner = tape.matmul(xz, inner)?;
        let inner = tape.identity_minus(T::lit(15.0), inner)?;
        let inner = tape.matmul(xz, inner)?;
        let inner = tape.identity_minus(T::lit(13.0), inner)?;
        let next = tape.matmul(z, inner)?;
        z = tape.scale(next, T::lit(0.25));
    }
    Ok(z)
}

/// Nyström attention for one head. `q`, `k`, `v` are `n×dh` with `q`
/// already scaled. Landmarks are means of `n / landmarks` consecutive rows
/// and clamp to `n`; after clamping `n` must be a multiple of the landmark
/// count. With `landmarks ≥ n` the full softmax kernel is inverted.
pub fn nystrom_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    landmarks: usize,
    pinv_iterations: usize,
) -> Result<Var> {
    let n = tape.shape(q).rows;
    let landmarks = landmarks.min(n);
    if landmarks == 0 || !n.is_multiple_of(landmarks) {
        return Err(Error::Contract(format!(
            "sequence length {n} is not a multiple of {landmarks} landmarks"
        )));
    }
    let group = n / landmarks;
    let (q_land, k_land) = if group == 1 {
        (q, k)
    } else {
        let inv = T::one() / T::lit(group as f64);
        let mut avg = Vec::with_capacity(landmarks * n);
        for l in 0..landmarks {
            avg.extend((0..n).map(|c| if c / group == l { inv } else { T::zero() }));
        }
        let avg = tape.constant(Tensor::new(landmarks, n, avg)?);
        (tape.matmul(avg, q)?, tape.matmul(avg, k)?)
    };

    let k_land_t = tape.transpose(k_land);
    let sim1 = tape.matmul(q, k_land_t)?;
    let attn1 = tape.softmax(sim1, Axis::Cols);
    let sim2 = tape.matmul(q_land, k_land_t)?;
    let attn2 = tape.softmax(sim2, Axis::Cols);
    let k_t = tape.transpose(k);
    let sim3 = tape.matmul(q_land, k_t)?;
    let attn3 = tape.softmax(sim3, Axis::Cols);

    let attn2_inv = pinv_newton_schulz(tape, attn2, pinv_iterations)?;
    let left = tape.matmul(attn1, attn2_inv)?;
    let right = tape.matmul(attn3, v)?;
    tape.matmul(left, right)
}
