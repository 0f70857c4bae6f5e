//! Rebalancing math: measured rates, sample-count increments (closed form and
//! the equivalent linear system), integer apportionment, the per-epoch
//! allocation update and stability detection.

use thiserror::Error;

use crate::domain::{to_secs, AllocationState, Nanos};

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    /// A measured gradient-computation time was zero. This is the
    /// uninitialized first-epoch state; the caller must skip rebalancing.
    #[error("worker {rank} reported zero gradient-computing time")]
    ZeroTiming { rank: usize },
    /// The constraint matrix lost rank. Cannot happen for positive rates;
    /// surfacing it is a defect signal.
    #[error("singular constraint matrix while solving for increments")]
    SingularMatrix,
    /// `C` is too small to give every worker the minimum sample count.
    #[error("total {total} cannot give {n} workers at least {floor} samples each")]
    InfeasibleFloor { total: u64, n: usize, floor: u64 },
}

/// Measured calculation speeds, samples per second, indexed by rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RateVector(pub Vec<f64>);

/// Real-valued change in samples per aggregation; sums to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Increment(pub Vec<f64>);

/// Per-worker rates from last epoch's weights and computing times:
/// `v_i = w_i / t_s_i` in samples per second.
pub fn rates(weights: &[u64], t_s: &[Nanos]) -> Result<RateVector, AllocError> {
    assert_eq!(weights.len(), t_s.len());
    if let Some(rank) = t_s.iter().position(|&t| t == 0) {
        return Err(AllocError::ZeroTiming { rank });
    }
    Ok(RateVector(
        weights
            .iter()
            .zip(t_s)
            .map(|(&w, &t)| w as f64 / to_secs(t))
            .collect(),
    ))
}

/// Closed-form increments: `u_i = v_i / Σv · Σw − w_i`.
pub fn increments_closed_form(weights: &[u64], v: &RateVector) -> Increment {
    let total: u64 = weights.iter().sum();
    let rate_sum: f64 = v.0.iter().sum();
    Increment(
        weights
            .iter()
            .zip(&v.0)
            .map(|(&w, &vi)| vi / rate_sum * total as f64 - w as f64)
            .collect(),
    )
}

/// Increments by building and solving the full constraint system `A·u = b`:
/// rows `1..n-1` equalize pairwise per-sample times of ring neighbors, the
/// final all-ones row pins `Σu = 0`. Solved by partial-pivot elimination.
///
/// Exists as an independent route to cross-check [`increments_closed_form`].
pub fn increments_linear_system(weights: &[u64], v: &RateVector) -> Result<Increment, AllocError> {
    let n = weights.len();
    assert!(n >= 2);
    assert_eq!(v.0.len(), n);

    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for i in 0..n - 1 {
        a[i][i] = 1.0 / v.0[i];
        a[i][i + 1] = -1.0 / v.0[i + 1];
        b[i] = weights[i + 1] as f64 / v.0[i + 1] - weights[i] as f64 / v.0[i];
    }
    for j in 0..n {
        a[n - 1][j] = 1.0;
    }
    // b[n-1] stays 0: the increments must conserve C.

    solve_in_place(&mut a, &mut b)?;
    Ok(Increment(b))
}

/// Gaussian elimination with partial pivoting; solution written into `b`.
fn solve_in_place(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<(), AllocError> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(AllocError::SingularMatrix);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * b[k];
        }
        b[col] = acc / a[col][col];
    }
    Ok(())
}

/// Largest-remainder (Hamilton) apportionment of real-valued targets onto
/// integers summing exactly to `total`, each at least `floor`.
///
/// Targets below the floor are clamped up first; ties break toward the
/// lowest rank.
pub fn apportion(real_weights: &[f64], total: u64, floor: u64) -> Result<Vec<u64>, AllocError> {
    let n = real_weights.len();
    if total < n as u64 * floor {
        return Err(AllocError::InfeasibleFloor { total, n, floor });
    }
    let targets: Vec<f64> = real_weights.iter().map(|&w| w.max(floor as f64)).collect();
    let mut out: Vec<u64> = targets.iter().map(|&t| (t.floor() as u64).max(floor)).collect();
    let mut assigned: u64 = out.iter().sum();

    // Fractional remainders, largest first, lowest rank on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let ri = targets[i] - targets[i].floor();
        let rj = targets[j] - targets[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });

    let mut idx = 0;
    while assigned < total {
        out[order[idx % n]] += 1;
        assigned += 1;
        idx += 1;
    }
    // Clamping can overshoot when several targets sat below the floor;
    // take back from the smallest remainders that still have slack.
    idx = n;
    while assigned > total {
        idx -= 1;
        let i = order[idx % n];
        if out[i] > floor {
            out[i] -= 1;
            assigned -= 1;
        }
        if idx == 0 {
            idx = n;
        }
    }
    Ok(out)
}

/// One rebalance round: new real-valued weights
/// `w'_i = (w_i / t_s_i) / Σ_j (w_j / t_s_j) · C`, apportioned to integers.
/// The total is preserved exactly; the history gains the new vector and the
/// epoch counter advances.
pub fn update_allocation(
    state: &AllocationState,
    t_s: &[Nanos],
    floor: u64,
) -> Result<AllocationState, AllocError> {
    let v = rates(&state.weights, t_s)?;
    let rate_sum: f64 = v.0.iter().sum();
    let real: Vec<f64> = v
        .0
        .iter()
        .map(|&vi| vi / rate_sum * state.total as f64)
        .collect();
    let weights = apportion(&real, state.total, floor)?;
    debug_assert_eq!(weights.iter().sum::<u64>(), state.total);

    let mut history = state.history.clone();
    history.push(weights.clone());
    Ok(AllocationState {
        weights,
        total: state.total,
        epoch: state.epoch + 1,
        history,
    })
}

/// True iff the last `window` weight vectors pairwise differ by at most
/// `tol` in every component. Shorter histories are never stable.
pub fn is_stable(history: &[Vec<u64>], window: usize, tol: u64) -> bool {
    assert!(window >= 2);
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    for a in 0..tail.len() {
        for b in a + 1..tail.len() {
            let close = tail[a]
                .iter()
                .zip(&tail[b])
                .all(|(&x, &y)| x.abs_diff(y) <= tol);
            if !close {
                return false;
            }
        }
    }
    true
}
