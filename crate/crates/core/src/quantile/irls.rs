use nalgebra::{DMatrix, DVector};

use super::{solve_spd, weighted_least_squares, WeightedObservation};
use crate::error::{Error, Result};

const SMOOTHING_LEVELS: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
const MAX_INNER: usize = 60;

/// IRLS on the Huber-smoothed check loss, annealing the smoothing width.
///
/// Widths are relative to the mean absolute least-squares residual so the
/// schedule does not depend on the response scale.
pub(super) fn smoothed_irls(
    obs: &[WeightedObservation],
    p: usize,
    tau: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let mut beta = weighted_least_squares(obs, p).ok_or(Error::RankDeficientDesign)?;
    let wsum: f64 = obs.iter().map(|o| o.weight).sum();
    let scale = obs
        .iter()
        .map(|o| o.weight * o.residual(&beta).abs())
        .sum::<f64>()
        / wsum;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let shift = tau - 0.5;

    for level in SMOOTHING_LEVELS {
        let gamma = level * scale;
        for _ in 0..MAX_INNER {
            let mut gram = DMatrix::<f64>::zeros(p, p);
            let mut rhs = DVector::<f64>::zeros(p);
            for o in obs {
                let r = o.residual(&beta);
                let v = o.weight / (2.0 * r.abs().max(gamma));
                for a in 0..p {
                    let va = v * o.design[a];
                    rhs[a] += va * o.response + shift * o.weight * o.design[a];
                    for b in 0..=a {
                        gram[(a, b)] += va * o.design[b];
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    gram[(b, a)] = gram[(a, b)];
                }
            }
            let next = match solve_spd(gram, rhs) {
                Some(n) => n,
                None => break,
            };
            let big = beta.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let step = next
                .iter()
                .zip(&beta)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            beta = next;
            if step <= tol * big {
                break;
            }
        }
    }
    Ok(beta)
}
