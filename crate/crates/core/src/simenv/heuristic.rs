use super::{action_space, pyramid_assign, BitrateAction, BitrateLadder, EnvState};
use crate::Error;

/// Harmonic mean of the nonzero throughput samples, `None` before any
/// chunk has been downloaded.
pub fn harmonic_mean_estimate(throughput: &[f64]) -> Option<f64> {
    let seen: Vec<f64> = throughput.iter().copied().filter(|&v| v > 0.0).collect();
    if seen.is_empty() {
        return None;
    }
    Some(seen.len() as f64 / seen.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Highest action (in action-space order) whose pyramid-assigned chunk can
/// be fetched within one chunk duration at `estimate_mbps`; the lowest
/// action when none fits.
pub fn heuristic_policy(state: &EnvState, scale: f64, estimate_mbps: f64) -> Result<BitrateAction, Error> {
    let ladder = BitrateLadder::new(state.rungs.clone())?;
    let rungs = ladder.len();
    let actions = action_space(&ladder);
    let budget = estimate_mbps * 1e6 * state.chunk_duration;
    for a in actions.iter().rev() {
        let rates = pyramid_assign(a, &state.predicted, &ladder, scale)?;
        let bits: f64 = rates
            .iter()
            .enumerate()
            .map(|(t, r)| state.tile_sizes[t * rungs + ladder.index_of(*r).unwrap()])
            .sum();
        if bits <= budget {
            return Ok(*a);
        }
    }
    Ok(actions[0])
}
