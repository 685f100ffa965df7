use serde::{Deserialize, Serialize};

use crate::geometry::TileMask;
use crate::Error;

/// Available encodings in Mbps, strictly ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitrateLadder {
    rungs: Vec<f64>,
}

impl Default for BitrateLadder {
    fn default() -> Self {
        Self {
            rungs: vec![1.0, 5.0, 8.0, 16.0, 35.0],
        }
    }
}

impl BitrateLadder {
    pub fn new(rungs: Vec<f64>) -> Result<Self, Error> {
        if rungs.is_empty() || rungs.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput(format!("invalid ladder {rungs:?}")));
        }
        if rungs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!("ladder {rungs:?} is not strictly ascending")));
        }
        Ok(Self { rungs })
    }

    pub fn rungs(&self) -> &[f64] {
        &self.rungs
    }

    pub fn len(&self) -> usize {
        self.rungs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rungs.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.rungs[0]
    }

    pub fn max(&self) -> f64 {
        *self.rungs.last().unwrap()
    }

    pub fn index_of(&self, mbps: f64) -> Option<usize> {
        self.rungs.iter().position(|&r| r == mbps)
    }

    /// Closest rung to `target`, ties going to the lower rung, never below
    /// the lowest rung.
    pub fn snap(&self, target: f64) -> f64 {
        let mut best = self.rungs[0];
        for &r in &self.rungs[1..] {
            if (r - target).abs() < (best - target).abs() {
                best = r;
            }
        }
        best.max(self.min())
    }
}

/// Bitrates for tiles inside and outside the predicted viewport.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitrateAction {
    pub r_in: f64,
    pub r_out: f64,
}

/// Every `(r_in, r_out)` pair with `r_in ≥ r_out`, ordered by `(r_in, r_out)`.
pub fn action_space(ladder: &BitrateLadder) -> Vec<BitrateAction> {
    let mut out = Vec::with_capacity(ladder.len() * (ladder.len() + 1) / 2);
    for (i, &r_in) in ladder.rungs().iter().enumerate() {
        for &r_out in &ladder.rungs()[..=i] {
            out.push(BitrateAction { r_in, r_out });
        }
    }
    out
}

/// Pyramid allocation: `r_in` on the predicted tiles, then successive
/// one-tile rings (8-neighbourhood, wrapping horizontally, clipped at the
/// poles) get `r_out`, `r_out/scale`, `r_out/scale²`, … snapped to the ladder.
pub fn pyramid_assign(
    action: &BitrateAction,
    predicted: &TileMask,
    ladder: &BitrateLadder,
    scale: f64,
) -> Result<Vec<f64>, Error> {
    if predicted.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !(scale >= 1.0) {
        return Err(Error::InvalidInput(format!("pyramid scale must be ≥ 1, got {scale}")));
    }
    let grid = *predicted.grid();
    let (rows, cols) = (grid.rows, grid.cols);
    let mut rates: Vec<Option<f64>> = predicted
        .bits()
        .iter()
        .map(|&b| b.then_some(action.r_in))
        .collect();
    let mut remaining = rates.iter().filter(|r| r.is_none()).count();
    let mut ring = 1;
    while remaining > 0 {
        let value = if ring == 1 {
            action.r_out
        } else {
            ladder.snap(action.r_out / scale.powi(ring - 1))
        };
        let covered: Vec<bool> = rates.iter().map(Option::is_some).collect();
        for r in 0..rows {
            for c in 0..cols {
                if covered[r * cols + c] {
                    continue;
                }
                let touches = (-1i64..=1).any(|dr| {
                    let nr = r as i64 + dr;
                    (0..rows as i64).contains(&nr)
                        && (-1i64..=1).any(|dc| {
                            let nc = (c as i64 + dc).rem_euclid(cols as i64) as usize;
                            covered[nr as usize * cols + nc]
                        })
                });
                if touches {
                    rates[r * cols + c] = Some(value);
                    remaining -= 1;
                }
            }
        }
        ring += 1;
    }
    Ok(rates.into_iter().map(Option::unwrap).collect())
}
