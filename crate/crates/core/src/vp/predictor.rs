use std::sync::Arc;

use tilestream_nn::wrap_signed;

use super::model::MtioTransformer;
use crate::geometry::{TileGrid, ViewportPoint};
use crate::Error;

/// Anything that maps a recent viewport history to future points.
pub trait ViewportPredictor: Send + Sync {
    fn name(&self) -> &str;
    fn history_len(&self) -> usize;
    /// Returns `horizon` points, each inside the frame.
    fn predict(&self, history: &[ViewportPoint], horizon: usize, grid: &TileGrid) -> Result<Vec<ViewportPoint>, Error>;
}

fn require(history: &[ViewportPoint], n: usize) -> Result<(), Error> {
    if history.len() < n {
        return Err(Error::InvalidInput(format!("need {n} history samples, got {}", history.len())));
    }
    Ok(())
}

/// Repeats the most recent point.
#[derive(Clone, Debug, Default)]
pub struct LastValue;

impl ViewportPredictor for LastValue {
    fn name(&self) -> &str {
        "last"
    }

    fn history_len(&self) -> usize {
        1
    }

    fn predict(&self, history: &[ViewportPoint], horizon: usize, grid: &TileGrid) -> Result<Vec<ViewportPoint>, Error> {
        require(history, 1)?;
        let p = history[history.len() - 1].reduced(grid);
        Ok(vec![p; horizon])
    }
}

/// Extrapolates the mean per-step velocity of the history, taking the
/// shorter way round horizontally.
#[derive(Clone, Debug)]
pub struct LinearExtrapolation {
    pub window: usize,
}

impl Default for LinearExtrapolation {
    fn default() -> Self {
        Self { window: 5 }
    }
}

impl ViewportPredictor for LinearExtrapolation {
    fn name(&self) -> &str {
        "linear"
    }

    fn history_len(&self) -> usize {
        self.window.max(2)
    }

    fn predict(&self, history: &[ViewportPoint], horizon: usize, grid: &TileGrid) -> Result<Vec<ViewportPoint>, Error> {
        require(history, 2)?;
        let recent = &history[history.len().saturating_sub(self.window.max(2))..];
        let first = recent[0];
        let last = recent[recent.len() - 1];
        let steps = (recent.len() - 1) as f64;
        let vx = wrap_signed(last.x - first.x, grid.video_width) / steps;
        let vy = (last.y - first.y) / steps;
        Ok((1..=horizon)
            .map(|j| ViewportPoint::new(last.x + vx * j as f64, last.y + vy * j as f64).reduced(grid))
            .collect())
    }
}

/// The trained encoder–decoder with its history duplicated across heads.
/// Horizons beyond the model's are filled by feeding predictions back as
/// history.
#[derive(Clone, Debug)]
pub struct TransformerPredictor {
    pub model: Arc<MtioTransformer>,
}

impl ViewportPredictor for TransformerPredictor {
    fn name(&self) -> &str {
        "transformer"
    }

    fn history_len(&self) -> usize {
        self.model.config.history
    }

    fn predict(&self, history: &[ViewportPoint], horizon: usize, grid: &TileGrid) -> Result<Vec<ViewportPoint>, Error> {
        let h = self.model.config.history;
        require(history, h)?;
        let mut context: Vec<ViewportPoint> = history[history.len() - h..].to_vec();
        let mut out = Vec::with_capacity(horizon);
        while out.len() < horizon {
            let next = self.model.predict_ensembled(&context[context.len() - h..])?;
            for p in next {
                let p = ViewportPoint::from_normalized(
                    p.x / self.model.config.video_width,
                    p.y / self.model.config.video_height,
                    grid,
                )
                .reduced(grid);
                out.push(p);
                context.push(p);
            }
        }
        out.truncate(horizon);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_wraps_across_the_seam() {
        let g = TileGrid::default();
        let hist = [ViewportPoint::new(3800.0, 900.0), ViewportPoint::new(3830.0, 910.0)];
        let p = LinearExtrapolation { window: 2 }.predict(&hist, 2, &g).unwrap();
        assert!((p[0].x - 20.0).abs() < 1e-9);
        assert!((p[1].x - 50.0).abs() < 1e-9);
        assert!((p[1].y - 930.0).abs() < 1e-9);
    }

    #[test]
    fn last_value_repeats() {
        let g = TileGrid::default();
        let p = LastValue.predict(&[ViewportPoint::new(5.0, 6.0)], 3, &g).unwrap();
        assert_eq!(p, vec![ViewportPoint::new(5.0, 6.0); 3]);
        assert!(LastValue.predict(&[], 3, &g).is_err());
    }
}
