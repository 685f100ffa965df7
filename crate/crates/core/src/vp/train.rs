use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tilestream_nn::{clip_grad_norm, Adam, Graph, Matrix};

use super::model::{ensemble, MtioTransformer, PredictionSet, PredictorConfig, VpBatch};
use crate::geometry::{iou, viewport_tile_mask, FieldOfView, TileGrid, ViewportPoint};
use crate::Error;

/// One training example: `history` followed by `future`, both sampled at
/// the trace rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub family: String,
    pub history: Vec<ViewportPoint>,
    pub future: Vec<ViewportPoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    /// Slides a `history + horizon` window over each trajectory with the
    /// given stride.
    pub fn from_trajectories<'a>(
        family: &str,
        trajectories: impl IntoIterator<Item = &'a [ViewportPoint]>,
        history: usize,
        horizon: usize,
        stride: usize,
    ) -> Self {
        let span = history + horizon;
        let mut windows = Vec::new();
        for traj in trajectories {
            let mut start = 0;
            while start + span <= traj.len() {
                windows.push(Window {
                    family: family.to_string(),
                    history: traj[start..start + history].to_vec(),
                    future: traj[start + history..start + span].to_vec(),
                });
                start += stride.max(1);
            }
        }
        Self { windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn extend(&mut self, other: WindowedDataset) {
        self.windows.extend(other.windows);
    }

    pub fn families(&self) -> Vec<String> {
        let mut f: Vec<String> = self.windows.iter().map(|w| w.family.clone()).collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn family(&self, name: &str) -> WindowedDataset {
        Self {
            windows: self.windows.iter().filter(|w| w.family == name).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Optimizer steps per epoch; defaults to one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    /// Cap on validation windows scored per epoch.
    pub max_validation: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            clip_norm: 1.0,
            patience: 10,
            validation_fraction: 0.1,
            steps_per_epoch: None,
            max_validation: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MtioTransformer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn truth_matrices(samples: &[Vec<&Window>], cfg: &PredictorConfig) -> Vec<Matrix> {
    (0..cfg.horizon)
        .map(|j| {
            Matrix::from_fn(samples.len(), 2 * cfg.heads, |b, c| {
                let p = samples[b][c / 2].future[j];
                if c % 2 == 0 {
                    p.x
                } else {
                    p.y
                }
            })
        })
        .collect()
}

fn batch_loss(model: &MtioTransformer, samples: &[Vec<&Window>]) -> Result<f64, Error> {
    let hist: Vec<Vec<&[ViewportPoint]>> = samples
        .iter()
        .map(|heads| heads.iter().map(|w| w.history.as_slice()).collect())
        .collect();
    let input = VpBatch::from_points(&hist, &model.config)?;
    let truth = truth_matrices(samples, &model.config);
    let mut g = Graph::new();
    let preds = model.forward(&mut g, &input, None);
    let loss = model.loss(&mut g, &preds, &truth);
    Ok(g.scalar(loss))
}

/// Mean per-window loss with each history duplicated across all heads.
pub fn validation_loss(model: &MtioTransformer, windows: &[&Window], batch: usize) -> Result<f64, Error> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        let samples: Vec<Vec<&Window>> = chunk.iter().map(|w| vec![*w; model.config.heads]).collect();
        total += batch_loss(model, &samples)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// One optimizer step on a batch where each head has its own windows.
/// Returns the batch loss before the update.
pub fn train_step(
    model: &mut MtioTransformer,
    adam: &mut Adam,
    samples: &[Vec<&Window>],
    clip_norm: f64,
) -> Result<f64, Error> {
    let hist: Vec<Vec<&[ViewportPoint]>> = samples
        .iter()
        .map(|heads| heads.iter().map(|w| w.history.as_slice()).collect())
        .collect();
    let input = VpBatch::from_points(&hist, &model.config)?;
    let truth = truth_matrices(samples, &model.config);
    let (value, mut grads) = {
        let mut g = Graph::new();
        let preds = model.forward(&mut g, &input, None);
        let loss = model.loss(&mut g, &preds, &truth);
        let back = g.backward(loss);
        (g.scalar(loss), g.param_grads(&back, &model.store))
    };
    if clip_norm > 0.0 {
        clip_grad_norm(&mut grads, clip_norm);
    }
    adam.step(&mut model.store, &grads);
    Ok(value)
}

/// Trains from a fresh model. Every step, each input head draws its own
/// windows uniformly from the training split. The parameters with the
/// lowest validation loss are returned; training stops after `patience`
/// epochs without improvement.
pub fn train(
    dataset: &WindowedDataset,
    config: &PredictorConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome, Error> {
    let model = MtioTransformer::new(config.clone(), seed)?;
    train_from(model, dataset, opts, seed)
}

pub fn train_from(
    mut model: MtioTransformer,
    dataset: &WindowedDataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome, Error> {
    let cfg = model.config.clone();
    let usable: Vec<&Window> = dataset
        .windows
        .iter()
        .filter(|w| w.history.len() == cfg.history && w.future.len() == cfg.horizon)
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = crate::rng_for(seed, 0x7670);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if usable.len() >= 2 {
        ((usable.len() as f64 * opts.validation_fraction).round() as usize).min(usable.len() - 1)
    } else {
        0
    };
    let val: Vec<&Window> = order[..n_val].iter().take(opts.max_validation).map(|&i| usable[i]).collect();
    let train_set: Vec<&Window> = order[n_val..].iter().map(|&i| usable[i]).collect();

    let mut adam = Adam::new(opts.learning_rate, &model.store);
    let steps = opts
        .steps_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(opts.batch_size))
        .max(1);
    let mut log = Vec::with_capacity(opts.epochs);
    let mut best = (f64::INFINITY, model.store.clone(), 0usize);
    let mut stale = 0;
    for epoch in 0..opts.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let samples: Vec<Vec<&Window>> = (0..opts.batch_size)
                .map(|_| {
                    (0..cfg.heads)
                        .map(|_| train_set[rng.random_range(0..train_set.len())])
                        .collect()
                })
                .collect();
            sum += train_step(&mut model, &mut adam, &samples, opts.clip_norm)?;
        }
        let train_loss = sum / steps as f64;
        let validation = if val.is_empty() {
            None
        } else {
            Some(validation_loss(&model, &val, opts.batch_size)?)
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            validation_loss: validation,
        });
        let score = validation.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, model.store.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if opts.patience > 0 && stale >= opts.patience {
                break;
            }
        }
    }
    if best.0.is_finite() {
        model.store = best.1;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.2,
    })
}

/// Mean IoU per horizon step for the ensembled prediction and for each
/// head on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub windows: usize,
    pub ensemble: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
}

impl AccuracyReport {
    pub fn mean_ensemble(&self) -> f64 {
        mean(&self.ensemble)
    }

    pub fn mean_head(&self, i: usize) -> f64 {
        mean(&self.heads[i])
    }

    pub fn best_head(&self) -> f64 {
        (0..self.heads.len()).map(|i| self.mean_head(i)).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores every window: its history is fed to all heads, and each
/// predicted point is compared with the truth as tile masks.
pub fn evaluate_accuracy(
    model: &MtioTransformer,
    dataset: &WindowedDataset,
    fov: &FieldOfView,
    grid: &TileGrid,
) -> Result<AccuracyReport, Error> {
    let cfg = &model.config;
    let windows: Vec<&Window> = dataset
        .windows
        .iter()
        .filter(|w| w.history.len() == cfg.history && w.future.len() == cfg.horizon)
        .collect();
    let mut ens = vec![0.0; cfg.horizon];
    let mut heads = vec![vec![0.0; cfg.horizon]; cfg.heads];
    for chunk in windows.chunks(64) {
        let samples: Vec<Vec<&[ViewportPoint]>> =
            chunk.iter().map(|w| vec![w.history.as_slice(); cfg.heads]).collect();
        let preds = model.predict_batch(&samples)?;
        for (w, p) in chunk.iter().zip(&preds) {
            accumulate(w, p, fov, grid, &mut ens, &mut heads)?;
        }
    }
    let n = windows.len().max(1) as f64;
    ens.iter_mut().for_each(|v| *v /= n);
    heads.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(AccuracyReport {
        windows: windows.len(),
        ensemble: ens,
        heads,
    })
}

fn accumulate(
    w: &Window,
    p: &PredictionSet,
    fov: &FieldOfView,
    grid: &TileGrid,
    ens: &mut [f64],
    heads: &mut [Vec<f64>],
) -> Result<(), Error> {
    let e = ensemble(p, grid);
    for (j, truth) in w.future.iter().enumerate() {
        let t = viewport_tile_mask(&truth.reduced(grid), fov, grid);
        ens[j] += iou(&viewport_tile_mask(&e[j], fov, grid), &t)?;
        for (i, h) in p.heads.iter().enumerate() {
            heads[i][j] += iou(&viewport_tile_mask(&h[j].reduced(grid), fov, grid), &t)?;
        }
    }
    Ok(())
}
