//! Regressor from (state, action) back to the preference that produced the
//! action. Its squared error, through `-ln`, becomes a reward term.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tilestream_nn::{Adam, Graph, Linear, Matrix, ParamStore, Sgd, Var};

use crate::agent::{read_checkpoint, write_checkpoint, AgentObservation, NetCheckpoint, ObsBatch, StateEncoder};
use crate::qoe::QoEPreference;
use crate::simenv::ObsLayout;
use crate::Error;

/// Floor applied to the MSE before the logarithm.
pub const MSE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedPreference(pub [f64; 3]);

/// Mean of the three squared component errors.
pub fn preference_mse(truth: &QoEPreference, est: &IdentifiedPreference) -> f64 {
    truth.as_array().iter().zip(est.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0
}

pub fn mi_reward_term(truth: &QoEPreference, est: &IdentifiedPreference) -> f64 {
    -preference_mse(truth, est).max(MSE_FLOOR).ln()
}

pub fn combined_reward(qoe_total: f64, mi_term: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * qoe_total + alpha * mi_term
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifierConfig {
    pub filters: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub actions: usize,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        Self {
            filters: 128,
            hidden1: 1280,
            hidden2: 128,
            actions: 15,
        }
    }
}

impl IdentifierConfig {
    pub fn small() -> Self {
        Self {
            filters: 16,
            hidden1: 64,
            hidden2: 32,
            ..Self::default()
        }
    }
}

/// States, the actions taken in them, and the preferences in force.
#[derive(Clone, Debug)]
pub struct IdentifierBatch {
    pub states: ObsBatch,
    pub actions: Vec<usize>,
}

impl IdentifierBatch {
    pub fn new(obs: &[&AgentObservation], actions: &[usize], layout: &ObsLayout) -> Result<Self, Error> {
        if obs.len() != actions.len() {
            return Err(Error::Shape(format!("{} observations, {} actions", obs.len(), actions.len())));
        }
        Ok(Self {
            states: ObsBatch::new(obs, layout)?,
            actions: actions.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Targets, one preference per row.
    pub fn targets(&self) -> &Matrix {
        &self.states.prefs
    }
}

/// Anything with parameters that maps a batch to an `n x 3` estimate.
pub trait PreferenceRegressor {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward_on<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, batch: &IdentifierBatch) -> Var;

    fn estimate(&self, batch: &IdentifierBatch) -> Vec<IdentifiedPreference> {
        let mut g = Graph::new();
        let out = self.forward_on(&mut g, self.store(), batch);
        let m = g.value(out);
        (0..m.rows()).map(|r| IdentifiedPreference([m.get(r, 0), m.get(r, 1), m.get(r, 2)])).collect()
    }

    fn batch_mse(&self, batch: &IdentifierBatch) -> f64 {
        let mut g = Graph::new();
        let loss = mse_loss(self, &mut g, self.store(), batch);
        g.scalar(loss)
    }
}

pub fn mse_loss<'p, R: PreferenceRegressor + ?Sized>(
    model: &R,
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    batch: &IdentifierBatch,
) -> Var {
    let out = model.forward_on(g, store, batch);
    let t = g.leaf(batch.targets().clone());
    let d = g.sub(out, t);
    let sq = g.square(d);
    g.mean(sq)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum IdentifierOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl IdentifierOptimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        match self {
            Self::Sgd(o) => o.step(store, grads),
            Self::Adam(o) => o.step(store, grads),
        }
    }
}

/// One descent step on the batch MSE. Returns the pre-step MSE.
pub fn update_identifier<R: PreferenceRegressor + ?Sized>(
    model: &mut R,
    opt: &mut IdentifierOptimizer,
    batch: &IdentifierBatch,
) -> Result<f64, Error> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mse, grads) = {
        let mut g = Graph::new();
        let loss = mse_loss(model, &mut g, model.store(), batch);
        let back = g.backward(loss);
        (g.scalar(loss), g.param_grads(&back, model.store()))
    };
    opt.step(model.store_mut(), &grads);
    Ok(mse)
}

#[derive(Clone, Debug)]
struct Handles {
    encoder: StateEncoder,
    action: Linear,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct QoEIdentifier {
    pub config: IdentifierConfig,
    pub layout: ObsLayout,
    pub seed: u64,
    pub store: ParamStore,
    h: Handles,
}

impl QoEIdentifier {
    pub fn new(config: IdentifierConfig, layout: ObsLayout, seed: u64) -> Result<Self, Error> {
        if config.filters == 0 || config.hidden1 == 0 || config.hidden2 == 0 || config.actions == 0 {
            return Err(Error::Config("identifier widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = crate::rng_for(seed, 0x6964);
        let encoder = StateEncoder::new(&mut store, "state", &layout, config.filters, &mut rng);
        let action = Linear::new(&mut store, "action", config.actions, config.hidden2, true, &mut rng);
        let fc1 = Linear::new(&mut store, "fc1", encoder.width + config.hidden2, config.hidden1, true, &mut rng);
        let fc2 = Linear::new(&mut store, "fc2", config.hidden1, config.hidden2, true, &mut rng);
        let out = Linear::new(&mut store, "out", config.hidden2, 3, true, &mut rng);
        Ok(Self {
            config,
            layout,
            seed,
            store,
            h: Handles {
                encoder,
                action,
                fc1,
                fc2,
                out,
            },
        })
    }

    pub fn from_store(config: IdentifierConfig, layout: ObsLayout, seed: u64, store: ParamStore) -> Result<Self, Error> {
        let mut id = Self::new(config, layout, seed)?;
        id.store.load_from(&store)?;
        Ok(id)
    }

    pub fn identify(&self, obs: &AgentObservation, action: usize) -> Result<IdentifiedPreference, Error> {
        let batch = IdentifierBatch::new(&[obs], &[action], &self.layout)?;
        Ok(self.estimate(&batch)[0])
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_checkpoint(
            path,
            &NetCheckpoint {
                kind: "identifier".into(),
                config: serde_json::to_value(&self.config)?,
                layout: self.layout.clone(),
                seed: self.seed,
                params: self.store.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let ck = read_checkpoint(path, "identifier")?;
        Self::from_store(serde_json::from_value(ck.config)?, ck.layout, ck.seed, ck.params)
    }
}

impl PreferenceRegressor for QoEIdentifier {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_on<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, batch: &IdentifierBatch) -> Var {
        let state = self.h.encoder.forward(g, store, &batch.states);
        let onehot = Matrix::from_fn(batch.len(), self.config.actions, |r, c| f64::from(batch.actions[r] == c));
        let a = g.leaf(onehot);
        let af = self.h.action.forward(g, store, a);
        let af = g.relu(af);
        let joint = g.concat_cols(&[state, af]);
        let h1 = self.h.fc1.forward(g, store, joint);
        let h1 = g.relu(h1);
        let h2 = self.h.fc2.forward(g, store, h1);
        let h2 = g.relu(h2);
        let h2 = g.add(h2, af);
        let o = self.h.out.forward(g, store, h2);
        g.sigmoid(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_terms_by_hand() {
        let w = QoEPreference::new(1.0, 0.0, 0.0).unwrap();
        assert!((mi_reward_term(&w, &IdentifiedPreference([0.5; 3])) - 1.3863).abs() < 1e-4);
        assert!((mi_reward_term(&w, &IdentifiedPreference([1.0, 0.0, 0.0])) - 13.8155).abs() < 1e-4);
        assert_eq!(mi_reward_term(&w, &IdentifiedPreference([0.0, 1.0, 1.0])), 0.0);
        assert!((combined_reward(4.0, 1.3863, 0.5) - 2.69315).abs() < 1e-9);
        assert_eq!(combined_reward(4.0, 1.3863, 0.0), 4.0);
        assert_eq!(combined_reward(4.0, 1.3863, 1.0), 1.3863);
    }
}
