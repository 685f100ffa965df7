//! Preference-conditioned policy/value network and its PPO update.
//!
//! Every vector input goes through a convolution whose kernel spans the
//! whole vector, which is a dense layer on the tap-major flattening. The
//! scalar inputs and the preference vector go through dense layers, the
//! features are concatenated and passed through two dense layers, and the
//! preference feature is added to the second one's output before the
//! policy and value heads.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tilestream_nn::{clip_grad_norm, softmax_rows, Adam, Graph, Linear, Matrix, ParamStore, Var};

use crate::qoe::QoEPreference;
use crate::simenv::{ObsLayout, StateFeatures};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub filters: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub pref_width: usize,
    /// Add the preference feature to the second hidden layer's output.
    pub residual: bool,
    pub actions: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            filters: 128,
            hidden1: 1280,
            hidden2: 128,
            pref_width: 128,
            residual: true,
            actions: 15,
        }
    }
}

impl AgentConfig {
    pub fn small() -> Self {
        Self {
            filters: 16,
            hidden1: 64,
            hidden2: 32,
            pref_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.filters == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.pref_width == 0 || self.actions == 0 {
            return Err(Error::Config("agent widths must be positive".into()));
        }
        if self.residual && self.pref_width != self.hidden2 {
            return Err(Error::Config(format!(
                "residual preference path needs pref_width ({}) = hidden2 ({})",
                self.pref_width, self.hidden2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub state: StateFeatures,
    pub pref: QoEPreference,
}

/// Observations stacked row-wise.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub vectors: Vec<Matrix>,
    pub scalars: Matrix,
    pub prefs: Matrix,
}

impl ObsBatch {
    pub fn new(obs: &[&AgentObservation], layout: &ObsLayout) -> Result<Self, Error> {
        if obs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for o in obs {
            o.state.check(layout)?;
        }
        let n = obs.len();
        let vectors = layout
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Matrix::from_fn(n, v.size(), |r, c| obs[r].state.vectors[i][c]))
            .collect();
        Ok(Self {
            vectors,
            scalars: Matrix::from_fn(n, layout.scalars, |r, c| obs[r].state.scalars[c]),
            prefs: Matrix::from_fn(n, 3, |r, c| obs[r].pref.as_array()[c]),
        })
    }

    pub fn len(&self) -> usize {
        self.prefs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-input feature extractor shared in structure by the agent and the
/// identifier.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    pub convs: Vec<Linear>,
    pub scalars: Option<Linear>,
    pub width: usize,
}

impl StateEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, layout: &ObsLayout, filters: usize, rng: &mut crate::Rng) -> Self {
        let convs = layout
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Linear::new(store, &format!("{prefix}.conv{i}"), v.size(), filters, true, rng))
            .collect();
        let scalars =
            (layout.scalars > 0).then(|| Linear::new(store, &format!("{prefix}.scalars"), layout.scalars, filters, true, rng));
        let width = filters * (layout.vectors.len() + usize::from(layout.scalars > 0));
        Self { convs, scalars, width }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, batch: &ObsBatch) -> Var {
        let mut parts = Vec::with_capacity(self.convs.len() + 1);
        for (conv, m) in self.convs.iter().zip(&batch.vectors) {
            let x = g.leaf(m.clone());
            let h = conv.forward(g, store, x);
            parts.push(g.relu(h));
        }
        if let Some(s) = &self.scalars {
            let x = g.leaf(batch.scalars.clone());
            let h = s.forward(g, store, x);
            parts.push(g.relu(h));
        }
        g.concat_cols(&parts)
    }
}

/// Probabilities over the ordered action space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample(&self, rng: &mut crate::Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct PolicyHandles {
    encoder: StateEncoder,
    pref: Linear,
    fc1: Linear,
    fc2: Linear,
    logits: Linear,
    value: Linear,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: AgentConfig,
    pub layout: ObsLayout,
    pub seed: u64,
    pub store: ParamStore,
    h: PolicyHandles,
}

impl PolicyNet {
    pub fn new(config: AgentConfig, layout: ObsLayout, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng_for(seed, 0x6167);
        let encoder = StateEncoder::new(&mut store, "state", &layout, config.filters, &mut rng);
        let pref = Linear::new(&mut store, "pref", 3, config.pref_width, true, &mut rng);
        let joint = encoder.width + config.pref_width;
        let fc1 = Linear::new(&mut store, "fc1", joint, config.hidden1, true, &mut rng);
        let fc2 = Linear::new(&mut store, "fc2", config.hidden1, config.hidden2, true, &mut rng);
        let logits = Linear::new(&mut store, "policy", config.hidden2, config.actions, true, &mut rng);
        let value = Linear::new(&mut store, "value", config.hidden2, 1, true, &mut rng);
        Ok(Self {
            config,
            layout,
            seed,
            store,
            h: PolicyHandles {
                encoder,
                pref,
                fc1,
                fc2,
                logits,
                value,
            },
        })
    }

    pub fn from_store(config: AgentConfig, layout: ObsLayout, seed: u64, store: ParamStore) -> Result<Self, Error> {
        let mut net = Self::new(config, layout, seed)?;
        net.store.load_from(&store)?;
        Ok(net)
    }

    /// `(logits, value)` for a batch against any store with this layout.
    pub fn forward_on<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, batch: &ObsBatch) -> (Var, Var) {
        let state = self.h.encoder.forward(g, store, batch);
        let p = g.leaf(batch.prefs.clone());
        let pf = self.h.pref.forward(g, store, p);
        let pf = g.relu(pf);
        let joint = g.concat_cols(&[state, pf]);
        let h1 = self.h.fc1.forward(g, store, joint);
        let h1 = g.relu(h1);
        let h2 = self.h.fc2.forward(g, store, h1);
        let mut h2 = g.relu(h2);
        if self.config.residual {
            h2 = g.add(h2, pf);
        }
        let logits = self.h.logits.forward(g, store, h2);
        let value = self.h.value.forward(g, store, h2);
        (logits, value)
    }

    /// Distributions and values for a batch of observations.
    pub fn evaluate(&self, obs: &[&AgentObservation]) -> Result<(Vec<ActionDistribution>, Vec<f64>), Error> {
        let batch = ObsBatch::new(obs, &self.layout)?;
        let mut g = Graph::new();
        let (logits, value) = self.forward_on(&mut g, &self.store, &batch);
        let probs = softmax_rows(g.value(logits));
        let dists = (0..batch.len())
            .map(|r| ActionDistribution {
                probs: probs.row(r).to_vec(),
            })
            .collect();
        Ok((dists, g.value(value).data().to_vec()))
    }

    pub fn policy(&self, obs: &AgentObservation) -> Result<ActionDistribution, Error> {
        Ok(self.evaluate(&[obs])?.0.remove(0))
    }

    pub fn value(&self, obs: &AgentObservation) -> Result<f64, Error> {
        Ok(self.evaluate(&[obs])?.1[0])
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_checkpoint(
            path,
            &NetCheckpoint {
                kind: "agent".into(),
                config: serde_json::to_value(&self.config)?,
                layout: self.layout.clone(),
                seed: self.seed,
                params: self.store.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let ck = read_checkpoint(path, "agent")?;
        Self::from_store(serde_json::from_value(ck.config)?, ck.layout, ck.seed, ck.params)
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NetCheckpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub layout: ObsLayout,
    pub seed: u64,
    pub params: ParamStore,
}

pub(crate) fn write_checkpoint(path: &Path, ck: &NetCheckpoint) -> Result<(), Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), ck)?;
    Ok(())
}

pub(crate) fn read_checkpoint(path: &Path, kind: &str) -> Result<NetCheckpoint, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: NetCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ck.kind != kind {
        return Err(Error::InvalidInput(format!("{} holds a {} checkpoint, not {kind}", path.display(), ck.kind)));
    }
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            discount: 0.95,
            epochs: 4,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.02,
            learning_rate: 5e-4,
            max_grad_norm: 0.5,
        }
    }
}

/// Generalized advantage estimates and discounted returns for a sequence
/// of transitions; `done[t]` ends an episode after step `t`.
pub fn gae(rewards: &[f64], values: &[f64], done: &[bool], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        if done[t] {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = rewards[t] + discount * next_value - values[t];
        next_adv = delta + discount * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Transitions ready for a PPO update.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub obs: Vec<AgentObservation>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Minibatch inputs for [`ppo_loss`].
pub struct PpoMinibatch<'a> {
    pub obs: ObsBatch,
    pub actions: &'a [usize],
    pub old_log_probs: Matrix,
    pub advantages: Matrix,
    pub returns: Matrix,
}

/// Nodes of the PPO objective on one minibatch.
pub struct PpoTerms {
    pub total: Var,
    pub ratio: Var,
    pub entropy: Var,
    pub policy_loss: Var,
    pub value_loss: Var,
}

/// Clipped surrogate + value regression − entropy bonus.
pub fn ppo_loss<'p>(
    net: &PolicyNet,
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    mb: &PpoMinibatch<'_>,
    cfg: &PpoConfig,
) -> PpoTerms {
    let n = mb.actions.len() as f64;
    let (logits, value) = net.forward_on(g, store, &mb.obs);
    let logp_all = g.log_softmax_rows(logits);
    let logp = g.pick_per_row(logp_all, mb.actions);
    let old = g.leaf(mb.old_log_probs.clone());
    let diff = g.sub(logp, old);
    let ratio = g.exp(diff);
    let adv = g.leaf(mb.advantages.clone());
    let s1 = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = g.mul(clipped, adv);
    let surr = g.minimum(s1, s2);
    let surr = g.sum(surr);
    let policy_loss = g.scale(surr, -1.0 / n);

    let ret = g.leaf(mb.returns.clone());
    let verr = g.sub(value, ret);
    let vsq = g.square(verr);
    let vsum = g.sum(vsq);
    let value_loss = g.scale(vsum, 1.0 / n);

    let probs = g.exp(logp_all);
    let plogp = g.mul(probs, logp_all);
    let ent = g.sum(plogp);
    let entropy = g.scale(ent, -1.0 / n);

    let v = g.scale(value_loss, cfg.value_coef);
    let e = g.scale(entropy, -cfg.entropy_coef);
    let t = g.add(policy_loss, v);
    let total = g.add(t, e);
    PpoTerms {
        total,
        ratio,
        entropy,
        policy_loss,
        value_loss,
    }
}

/// Several epochs of minibatch PPO over one rollout batch. Advantages are
/// standardized over the batch unless their spread is negligible.
pub fn ppo_update(
    net: &mut PolicyNet,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut crate::Rng,
) -> Result<PpoDiagnostics, Error> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("PPO needs at least 2 transitions, got {n}")));
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let adv: Vec<f64> = if var.sqrt() > 1e-8 {
        batch.advantages.iter().map(|a| (a - mean) / (var.sqrt() + 1e-8)).collect()
    } else {
        batch.advantages.clone()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut diag = PpoDiagnostics::default();
    let mut count = 0.0;
    let mut clipped = 0.0;
    let mut samples = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch.max(2)) {
            let obs: Vec<&AgentObservation> = idx.iter().map(|&i| &batch.obs[i]).collect();
            let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
            let col = |v: &[f64]| Matrix::from_fn(idx.len(), 1, |r, _| v[idx[r]]);
            let mb = PpoMinibatch {
                obs: ObsBatch::new(&obs, &net.layout)?,
                actions: &actions,
                old_log_probs: col(&batch.log_probs),
                advantages: col(&adv),
                returns: col(&batch.returns),
            };
            let mut grads = {
                let mut g = Graph::new();
                let terms = ppo_loss(net, &mut g, &net.store, &mb, cfg);
                let ratios = g.value(terms.ratio);
                diag.mean_ratio += ratios.sum();
                clipped += ratios.data().iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64;
                samples += idx.len() as f64;
                diag.entropy += g.scalar(terms.entropy);
                diag.policy_loss += g.scalar(terms.policy_loss);
                diag.value_loss += g.scalar(terms.value_loss);
                count += 1.0;
                let back = g.backward(terms.total);
                g.param_grads(&back, &net.store)
            };
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.max_grad_norm);
            }
            adam.step(&mut net.store, &grads);
        }
    }
    diag.mean_ratio /= samples;
    diag.clip_fraction = clipped / samples;
    diag.entropy /= count;
    diag.policy_loss /= count;
    diag.value_loss /= count;
    Ok(diag)
}
