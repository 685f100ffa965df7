//! Alternating identifier/agent training and evaluation campaigns.
//!
//! Each iteration draws a batch of preferences, rolls out one episode per
//! preference with the preference held fixed, fits the identifier to the
//! fresh transitions, scores them with the updated identifier and then
//! takes a PPO step on the combined reward.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tilestream_nn::Adam;

use crate::agent::{gae, ppo_update, AgentConfig, AgentObservation, PolicyNet, PpoConfig, PpoDiagnostics, RolloutBatch};
use crate::geometry::{FieldOfView, TileMask, ViewportPoint};
use crate::identifier::{
    combined_reward, mi_reward_term, update_identifier, IdentifierBatch, IdentifierConfig, IdentifierOptimizer,
    PreferenceRegressor, QoEIdentifier,
};
use crate::qoe::QoEPreference;
use crate::simenv::{
    action_space, harmonic_mean_estimate, heuristic_policy, union_mask, BitrateAction, EnvState, ObsLayout,
    EpisodeRecord, StateFeatures, StreamingEnv, VectorInput,
};
use crate::traces::ViewportTrace;
use crate::vp::ViewportPredictor;
use crate::Error;

/// What a policy sees before choosing an action.
#[derive(Clone, Debug)]
pub struct Observation {
    pub features: StateFeatures,
    /// Raw simulator state, when the environment has one.
    pub state: Option<EnvState>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvStep {
    pub qoe: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub r_in: f64,
    pub r_out: f64,
    pub done: bool,
}

/// An episodic environment with a discrete action space.
pub trait Environment: Send {
    fn name(&self) -> String;
    fn layout(&self) -> ObsLayout;
    fn action_count(&self) -> usize;
    /// Divisor applied to QoE before it is mixed with the identifier term.
    fn reward_scale(&self) -> f64;
    /// Starts episode number `episode`; equal numbers give equal episodes.
    fn reset(&mut self, episode: u64);
    fn observe(&self) -> Result<Observation, Error>;
    fn step(&mut self, action: usize, pref: &QoEPreference) -> Result<EnvStep, Error>;
    /// Per-chunk record of the most recent step, for simulators that keep one.
    fn last_record(&self) -> Option<EpisodeRecord> {
        None
    }
}

/// The simulator driven by a viewport trace and a viewport predictor.
/// Predicted and actual masks depend only on the trace, so they are
/// computed once up front.
pub struct StreamingSession {
    label: String,
    env: StreamingEnv,
    actions: Vec<BitrateAction>,
    predicted: Vec<TileMask>,
    actual: Vec<TileMask>,
}

impl StreamingSession {
    pub fn new(
        env: StreamingEnv,
        viewport: &ViewportTrace,
        predictor: &dyn ViewportPredictor,
        fov: &FieldOfView,
    ) -> Result<Self, Error> {
        if viewport.points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let grid = env.manifest().grid;
        let per_chunk = ((env.manifest().chunk_duration / viewport.interval).round() as usize).max(1);
        let h = predictor.history_len();
        let pts = &viewport.points;
        let at = |i: usize| pts[i % pts.len()];
        let mut predicted = Vec::new();
        let mut actual = Vec::new();
        for c in 0..env.manifest().chunks() {
            let start = c * per_chunk;
            let now: Vec<ViewportPoint> = (start..start + per_chunk).map(at).collect();
            let history: Vec<ViewportPoint> =
                (0..h).map(|j| if start + j >= h { at(start + j - h) } else { at(0) }).collect();
            let guess = predictor.predict(&history, per_chunk, &grid)?;
            predicted.push(union_mask(&guess, fov, &grid)?);
            actual.push(union_mask(&now, fov, &grid)?);
        }
        let actions = action_space(&env.manifest().ladder);
        Ok(Self {
            label: format!("{}/{}", viewport.video_id, viewport.user_id),
            env,
            actions,
            predicted,
            actual,
        })
    }

    pub fn env(&self) -> &StreamingEnv {
        &self.env
    }

    pub fn actions(&self) -> &[BitrateAction] {
        &self.actions
    }
}

impl Environment for StreamingSession {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn layout(&self) -> ObsLayout {
        self.env.layout()
    }

    fn action_count(&self) -> usize {
        self.actions.len()
    }

    fn reward_scale(&self) -> f64 {
        self.env.manifest().ladder.max()
    }

    fn reset(&mut self, episode: u64) {
        let trace = self.env.trace();
        let slots = trace.mbps.len() as u64;
        let slot = episode.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32;
        let offset = (slot % slots) as f64 * trace.interval;
        self.env.reset(offset);
    }

    fn observe(&self) -> Result<Observation, Error> {
        let state = self.env.state(&self.predicted[self.env.chunk().min(self.predicted.len() - 1)])?;
        Ok(Observation {
            features: state.features(),
            state: Some(state),
        })
    }

    fn step(&mut self, action: usize, pref: &QoEPreference) -> Result<EnvStep, Error> {
        let a = *self
            .actions
            .get(action)
            .ok_or_else(|| Error::InvalidInput(format!("action index {action} out of range")))?;
        let c = self.env.chunk();
        if c >= self.predicted.len() {
            return Err(Error::SessionFinished);
        }
        let out = self.env.step(&a, &self.predicted[c], &self.actual[c], pref)?;
        Ok(EnvStep {
            qoe: out.breakdown.total,
            q1: out.breakdown.q1,
            q2: out.breakdown.q2,
            q3: out.breakdown.q3,
            r_in: a.r_in,
            r_out: a.r_out,
            done: out.done,
        })
    }

    fn last_record(&self) -> Option<EpisodeRecord> {
        self.env.records().last().cloned()
    }
}

/// A stateless bandit whose arms carry fixed `(q1, q2, q3)` outcomes, so
/// the best arm for any preference is known in closed form.
#[derive(Clone, Debug)]
pub struct PreferenceBandit {
    pub arms: Vec<[f64; 3]>,
    pub steps: usize,
    t: usize,
}

impl PreferenceBandit {
    pub fn new(arms: Vec<[f64; 3]>, steps: usize) -> Self {
        Self { arms, steps, t: 0 }
    }

    pub fn payoff(&self, arm: usize, pref: &QoEPreference) -> f64 {
        let [q1, q2, q3] = self.arms[arm];
        crate::qoe::chunk_qoe(q1, q2, q3, pref)
    }

    pub fn best_arm(&self, pref: &QoEPreference) -> usize {
        (0..self.arms.len())
            .max_by(|&a, &b| self.payoff(a, pref).total_cmp(&self.payoff(b, pref)))
            .unwrap_or(0)
    }
}

impl Environment for PreferenceBandit {
    fn name(&self) -> String {
        "bandit".into()
    }

    fn layout(&self) -> ObsLayout {
        ObsLayout {
            vectors: vec![VectorInput { channels: 1, length: 1 }],
            scalars: 1,
        }
    }

    fn action_count(&self) -> usize {
        self.arms.len()
    }

    fn reward_scale(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, _episode: u64) {
        self.t = 0;
    }

    fn observe(&self) -> Result<Observation, Error> {
        Ok(Observation {
            features: StateFeatures {
                vectors: vec![vec![1.0]],
                scalars: vec![1.0],
            },
            state: None,
        })
    }

    fn step(&mut self, action: usize, pref: &QoEPreference) -> Result<EnvStep, Error> {
        if action >= self.arms.len() {
            return Err(Error::InvalidInput(format!("arm {action} out of range")));
        }
        if self.t >= self.steps {
            return Err(Error::SessionFinished);
        }
        self.t += 1;
        let [q1, q2, q3] = self.arms[action];
        Ok(EnvStep {
            qoe: self.payoff(action, pref),
            q1,
            q2,
            q3,
            r_in: action as f64,
            r_out: action as f64,
            done: self.t == self.steps,
        })
    }
}

/// Deterministic action selection shared by every evaluated policy.
pub trait BitratePolicy: Send + Sync {
    fn name(&self) -> &str;
    fn act(&self, obs: &Observation, pref: &QoEPreference) -> Result<usize, Error>;
}

impl BitratePolicy for PolicyNet {
    fn name(&self) -> &str {
        "agent"
    }

    fn act(&self, obs: &Observation, pref: &QoEPreference) -> Result<usize, Error> {
        let o = AgentObservation {
            state: obs.features.clone(),
            pref: *pref,
        };
        Ok(self.policy(&o)?.greedy())
    }
}

/// Throughput-rule baseline: ignores the preference.
#[derive(Clone, Debug)]
pub struct HeuristicPolicy {
    pub scale: f64,
}

impl BitratePolicy for HeuristicPolicy {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn act(&self, obs: &Observation, _pref: &QoEPreference) -> Result<usize, Error> {
        let state = obs
            .state
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("heuristic policy needs simulator state".into()))?;
        let Some(estimate) = harmonic_mean_estimate(&state.throughput) else {
            return Ok(0);
        };
        let a = heuristic_policy(state, self.scale, estimate)?;
        let ladder = crate::simenv::BitrateLadder::new(state.rungs.clone())?;
        Ok(action_space(&ladder).iter().position(|x| *x == a).unwrap_or(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub prefs_per_iteration: usize,
    pub alpha: f64,
    pub identifier_lr: f64,
    /// Full-batch identifier steps per iteration.
    pub identifier_steps: usize,
    pub freeze_identifier: bool,
    pub agent: AgentConfig,
    pub identifier: IdentifierConfig,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            prefs_per_iteration: 4,
            alpha: 0.5,
            identifier_lr: 1e-4,
            identifier_steps: 1,
            freeze_identifier: false,
            agent: AgentConfig::default(),
            identifier: IdentifierConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.prefs_per_iteration == 0 {
            return Err(Error::Config("prefs_per_iteration must be positive".into()));
        }
        if self.ppo.minibatch < 2 || self.ppo.epochs == 0 {
            return Err(Error::Config("PPO needs minibatch ≥ 2 and at least one epoch".into()));
        }
        self.agent.validate()
    }

    /// The same loop with the identifier's reward term switched off.
    pub fn ablated(&self) -> Self {
        Self {
            alpha: 0.0,
            freeze_identifier: true,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub alpha: f64,
    pub episodes: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub mean_qoe: f64,
    pub identifier_mse: f64,
    pub mi_term_mean: f64,
    /// Mean per-step QoE for each pool entry; NaN if it was not drawn.
    pub pref_qoe: Vec<f64>,
    pub ppo: PpoDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct OptimState {
    iteration: usize,
    agent: Adam,
    identifier: IdentifierOptimizer,
    log: Vec<IterationLog>,
}

/// Learner state; everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub agent: PolicyNet,
    pub identifier: QoEIdentifier,
    agent_opt: Adam,
    id_opt: IdentifierOptimizer,
    pub log: Vec<IterationLog>,
}

struct Step {
    obs: AgentObservation,
    action: usize,
    log_prob: f64,
    value: f64,
    qoe: f64,
    done: bool,
    pref_slot: usize,
}

impl TrainingRun {
    pub fn new(config: TrainConfig, layout: ObsLayout, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let agent = PolicyNet::new(config.agent.clone(), layout.clone(), seed)?;
        let identifier = QoEIdentifier::new(config.identifier.clone(), layout, seed)?;
        let agent_opt = Adam::new(config.ppo.learning_rate, &agent.store);
        let id_opt = IdentifierOptimizer::Adam(Adam::new(config.identifier_lr, &identifier.store));
        Ok(Self {
            config,
            seed,
            agent,
            identifier,
            agent_opt,
            id_opt,
            log: Vec::new(),
        })
    }

    pub fn iterations_done(&self) -> usize {
        self.log.len()
    }

    fn check(&self, pool: &[QoEPreference], envs: &[Box<dyn Environment>]) -> Result<(), Error> {
        if pool.is_empty() {
            return Err(Error::Config("preference pool is empty".into()));
        }
        if envs.is_empty() {
            return Err(Error::Config("no training environments".into()));
        }
        for e in envs {
            if e.layout() != self.agent.layout {
                return Err(Error::Config(format!("environment {} has a different observation layout", e.name())));
            }
            if e.action_count() != self.agent.config.actions {
                return Err(Error::Config(format!(
                    "environment {} has {} actions, agent expects {}",
                    e.name(),
                    e.action_count(),
                    self.agent.config.actions
                )));
            }
        }
        Ok(())
    }

    /// Runs iterations until `total` have completed.
    pub fn train_until(
        &mut self,
        total: usize,
        pool: &[QoEPreference],
        envs: &mut [Box<dyn Environment>],
    ) -> Result<(), Error> {
        self.check(pool, envs)?;
        while self.log.len() < total {
            self.iteration(pool, envs)?;
        }
        Ok(())
    }

    fn iteration(&mut self, pool: &[QoEPreference], envs: &mut [Box<dyn Environment>]) -> Result<(), Error> {
        let iter = self.log.len();
        let cfg = self.config.clone();
        let mut rng = crate::rng_for(self.seed, 0x6974_0000 + iter as u64);

        // Preferences: shuffled passes over the pool.
        let mut slots = Vec::with_capacity(cfg.prefs_per_iteration);
        while slots.len() < cfg.prefs_per_iteration {
            let mut pass: Vec<usize> = (0..pool.len()).collect();
            pass.shuffle(&mut rng);
            slots.extend(pass);
        }
        slots.truncate(cfg.prefs_per_iteration);

        let mut steps: Vec<Step> = Vec::new();
        for (j, &slot) in slots.iter().enumerate() {
            let pref = pool[slot];
            let env = &mut envs[rng.random_range(0..envs.len())];
            env.reset((iter * cfg.prefs_per_iteration + j) as u64 ^ self.seed.rotate_left(17));
            loop {
                let obs = AgentObservation {
                    state: env.observe()?.features,
                    pref,
                };
                let (dists, values) = self.agent.evaluate(&[&obs])?;
                let action = dists[0].sample(&mut rng);
                let out = env.step(action, &pref)?;
                steps.push(Step {
                    log_prob: dists[0].probs[action].ln(),
                    value: values[0],
                    action,
                    qoe: out.qoe,
                    done: out.done,
                    pref_slot: slot,
                    obs,
                });
                if out.done {
                    break;
                }
            }
        }

        let obs_refs: Vec<&AgentObservation> = steps.iter().map(|s| &s.obs).collect();
        let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
        let id_batch = IdentifierBatch::new(&obs_refs, &actions, &self.agent.layout)?;
        if !cfg.freeze_identifier {
            for _ in 0..cfg.identifier_steps {
                update_identifier(&mut self.identifier, &mut self.id_opt, &id_batch)?;
            }
        }
        let estimates = self.identifier.estimate(&id_batch);
        let scale = envs[0].reward_scale();
        let mut mi_sum = 0.0;
        let mut mse_sum = 0.0;
        let rewards: Vec<f64> = steps
            .iter()
            .zip(&estimates)
            .map(|(s, est)| {
                let mi = mi_reward_term(&s.obs.pref, est);
                mi_sum += mi;
                mse_sum += crate::identifier::preference_mse(&s.obs.pref, est);
                combined_reward(s.qoe / scale, mi, cfg.alpha)
            })
            .collect();

        let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
        let (advantages, returns) = gae(&rewards, &values, &dones, cfg.ppo.discount, cfg.ppo.gae_lambda);
        let n = steps.len();
        let mut pref_sum = vec![0.0; pool.len()];
        let mut pref_n = vec![0usize; pool.len()];
        for s in &steps {
            pref_sum[s.pref_slot] += s.qoe;
            pref_n[s.pref_slot] += 1;
        }
        let mean_qoe = steps.iter().map(|s| s.qoe).sum::<f64>() / n as f64;
        let batch = RolloutBatch {
            actions,
            log_probs: steps.iter().map(|s| s.log_prob).collect(),
            advantages,
            returns,
            obs: steps.into_iter().map(|s| s.obs).collect(),
        };
        let ppo = ppo_update(&mut self.agent, &mut self.agent_opt, &batch, &cfg.ppo, &mut rng)?;
        self.log.push(IterationLog {
            iter,
            alpha: cfg.alpha,
            episodes: slots.len(),
            env_steps: n,
            mean_reward: rewards.iter().sum::<f64>() / n as f64,
            mean_qoe,
            identifier_mse: mse_sum / n as f64,
            mi_term_mean: mi_sum / n as f64,
            pref_qoe: pref_sum
                .iter()
                .zip(&pref_n)
                .map(|(s, &k)| if k == 0 { f64::NAN } else { s / k as f64 })
                .collect(),
            ppo,
        });
        Ok(())
    }

    /// Writes agent, identifier, optimiser state and logs into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.agent.save(&dir.join("agent.json"))?;
        self.identifier.save(&dir.join("identifier.json"))?;
        let meta = serde_json::json!({ "seed": self.seed, "config": self.config });
        write_json(&dir.join("run.json"), &meta)?;
        write_json(
            &dir.join("optim.json"),
            &OptimState {
                iteration: self.log.len(),
                agent: self.agent_opt.clone(),
                identifier: self.id_opt.clone(),
                log: self.log.clone(),
            },
        )?;
        let f = std::fs::File::create(dir.join("diagnostics.csv")).map_err(|e| Error::io(dir, e))?;
        write_diagnostics(&self.log, f)?;
        let f = std::fs::File::create(dir.join("training_log.csv")).map_err(|e| Error::io(dir, e))?;
        write_training_log(&self.log, f)
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        #[derive(Deserialize)]
        struct Meta {
            seed: u64,
            config: TrainConfig,
        }
        let meta: Meta = read_json(&dir.join("run.json"))?;
        let optim: OptimState = read_json(&dir.join("optim.json"))?;
        Ok(Self {
            config: meta.config,
            seed: meta.seed,
            agent: PolicyNet::load(&dir.join("agent.json"))?,
            identifier: QoEIdentifier::load(&dir.join("identifier.json"))?,
            agent_opt: optim.agent,
            id_opt: optim.identifier,
            log: optim.log,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(f), v)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// `iter,identifier_mse,mi_term_mean`
pub fn write_diagnostics<W: Write>(log: &[IterationLog], w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["iter", "identifier_mse", "mi_term_mean"])?;
    for l in log {
        wtr.write_record([l.iter.to_string(), l.identifier_mse.to_string(), l.mi_term_mean.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("diagnostics", e))?;
    Ok(())
}

/// One row per iteration with reward, QoE and PPO statistics.
pub fn write_training_log<W: Write>(log: &[IterationLog], w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    let prefs = log.first().map_or(0, |l| l.pref_qoe.len());
    let mut header: Vec<String> = [
        "iter",
        "alpha",
        "episodes",
        "env_steps",
        "mean_reward",
        "mean_qoe",
        "identifier_mse",
        "mi_term_mean",
        "mean_ratio",
        "clip_fraction",
        "entropy",
        "policy_loss",
        "value_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..prefs).map(|i| format!("qoe_pref{i}")));
    wtr.write_record(&header)?;
    for l in log {
        let mut row = vec![
            l.iter.to_string(),
            l.alpha.to_string(),
            l.episodes.to_string(),
            l.env_steps.to_string(),
            l.mean_reward.to_string(),
            l.mean_qoe.to_string(),
            l.identifier_mse.to_string(),
            l.mi_term_mean.to_string(),
            l.ppo.mean_ratio.to_string(),
            l.ppo.clip_fraction.to_string(),
            l.ppo.entropy.to_string(),
            l.ppo.policy_loss.to_string(),
            l.ppo.value_loss.to_string(),
        ];
        row.extend(l.pref_qoe.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("training log", e))?;
    Ok(())
}

pub fn run_training(
    config: TrainConfig,
    pool: &[QoEPreference],
    envs: &mut [Box<dyn Environment>],
    seed: u64,
) -> Result<TrainingRun, Error> {
    let layout = envs
        .first()
        .map(|e| e.layout())
        .ok_or_else(|| Error::Config("no training environments".into()))?;
    let iterations = config.iterations;
    let mut run = TrainingRun::new(config, layout, seed)?;
    run.train_until(iterations, pool, envs)?;
    Ok(run)
}

/// Training with `alpha = 0` and the identifier left at its initial weights.
pub fn run_ablation_no_repl(
    config: &TrainConfig,
    pool: &[QoEPreference],
    envs: &mut [Box<dyn Environment>],
    seed: u64,
) -> Result<TrainingRun, Error> {
    run_training(config.ablated(), pool, envs, seed)
}

/// One evaluated (preference, environment) episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub pref_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub env: String,
    pub chunks: usize,
    pub qoe_mean: f64,
    pub q1_mean: f64,
    pub q2_mean: f64,
    pub rebuffer_total: f64,
    pub r_in_mean: f64,
    /// Identifier MSE over the episode, when an identifier was supplied.
    pub identifier_mse: Option<f64>,
}

/// Greedy episodes for every preference on every environment.
pub fn run_evaluation(
    policy: &dyn BitratePolicy,
    prefs: &[QoEPreference],
    envs: &mut [Box<dyn Environment>],
    identifier: Option<&QoEIdentifier>,
    seed: u64,
) -> Result<Vec<EvalRow>, Error> {
    run_evaluation_logged(policy, prefs, envs, identifier, seed, &mut Vec::new())
}

/// [`run_evaluation`] that also appends the per-chunk records of every
/// episode, in row order, to `log`.
pub fn run_evaluation_logged(
    policy: &dyn BitratePolicy,
    prefs: &[QoEPreference],
    envs: &mut [Box<dyn Environment>],
    identifier: Option<&QoEIdentifier>,
    seed: u64,
    log: &mut Vec<EpisodeRecord>,
) -> Result<Vec<EvalRow>, Error> {
    let mut rows = Vec::with_capacity(prefs.len() * envs.len());
    for (pi, pref) in prefs.iter().enumerate() {
        for (ei, env) in envs.iter_mut().enumerate() {
            env.reset(seed ^ (ei as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let mut steps = Vec::new();
            let mut mse = 0.0;
            loop {
                let obs = env.observe()?;
                let a = policy.act(&obs, pref)?;
                if let Some(id) = identifier {
                    let o = AgentObservation {
                        state: obs.features,
                        pref: *pref,
                    };
                    mse += crate::identifier::preference_mse(pref, &id.identify(&o, a)?);
                }
                let out = env.step(a, pref)?;
                log.extend(env.last_record());
                steps.push(out);
                if out.done {
                    break;
                }
            }
            let n = steps.len() as f64;
            let mean = |f: fn(&EnvStep) -> f64| steps.iter().map(f).sum::<f64>() / n;
            rows.push(EvalRow {
                policy: policy.name().to_string(),
                pref_index: pi,
                lambda1: pref.lambda1,
                lambda2: pref.lambda2,
                lambda3: pref.lambda3,
                env: env.name(),
                chunks: steps.len(),
                qoe_mean: mean(|s| s.qoe),
                q1_mean: mean(|s| s.q1),
                q2_mean: mean(|s| s.q2),
                rebuffer_total: steps.iter().map(|s| s.q3).sum(),
                r_in_mean: mean(|s| s.r_in),
                identifier_mse: identifier.map(|_| mse / n),
            });
        }
    }
    Ok(rows)
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record(EVAL_HEADER)?;
    }
    wtr.flush().map_err(|e| Error::io("evaluation report", e))?;
    Ok(())
}

pub const EVAL_HEADER: [&str; 13] = [
    "policy",
    "pref_index",
    "lambda1",
    "lambda2",
    "lambda3",
    "env",
    "chunks",
    "qoe_mean",
    "q1_mean",
    "q2_mean",
    "rebuffer_total",
    "r_in_mean",
    "identifier_mse",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_best_arm_follows_preference() {
        let b = PreferenceBandit::new(vec![[1.0, 0.0, 1.0], [0.3, 0.0, 0.0]], 4);
        assert_eq!(b.best_arm(&QoEPreference::new(7.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0).unwrap()), 0);
        assert_eq!(b.best_arm(&QoEPreference::new(1.0 / 9.0, 1.0 / 9.0, 7.0 / 9.0).unwrap()), 1);
    }
}
