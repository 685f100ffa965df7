//! Name-keyed factories so commands can pick strategies at runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::agent::PolicyNet;
use crate::geometry::TileGrid;
use crate::orchestrator::{BitratePolicy, HeuristicPolicy};
use crate::simenv::{BandwidthTrace, BitrateLadder, VideoManifest};
use crate::traces::{BandwidthProfile, PatternFamily, ViewportTrace};
use crate::vp::{LastValue, LinearExtrapolation, MtioTransformer, TransformerPredictor, ViewportPredictor};
use crate::Error;

#[derive(Clone, Debug, Default)]
pub struct PolicyArgs {
    /// Agent checkpoint file, or a training directory holding `agent.json`.
    pub checkpoint: Option<PathBuf>,
    pub scale: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PredictorArgs {
    pub checkpoint: Option<PathBuf>,
}

/// Inputs shared by all generators; `options` overrides per-generator
/// parameters by name.
#[derive(Clone, Debug)]
pub struct GenArgs {
    pub seed: u64,
    pub duration: f64,
    pub grid: TileGrid,
    pub ladder: BitrateLadder,
    pub users: usize,
    pub rate_hz: f64,
    pub interval: f64,
    pub chunk_duration: f64,
    pub options: BTreeMap<String, f64>,
}

impl Default for GenArgs {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            grid: TileGrid::default(),
            ladder: BitrateLadder::default(),
            users: 10,
            rate_hz: 5.0,
            interval: 1.0,
            chunk_duration: 1.0,
            options: BTreeMap::new(),
        }
    }
}

impl GenArgs {
    fn opt(&self, key: &str, default: f64) -> f64 {
        self.options.get(key).copied().unwrap_or(default)
    }
}

#[derive(Clone, Debug)]
pub enum Generated {
    Viewport(Vec<ViewportTrace>),
    Bandwidth(BandwidthTrace),
    Manifest(VideoManifest),
}

pub trait TraceGenerator: Send + Sync {
    fn name(&self) -> &str;
    /// `viewport`, `bandwidth` or `manifest`.
    fn kind(&self) -> &str;
    fn generate(&self, args: &GenArgs) -> Result<Generated, Error>;
}

struct ViewportGen {
    name: &'static str,
    build: fn(&GenArgs) -> PatternFamily,
}

impl TraceGenerator for ViewportGen {
    fn name(&self) -> &str {
        self.name
    }

    fn kind(&self) -> &str {
        "viewport"
    }

    fn generate(&self, args: &GenArgs) -> Result<Generated, Error> {
        let fam = (self.build)(args);
        Ok(Generated::Viewport(fam.generate(args.users, args.duration, args.rate_hz, args.seed, &args.grid)))
    }
}

struct BandwidthGen {
    name: &'static str,
    build: fn(&GenArgs) -> BandwidthProfile,
}

impl TraceGenerator for BandwidthGen {
    fn name(&self) -> &str {
        self.name
    }

    fn kind(&self) -> &str {
        "bandwidth"
    }

    fn generate(&self, args: &GenArgs) -> Result<Generated, Error> {
        Ok(Generated::Bandwidth((self.build)(args).generate(args.duration, args.interval, args.seed)?))
    }
}

struct ManifestGen;

impl TraceGenerator for ManifestGen {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn kind(&self) -> &str {
        "manifest"
    }

    fn generate(&self, args: &GenArgs) -> Result<Generated, Error> {
        let chunks = (args.duration / args.chunk_duration).round().max(1.0) as usize;
        Ok(Generated::Manifest(VideoManifest::synthetic(
            args.grid,
            args.ladder.clone(),
            chunks,
            args.chunk_duration,
            args.seed,
        )?))
    }
}

pub type PolicyFactory = fn(&PolicyArgs) -> Result<Box<dyn BitratePolicy>, Error>;
pub type PredictorFactory = fn(&PredictorArgs) -> Result<Arc<dyn ViewportPredictor>, Error>;

pub struct Registry {
    policies: BTreeMap<String, PolicyFactory>,
    predictors: BTreeMap<String, PredictorFactory>,
    generators: BTreeMap<String, Box<dyn TraceGenerator>>,
}

fn unknown<V>(kind: &'static str, name: &str, map: &BTreeMap<String, V>) -> Error {
    Error::UnknownName {
        kind,
        name: name.to_string(),
        known: map.keys().cloned().collect::<Vec<_>>().join(", "),
    }
}

fn agent_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("agent.json")
    } else {
        path.to_path_buf()
    }
}

fn need_checkpoint(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, Error> {
    p.clone()
        .ok_or_else(|| Error::Config(format!("{what} needs a checkpoint")))
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            policies: BTreeMap::new(),
            predictors: BTreeMap::new(),
            generators: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_policy("agent", |a| {
            let path = agent_path(&need_checkpoint(&a.checkpoint, "agent policy")?);
            Ok(Box::new(PolicyNet::load(&path)?))
        });
        r.register_policy("heuristic", |a| {
            Ok(Box::new(HeuristicPolicy {
                scale: if a.scale > 0.0 { a.scale } else { 2.0 },
            }))
        });
        r.register_predictor("transformer", |a| {
            let model = MtioTransformer::load(&need_checkpoint(&a.checkpoint, "transformer predictor")?)?;
            Ok(Arc::new(TransformerPredictor { model: Arc::new(model) }))
        });
        r.register_predictor("last", |_| Ok(Arc::new(LastValue)));
        r.register_predictor("linear", |_| Ok(Arc::new(LinearExtrapolation::default())));

        r.register_generator(Box::new(ViewportGen {
            name: "focus",
            build: |a| PatternFamily::Focus {
                reversion: a.opt("reversion", 0.3),
                noise: a.opt("noise", 0.01),
            },
        }));
        r.register_generator(Box::new(ViewportGen {
            name: "explore",
            build: |a| PatternFamily::Explore {
                drift: a.opt("drift", 0.03),
                dwell_prob: a.opt("dwell_prob", 0.1),
                dwell_steps: a.opt("dwell_steps", 5.0) as usize,
                noise: a.opt("noise", 0.005),
            },
        }));
        r.register_generator(Box::new(BandwidthGen {
            name: "stable",
            build: |a| BandwidthProfile::Stable { mbps: a.opt("mbps", 10.0) },
        }));
        r.register_generator(Box::new(BandwidthGen {
            name: "stepwise",
            build: |a| BandwidthProfile::Stepwise {
                low: a.opt("low", 4.0),
                high: a.opt("high", 8.0),
                period: a.opt("period", 2.0),
            },
        }));
        r.register_generator(Box::new(BandwidthGen {
            name: "bursty",
            build: |a| BandwidthProfile::Bursty {
                mean: a.opt("mean", 10.0),
                sigma: a.opt("sigma", 0.5),
            },
        }));
        r.register_generator(Box::new(ManifestGen));
        r
    }

    pub fn register_policy(&mut self, name: &str, f: PolicyFactory) {
        self.policies.insert(name.to_string(), f);
    }

    pub fn register_predictor(&mut self, name: &str, f: PredictorFactory) {
        self.predictors.insert(name.to_string(), f);
    }

    pub fn register_generator(&mut self, g: Box<dyn TraceGenerator>) {
        self.generators.insert(g.name().to_string(), g);
    }

    pub fn policy(&self, name: &str, args: &PolicyArgs) -> Result<Box<dyn BitratePolicy>, Error> {
        let f = self.policies.get(name).ok_or_else(|| unknown("policy", name, &self.policies))?;
        f(args)
    }

    pub fn predictor(&self, name: &str, args: &PredictorArgs) -> Result<Arc<dyn ViewportPredictor>, Error> {
        let f = self
            .predictors
            .get(name)
            .ok_or_else(|| unknown("predictor", name, &self.predictors))?;
        f(args)
    }

    pub fn generator(&self, name: &str) -> Result<&dyn TraceGenerator, Error> {
        self.generators
            .get(name)
            .map(|g| g.as_ref())
            .ok_or_else(|| unknown("generator", name, &self.generators))
    }

    pub fn policy_names(&self) -> Vec<&str> {
        self.policies.keys().map(String::as_str).collect()
    }

    pub fn predictor_names(&self) -> Vec<&str> {
        self.predictors.keys().map(String::as_str).collect()
    }

    pub fn generator_names(&self) -> Vec<&str> {
        self.generators.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve_and_unknown_names_list_alternatives() {
        let r = Registry::builtin();
        assert_eq!(r.predictor("last", &PredictorArgs::default()).unwrap().name(), "last");
        assert_eq!(r.policy("heuristic", &PolicyArgs::default()).unwrap().name(), "heuristic");
        assert!(r.predictor("transformer", &PredictorArgs::default()).is_err());
        let err = r.policy("oracle", &PolicyArgs::default()).err().unwrap().to_string();
        assert!(err.contains("agent, heuristic"), "{err}");
        assert_eq!(r.generator("stepwise").unwrap().kind(), "bandwidth");
        assert_eq!(r.generator_names(), ["bursty", "explore", "focus", "stable", "stepwise", "synthetic"]);
    }

    #[test]
    fn generator_options_override_defaults() {
        let r = Registry::builtin();
        let mut args = GenArgs {
            duration: 4.0,
            ..GenArgs::default()
        };
        args.options.insert("mbps".into(), 3.0);
        match r.generator("stable").unwrap().generate(&args).unwrap() {
            Generated::Bandwidth(t) => assert!(t.mbps.iter().all(|v| *v == 3.0)),
            other => panic!("{other:?}"),
        }
    }
}
