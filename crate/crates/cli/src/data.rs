//! Loading trace files and assembling simulator sessions.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tilestream_core::config::RunConfig;
use tilestream_core::geometry::TileGrid;
use tilestream_core::orchestrator::{Environment, StreamingSession};
use tilestream_core::registry::{PredictorArgs, Registry};
use tilestream_core::simenv::{BandwidthTrace, StreamingEnv, VideoManifest};
use tilestream_core::traces::{csv_files, read_viewport_csv, ViewportTrace};
use tilestream_core::vp::ViewportPredictor;

/// A single CSV file, or every CSV in a directory (sorted by name).
pub fn csv_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    let files = if path.is_dir() {
        csv_files(path)?
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        bail!("{} does not exist", path.display());
    };
    if files.is_empty() {
        bail!("no CSV files in {}", path.display());
    }
    Ok(files)
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(std::io::BufReader::new(f))
}

/// Viewport traces grouped by file stem, in file order.
pub fn load_viewports(path: &Path, grid: &TileGrid) -> Result<Vec<(String, Vec<ViewportTrace>)>> {
    csv_inputs(path)?
        .into_iter()
        .map(|p| {
            let family = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let traces = read_viewport_csv(open(&p)?, grid).with_context(|| format!("reading {}", p.display()))?;
            Ok((family, traces))
        })
        .collect()
}

/// Everything needed to rebuild the training environments, stored next to
/// the checkpoint so evaluation can find its inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AbrInputs {
    pub config: RunConfig,
    pub manifests: PathBuf,
    pub bandwidth: PathBuf,
    pub viewports: PathBuf,
    pub vp_ckpt: Option<PathBuf>,
}

impl AbrInputs {
    pub const FILE: &'static str = "inputs.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        Ok(serde_json::from_reader(open(&path)?).with_context(|| format!("parsing {}", path.display()))?)
    }

    fn predictor(&self, registry: &Registry) -> Result<Arc<dyn ViewportPredictor>> {
        let name = self.config.predictor.as_str();
        if name == "transformer" && self.vp_ckpt.is_none() {
            bail!("the transformer predictor needs --vp-ckpt (or set predictor = \"linear\" or \"last\")");
        }
        Ok(registry.predictor(
            name,
            &PredictorArgs {
                checkpoint: self.vp_ckpt.clone(),
            },
        )?)
    }

    /// One session per manifest or bandwidth file, whichever is more
    /// numerous; the shorter lists and the viewport traces are cycled.
    pub fn environments(&self, registry: &Registry) -> Result<Vec<Box<dyn Environment>>> {
        let cfg = &self.config;
        let grid = cfg.grid()?;
        let ladder = cfg.ladder()?;
        let fov = cfg.fov()?;
        let manifests: Vec<VideoManifest> = csv_inputs(&self.manifests)?
            .iter()
            .map(|p| {
                VideoManifest::read_csv(open(p)?, grid, ladder.clone(), cfg.chunk_duration)
                    .with_context(|| format!("reading {}", p.display()))
            })
            .collect::<Result<_>>()?;
        let traces: Vec<BandwidthTrace> = csv_inputs(&self.bandwidth)?
            .iter()
            .map(|p| BandwidthTrace::read_csv(open(p)?).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<_>>()?;
        let viewports: Vec<ViewportTrace> = load_viewports(&self.viewports, &grid)?
            .into_iter()
            .flat_map(|(_, v)| v)
            .collect();
        if viewports.is_empty() {
            bail!("no viewport traces in {}", self.viewports.display());
        }
        let predictor = self.predictor(registry)?;
        let n = manifests.len().max(traces.len());
        (0..n)
            .map(|i| {
                let env = StreamingEnv::new(
                    cfg.env_config(),
                    manifests[i % manifests.len()].clone(),
                    traces[i % traces.len()].clone(),
                )?;
                let session = StreamingSession::new(env, &viewports[i % viewports.len()], predictor.as_ref(), &fov)?;
                Ok(Box::new(session) as Box<dyn Environment>)
            })
            .collect()
    }
}

pub fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}
