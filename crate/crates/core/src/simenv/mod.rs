//! Chunk-level streaming simulator.
//!
//! Chunks are downloaded one after another. The buffer drains while a chunk
//! downloads, gains one chunk duration when it lands, and downloads pause
//! while the buffer sits above its cap.

mod heuristic;
mod ladder;
mod media;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use heuristic::{harmonic_mean_estimate, heuristic_policy};
pub use ladder::{action_space, pyramid_assign, BitrateAction, BitrateLadder};
pub use media::{download_time, BandwidthTrace, VideoManifest};

use crate::geometry::{iou, viewport_tile_mask, FieldOfView, TileGrid, TileMask, ViewportPoint};
use crate::qoe::{self, ChunkQoEBreakdown, QoEPreference};
use crate::Error;

/// Normalizer for throughput observations, in Mbps.
pub const THROUGHPUT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub buffer_cap: f64,
    pub scale: f64,
    pub history: usize,
    /// `q1` of the chunk before the first one.
    pub initial_q1: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            buffer_cap: 4.0,
            scale: 2.0,
            history: 8,
            initial_q1: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.buffer_cap > 0.0) {
            return Err(Error::Config(format!("buffer_cap must be positive, got {}", self.buffer_cap)));
        }
        if !(self.scale >= 1.0) {
            return Err(Error::Config(format!("scale must be at least 1, got {}", self.scale)));
        }
        if self.history == 0 {
            return Err(Error::Config("history length must be positive".into()));
        }
        Ok(())
    }
}

/// Shape of one vector input: `length` taps of `channels` values each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorInput {
    pub channels: usize,
    pub length: usize,
}

impl VectorInput {
    pub fn size(&self) -> usize {
        self.channels * self.length
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub vectors: Vec<VectorInput>,
    pub scalars: usize,
}

/// Numeric observation. Each vector is stored tap-major
/// (`index = tap * channels + channel`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub vectors: Vec<Vec<f64>>,
    pub scalars: Vec<f64>,
}

impl StateFeatures {
    pub fn check(&self, layout: &ObsLayout) -> Result<(), Error> {
        if self.vectors.len() != layout.vectors.len() || self.scalars.len() != layout.scalars {
            return Err(Error::Shape(format!(
                "observation has {} vectors / {} scalars, layout wants {} / {}",
                self.vectors.len(),
                self.scalars.len(),
                layout.vectors.len(),
                layout.scalars
            )));
        }
        for (i, (v, shape)) in self.vectors.iter().zip(&layout.vectors).enumerate() {
            if v.len() != shape.size() {
                return Err(Error::Shape(format!(
                    "vector input {i} has {} values, expected {}",
                    v.len(),
                    shape.size()
                )));
            }
        }
        Ok(())
    }
}

/// What the agent sees before choosing the bitrates of the next chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub chunk: usize,
    /// Sizes (bits) of the next chunk, tile-major: `tile * rungs + rung`.
    pub tile_sizes: Vec<f64>,
    pub rungs: Vec<f64>,
    pub chunk_duration: f64,
    pub predicted: TileMask,
    pub accuracy: Vec<f64>,
    pub throughput: Vec<f64>,
    pub q1_hist: Vec<f64>,
    pub q2_hist: Vec<f64>,
    pub q3_hist: Vec<f64>,
    pub buffer: f64,
    pub buffer_cap: f64,
}

impl EnvState {
    pub fn layout(tiles: usize, rungs: usize, history: usize) -> ObsLayout {
        let hist = VectorInput {
            channels: 1,
            length: history,
        };
        ObsLayout {
            vectors: vec![
                VectorInput {
                    channels: rungs,
                    length: tiles,
                },
                VectorInput {
                    channels: rungs,
                    length: tiles,
                },
                VectorInput {
                    channels: 1,
                    length: tiles,
                },
                hist,
                hist,
                hist,
                hist,
                hist,
            ],
            scalars: 1,
        }
    }

    /// Normalized features: sizes against the nominal top-rung tile size,
    /// rung qualities and q1/q2 against the top rung, throughput against
    /// [`THROUGHPUT_SCALE`], q3 and the buffer against the buffer cap.
    pub fn features(&self) -> StateFeatures {
        let rungs = self.rungs.len();
        let tiles = self.predicted.bits().len();
        let max_rung = self.rungs[rungs - 1];
        let nominal = max_rung * 1e6 * self.chunk_duration / tiles as f64;
        let sizes = self.tile_sizes.iter().map(|b| b / nominal).collect();
        let mut qualities = Vec::with_capacity(tiles * rungs);
        for _ in 0..tiles {
            qualities.extend(self.rungs.iter().map(|r| r / max_rung));
        }
        let scaled = |v: &[f64], s: f64| v.iter().map(|x| x / s).collect::<Vec<_>>();
        StateFeatures {
            vectors: vec![
                sizes,
                qualities,
                self.predicted.as_f64(),
                self.accuracy.clone(),
                scaled(&self.throughput, THROUGHPUT_SCALE),
                scaled(&self.q1_hist, max_rung),
                scaled(&self.q2_hist, max_rung),
                scaled(&self.q3_hist, self.buffer_cap),
            ],
            scalars: vec![self.buffer / self.buffer_cap],
        }
    }
}

/// Timing of one chunk download on the session clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownloadEvent {
    pub chunk: usize,
    pub request_time: f64,
    pub finish_time: f64,
    /// Idle time after the download while the buffer was above its cap.
    pub wait_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub chunk: usize,
    pub r_in: f64,
    pub r_out: f64,
    pub l_c: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub qoe_total: f64,
    pub buffer: f64,
}

pub fn write_episode_log<W: Write>(records: &[EpisodeRecord], w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    if records.is_empty() {
        wtr.write_record(["chunk", "r_in", "r_out", "l_c", "q1", "q2", "q3", "qoe_total", "buffer"])?;
    }
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<episode log>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: ChunkQoEBreakdown,
    pub tile_rates: Vec<f64>,
    pub download_time: f64,
    pub accuracy: f64,
    pub throughput_mbps: f64,
    pub event: DownloadEvent,
    pub done: bool,
}

/// Stall time reconstructed from download events alone by replaying the
/// playback timeline: each chunk plays as soon as it has arrived and the
/// previous one has finished.
pub fn stall_time_from_events(events: &[DownloadEvent], chunk_duration: f64) -> f64 {
    let Some(first) = events.first() else {
        return 0.0;
    };
    let mut play_end = first.request_time;
    let mut stall = 0.0;
    for e in events {
        if e.finish_time > play_end {
            stall += e.finish_time - play_end;
            play_end = e.finish_time;
        }
        play_end += chunk_duration;
    }
    stall
}

#[derive(Clone, Debug)]
pub struct StreamingEnv {
    config: EnvConfig,
    manifest: VideoManifest,
    trace: BandwidthTrace,
    trace_offset: f64,
    chunk: usize,
    clock: f64,
    buffer: f64,
    q1_prev: f64,
    accuracy: Vec<f64>,
    throughput: Vec<f64>,
    q1_hist: Vec<f64>,
    q2_hist: Vec<f64>,
    q3_hist: Vec<f64>,
    events: Vec<DownloadEvent>,
    records: Vec<EpisodeRecord>,
}

fn push_history(h: &mut Vec<f64>, v: f64) {
    h.remove(0);
    h.push(v);
}

impl StreamingEnv {
    pub fn new(config: EnvConfig, manifest: VideoManifest, trace: BandwidthTrace) -> Result<Self, Error> {
        config.validate()?;
        let k = config.history;
        let q1 = config.initial_q1;
        Ok(Self {
            config,
            manifest,
            trace,
            trace_offset: 0.0,
            chunk: 0,
            clock: 0.0,
            buffer: 0.0,
            q1_prev: q1,
            accuracy: vec![0.0; k],
            throughput: vec![0.0; k],
            q1_hist: vec![0.0; k],
            q2_hist: vec![0.0; k],
            q3_hist: vec![0.0; k],
            events: Vec::new(),
            records: Vec::new(),
        })
    }

    /// Starts a fresh episode reading the bandwidth trace from `trace_offset`.
    pub fn reset(&mut self, trace_offset: f64) {
        let k = self.config.history;
        self.trace_offset = trace_offset;
        self.chunk = 0;
        self.clock = 0.0;
        self.buffer = 0.0;
        self.q1_prev = self.config.initial_q1;
        for h in [
            &mut self.accuracy,
            &mut self.throughput,
            &mut self.q1_hist,
            &mut self.q2_hist,
            &mut self.q3_hist,
        ] {
            *h = vec![0.0; k];
        }
        self.events.clear();
        self.records.clear();
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn manifest(&self) -> &VideoManifest {
        &self.manifest
    }

    pub fn trace(&self) -> &BandwidthTrace {
        &self.trace
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn buffer(&self) -> f64 {
        self.buffer
    }

    pub fn is_finished(&self) -> bool {
        self.chunk >= self.manifest.chunks()
    }

    pub fn events(&self) -> &[DownloadEvent] {
        &self.events
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn layout(&self) -> ObsLayout {
        EnvState::layout(
            self.manifest.grid.tile_count(),
            self.manifest.ladder.len(),
            self.config.history,
        )
    }

    /// Observation for the next chunk given its predicted viewport tiles.
    pub fn state(&self, predicted: &TileMask) -> Result<EnvState, Error> {
        if self.is_finished() {
            return Err(Error::SessionFinished);
        }
        let tiles = self.manifest.grid.tile_count();
        let mut tile_sizes = Vec::with_capacity(tiles * self.manifest.ladder.len());
        for t in 0..tiles {
            tile_sizes.extend_from_slice(self.manifest.tile_sizes(self.chunk, t));
        }
        Ok(EnvState {
            chunk: self.chunk,
            tile_sizes,
            rungs: self.manifest.ladder.rungs().to_vec(),
            chunk_duration: self.manifest.chunk_duration,
            predicted: predicted.clone(),
            accuracy: self.accuracy.clone(),
            throughput: self.throughput.clone(),
            q1_hist: self.q1_hist.clone(),
            q2_hist: self.q2_hist.clone(),
            q3_hist: self.q3_hist.clone(),
            buffer: self.buffer,
            buffer_cap: self.config.buffer_cap,
        })
    }

    pub fn step(
        &mut self,
        action: &BitrateAction,
        predicted: &TileMask,
        actual: &TileMask,
        pref: &QoEPreference,
    ) -> Result<StepOutcome, Error> {
        if self.is_finished() {
            return Err(Error::SessionFinished);
        }
        let ladder = &self.manifest.ladder;
        if ladder.index_of(action.r_in).is_none()
            || ladder.index_of(action.r_out).is_none()
            || action.r_in < action.r_out
        {
            return Err(Error::InvalidInput(format!("action {action:?} is not in the action space")));
        }
        let rates = pyramid_assign(action, predicted, ladder, self.config.scale)?;
        let bits = self.manifest.chunk_bits(self.chunk, &rates)?;
        let request = self.clock;
        let l = self.trace.transfer_time(bits, request + self.trace_offset);
        let q3 = qoe::rebuffer_time(l, self.buffer);
        let q1 = qoe::viewport_quality(&rates, actual)?;
        let q2 = qoe::quality_variation(&rates, actual, q1, self.q1_prev)?;
        let breakdown = ChunkQoEBreakdown::new(q1, q2, q3, pref);
        let accuracy = iou(predicted, actual)?;
        let throughput = bits / l / 1e6;

        let mut buffer = (self.buffer - l).max(0.0) + self.manifest.chunk_duration;
        let wait = (buffer - self.config.buffer_cap).max(0.0);
        buffer -= wait;
        let event = DownloadEvent {
            chunk: self.chunk,
            request_time: request,
            finish_time: request + l,
            wait_time: wait,
        };
        self.clock = request + l + wait;
        self.buffer = buffer;
        self.q1_prev = q1;
        push_history(&mut self.accuracy, accuracy);
        push_history(&mut self.throughput, throughput);
        push_history(&mut self.q1_hist, q1);
        push_history(&mut self.q2_hist, q2);
        push_history(&mut self.q3_hist, q3);
        self.events.push(event);
        self.records.push(EpisodeRecord {
            chunk: self.chunk,
            r_in: action.r_in,
            r_out: action.r_out,
            l_c: l,
            q1,
            q2,
            q3,
            qoe_total: breakdown.total,
            buffer,
        });
        self.chunk += 1;
        Ok(StepOutcome {
            breakdown,
            tile_rates: rates,
            download_time: l,
            accuracy,
            throughput_mbps: throughput,
            event,
            done: self.is_finished(),
        })
    }
}

/// Union of the viewport masks of several centres.
pub fn union_mask(points: &[ViewportPoint], fov: &FieldOfView, grid: &TileGrid) -> Result<TileMask, Error> {
    let mut mask = TileMask::empty(*grid);
    for p in points {
        mask.union_with(&viewport_tile_mask(p, fov, grid))?;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TileGrid;

    fn small_env(trace: BandwidthTrace, chunks: usize) -> StreamingEnv {
        let manifest =
            VideoManifest::synthetic(TileGrid::default(), BitrateLadder::default(), chunks, 1.0, 4).unwrap();
        StreamingEnv::new(EnvConfig::default(), manifest, trace).unwrap()
    }

    fn centre_mask() -> TileMask {
        let g = TileGrid::default();
        viewport_tile_mask(&ViewportPoint::new(1920.0, 960.0), &FieldOfView::default(), &g)
    }

    #[test]
    fn unlimited_bandwidth_fills_buffer_to_cap_without_stalls() {
        let mut env = small_env(BandwidthTrace::constant(1e9).unwrap(), 8);
        let pref = QoEPreference::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let m = centre_mask();
        let a = BitrateAction { r_in: 35.0, r_out: 35.0 };
        let mut buffers = Vec::new();
        while !env.is_finished() {
            let out = env.step(&a, &m, &m, &pref).unwrap();
            assert!(out.breakdown.q3 < 1e-6);
            buffers.push(env.buffer());
        }
        assert!(buffers[0] > 0.99 && buffers[0] <= 1.0);
        assert!((buffers[7] - 4.0).abs() < 1e-12);
        assert!(matches!(env.step(&a, &m, &m, &pref), Err(Error::SessionFinished)));
    }

    #[test]
    fn stall_and_buffer_update_by_hand() {
        // Single tile, one rung: chunk of 2 Mbit over 1 Mbps takes 2 s.
        let grid = TileGrid::new(1, 1, 100.0, 100.0).unwrap();
        let ladder = BitrateLadder::new(vec![2.0]).unwrap();
        let manifest = VideoManifest::new(1.0, grid, ladder, 3, vec![0.5e6, 2e6, 2e6]).unwrap();
        let mut env =
            StreamingEnv::new(EnvConfig::default(), manifest, BandwidthTrace::constant(1.0).unwrap()).unwrap();
        let m = TileMask::full(grid);
        let pref = QoEPreference::new(0.0, 0.0, 1.0).unwrap();
        let a = BitrateAction { r_in: 2.0, r_out: 2.0 };
        let first = env.step(&a, &m, &m, &pref).unwrap();
        assert!((first.breakdown.q3 - 0.5).abs() < 1e-12);
        // Buffer is 1 s; a 2 s download now leaves 1 s of stall, then b' = 1.
        let second = env.step(&a, &m, &m, &pref).unwrap();
        assert!((second.download_time - 2.0).abs() < 1e-12);
        assert!((second.breakdown.q3 - 1.0).abs() < 1e-12);
        assert!((env.buffer() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histories_shift_and_keep_length() {
        let mut env = small_env(BandwidthTrace::new(1.0, vec![20.0, 6.0, 40.0]).unwrap(), 12);
        let pref = QoEPreference::new(0.5, 0.25, 0.25).unwrap();
        let m = centre_mask();
        let mut throughputs = Vec::new();
        for c in 0..10 {
            let a = action_space(&BitrateLadder::default())[c % 15];
            let out = env.step(&a, &m, &m, &pref).unwrap();
            throughputs.push(out.throughput_mbps);
            let s = env.state(&m).unwrap();
            for h in [&s.accuracy, &s.throughput, &s.q1_hist, &s.q2_hist, &s.q3_hist] {
                assert_eq!(h.len(), 8);
            }
            assert_eq!(*s.throughput.last().unwrap(), out.throughput_mbps);
            if c < 7 {
                assert_eq!(s.throughput[0], 0.0);
            }
        }
        let s = env.state(&m).unwrap();
        assert_eq!(s.throughput, throughputs[2..].to_vec());
        assert!(s.accuracy.iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn features_match_layout() {
        let env = small_env(BandwidthTrace::constant(10.0).unwrap(), 3);
        let s = env.state(&centre_mask()).unwrap();
        let f = s.features();
        f.check(&env.layout()).unwrap();
        assert_eq!(f.vectors[0].len(), 64 * 5);
        assert_eq!(f.scalars, vec![0.0]);
        assert!((f.vectors[1][4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn action_outside_space_is_rejected() {
        let mut env = small_env(BandwidthTrace::constant(10.0).unwrap(), 3);
        let pref = QoEPreference::new(1.0, 0.0, 0.0).unwrap();
        let m = centre_mask();
        let bad = BitrateAction { r_in: 5.0, r_out: 8.0 };
        assert!(env.step(&bad, &m, &m, &pref).is_err());
        let off = BitrateAction { r_in: 6.0, r_out: 1.0 };
        assert!(env.step(&off, &m, &m, &pref).is_err());
    }

    #[test]
    fn episode_log_has_expected_header() {
        let mut buf = Vec::new();
        write_episode_log(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "chunk,r_in,r_out,l_c,q1,q2,q3,qoe_total,buffer");
    }
}
