//! Synthetic viewport, bandwidth and manifest generation, and the CSV
//! formats they are stored in.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{TileGrid, ViewportPoint};
use crate::simenv::BandwidthTrace;
use crate::Error;

/// One user's head trajectory over one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportTrace {
    pub user_id: String,
    pub video_id: String,
    pub interval: f64,
    pub points: Vec<ViewportPoint>,
}

/// Viewing-pattern family with its generator parameters. All distances
/// are fractions of the frame size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PatternFamily {
    /// Mean-reverting jitter around a per-user fixed centre.
    Focus { reversion: f64, noise: f64 },
    /// Horizontal drift at a per-user speed with random pauses.
    Explore {
        drift: f64,
        dwell_prob: f64,
        dwell_steps: usize,
        noise: f64,
    },
}

impl PatternFamily {
    pub fn focus() -> Self {
        Self::Focus {
            reversion: 0.3,
            noise: 0.01,
        }
    }

    pub fn explore() -> Self {
        Self::Explore {
            drift: 0.03,
            dwell_prob: 0.1,
            dwell_steps: 5,
            noise: 0.005,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Focus { .. } => "focus",
            Self::Explore { .. } => "explore",
        }
    }

    /// Generates `users` traces of `duration` seconds sampled at `rate_hz`.
    pub fn generate(&self, users: usize, duration: f64, rate_hz: f64, seed: u64, grid: &TileGrid) -> Vec<ViewportTrace> {
        let steps = (duration * rate_hz).round().max(1.0) as usize;
        (0..users)
            .map(|u| {
                let mut rng = crate::rng_for(seed, 0x7669_6577 + u as u64);
                let points = match *self {
                    Self::Focus { reversion, noise } => focus_path(&mut rng, steps, reversion, noise),
                    Self::Explore {
                        drift,
                        dwell_prob,
                        dwell_steps,
                        noise,
                    } => explore_path(&mut rng, steps, drift, dwell_prob, dwell_steps, noise),
                };
                ViewportTrace {
                    user_id: format!("u{u}"),
                    video_id: self.name().to_string(),
                    interval: 1.0 / rate_hz,
                    points: points
                        .into_iter()
                        .map(|(x, y)| ViewportPoint::from_normalized(x, y, grid).reduced(grid))
                        .collect(),
                }
            })
            .collect()
    }
}

fn wrap01(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

fn clamp_y(y: f64) -> f64 {
    y.clamp(0.02, 0.98)
}

fn gaussian(rng: &mut crate::Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).unwrap().sample(rng)
    } else {
        0.0
    }
}

fn focus_path(rng: &mut crate::Rng, steps: usize, reversion: f64, noise: f64) -> Vec<(f64, f64)> {
    let cx: f64 = rng.random_range(0.0..1.0);
    let cy: f64 = rng.random_range(0.35..0.65);
    let (mut x, mut y) = (cx, cy);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push((wrap01(x), clamp_y(y)));
        let dx = tilestream_nn::wrap_signed(cx - x, 1.0);
        x = wrap01(x + reversion * dx + gaussian(rng, noise));
        y = clamp_y(y + reversion * (cy - y) + gaussian(rng, noise));
    }
    out
}

fn explore_path(
    rng: &mut crate::Rng,
    steps: usize,
    drift: f64,
    dwell_prob: f64,
    dwell_steps: usize,
    noise: f64,
) -> Vec<(f64, f64)> {
    let mut x: f64 = rng.random_range(0.0..1.0);
    let y0: f64 = rng.random_range(0.3..0.7);
    let mut y = y0;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let speed = if noise > 0.0 {
        sign * drift * rng.random_range(0.5..1.5)
    } else {
        drift
    };
    let mut dwell = 0usize;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push((wrap01(x), clamp_y(y)));
        if dwell > 0 {
            dwell -= 1;
        } else if dwell_prob > 0.0 && rng.random_bool(dwell_prob.min(1.0)) {
            dwell = dwell_steps;
        } else {
            x = wrap01(x + speed);
        }
        x = wrap01(x + gaussian(rng, noise));
        y = clamp_y(y + 0.1 * (y0 - y) + gaussian(rng, noise));
    }
    out
}

/// Throughput profiles for synthetic bandwidth traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BandwidthProfile {
    Stable { mbps: f64 },
    /// Alternates between two levels, each held for `period` seconds.
    Stepwise { low: f64, high: f64, period: f64 },
    /// Log-normal samples with the given mean and log-space deviation.
    Bursty { mean: f64, sigma: f64 },
}

impl BandwidthProfile {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Stable { .. } => "stable",
            Self::Stepwise { .. } => "stepwise",
            Self::Bursty { .. } => "bursty",
        }
    }

    /// Samples at `interval` seconds covering `duration`.
    pub fn generate(&self, duration: f64, interval: f64, seed: u64) -> Result<BandwidthTrace, Error> {
        let n = (duration / interval).ceil().max(1.0) as usize;
        let mut rng = crate::rng_for(seed, 0x6277);
        let values: Vec<f64> = match *self {
            Self::Stable { mbps } => vec![mbps; n],
            Self::Stepwise { low, high, period } => (0..n)
                .map(|i| {
                    let t = i as f64 * interval;
                    if ((t / period).floor() as u64) % 2 == 0 {
                        low
                    } else {
                        high
                    }
                })
                .collect(),
            Self::Bursty { mean, sigma } => {
                // Mean of a log-normal is exp(μ + σ²/2).
                let mu = mean.ln() - sigma * sigma / 2.0;
                let d = LogNormal::new(mu, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng).max(0.05)).collect()
            }
        };
        BandwidthTrace::new(interval, values)
    }
}

#[derive(Serialize, Deserialize)]
struct ViewportRow {
    user_id: String,
    video_id: String,
    t_seconds: f64,
    x_norm: f64,
    y_norm: f64,
}

/// Writes `user_id,video_id,t_seconds,x_norm,y_norm` with six decimals.
pub fn write_viewport_csv<W: Write>(traces: &[ViewportTrace], grid: &TileGrid, w: W) -> Result<(), Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["user_id", "video_id", "t_seconds", "x_norm", "y_norm"])?;
    for tr in traces {
        for (i, p) in tr.points.iter().enumerate() {
            let (xn, yn) = p.normalized(grid);
            wtr.write_record(&[
                tr.user_id.clone(),
                tr.video_id.clone(),
                format!("{:.6}", i as f64 * tr.interval),
                format!("{:.6}", xn),
                format!("{:.6}", yn),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<viewport csv>", e))?;
    Ok(())
}

/// Reads viewport rows, grouping consecutive rows by `(user_id, video_id)`
/// in order of first appearance. Normalized coordinates are scaled onto
/// `grid` and reduced into the frame.
pub fn read_viewport_csv<R: Read>(r: R, grid: &TileGrid) -> Result<Vec<ViewportTrace>, Error> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<(f64, ViewportPoint)>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<ViewportRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("viewport row {}: {e}", i + 1)))?;
        if !(row.x_norm.is_finite() && row.y_norm.is_finite()) {
            return Err(Error::Parse(format!("viewport row {}: non-finite coordinate", i + 1)));
        }
        let key = (row.user_id, row.video_id);
        let p = ViewportPoint::from_normalized(row.x_norm, row.y_norm, grid).reduced(grid);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            })
            .push((row.t_seconds, p));
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let rows = groups.remove(&key).unwrap();
            let interval = if rows.len() >= 2 { rows[1].0 - rows[0].0 } else { 1.0 };
            ViewportTrace {
                user_id: key.0,
                video_id: key.1,
                interval,
                points: rows.into_iter().map(|(_, p)| p).collect(),
            }
        })
        .collect())
}

/// Loads every `*.csv` in `dir`; the file stem names the family.
pub fn read_viewport_dir(dir: &Path, grid: &TileGrid) -> Result<BTreeMap<String, Vec<ViewportTrace>>, Error> {
    let mut out = BTreeMap::new();
    for path in csv_files(dir)? {
        let family = path.file_stem().unwrap().to_string_lossy().into_owned();
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let traces = read_viewport_csv(file, grid).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.insert(family, traces);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no viewport CSV files in {}", dir.display())));
    }
    Ok(out)
}

/// Sorted `*.csv` files of a directory.
pub fn csv_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, Error> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_without_noise_stays_at_its_centre() {
        let g = TileGrid::default();
        let fam = PatternFamily::Focus {
            reversion: 0.3,
            noise: 0.0,
        };
        for tr in fam.generate(3, 4.0, 5.0, 1, &g) {
            assert_eq!(tr.points.len(), 20);
            assert!(tr.points.iter().all(|p| *p == tr.points[0]));
        }
    }

    #[test]
    fn explore_without_dwell_advances_by_the_drift() {
        let g = TileGrid::default();
        let fam = PatternFamily::Explore {
            drift: 0.05,
            dwell_prob: 0.0,
            dwell_steps: 0,
            noise: 0.0,
        };
        let tr = &fam.generate(1, 10.0, 5.0, 3, &g)[0];
        for w in tr.points.windows(2) {
            let dx = (w[1].x - w[0].x).rem_euclid(g.video_width);
            assert!((dx - 0.05 * g.video_width).abs() < 1e-6);
            assert_eq!(w[0].y, w[1].y);
        }
    }

    #[test]
    fn generated_points_are_valid_and_seeded() {
        let g = TileGrid::default();
        for fam in [PatternFamily::focus(), PatternFamily::explore()] {
            let a = fam.generate(4, 30.0, 5.0, 7, &g);
            assert_eq!(a, fam.generate(4, 30.0, 5.0, 7, &g));
            assert_ne!(a, fam.generate(4, 30.0, 5.0, 8, &g));
            assert!(a.iter().flat_map(|t| &t.points).all(|p| p.is_valid(&g)));
        }
    }

    #[test]
    fn bandwidth_profiles() {
        let s = BandwidthProfile::Stable { mbps: 10.0 }.generate(5.0, 1.0, 0).unwrap();
        assert_eq!(s.mbps, vec![10.0; 5]);
        let st = BandwidthProfile::Stepwise {
            low: 4.0,
            high: 8.0,
            period: 2.0,
        }
        .generate(8.0, 1.0, 0)
        .unwrap();
        assert_eq!(st.mbps, vec![4.0, 4.0, 8.0, 8.0, 4.0, 4.0, 8.0, 8.0]);
        let b = BandwidthProfile::Bursty { mean: 12.0, sigma: 0.6 }.generate(2000.0, 1.0, 4).unwrap();
        assert!(b.mbps.iter().all(|&v| v > 0.0));
        let m = b.mbps.iter().sum::<f64>() / b.mbps.len() as f64;
        assert!((m - 12.0).abs() < 1.0, "{m}");
    }

    #[test]
    fn viewport_csv_round_trip_within_six_decimals() {
        let g = TileGrid::default();
        let traces = PatternFamily::explore().generate(3, 6.0, 5.0, 2, &g);
        let mut buf = Vec::new();
        write_viewport_csv(&traces, &g, &mut buf).unwrap();
        let back = read_viewport_csv(buf.as_slice(), &g).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in traces.iter().zip(&back) {
            assert_eq!(a.user_id, b.user_id);
            assert!((a.interval - b.interval).abs() < 1e-6);
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p.x - q.x).abs() <= 5e-7 * g.video_width + 1e-9);
                assert!((p.y - q.y).abs() <= 5e-7 * g.video_height + 1e-9);
            }
        }
    }

    #[test]
    fn malformed_viewport_row_is_named() {
        let g = TileGrid::default();
        let csv = "user_id,video_id,t_seconds,x_norm,y_norm\nu0,v,0,0.5,0.5\nu0,v,0.2,abc,0.5\n";
        let err = read_viewport_csv(csv.as_bytes(), &g).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }
}
