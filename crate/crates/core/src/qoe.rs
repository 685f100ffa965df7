//! Three-term per-chunk QoE model and preference weighting.

use serde::{Deserialize, Serialize};

use crate::geometry::TileMask;
use crate::Error;

const SIMPLEX_TOL: f64 = 1e-9;

/// Weights on viewport quality, quality variation and rebuffering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoEPreference {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl QoEPreference {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, Error> {
        let p = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        if [lambda1, lambda2, lambda3].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidInput(format!("negative preference weight in {p:?}")));
        }
        if (lambda1 + lambda2 + lambda3 - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("preference {p:?} does not sum to 1")));
        }
        Ok(p)
    }

    /// Builds `(a/9, b/9, c/9)`; handy for the ninths used by the pool.
    fn ninths(a: f64, b: f64, c: f64) -> Self {
        Self {
            lambda1: a / 9.0,
            lambda2: b / 9.0,
            lambda3: c / 9.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

/// Per-chunk QoE terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkQoEBreakdown {
    /// Average bitrate of tiles inside the actual viewport (Mbps).
    pub q1: f64,
    /// Intra-viewport plus inter-chunk quality variation (Mbps).
    pub q2: f64,
    /// Rebuffering time (s).
    pub q3: f64,
    pub total: f64,
}

impl ChunkQoEBreakdown {
    pub fn new(q1: f64, q2: f64, q3: f64, pref: &QoEPreference) -> Self {
        Self {
            q1,
            q2,
            q3,
            total: chunk_qoe(q1, q2, q3, pref),
        }
    }
}

fn in_mask(tile_bitrates: &[f64], actual: &TileMask) -> Result<Vec<f64>, Error> {
    if tile_bitrates.len() != actual.bits().len() {
        return Err(Error::Shape(format!(
            "{} tile bitrates for {} tiles",
            tile_bitrates.len(),
            actual.bits().len()
        )));
    }
    let vals: Vec<f64> = tile_bitrates
        .iter()
        .zip(actual.bits())
        .filter(|(_, &b)| b)
        .map(|(&r, _)| r)
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(vals)
}

/// Mean bitrate of the tiles inside the actual viewport.
pub fn viewport_quality(tile_bitrates: &[f64], actual: &TileMask) -> Result<f64, Error> {
    let vals = in_mask(tile_bitrates, actual)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean absolute deviation from `q1_current` inside the viewport plus the
/// change of viewport quality since the previous chunk.
pub fn quality_variation(
    tile_bitrates: &[f64],
    actual: &TileMask,
    q1_current: f64,
    q1_previous: f64,
) -> Result<f64, Error> {
    let vals = in_mask(tile_bitrates, actual)?;
    let intra = vals.iter().map(|r| (r - q1_current).abs()).sum::<f64>() / vals.len() as f64;
    Ok(intra + (q1_current - q1_previous).abs())
}

/// Stall time: the part of the download not covered by the buffer.
pub fn rebuffer_time(download_time: f64, buffer_at_request: f64) -> f64 {
    (download_time - buffer_at_request).max(0.0)
}

pub fn chunk_qoe(q1: f64, q2: f64, q3: f64, pref: &QoEPreference) -> f64 {
    pref.lambda1 * q1 - pref.lambda2 * q2 - pref.lambda3 * q3
}

/// Which half of the preference pool a preference belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSplit {
    Trained,
    Unseen,
}

impl std::str::FromStr for PoolSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "trained" | "train" => Ok(Self::Trained),
            "unseen" | "held-out" | "heldout" => Ok(Self::Unseen),
            other => Err(Error::InvalidInput(format!("unknown preference split {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Trained => "trained",
            Self::Unseen => "unseen",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePool {
    pub train: Vec<QoEPreference>,
    pub held_out: Vec<QoEPreference>,
}

impl PreferencePool {
    pub fn split(&self, split: PoolSplit) -> &[QoEPreference] {
        match split {
            PoolSplit::Trained => &self.train,
            PoolSplit::Unseen => &self.held_out,
        }
    }

    /// Reads `lambda1,lambda2,lambda3,split` rows.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, Error> {
        #[derive(Deserialize)]
        struct Row {
            lambda1: f64,
            lambda2: f64,
            lambda3: f64,
            split: String,
        }
        let mut pool = PreferencePool {
            train: Vec::new(),
            held_out: Vec::new(),
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("preference row {}: {e}", i + 1)))?;
            let p = QoEPreference::new(row.lambda1, row.lambda2, row.lambda3)?;
            match row.split.parse::<PoolSplit>()? {
                PoolSplit::Trained => pool.train.push(p),
                PoolSplit::Unseen => pool.held_out.push(p),
            }
        }
        Ok(pool)
    }
}

/// Default eight-preference pool: four for training, four held out.
pub fn preference_pool() -> PreferencePool {
    let third = 1.0 / 3.0;
    PreferencePool {
        train: vec![
            QoEPreference::ninths(7.0, 1.0, 1.0),
            QoEPreference::ninths(1.0, 7.0, 1.0),
            QoEPreference::ninths(1.0, 1.0, 7.0),
            QoEPreference {
                lambda1: third,
                lambda2: third,
                lambda3: third,
            },
        ],
        held_out: vec![
            QoEPreference::ninths(5.0, 3.0, 1.0),
            QoEPreference::ninths(1.0, 5.0, 3.0),
            QoEPreference::ninths(3.0, 1.0, 5.0),
            QoEPreference::ninths(5.0, 1.0, 3.0),
        ],
    }
}
