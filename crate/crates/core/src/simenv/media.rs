use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::BitrateLadder;
use crate::geometry::TileGrid;
use crate::Error;

/// Per chunk, per tile, per rung encoded size in bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub chunk_duration: f64,
    pub grid: TileGrid,
    pub ladder: BitrateLadder,
    chunks: usize,
    bits: Vec<f64>,
}

impl VideoManifest {
    pub fn new(
        chunk_duration: f64,
        grid: TileGrid,
        ladder: BitrateLadder,
        chunks: usize,
        bits: Vec<f64>,
    ) -> Result<Self, Error> {
        let tiles = grid.tile_count();
        let rungs = ladder.len();
        if chunks == 0 || bits.len() != chunks * tiles * rungs {
            return Err(Error::Shape(format!(
                "manifest needs {chunks}x{tiles}x{rungs} sizes, got {}",
                bits.len()
            )));
        }
        if !(chunk_duration > 0.0) {
            return Err(Error::InvalidInput("chunk duration must be positive".into()));
        }
        let m = Self {
            chunk_duration,
            grid,
            ladder,
            chunks,
            bits,
        };
        for c in 0..chunks {
            for t in 0..tiles {
                let row = m.tile_sizes(c, t);
                if row.iter().any(|&b| !(b > 0.0)) || row.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidInput(format!(
                        "chunk {c} tile {t}: sizes must be positive and increase with the rung"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Sizes from `rung · duration / N_tile · (1 + ε)` with a seeded
    /// per-tile `ε ∈ [−0.1, 0.1)` shared across rungs.
    pub fn synthetic(
        grid: TileGrid,
        ladder: BitrateLadder,
        chunks: usize,
        chunk_duration: f64,
        seed: u64,
    ) -> Result<Self, Error> {
        let mut rng = crate::rng_for(seed, 0x6d61_6e69);
        let tiles = grid.tile_count();
        let mut bits = Vec::with_capacity(chunks * tiles * ladder.len());
        for _ in 0..chunks {
            for _ in 0..tiles {
                let eps: f64 = rng.random_range(-0.1..0.1);
                for &r in ladder.rungs() {
                    bits.push(r * 1e6 * chunk_duration / tiles as f64 * (1.0 + eps));
                }
            }
        }
        Self::new(chunk_duration, grid, ladder, chunks, bits)
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn tile_sizes(&self, chunk: usize, tile: usize) -> &[f64] {
        let r = self.ladder.len();
        let start = (chunk * self.grid.tile_count() + tile) * r;
        &self.bits[start..start + r]
    }

    /// Total bits of a chunk for per-tile rates drawn from the ladder.
    pub fn chunk_bits(&self, chunk: usize, tile_mbps: &[f64]) -> Result<f64, Error> {
        if tile_mbps.len() != self.grid.tile_count() {
            return Err(Error::Shape(format!(
                "{} tile rates for {} tiles",
                tile_mbps.len(),
                self.grid.tile_count()
            )));
        }
        let mut total = 0.0;
        for (t, &r) in tile_mbps.iter().enumerate() {
            let k = self
                .ladder
                .index_of(r)
                .ok_or_else(|| Error::InvalidInput(format!("{r} Mbps is not a ladder rung")))?;
            total += self.tile_sizes(chunk, t)[k];
        }
        Ok(total)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["chunk", "tile", "rung_index", "bits"])?;
        for c in 0..self.chunks {
            for t in 0..self.grid.tile_count() {
                for (k, b) in self.tile_sizes(c, t).iter().enumerate() {
                    wtr.write_record(&[c.to_string(), t.to_string(), k.to_string(), b.to_string()])?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    /// Reads `chunk,tile,rung_index,bits` rows; the grid, ladder and chunk
    /// duration are not stored in the file and must be supplied.
    pub fn read_csv<R: Read>(
        r: R,
        grid: TileGrid,
        ladder: BitrateLadder,
        chunk_duration: f64,
    ) -> Result<Self, Error> {
        #[derive(Deserialize)]
        struct Row {
            chunk: usize,
            tile: usize,
            rung_index: usize,
            bits: f64,
        }
        let tiles = grid.tile_count();
        let rungs = ladder.len();
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("manifest row {}: {e}", i + 1)))?;
            if row.tile >= tiles || row.rung_index >= rungs {
                return Err(Error::Parse(format!(
                    "manifest row {}: tile {} / rung {} out of range",
                    i + 1,
                    row.tile,
                    row.rung_index
                )));
            }
            cells.push((row.chunk, row.tile, row.rung_index, row.bits));
        }
        let chunks = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let mut bits = vec![f64::NAN; chunks * tiles * rungs];
        for (c, t, k, b) in cells {
            bits[(c * tiles + t) * rungs + k] = b;
        }
        if bits.iter().any(|b| b.is_nan()) {
            return Err(Error::Parse("manifest is missing some (chunk, tile, rung) sizes".into()));
        }
        Self::new(chunk_duration, grid, ladder, chunks, bits)
    }
}

/// Throughput samples at a fixed interval, replayed cyclically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTrace {
    pub interval: f64,
    pub mbps: Vec<f64>,
}

impl BandwidthTrace {
    pub fn new(interval: f64, mbps: Vec<f64>) -> Result<Self, Error> {
        if mbps.is_empty() || !(interval > 0.0) {
            return Err(Error::InvalidInput("bandwidth trace needs samples and a positive interval".into()));
        }
        if mbps.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("bandwidth samples must be positive and finite".into()));
        }
        Ok(Self { interval, mbps })
    }

    pub fn constant(mbps: f64) -> Result<Self, Error> {
        Self::new(1.0, vec![mbps])
    }

    pub fn period(&self) -> f64 {
        self.interval * self.mbps.len() as f64
    }

    /// Rate in effect at absolute time `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        let pos = t.rem_euclid(self.period());
        let idx = ((pos / self.interval) as usize).min(self.mbps.len() - 1);
        self.mbps[idx]
    }

    /// Wall time needed to move `bits` starting at `start`, integrating the
    /// piecewise-constant rate interval by interval.
    pub fn transfer_time(&self, bits: f64, start: f64) -> f64 {
        if bits <= 0.0 {
            return 0.0;
        }
        let period = self.period();
        let mut remaining = bits;
        let mut t = start;
        loop {
            let pos = t.rem_euclid(period);
            let idx = ((pos / self.interval) as usize).min(self.mbps.len() - 1);
            let interval_end = (idx + 1) as f64 * self.interval;
            let span = (interval_end - pos).max(0.0);
            let rate = self.mbps[idx] * 1e6;
            let capacity = rate * span;
            if capacity >= remaining {
                t += remaining / rate;
                return t - start;
            }
            remaining -= capacity;
            // Step exactly onto the next interval boundary.
            t = (t - pos) + interval_end;
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t_seconds", "mbps"])?;
        for (i, v) in self.mbps.iter().enumerate() {
            wtr.write_record(&[(i as f64 * self.interval).to_string(), v.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<bandwidth>", e))?;
        Ok(())
    }

    /// Reads `t_seconds,mbps`. The interval is taken from the first two
    /// timestamps (1 s for a single sample).
    pub fn read_csv<R: Read>(r: R) -> Result<Self, Error> {
        #[derive(Deserialize)]
        struct Row {
            t_seconds: f64,
            mbps: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut times = Vec::new();
        let mut rates = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("bandwidth row {}: {e}", i + 1)))?;
            times.push(row.t_seconds);
            rates.push(row.mbps);
        }
        let interval = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
        Self::new(interval, rates)
    }
}

/// Download time of one chunk under per-tile rates, starting at `start`.
pub fn download_time(
    manifest: &VideoManifest,
    chunk: usize,
    tile_mbps: &[f64],
    trace: &BandwidthTrace,
    start: f64,
) -> Result<f64, Error> {
    let bits = manifest.chunk_bits(chunk, tile_mbps)?;
    Ok(trace.transfer_time(bits, start))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_manifest(bits_per_tile: f64) -> VideoManifest {
        let grid = TileGrid::new(2, 2, 100.0, 100.0).unwrap();
        let ladder = BitrateLadder::new(vec![1.0, 2.0]).unwrap();
        let mut bits = Vec::new();
        for _ in 0..4 {
            bits.extend([bits_per_tile, 2.0 * bits_per_tile]);
        }
        VideoManifest::new(1.0, grid, ladder, 1, bits).unwrap()
    }

    #[test]
    fn constant_trace_is_bits_over_rate() {
        let m = flat_manifest(1.25e6);
        let trace = BandwidthTrace::constant(10.0).unwrap();
        let t = download_time(&m, 0, &[1.0; 4], &trace, 0.3).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn piecewise_integration_crosses_interval_boundaries() {
        let trace = BandwidthTrace::new(1.0, vec![4.0, 8.0]).unwrap();
        assert!((trace.transfer_time(8e6, 0.0) - 1.5).abs() < 1e-12);
        // Wraps around the cycle: 0.5 s @ 8 then 1 s @ 4 covers 8 Mbit.
        assert!((trace.transfer_time(8e6, 1.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn doubling_sizes_doubles_time_on_constant_trace() {
        let trace = BandwidthTrace::constant(7.0).unwrap();
        let a = download_time(&flat_manifest(1e6), 0, &[1.0; 4], &trace, 0.0).unwrap();
        let b = download_time(&flat_manifest(2e6), 0, &[1.0; 4], &trace, 0.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn synthetic_manifest_is_monotone_in_rung() {
        let m = VideoManifest::synthetic(TileGrid::default(), BitrateLadder::default(), 3, 1.0, 9).unwrap();
        for c in 0..3 {
            for t in 0..64 {
                let s = m.tile_sizes(c, t);
                assert!(s.windows(2).all(|w| w[0] < w[1]));
                let nominal = 1e6 / 64.0;
                assert!(s[0] >= 0.9 * nominal && s[0] < 1.1 * nominal);
            }
        }
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = VideoManifest::synthetic(TileGrid::default(), BitrateLadder::default(), 2, 1.0, 3).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = VideoManifest::read_csv(buf.as_slice(), m.grid, m.ladder.clone(), 1.0).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bandwidth_csv_round_trip() {
        let tr = BandwidthTrace::new(0.5, vec![3.0, 4.5, 9.25]).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert_eq!(BandwidthTrace::read_csv(buf.as_slice()).unwrap(), tr);
    }
}
