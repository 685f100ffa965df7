use proptest::prelude::*;
use tilestream_core::geometry::{TileGrid, TileMask};
use tilestream_core::qoe::QoEPreference;
use tilestream_core::simenv::{
    action_space, pyramid_assign, stall_time_from_events, BandwidthTrace, BitrateAction, BitrateLadder, EnvConfig,
    StreamingEnv, VideoManifest,
};

/// Ring index of every tile as its king-move distance to the nearest
/// predicted tile, columns wrapping.
fn ring_oracle(mask: &TileMask) -> Vec<usize> {
    let g = mask.grid();
    let mut out = vec![usize::MAX; g.tile_count()];
    for r in 0..g.rows {
        for c in 0..g.cols {
            for pr in 0..g.rows {
                for pc in 0..g.cols {
                    if !mask.get(pr, pc) {
                        continue;
                    }
                    let dr = r.abs_diff(pr);
                    let dc = c.abs_diff(pc).min(g.cols - c.abs_diff(pc));
                    let d = dr.max(dc);
                    out[r * g.cols + c] = out[r * g.cols + c].min(d);
                }
            }
        }
    }
    out
}

fn closest_rung(ladder: &[f64], target: f64) -> f64 {
    // Scan from the top so that the lower rung wins ties.
    let mut best = *ladder.last().unwrap();
    for &r in ladder.iter().rev() {
        if (r - target).abs() <= (best - target).abs() {
            best = r;
        }
    }
    best
}

fn oracle_rates(a: &BitrateAction, mask: &TileMask, ladder: &[f64], scale: f64) -> Vec<f64> {
    ring_oracle(mask)
        .into_iter()
        .map(|d| match d {
            0 => a.r_in,
            1 => a.r_out,
            j => closest_rung(ladder, a.r_out / scale.powi(j as i32 - 1)),
        })
        .collect()
}

fn mask_strategy() -> impl Strategy<Value = TileMask> {
    proptest::collection::vec(prop::bool::weighted(0.1), 64).prop_filter_map("non-empty", |bits| {
        let m = TileMask::from_bits(TileGrid::default(), bits).unwrap();
        (!m.is_empty()).then_some(m)
    })
}

proptest! {
    #[test]
    fn pyramid_matches_ring_oracle(mask in mask_strategy(), scale_idx in 0usize..3) {
        let scale = [1.0, 2.0, 4.0][scale_idx];
        let ladder = BitrateLadder::default();
        for a in action_space(&ladder) {
            let got = pyramid_assign(&a, &mask, &ladder, scale).unwrap();
            prop_assert_eq!(got, oracle_rates(&a, &mask, ladder.rungs(), scale));
        }
    }

    #[test]
    fn ring_rates_never_increase_outward(mask in mask_strategy(), scale_idx in 0usize..3) {
        let scale = [1.0, 2.0, 4.0][scale_idx];
        let ladder = BitrateLadder::default();
        let rings = ring_oracle(&mask);
        for a in action_space(&ladder) {
            let rates = pyramid_assign(&a, &mask, &ladder, scale).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    if rings[i] < rings[j] {
                        prop_assert!(rates[i] >= rates[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn stall_total_matches_playback_timeline(
        rates in proptest::collection::vec(0.5f64..60.0, 1..6),
        picks in proptest::collection::vec(0usize..15, 20),
        cap in 1.0f64..6.0,
        offset in 0.0f64..10.0,
    ) {
        let manifest = VideoManifest::synthetic(TileGrid::default(), BitrateLadder::default(), 20, 1.0, 1).unwrap();
        let trace = BandwidthTrace::new(1.0, rates).unwrap();
        let cfg = EnvConfig { buffer_cap: cap, ..EnvConfig::default() };
        let mut env = StreamingEnv::new(cfg, manifest, trace).unwrap();
        env.reset(offset);
        let mut m = TileMask::empty(TileGrid::default());
        m.set(4, 2, true);
        m.set(4, 3, true);
        let pref = QoEPreference::new(0.2, 0.3, 0.5).unwrap();
        let actions = action_space(&BitrateLadder::default());
        let mut q3_sum = 0.0;
        for p in picks {
            let out = env.step(&actions[p], &m, &m, &pref).unwrap();
            prop_assert!(env.buffer() >= 0.0 && env.buffer() <= cap + 1e-12);
            q3_sum += out.breakdown.q3;
        }
        let from_events = stall_time_from_events(env.events(), 1.0);
        prop_assert!((q3_sum - from_events).abs() < 1e-9, "{} vs {}", q3_sum, from_events);
    }
}

fn run_episode(seed: u64) -> Vec<u8> {
    let manifest = VideoManifest::synthetic(TileGrid::default(), BitrateLadder::default(), 30, 1.0, seed).unwrap();
    let trace = BandwidthTrace::new(0.5, vec![3.0, 12.0, 7.5, 30.0]).unwrap();
    let mut env = StreamingEnv::new(EnvConfig::default(), manifest, trace).unwrap();
    let mut m = TileMask::empty(TileGrid::default());
    m.set(2, 7, true);
    let pref = QoEPreference::new(0.5, 0.25, 0.25).unwrap();
    let actions = action_space(&BitrateLadder::default());
    let mut i = 0;
    while !env.is_finished() {
        env.step(&actions[(i * 7) % 15], &m, &m, &pref).unwrap();
        i += 1;
    }
    let mut buf = Vec::new();
    tilestream_core::simenv::write_episode_log(env.records(), &mut buf).unwrap();
    buf
}

#[test]
fn episodes_replay_bitwise() {
    assert_eq!(run_episode(5), run_episode(5));
    assert_ne!(run_episode(5), run_episode(6));
}
