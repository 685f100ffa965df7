//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The long-running ones (viewport training, the bitrate study) take a few
//! minutes each in an optimized build.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use tilestream_core::agent::{AgentConfig, AgentObservation, PolicyNet, PpoConfig};
use tilestream_core::geometry::{iou, viewport_tile_mask, wrap_distance, FieldOfView, TileGrid, TileMask, ViewportPoint};
use tilestream_core::identifier::{IdentifierBatch, IdentifierConfig, QoEIdentifier};
use tilestream_core::orchestrator::{
    run_evaluation, run_training, Environment, EvalRow, PreferenceBandit, StreamingSession, TrainConfig, TrainingRun,
};
use tilestream_core::qoe::{preference_pool, rebuffer_time, QoEPreference};
use tilestream_core::report::percentile;
use tilestream_core::rng_for;
use tilestream_core::simenv::{
    action_space, pyramid_assign, BandwidthTrace, BitrateAction, BitrateLadder, EnvConfig, ObsLayout, StateFeatures,
    StreamingEnv, VectorInput, VideoManifest,
};
use tilestream_core::traces::{BandwidthProfile, PatternFamily};
use tilestream_core::vp::{
    count_params_flops, ensemble, evaluate_accuracy, multi_head_attention, train, AttentionParams, LinearExtrapolation,
    MtioTransformer, PredictionSet, PredictorConfig, TrainOptions, WindowedDataset,
};
use tilestream_nn::gradcheck::check_gradients;
use tilestream_nn::{Matrix, ParamStore};

/// Writes straight to stderr so the line shows up even when the harness
/// captures output.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{tag} [{n:>2}] {name}: {detail}");
}

fn median(v: &[f64]) -> f64 {
    percentile(v, 50.0)
}

// ---------------------------------------------------------------- 1

/// Minimum over the nine integer-period shifts.
fn distance_oracle(a: &ViewportPoint, b: &ViewportPoint, g: &TileGrid) -> f64 {
    let mut best = f64::INFINITY;
    for kx in -1..=1 {
        for ky in -1..=1 {
            let dx = a.x - b.x + kx as f64 * g.video_width;
            let dy = a.y - b.y + ky as f64 * g.video_height;
            best = best.min((dx * dx + dy * dy) / 2.0);
        }
    }
    best
}

/// Tile-centre enumeration against the wrapped, pole-clamped rectangle.
fn mask_oracle(c: &ViewportPoint, fov: &FieldOfView, g: &TileGrid) -> Vec<bool> {
    let (w, h) = (g.video_width, g.video_height);
    let half_w = fov.width_fraction * w / 2.0;
    let span = fov.height_fraction * h;
    let top = (c.y - span / 2.0).max(0.0).min(h - span);
    let bottom = if c.y + span / 2.0 > h { h } else { top + span };
    let (tw, th) = (w / g.cols as f64, h / g.rows as f64);
    let mut bits = vec![false; g.rows * g.cols];
    for r in 0..g.rows {
        for col in 0..g.cols {
            let cx = (col as f64 + 0.5) * tw;
            let cy = (r as f64 + 0.5) * th;
            let in_x = [-w, 0.0, w].iter().any(|s| (cx + s - c.x).abs() <= half_w);
            bits[r * g.cols + col] = in_x && cy >= top && cy <= bottom;
        }
    }
    let home_r = ((c.y / th).floor() as usize).min(g.rows - 1);
    let home_c = ((c.x / tw).floor() as usize).min(g.cols - 1);
    bits[home_r * g.cols + home_c] = true;
    bits
}

fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

#[test]
fn c01_geometry_exactness() {
    let start = Instant::now();
    let mut rng = rng_for(2024, 1);
    let mut worst = 0.0f64;
    let mut mask_mismatch = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let g = TileGrid::new(
            rng.random_range(1..=12),
            rng.random_range(2..=12),
            rng.random_range(100.0..4000.0),
            rng.random_range(50.0..2000.0),
        )
        .unwrap();
        let fov = FieldOfView::new(rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)).unwrap();
        let pt = |rng: &mut tilestream_core::Rng| {
            ViewportPoint::new(rng.random_range(0.0..g.video_width), rng.random_range(0.0..g.video_height))
        };
        let (a, b) = (pt(&mut rng), pt(&mut rng));
        worst = worst.max((wrap_distance(&a, &b, &g) - distance_oracle(&a, &b, &g)).abs());

        let ma = viewport_tile_mask(&a, &fov, &g);
        let mb = viewport_tile_mask(&b, &fov, &g);
        let (oa, ob) = (mask_oracle(&a, &fov, &g), mask_oracle(&b, &fov, &g));
        mask_mismatch += (ma.bits() != oa.as_slice()) as usize + (mb.bits() != ob.as_slice()) as usize;
        worst = worst.max((iou(&ma, &mb).unwrap() - iou_oracle(ma.bits(), mb.bits())).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && mask_mismatch == 0 && secs < 10.0;
    verdict(
        1,
        "geometry exactness",
        pass,
        &format!("{cases} cases, max error {worst:.1e}, {mask_mismatch} mask mismatches, {secs:.2} s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn grad_layout() -> ObsLayout {
    ObsLayout {
        vectors: vec![VectorInput { channels: 2, length: 3 }, VectorInput { channels: 1, length: 4 }],
        scalars: 2,
    }
}

fn grad_obs(layout: &ObsLayout, n: usize, seed: u64) -> Vec<AgentObservation> {
    let mut rng = rng_for(seed, 9);
    (0..n)
        .map(|_| AgentObservation {
            state: StateFeatures {
                vectors: layout.vectors.iter().map(|v| (0..v.size()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                scalars: (0..layout.scalars).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            pref: QoEPreference::new(0.5, 0.3, 0.2).unwrap(),
        })
        .collect()
}

#[test]
fn c02_gradient_fidelity() {
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let cfg = PredictorConfig {
        heads: 2,
        d_model: 8,
        attn_heads: 2,
        d_k: 4,
        d_v: 4,
        blocks: 1,
        history: 4,
        horizon: 3,
        ffn_width: 16,
        video_width: 10.0,
        video_height: 6.0,
    };
    let model = MtioTransformer::new(cfg, 3).unwrap();

    // Multi-head attention on its own parameters.
    let p = model.attention_params(0, "enc").unwrap();
    let mut store = ParamStore::new();
    for id in [p.wq, p.wk, p.wv, p.wo] {
        store.insert(model.store.name(id), model.store.get(id).clone());
    }
    let ids: Vec<_> = store.ids().collect();
    let params = AttentionParams {
        wq: ids[0],
        wk: ids[1],
        wv: ids[2],
        wo: ids[3],
    };
    let x = Matrix::from_fn(3, 8, |r, c| ((r * 8 + c) as f64 * 0.61).sin());
    let rep = check_gradients(&store, 1e-6, 1e-9, |g, s| {
        let xv = g.leaf(x.clone());
        let y = multi_head_attention(g, s, &params, 2, 4, 4, xv, xv, None).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    errors.push(("attention", rep.max_rel_error));

    // Distilling layer: conv, ELU, max-pool.
    let mut store = ParamStore::new();
    store.insert("distill.w", model.store.by_name("distill.w").unwrap().clone());
    store.insert("distill.b", Matrix::from_fn(1, 8, |_, c| 0.05 * c as f64));
    let x = Matrix::from_fn(5, 8, |r, c| ((r * 8 + c) as f64 * 0.77).cos());
    let rep = check_gradients(&store, 1e-6, 1e-9, |g, s| {
        let xv = g.leaf(x.clone());
        let cols = g.im2col(xv, 3, 1, 1);
        let w = g.param(s, s.id("distill.w").unwrap());
        let b = g.param(s, s.id("distill.b").unwrap());
        let c = g.matmul(cols, w);
        let c = g.add_row(c, b);
        let c = g.elu(c);
        let p = g.max_pool_rows(c, 3, 2, 1);
        let sq = g.square(p);
        g.sum(sq)
    });
    errors.push(("distill", rep.max_rel_error));

    // Policy and value heads.
    let agent = AgentConfig {
        filters: 3,
        hidden1: 6,
        hidden2: 5,
        pref_width: 5,
        residual: true,
        actions: 4,
    };
    let net = PolicyNet::new(agent, grad_layout(), 7).unwrap();
    let obs = grad_obs(&net.layout, 5, 8);
    let refs: Vec<&AgentObservation> = obs.iter().collect();
    let batch = tilestream_core::agent::ObsBatch::new(&refs, &net.layout).unwrap();
    let target = Matrix::from_fn(5, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
    let rep = check_gradients(&net.store, 1e-6, 1e-8, |g, s| {
        let (logits, _) = net.forward_on(g, s, &batch);
        let p = g.softmax_rows(logits);
        let t = g.leaf(target.clone());
        let m = g.mul(p, t);
        g.sum(m)
    });
    errors.push(("policy", rep.max_rel_error));
    let rep = check_gradients(&net.store, 1e-6, 1e-8, |g, s| {
        let (_, v) = net.forward_on(g, s, &batch);
        let sq = g.square(v);
        g.sum(sq)
    });
    errors.push(("value", rep.max_rel_error));

    // Identifier regression loss.
    let id = QoEIdentifier::new(
        IdentifierConfig {
            filters: 3,
            hidden1: 5,
            hidden2: 4,
            actions: 3,
        },
        grad_layout(),
        1,
    )
    .unwrap();
    let obs = grad_obs(&id.layout, 5, 2);
    let refs: Vec<&AgentObservation> = obs.iter().collect();
    let batch = IdentifierBatch::new(&refs, &[0, 1, 2, 1, 0], &id.layout).unwrap();
    let rep = check_gradients(&id.store, 1e-6, 1e-8, |g, s| {
        tilestream_core::identifier::mse_loss(&id, g, s, &batch)
    });
    errors.push(("identifier", rep.max_rel_error));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = worst < 1e-4;
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(2, "gradient fidelity", pass, &detail.join(", "));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_multi_head_overhead() {
    let cost = |m: usize| count_params_flops(&PredictorConfig { heads: m, ..PredictorConfig::default() });
    let one = cost(1);
    let three = cost(3);
    let dp = (three.params as f64 / one.params as f64 - 1.0) * 100.0;
    let df = (three.flops as f64 / one.flops as f64 - 1.0) * 100.0;
    let series: Vec<_> = [1, 3, 5, 10].iter().map(|&m| cost(m)).collect();
    let monotone = series.windows(2).all(|w| w[1].params > w[0].params && w[1].flops > w[0].flops);
    let pass = dp < 1.0 && df < 1.0 && dp > 0.0 && df > 0.0 && monotone;
    verdict(
        3,
        "multi-head overhead",
        pass,
        &format!("M=3 vs M=1: params +{dp:.3}%, flops +{df:.3}%, monotone over 1,3,5,10: {monotone}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_ensemble_never_worse_than_mean_head() {
    let g = TileGrid::default();
    let mut rng = rng_for(77, 4);
    let (mut violations, mut disagree, mut strict) = (0, 0, 0);
    for _ in 0..1000 {
        let truth: Vec<ViewportPoint> = (0..5)
            .map(|_| {
                ViewportPoint::new(
                    rng.random_range(0.3..0.7) * g.video_width,
                    rng.random_range(0.3..0.7) * g.video_height,
                )
            })
            .collect();
        // Offsets stay well under half a period, so no distance wraps.
        let heads: Vec<Vec<ViewportPoint>> = (0..3)
            .map(|_| {
                truth
                    .iter()
                    .map(|t| {
                        ViewportPoint::new(
                            t.x + rng.random_range(-0.15..0.15) * g.video_width,
                            t.y + rng.random_range(-0.15..0.15) * g.video_height,
                        )
                    })
                    .collect()
            })
            .collect();
        let set = PredictionSet { heads };
        let ens = ensemble(&set, &g);
        let err = |pred: &[ViewportPoint]| pred.iter().zip(&truth).map(|(p, t)| wrap_distance(t, p, &g)).sum::<f64>();
        let e_ens = err(&ens);
        let e_mean = set.heads.iter().map(|h| err(h)).sum::<f64>() / 3.0;
        if e_ens > e_mean + 1e-9 {
            violations += 1;
        }
        if set.heads.windows(2).any(|w| w[0] != w[1]) {
            disagree += 1;
            strict += (e_ens < e_mean) as usize;
        }
    }
    let share = strict as f64 / disagree.max(1) as f64;
    let pass = violations == 0 && share >= 0.95;
    verdict(
        4,
        "ensemble vs mean head error",
        pass,
        &format!("1000 batches, {violations} violations, strictly better on {strict}/{disagree}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn windows_for(family: &PatternFamily, name: &str, users: usize, seed: u64, stride: usize) -> WindowedDataset {
    let g = TileGrid::default();
    let traces = family.generate(users, 60.0, 5.0, seed, &g);
    WindowedDataset::from_trajectories(name, traces.iter().map(|t| t.points.as_slice()), 5, 5, stride)
}

#[test]
fn c05_viewport_training_small_config() {
    let g = TileGrid::default();
    let fov = FieldOfView::default();
    let cfg = PredictorConfig {
        heads: 3,
        ..PredictorConfig::small()
    };
    let opts = TrainOptions {
        epochs: 15,
        steps_per_epoch: Some(50),
        learning_rate: 1e-3,
        patience: 0,
        ..TrainOptions::default()
    };
    let start = Instant::now();
    let (mut ens, mut best, mut explore) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let train_ds = windows_for(&PatternFamily::focus(), "focus", 40, seed, 1);
        let test_ds = windows_for(&PatternFamily::focus(), "focus", 10, seed + 500, 5);
        let other = windows_for(&PatternFamily::explore(), "explore", 10, seed + 500, 5);
        let out = train(&train_ds, &cfg, &opts, seed).unwrap();
        let rep = evaluate_accuracy(&out.model, &test_ds, &fov, &g).unwrap();
        let rep_x = evaluate_accuracy(&out.model, &other, &fov, &g).unwrap();
        ens.push(rep.mean_ensemble());
        best.push(rep.best_head());
        explore.push(rep_x.mean_ensemble());
    }
    let (me, mb, mx) = (median(&ens), median(&best), median(&explore));
    let pass = me >= 0.6 && me >= mb - 0.02;
    verdict(
        5,
        "viewport training, small config",
        pass,
        &format!(
            "median IoU ensemble {me:.3}, best head {mb:.3}; explore {mx:.3} (gap {:.3}); {:.0} s",
            me - mx,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_qoe_hand_scenario() {
    // A 1x4 strip. Tile 0 is predicted, tiles 1 and 3 are its first ring
    // (3 by wrap-around), tile 2 is the second ring.
    let grid = TileGrid::new(1, 4, 400.0, 100.0).unwrap();
    let ladder = BitrateLadder::default();
    // Every tile at rung r costs r · 0.25 Mb, so a chunk costs sum(rates) / 4 Mb.
    let bits: Vec<f64> = (0..3 * 4).flat_map(|_| ladder.rungs().iter().map(|r| r * 0.25e6)).collect();
    let manifest = VideoManifest::new(1.0, grid, ladder.clone(), 3, bits).unwrap();
    let mut env = StreamingEnv::new(EnvConfig::default(), manifest, BandwidthTrace::constant(4.0).unwrap()).unwrap();
    let pref = QoEPreference::new(0.5, 0.3, 0.2).unwrap();
    let mask = |tiles: &[usize]| {
        let mut b = vec![false; 4];
        for &t in tiles {
            b[t] = true;
        }
        TileMask::from_bits(grid, b).unwrap()
    };
    let predicted = mask(&[0]);
    let steps = [
        (BitrateAction { r_in: 16.0, r_out: 5.0 }, mask(&[0, 1])),
        (BitrateAction { r_in: 35.0, r_out: 8.0 }, mask(&[1, 2])),
        (BitrateAction { r_in: 8.0, r_out: 1.0 }, mask(&[0])),
    ];

    // Worked by hand. Tile rates (ring 2 = closest rung to r_out / 2):
    //   [16, 5, 1, 5]  27 Mb/4 = 6.75 Mb  -> 1.6875 s at 4 Mbps
    //   [35, 8, 5, 8]  56 Mb/4 = 14 Mb    -> 3.5 s
    //   [8, 1, 1, 1]   11 Mb/4 = 2.75 Mb  -> 0.6875 s
    // Buffer at request 0, 1, 1: stalls 1.6875, 2.5, 0.
    // q1 = mean over actual tiles: 10.5, 6.5, 8.
    // q2 = intra (mean |r - q1|) + |q1 - previous q1| (starting from 0):
    //   5.5 + 10.5 = 16, 1.5 + 4 = 5.5, 0 + 1.5 = 1.5.
    // QoE = 0.5 q1 - 0.3 q2 - 0.2 q3.
    let expect = [
        ([16.0, 5.0, 1.0, 5.0], 1.6875, 10.5, 16.0, 1.6875, 0.1125),
        ([35.0, 8.0, 5.0, 8.0], 3.5, 6.5, 5.5, 2.5, 1.1),
        ([8.0, 1.0, 1.0, 1.0], 0.6875, 8.0, 1.5, 0.0, 3.55),
    ];
    let mut worst = 0.0f64;
    for ((action, actual), (rates, l, q1, q2, q3, total)) in steps.iter().zip(expect) {
        let out = env.step(action, &predicted, actual, &pref).unwrap();
        assert_eq!(out.tile_rates, rates.to_vec());
        for (got, want) in [
            (out.download_time, l),
            (out.breakdown.q1, q1),
            (out.breakdown.q2, q2),
            (out.breakdown.q3, q3),
            (out.breakdown.total, total),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let footnote = rebuffer_time(2.0, 0.5);
    let pass = worst < 1e-9 && (footnote - 1.5).abs() < 1e-12 && env.is_finished();
    verdict(
        6,
        "QoE hand scenario",
        pass,
        &format!("3 chunks, max error {worst:.1e}; rebuffer(2, 0.5) = {footnote}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// King-move distance to the nearest predicted tile, columns wrapping.
fn ring_oracle(mask: &TileMask) -> Vec<usize> {
    let g = mask.grid();
    let mut out = vec![usize::MAX; g.tile_count()];
    for r in 0..g.rows {
        for c in 0..g.cols {
            for pr in 0..g.rows {
                for pc in 0..g.cols {
                    if mask.get(pr, pc) {
                        let dc = c.abs_diff(pc).min(g.cols - c.abs_diff(pc));
                        let d = r.abs_diff(pr).max(dc);
                        out[r * g.cols + c] = out[r * g.cols + c].min(d);
                    }
                }
            }
        }
    }
    out
}

fn closest_rung(rungs: &[f64], target: f64) -> f64 {
    let mut best = rungs[rungs.len() - 1];
    for &r in rungs.iter().rev() {
        if (r - target).abs() <= (best - target).abs() {
            best = r;
        }
    }
    best
}

#[test]
fn c07_action_space_and_pyramid() {
    let ladder = BitrateLadder::default();
    let actions = action_space(&ladder);
    let valid = actions.len() == 15 && actions.iter().all(|a| a.r_in >= a.r_out);
    let mut rng = rng_for(5, 7);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..5 {
        let mut bits: Vec<bool> = (0..64).map(|_| rng.random_bool(0.1)).collect();
        bits[rng.random_range(0..64)] = true;
        let mask = TileMask::from_bits(TileGrid::default(), bits).unwrap();
        let rings = ring_oracle(&mask);
        for scale in [1.5, 2.0, 4.0] {
            for a in &actions {
                let want: Vec<f64> = rings
                    .iter()
                    .map(|&d| match d {
                        0 => a.r_in,
                        1 => a.r_out,
                        j => closest_rung(ladder.rungs(), a.r_out / f64::powi(scale, j as i32 - 1)),
                    })
                    .collect();
                mismatches += (pyramid_assign(a, &mask, &ladder, scale).unwrap() != want) as usize;
                checked += 1;
            }
        }
    }
    // One predicted tile; two columns away is the second ring: 8 / 2 = 4 snaps to 5.
    let mut single = TileMask::empty(TileGrid::default());
    single.set(3, 3, true);
    let rates = pyramid_assign(&BitrateAction { r_in: 16.0, r_out: 8.0 }, &single, &ladder, 2.0).unwrap();
    let snap = rates[3 * 8 + 5];
    let pass = valid && mismatches == 0 && snap == 5.0;
    verdict(
        7,
        "action space and pyramid",
        pass,
        &format!("{} actions, {checked} allocations, {mismatches} mismatches, 8/2 snaps to {snap}", actions.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_ppo_bandit() {
    let pool = [
        QoEPreference::new(7.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0).unwrap(),
        QoEPreference::new(1.0 / 9.0, 1.0 / 9.0, 7.0 / 9.0).unwrap(),
    ];
    let cfg = TrainConfig {
        iterations: 150,
        prefs_per_iteration: 64,
        identifier_steps: 20,
        identifier_lr: 1e-3,
        agent: AgentConfig {
            filters: 4,
            hidden1: 16,
            hidden2: 8,
            pref_width: 8,
            residual: true,
            actions: 2,
        },
        identifier: IdentifierConfig {
            filters: 4,
            hidden1: 16,
            hidden2: 8,
            actions: 2,
        },
        ppo: PpoConfig {
            minibatch: 16,
            ..PpoConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    let mut passed = 0;
    for seed in 1..=5u64 {
        let mut envs: Vec<Box<dyn Environment>> =
            vec![Box::new(PreferenceBandit::new(vec![[1.0, 0.0, 1.0], [0.3, 0.0, 0.0]], 1))];
        let run = run_training(cfg.clone(), &pool, &mut envs, seed).unwrap();
        let steps: usize = run.log.iter().map(|l| l.env_steps).sum();
        let prob = |arm: usize, pref: QoEPreference| {
            let obs = AgentObservation {
                state: StateFeatures {
                    vectors: vec![vec![1.0]],
                    scalars: vec![1.0],
                },
                pref,
            };
            run.agent.policy(&obs).unwrap().probs[arm]
        };
        let (a, b) = (prob(0, pool[0]), prob(1, pool[1]));
        let ok = a > 0.9 && b > 0.9 && steps <= 10_000;
        passed += ok as usize;
        lines.push(format!("seed {seed}: {a:.3}/{b:.3} in {steps} steps"));
    }
    let pass = passed >= 4;
    verdict(8, "PPO bandit", pass, &format!("{passed}/5 seeds converged ({})", lines.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 9, 10

/// Low-bandwidth sessions: means spread over 0.6 to 2 Mbps with bursty
/// noise, focus viewers, linear-extrapolation prediction.
fn bursty_sessions(seed: u64, n: usize) -> Vec<Box<dyn Environment>> {
    let grid = TileGrid::default();
    let viewers = PatternFamily::focus().generate(n, 30.0, 5.0, seed, &grid);
    (0..n)
        .map(|i| {
            let s = seed * 100 + i as u64;
            let manifest = VideoManifest::synthetic(grid, BitrateLadder::default(), 30, 1.0, s).unwrap();
            let mean = 0.6 + 1.4 * i as f64 / (n - 1) as f64;
            let bw = BandwidthProfile::Bursty { mean, sigma: 0.3 }.generate(300.0, 1.0, s).unwrap();
            let env = StreamingEnv::new(EnvConfig::default(), manifest, bw).unwrap();
            let session =
                StreamingSession::new(env, &viewers[i], &LinearExtrapolation { window: 5 }, &FieldOfView::default())
                    .unwrap();
            Box::new(session) as Box<dyn Environment>
        })
        .collect()
}

struct SeedResult {
    /// Per train preference: mean r_in and mean rebuffer seconds per episode.
    r_in: [f64; 4],
    rebuffer: [f64; 4],
    qoe_held_out: f64,
    qoe_held_out_ablated: f64,
    mse_trained: f64,
    mse_held_out: f64,
    mse_baseline: f64,
    mse_baseline_held_out: f64,
    env_steps: usize,
}

struct Study {
    seeds: Vec<SeedResult>,
    secs: f64,
}

fn by_pref(rows: &[EvalRow], pref: usize, f: fn(&EvalRow) -> f64) -> f64 {
    let sel: Vec<f64> = rows.iter().filter(|r| r.pref_index == pref).map(f).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn mean_of(rows: &[EvalRow], f: fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let pool = preference_pool();
        let cfg = TrainConfig {
            iterations: 1600,
            alpha: 0.5,
            agent: AgentConfig::small(),
            identifier: IdentifierConfig::small(),
            ppo: PpoConfig {
                minibatch: 64,
                ..PpoConfig::default()
            },
            identifier_lr: 1e-3,
            identifier_steps: 5,
            ..TrainConfig::default()
        };
        // Squared error of always answering the train-pool mean.
        let centre: Vec<f64> =
            (0..3).map(|k| pool.train.iter().map(|p| p.as_array()[k]).sum::<f64>() / pool.train.len() as f64).collect();
        let constant_mse = |prefs: &[QoEPreference]| {
            prefs
                .iter()
                .map(|p| p.as_array().iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0)
                .sum::<f64>()
                / prefs.len() as f64
        };
        let mse_baseline = constant_mse(&pool.train);
        let mse_baseline_held_out = constant_mse(&pool.held_out);

        let seeds = (1..=3u64)
            .map(|seed| {
                let mut test = bursty_sessions(seed + 1000, 4);
                let full = {
                    let mut train_envs = bursty_sessions(seed, 8);
                    run_training(cfg.clone(), &pool.train, &mut train_envs, seed).unwrap()
                };
                let ablated = {
                    let mut train_envs = bursty_sessions(seed, 8);
                    let layout = train_envs[0].layout();
                    let mut run = TrainingRun::new(cfg.ablated(), layout, seed).unwrap();
                    run.train_until(cfg.iterations, &pool.train, &mut train_envs).unwrap();
                    run
                };
                let trained = run_evaluation(&full.agent, &pool.train, &mut test, Some(&full.identifier), 0).unwrap();
                let held = run_evaluation(&full.agent, &pool.held_out, &mut test, Some(&full.identifier), 0).unwrap();
                let held_abl =
                    run_evaluation(&ablated.agent, &pool.held_out, &mut test, Some(&ablated.identifier), 0).unwrap();
                let mut r_in = [0.0; 4];
                let mut rebuffer = [0.0; 4];
                for p in 0..4 {
                    r_in[p] = by_pref(&trained, p, |r| r.r_in_mean);
                    rebuffer[p] = by_pref(&trained, p, |r| r.rebuffer_total);
                }
                SeedResult {
                    r_in,
                    rebuffer,
                    qoe_held_out: mean_of(&held, |r| r.qoe_mean),
                    qoe_held_out_ablated: mean_of(&held_abl, |r| r.qoe_mean),
                    mse_trained: mean_of(&trained, |r| r.identifier_mse.unwrap()),
                    mse_held_out: mean_of(&held, |r| r.identifier_mse.unwrap()),
                    mse_baseline,
                    mse_baseline_held_out,
                    env_steps: full.log.iter().map(|l| l.env_steps).sum(),
                }
            })
            .collect();
        Study {
            seeds,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c09_preferences_steer_the_policy() {
    let s = study();
    // Train pool order: quality-heavy, variation-heavy, stall-heavy, balanced.
    let col = |f: fn(&SeedResult) -> f64| median(&s.seeds.iter().map(f).collect::<Vec<_>>());
    let rin_q = col(|r| r.r_in[0]);
    let rin_s = col(|r| r.r_in[2]);
    let reb_q = col(|r| r.rebuffer[0]);
    let reb_s = col(|r| r.rebuffer[2]);
    let steps = s.seeds.iter().map(|r| r.env_steps).max().unwrap();
    let pass = rin_q > rin_s && reb_q > reb_s && steps <= 200_000;
    verdict(
        9,
        "preferences steer the policy",
        pass,
        &format!(
            "median r_in {rin_q:.2} vs {rin_s:.2} Mbps, median rebuffer {reb_q:.2} vs {reb_s:.2} s (quality vs stall preference); {steps} env steps per run; study {:.0} s",
            s.secs
        ),
    );
    assert!(pass);
}

#[test]
fn c10_identifier_and_held_out_preferences() {
    let s = study();
    let col = |f: fn(&SeedResult) -> f64| median(&s.seeds.iter().map(f).collect::<Vec<_>>());
    let qoe = col(|r| r.qoe_held_out);
    let qoe_abl = col(|r| r.qoe_held_out_ablated);
    let mse = col(|r| r.mse_trained);
    let base = col(|r| r.mse_baseline);
    let mse_held = col(|r| r.mse_held_out);
    let base_held = col(|r| r.mse_baseline_held_out);
    let pass = mse < base && qoe >= qoe_abl;
    verdict(
        10,
        "identifier and held-out preferences",
        pass,
        &format!(
            "median identifier MSE {mse:.4} vs constant {base:.4} on held-out traces (held-out preferences: {mse_held:.4} vs {base_held:.4}); held-out QoE {qoe:.3} vs {qoe_abl:.3} without the identifier reward"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

fn tilestream(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_tilestream")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn c11_cli_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    tilestream(&["gen-traces", "viewport", "--users", "6", "--duration", "20", "--seed", "3", "--out", &d("vp/focus.csv")]);
    tilestream(&["gen-traces", "bandwidth", "--generator", "bursty", "--duration", "120", "--count", "2", "--seed", "4", "--out", &d("bw")]);
    tilestream(&["gen-traces", "manifest", "--duration", "10", "--count", "2", "--seed", "5", "--out", &d("man")]);
    std::fs::write(d("run.toml"), "iterations = 3\nnetwork = \"small\"\nminibatch = 32\n").unwrap();

    let mut compared = Vec::new();
    for run in ["a", "b"] {
        let vp = d(&format!("{run}/vp"));
        tilestream(&[
            "train-vp", "--traces", &d("vp"), "--epochs", "2", "--steps-per-epoch", "3", "--batch-size", "16",
            "--seed", "7", "--out", &vp,
        ]);
        tilestream(&[
            "eval-vp", "--ckpt", &format!("{vp}/model.json"), "--traces", &d("vp"), "--out",
            &d(&format!("{run}/acc.csv")),
        ]);
        let abr = d(&format!("{run}/abr"));
        tilestream(&[
            "train-abr", "--config", &d("run.toml"), "--manifests", &d("man"), "--bandwidth", &d("bw"),
            "--viewports", &d("vp"), "--vp-ckpt", &d("a/vp/model.json"), "--seed", "7", "--out", &abr,
        ]);
        tilestream(&[
            "eval-abr", "--ckpt", &abr, "--split", "unseen", "--report", &d(&format!("{run}/report.csv")),
            "--episodes", &d(&format!("{run}/episodes.csv")),
        ]);
    }
    let files = [
        "vp/model.json",
        "vp/train_log.csv",
        "acc.csv",
        "abr/agent.json",
        "abr/identifier.json",
        "abr/training_log.csv",
        "abr/diagnostics.csv",
        "report.csv",
        "episodes.csv",
    ];
    let mut differing = Vec::new();
    for f in files {
        let (a, b) = (dir.path().join("a").join(f), dir.path().join("b").join(f));
        if !same_bytes(&a, &b) {
            differing.push(f);
        }
        compared.push(f);
    }
    let pass = differing.is_empty();
    verdict(
        11,
        "CLI reproducibility",
        pass,
        &format!("{} files compared byte for byte, differing: {differing:?}", compared.len()),
    );
    assert!(pass);
}
