use tilestream_core::orchestrator::{write_eval_csv, EvalRow};
use tilestream_core::report::*;
use tilestream_core::simenv::{write_episode_log, EpisodeRecord};

fn rec(chunk: usize, r_in: f64, q1: f64, q2: f64, q3: f64, total: f64) -> EpisodeRecord {
    EpisodeRecord {
        chunk,
        r_in,
        r_out: 1.0,
        l_c: 0.5,
        q1,
        q2,
        q3,
        qoe_total: total,
        buffer: 1.0,
    }
}

fn fixture() -> Vec<EpisodeRecord> {
    vec![
        rec(0, 5.0, 5.0, 0.0, 0.0, 3.0),
        rec(1, 8.0, 8.0, 3.0, 0.5, 4.0),
        rec(0, 16.0, 16.0, 1.0, 2.0, -1.0),
        rec(0, 35.0, 30.0, 2.0, 0.0, 10.0),
        rec(1, 35.0, 32.0, 2.0, 1.0, 11.0),
        rec(2, 1.0, 1.0, 31.0, 0.0, -6.0),
    ]
}

#[test]
fn three_episode_fixture_matches_hand_sums() {
    let mut buf = Vec::new();
    write_episode_log(&fixture(), &mut buf).unwrap();
    let back = read_episode_log(buf.as_slice()).unwrap();
    let s = summarize_episodes(&back);
    assert_eq!(s.len(), 3);
    assert_eq!(s.iter().map(|e| e.chunks).collect::<Vec<_>>(), [2, 1, 3]);
    // Episode 0: qoe (3+4)/2, q1 (5+8)/2, stall 0.5.
    assert!((s[0].qoe_mean - 3.5).abs() < 1e-12);
    assert!((s[0].q1_mean - 6.5).abs() < 1e-12);
    assert!((s[0].rebuffer_total - 0.5).abs() < 1e-12);
    assert!((s[1].qoe_mean + 1.0).abs() < 1e-12);
    // Episode 2: qoe 15/3, q2 35/3, r_in 71/3.
    assert!((s[2].qoe_mean - 5.0).abs() < 1e-12);
    assert!((s[2].q2_mean - 35.0 / 3.0).abs() < 1e-12);
    assert!((s[2].r_in_mean - 71.0 / 3.0).abs() < 1e-12);
    assert!((s[2].rebuffer_total - 1.0).abs() < 1e-12);
}

#[test]
fn single_episode_gives_one_row() {
    let s = summarize_episodes(&fixture()[..2]);
    assert_eq!(s.len(), 1);
    let mut out = Vec::new();
    write_episode_summary(&s, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
}

#[test]
fn empty_logs_give_header_only() {
    let mut buf = Vec::new();
    write_episode_log(&[], &mut buf).unwrap();
    let back = read_episode_log(buf.as_slice()).unwrap();
    assert!(back.is_empty());
    let mut out = Vec::new();
    write_episode_summary(&summarize_episodes(&back), &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().trim(), EPISODE_SUMMARY_HEADER.join(","));

    let mut e = Vec::new();
    write_eval_csv(&[], &mut e).unwrap();
    let rows = read_eval_csv(e.as_slice()).unwrap();
    let mut out = Vec::new();
    write_preference_summary(&summarize_eval(&rows), &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().trim(), PREFERENCE_SUMMARY_HEADER.join(","));
}

#[test]
fn malformed_rows_are_named() {
    let text = "chunk,r_in,r_out,l_c,q1,q2,q3,qoe_total,buffer\n0,1,1,1,1,0,0,1,1\n1,1,1,oops,1,0,0,1,1\n";
    let err = read_episode_log(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
    let text = "chunk,r_in,r_out,l_c,q1,q2,q3,qoe_total,buffer\n0,1,1,1,1,0,0,NaN,1\n";
    assert!(read_episode_log(text.as_bytes()).unwrap_err().to_string().contains("row 1"));
}

fn eval_row(pref: usize, qoe: f64, stall: f64) -> EvalRow {
    EvalRow {
        policy: "agent".into(),
        pref_index: pref,
        lambda1: 1.0 / 3.0,
        lambda2: 1.0 / 3.0,
        lambda3: 1.0 / 3.0,
        env: "e".into(),
        chunks: 10,
        qoe_mean: qoe,
        q1_mean: qoe + 1.0,
        q2_mean: 1.0,
        rebuffer_total: stall,
        r_in_mean: 8.0,
        identifier_mse: None,
    }
}

#[test]
fn eval_summary_groups_by_preference() {
    let rows = vec![eval_row(0, 1.0, 0.0), eval_row(1, 5.0, 2.0), eval_row(0, 3.0, 1.0), eval_row(0, 8.0, 0.5)];
    let mut buf = Vec::new();
    write_eval_csv(&rows, &mut buf).unwrap();
    let back = read_eval_csv(buf.as_slice()).unwrap();
    assert_eq!(back, rows);
    let s = summarize_eval(&back);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].episodes, 3);
    assert!((s[0].qoe_mean - 4.0).abs() < 1e-12);
    assert!((s[0].qoe_p50 - 3.0).abs() < 1e-12);
    assert!((s[0].qoe_p10 - 1.4).abs() < 1e-12);
    assert!((s[0].rebuffer_mean - 0.5).abs() < 1e-12);
    assert!((s[0].q3_mean - 0.05).abs() < 1e-12);
    assert_eq!(s[1].episodes, 1);
}
