//! PNG rendering of the CSV outputs. The chart type follows the header.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;
use tilestream_core::report::{read_eval_csv, summarize_eval, PreferenceSummary};

const FONT_PATHS: [&str; 5] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers the first system font found. Without one, charts are drawn
/// without any text.
fn has_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let path = std::env::var("TILESTREAM_FONT").ok();
        for p in path.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .enumerate()
            .map(|(i, r)| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| anyhow!("row {}: {e}", i + 1))
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Option<Result<Vec<f64>>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.numbers(idx))
    }

    fn numbers(&self, idx: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[idx]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("row {}: column {} is not numeric", i + 1, self.header[idx]))
            })
            .collect()
    }
}

/// Renders `input` to `output`; returns false when the file has no rows.
pub fn plot(input: &Path, output: &Path) -> Result<bool> {
    let t = Table::read(input)?;
    if t.rows.is_empty() {
        return Ok(false);
    }
    let h: Vec<&str> = t.header.iter().map(String::as_str).collect();
    match h.as_slice() {
        ["step", "seconds", "ensemble", ..] => {
            let xs = t.column("seconds").unwrap()?;
            let series = h[2..]
                .iter()
                .map(|n| Ok((n.to_string(), t.column(n).unwrap()?)))
                .collect::<Result<Vec<_>>>()?;
            lines(output, "IoU vs horizon", "horizon (s)", "mean IoU", &xs, &series, Some((0.0, 1.0)))
        }
        ["iter", "alpha", ..] => {
            let xs = t.column("iter").unwrap()?;
            let mut names = vec!["mean_reward", "mean_qoe"];
            names.extend(h.iter().filter(|n| n.starts_with("qoe_pref")));
            let series = names
                .iter()
                .map(|n| Ok((n.to_string(), t.column(n).unwrap()?)))
                .collect::<Result<Vec<_>>>()?;
            lines(output, "training", "iteration", "per-chunk value", &xs, &series, None)
        }
        ["policy", "pref_index", "lambda1", "lambda2", "lambda3", "env", ..] => {
            let rows = read_eval_csv(std::fs::File::open(input)?)?;
            bars(output, &summarize_eval(&rows))
        }
        ["policy", "pref_index", "lambda1", "lambda2", "lambda3", "episodes", ..] => {
            let mut rdr = csv::Reader::from_path(input)?;
            let rows = rdr
                .deserialize::<PreferenceSummary>()
                .enumerate()
                .map(|(i, r)| r.map_err(|e| anyhow!("row {}: {e}", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            bars(output, &rows)
        }
        _ => {
            // Generic: first column on x, every other numeric column a line.
            let xs = t.numbers(0)?;
            let series: Vec<(String, Vec<f64>)> = (1..h.len())
                .filter_map(|i| t.numbers(i).ok().map(|v| (h[i].to_string(), v)))
                .collect();
            if series.is_empty() {
                bail!("{} has no numeric columns to plot", input.display());
            }
            lines(output, "", h[0], "", &xs, &series, None)
        }
    }?;
    Ok(true)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

fn lines(
    out: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    xs: &[f64],
    series: &[(String, Vec<f64>)],
    y_fixed: Option<(f64, f64)>,
) -> Result<()> {
    let text = has_font();
    let root = BitMapBackend::new(out, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let x = range(xs.iter().copied());
    let y = y_fixed.unwrap_or_else(|| range(series.iter().flat_map(|s| s.1.iter().copied())));
    let mut b = ChartBuilder::on(&root);
    b.margin(15);
    if text {
        b.caption(title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(60);
    }
    let mut chart = b.build_cartesian_2d(x.0..x.1, y.0..y.1).map_err(draw_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x_desc).y_desc(y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).filter(|p| p.1.is_finite()).collect();
        let s = chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(draw_err)?;
        if text {
            s.label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Per-preference bars: total QoE followed by the three weighted terms.
fn bars(out: &Path, rows: &[PreferenceSummary]) -> Result<()> {
    let text = has_font();
    let names = ["QoE", "λ1·q1", "−λ2·q2", "−λ3·q3"];
    let values: Vec<[f64; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.qoe_mean,
                r.lambda1 * r.q1_mean,
                -r.lambda2 * r.q2_mean,
                -r.lambda3 * r.q3_mean,
            ]
        })
        .collect();
    let root = BitMapBackend::new(out, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let y = range(values.iter().flatten().copied().chain([0.0]));
    let mut b = ChartBuilder::on(&root);
    b.margin(15);
    if text {
        b.caption("QoE per preference", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(60);
    }
    let groups = rows.len() as f64;
    let mut chart = b.build_cartesian_2d(0.0..groups, y.0..y.1).map_err(draw_err)?;
    let labels: Vec<String> = rows
        .iter()
        .map(|r| format!("{} #{} ({:.2},{:.2},{:.2})", r.policy, r.pref_index, r.lambda1, r.lambda2, r.lambda3))
        .collect();
    let fmt = |v: &f64| {
        let i = v.floor() as usize;
        if (v - v.floor() - 0.5).abs() < 1e-9 && i < labels.len() {
            labels[i].clone()
        } else {
            String::new()
        }
    };
    let mut mesh = chart.configure_mesh();
    mesh.disable_x_mesh();
    if text {
        mesh.x_labels(2 * rows.len() + 1).x_label_formatter(&fmt).y_desc("per-chunk value");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;
    let width = 0.8 / names.len() as f64;
    for (k, name) in names.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let s = chart
            .draw_series(values.iter().enumerate().map(|(g, v)| {
                let x0 = g as f64 + 0.1 + k as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, v[k])], color.filled())
            }))
            .map_err(draw_err)?;
        if text {
            s.label(*name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}
