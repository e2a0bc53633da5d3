//! Hand-rolled SVG figures: one dark sharpness curve per run, loss on a
//! light secondary axis, dotted stability-threshold lines, legend keyed by
//! (eta, epsilon).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use eoslab_core::optim::Variant;
use eoslab_core::train::StepRecord;

use crate::rundir;

const DARK: [&str; 6] = [
    "#1b4f72", "#7b241c", "#145a32", "#6c3483", "#873600", "#17202a",
];
const LIGHT: [&str; 6] = [
    "#a9cce3", "#e6b0aa", "#a9dfbf", "#d7bde2", "#edbb99", "#aeb6bf",
];

const W: f64 = 960.0;
const H: f64 = 560.0;
const ML: f64 = 72.0;
const MR: f64 = 72.0;
const MT: f64 = 40.0;
const MB: f64 = 52.0;

/// One curve bundle on the figure.
pub struct PlotRun {
    /// Legend text, e.g. "eta=0.05, eps=16".
    pub name: String,
    pub records: Vec<StepRecord>,
    pub variant: Variant,
}

impl PlotRun {
    /// The sharpness series the run is judged by (preconditioned for Adam).
    fn series(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| !r.diverged)
            .filter_map(|r| match self.variant {
                Variant::Adam => r.precond_sharpness.map(|v| (r.step as f64, v)),
                _ => r.sharpness.is_finite().then_some((r.step as f64, r.sharpness)),
            })
            .collect()
    }

    fn losses(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| !r.diverged && r.loss.is_finite())
            .map(|r| (r.step as f64, r.loss))
            .collect()
    }
}

fn sig4(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let digits = (3 - mag).max(0) as usize;
    let s = format!("{v:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn polyline(points: &[(f64, f64)], color: &str, width: f64, extra: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{extra} points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Renders the figure; pure string assembly so tests can inspect it.
pub fn svg_string(runs: &[PlotRun]) -> Result<String> {
    if runs.is_empty() {
        bail!("nothing to plot");
    }
    let mut x_max: f64 = 1.0;
    let mut sharp_max: f64 = 0.0;
    let mut loss_max: f64 = 0.0;
    let mut thresholds: Vec<f64> = Vec::new();
    for run in runs {
        for &(x, y) in &run.series() {
            x_max = x_max.max(x);
            sharp_max = sharp_max.max(y);
        }
        for &(x, y) in &run.losses() {
            x_max = x_max.max(x);
            loss_max = loss_max.max(y);
        }
        if let Some(r) = run.records.first() {
            if !thresholds.iter().any(|&t| t == r.threshold) {
                thresholds.push(r.threshold);
            }
        }
    }
    for &t in &thresholds {
        sharp_max = sharp_max.max(t);
    }
    let sharp_max = sharp_max.max(1e-12) * 1.05;
    let loss_max = loss_max.max(1e-12) * 1.05;

    let px = |x: f64| ML + x / x_max * (W - ML - MR);
    let py_sharp = |y: f64| H - MB - y / sharp_max * (H - MT - MB);
    let py_loss = |y: f64| H - MB - y / loss_max * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{0}\" y1=\"{MT}\" x2=\"{0}\" y2=\"{1}\" stroke=\"#808080\"/>\n",
        W - MR,
        H - MB
    ));
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let x = ML + f * (W - ML - MR);
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            sig4(f * x_max)
        ));
        let y = H - MB - f * (H - MT - MB);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            sig4(f * sharp_max)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y:.2}\" text-anchor=\"start\" fill=\"#808080\">{}</text>\n",
            W - MR + 8.0,
            sig4(f * loss_max)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">step</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{MT}\" text-anchor=\"start\">sharpness</text>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{MT}\" text-anchor=\"end\" fill=\"#808080\">loss</text>\n",
        W - 8.0
    ));

    // Dotted threshold lines, one per distinct value.
    for &t in &thresholds {
        let y = py_sharp(t);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.2}\" x2=\"{0}\" y2=\"{y:.2}\" stroke=\"#404040\" \
             stroke-dasharray=\"5 4\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{0}\" y=\"{1:.2}\" text-anchor=\"end\" fill=\"#404040\">thr {2}</text>\n",
            W - MR - 6.0,
            y - 4.0,
            sig4(t)
        ));
    }

    // Curves: light loss underneath, dark sharpness on top.
    for (i, run) in runs.iter().enumerate() {
        let pts: Vec<(f64, f64)> = run
            .losses()
            .iter()
            .map(|&(x, y)| (px(x), py_loss(y)))
            .collect();
        svg.push_str(&polyline(&pts, LIGHT[i % LIGHT.len()], 1.5, ""));
    }
    for (i, run) in runs.iter().enumerate() {
        let pts: Vec<(f64, f64)> = run
            .series()
            .iter()
            .map(|&(x, y)| (px(x), py_sharp(y)))
            .collect();
        svg.push_str(&polyline(&pts, DARK[i % DARK.len()], 2.0, ""));
    }

    // Legend.
    for (i, run) in runs.iter().enumerate() {
        let y = MT + 16.0 + i as f64 * 16.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{y:.2}\" x2=\"{1}\" y2=\"{y:.2}\" stroke=\"{2}\" stroke-width=\"2\"/>\n",
            ML + 10.0,
            ML + 34.0,
            DARK[i % DARK.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{0}\" y=\"{1:.2}\">{2}</text>\n",
            ML + 40.0,
            y + 4.0,
            run.name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the figure for a set of runs.
pub fn write_svg_plot(runs: &[PlotRun], path: &Path) -> Result<()> {
    let svg = svg_string(runs)?;
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads every run under `root` and plots them into `out`.
pub fn plot_runs_dir(root: &Path, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for dir in rundir::list_run_dirs(root)? {
        let cfg = rundir::read_config(&dir)?;
        let summary = rundir::read_summary(&dir)?;
        let records = rundir::read_metrics(&dir)?;
        let eps = summary
            .privacy
            .and_then(|p| p.eps_budgeted)
            .map(|e| format!("eps={e}"))
            .unwrap_or_else(|| "non-private".into());
        runs.push(PlotRun {
            name: format!(
                "{} eta={} {}",
                cfg.optimizer.variant.as_str(),
                cfg.optimizer.eta,
                eps
            ),
            records,
            variant: cfg.optimizer.variant.to_core(),
        });
    }
    write_svg_plot(&runs, out)
}
