//! Report rendering: aggregates the results file into plain-text grids
//! and static SVG plots. Rendering is a pure function of the files under
//! the output directory — identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};

use crate::experiment::AnchoringArtifact;
use crate::results::{read_results, ExperimentResult};

const GRID_METRICS: [&str; 5] = [
    "acc",
    "asr",
    "flagged_clean",
    "flagged_triggered",
    "anchor_auc",
];

pub fn render_report(out: &Path) -> anyhow::Result<()> {
    let results_path = out.join("results.jsonl");
    if !results_path.exists() {
        bail!("{} does not exist; run eval first", results_path.display());
    }
    let rows = read_results(&results_path)?;
    if rows.is_empty() {
        bail!("{} holds no result rows", results_path.display());
    }
    let report_dir = out.join("report");
    std::fs::create_dir_all(&report_dir)?;

    let mut text = String::new();
    writeln!(text, "experiment report")?;
    writeln!(text, "=================")?;
    writeln!(text, "rows: {} from {}", rows.len(), results_path.display())?;
    writeln!(text)?;

    render_metric_grid(&mut text, &rows)?;
    render_sweep(&mut text, &report_dir, &rows, "sweepk-k", "injected nodes", "sweep_k.svg")?;
    render_sweep(&mut text, &report_dir, &rows, "sweepm-m", "suffix length", "sweep_m.svg")?;
    render_persistence(&mut text, &rows)?;
    render_anchoring(&mut text, out, &report_dir)?;

    let report_path = report_dir.join("report.txt");
    std::fs::write(&report_path, &text)?;
    println!("{text}");
    println!("written to {}", report_path.display());
    Ok(())
}

/// attack × setting × defense × goal grid with one column per metric and
/// "-" where an arm produced no value.
fn render_metric_grid(text: &mut String, rows: &[ExperimentResult]) -> anyhow::Result<()> {
    type Key = (String, String, String, String);
    let mut grid: BTreeMap<Key, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        let Some(metric) = GRID_METRICS.iter().find(|m| **m == row.metric) else {
            continue;
        };
        let key = (
            row.goal.clone(),
            row.attack.clone(),
            row.setting.clone(),
            row.defense.clone(),
        );
        grid.entry(key).or_default().entry(metric).or_default().push(row.value);
    }
    if grid.is_empty() {
        return Ok(());
    }
    writeln!(text, "metric grid (mean over result rows; \"-\" = no data)")?;
    let header: Vec<String> = ["goal", "attack", "setting", "defense"]
        .into_iter()
        .map(str::to_string)
        .chain(GRID_METRICS.iter().map(|m| m.to_string()))
        .collect();
    let mut table: Vec<Vec<String>> = vec![header];
    for ((goal, attack, setting, defense), metrics) in &grid {
        let mut line = vec![goal.clone(), attack.clone(), setting.clone(), defense.clone()];
        for metric in GRID_METRICS {
            line.push(match metrics.get(metric) {
                Some(vals) => {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    if vals.len() > 1 {
                        format!("{mean:.3} (n={})", vals.len())
                    } else {
                        format!("{mean:.3}")
                    }
                }
                None => "-".into(),
            });
        }
        table.push(line);
    }
    write_table(text, &table)?;
    writeln!(text)?;
    Ok(())
}

/// Sweep curves (one point per swept value, averaged over seeds), as text
/// and as an SVG line chart.
fn render_sweep(
    text: &mut String,
    report_dir: &Path,
    rows: &[ExperimentResult],
    tag: &str,
    x_label: &str,
    file: &str,
) -> anyhow::Result<()> {
    let mut by_value: BTreeMap<usize, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        let Some(pos) = row.run_id.find(tag) else { continue };
        let digits: String = row.run_id[pos + tag.len()..]
            .chars()
            .take_while(char::is_ascii_digit)
            .collect();
        let Ok(value) = digits.parse::<usize>() else { continue };
        if row.metric == "asr" || row.metric == "acc" {
            by_value
                .entry(value)
                .or_default()
                .entry(if row.metric == "asr" { "asr" } else { "acc" })
                .or_default()
                .push(row.value);
        }
    }
    if by_value.is_empty() {
        return Ok(());
    }
    writeln!(text, "sweep over {x_label}")?;
    let mut table = vec![vec![x_label.to_string(), "asr".into(), "acc".into()]];
    let mut asr_curve = Vec::new();
    let mut acc_curve = Vec::new();
    for (value, metrics) in &by_value {
        let cell = |name: &str, curve: &mut Vec<(f64, f64)>| -> String {
            match metrics.get(name) {
                Some(vals) => {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    curve.push((*value as f64, mean));
                    format!("{mean:.3}")
                }
                None => "-".into(),
            }
        };
        let asr = cell("asr", &mut asr_curve);
        let acc = cell("acc", &mut acc_curve);
        table.push(vec![value.to_string(), asr, acc]);
    }
    write_table(text, &table)?;
    let mut series: Vec<(&str, &[(f64, f64)])> = Vec::new();
    if !asr_curve.is_empty() {
        series.push(("asr", asr_curve.as_slice()));
    }
    if !acc_curve.is_empty() {
        series.push(("acc", acc_curve.as_slice()));
    }
    let svg = line_plot(
        &format!("attack success vs {x_label}"),
        x_label,
        "rate",
        &series,
    );
    let path = report_dir.join(file);
    std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    writeln!(text, "plot: report/{file}")?;
    writeln!(text)?;
    Ok(())
}

fn render_persistence(text: &mut String, rows: &[ExperimentResult]) -> anyhow::Result<()> {
    // Arms look like "...-persist-g0.1-before".
    let mut arms: BTreeMap<(String, String), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        let Some(pos) = row.run_id.find("persist-g") else { continue };
        let tail = &row.run_id[pos + "persist-g".len()..];
        let Some((gamma, phase)) = tail.rsplit_once('-') else { continue };
        if phase != "before" && phase != "after" {
            continue;
        }
        if row.metric == "asr" || row.metric == "acc" {
            arms.entry((gamma.to_string(), phase.to_string()))
                .or_default()
                .entry(if row.metric == "asr" { "asr" } else { "acc" })
                .or_default()
                .push(row.value);
        }
    }
    if arms.is_empty() {
        return Ok(());
    }
    writeln!(text, "persistence of the tampered module under clean fine-tuning")?;
    let mut table = vec![vec![
        "gamma".to_string(),
        "phase".into(),
        "asr".into(),
        "acc".into(),
    ]];
    for ((gamma, phase), metrics) in &arms {
        let cell = |name: &str| -> String {
            match metrics.get(name) {
                Some(vals) => {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    format!("{mean:.3}")
                }
                None => "-".into(),
            }
        };
        table.push(vec![gamma.clone(), phase.clone(), cell("asr"), cell("acc")]);
    }
    write_table(text, &table)?;
    writeln!(text)?;
    Ok(())
}

fn render_anchoring(text: &mut String, out: &Path, report_dir: &Path) -> anyhow::Result<()> {
    let path = out.join("anchoring.json");
    if !path.exists() {
        return Ok(());
    }
    let artifact: AnchoringArtifact = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    writeln!(text, "prompt-condition factorial (command: {})", artifact.command)?;
    let mut table = vec![vec![
        "query text".to_string(),
        "prompt".into(),
        "refusal".into(),
        "acc".into(),
        "margin mean".into(),
        "n".into(),
    ]];
    for cell in &artifact.cells {
        let margin = if cell.margins.is_empty() {
            "-".to_string()
        } else {
            let mean = cell.margins.iter().sum::<f64>() / cell.margins.len() as f64;
            format!("{mean:.3}")
        };
        table.push(vec![
            if cell.text_injected { "injected" } else { "clean" }.into(),
            cell.condition.clone(),
            format!("{:.3}", cell.refusal_rate),
            format!("{:.3}", cell.accuracy),
            margin,
            cell.count.to_string(),
        ]);
    }
    write_table(text, &table)?;

    let margin_sets: Vec<(&str, &[f64])> = artifact
        .cells
        .iter()
        .filter(|c| c.text_injected && !c.margins.is_empty())
        .map(|c| (c.condition.as_str(), c.margins.as_slice()))
        .collect();
    if !margin_sets.is_empty() {
        let svg = histogram("anchoring margins by prompt condition", "margin", &margin_sets, 12);
        let p = report_dir.join("anchor_margins.svg");
        std::fs::write(&p, svg)?;
        writeln!(text, "plot: report/anchor_margins.svg")?;
    }
    if !artifact.strips.is_empty() {
        let svg = similarity_strips("per-position similarity to the final state", &artifact.strips);
        let p = report_dir.join("similarity_strips.svg");
        std::fs::write(&p, svg)?;
        writeln!(text, "plot: report/similarity_strips.svg")?;
    }
    writeln!(text)?;
    Ok(())
}

fn write_table(text: &mut String, rows: &[Vec<String>]) -> anyhow::Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    for (r, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:<width$}", width = widths[i]);
        }
        writeln!(text, "{}", line.trim_end())?;
        if r == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols.saturating_sub(1));
            writeln!(text, "{}", "-".repeat(total))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.0} {h:.0}\" \
         font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n"
    );
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn axes(out: &mut String, title: &str, x_label: &str, y_label: &str, xr: (f64, f64), yr: (f64, f64)) {
    let (x0, x1) = (MARGIN_L, PLOT_W - MARGIN_R);
    let (y0, y1) = (PLOT_H - MARGIN_B, MARGIN_T);
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        PLOT_W / 2.0,
        xml_escape(title)
    );
    let _ = write!(
        out,
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"#333\"/>\n\
         <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"#333\"/>\n"
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = xr.0 + t * (xr.1 - xr.0);
        let yv = yr.0 + t * (yr.1 - yr.0);
        let xp = scale(xv, xr.0, xr.1, x0, x1);
        let yp = scale(yv, yr.0, yr.1, y0, y1);
        let _ = write!(
            out,
            "<line x1=\"{xp:.1}\" y1=\"{y0:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n\
             <text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.2}</text>\n",
            y0 + 4.0,
            y0 + 16.0
        );
        let _ = write!(
            out,
            "<line x1=\"{:.1}\" y1=\"{yp:.1}\" x2=\"{x0:.1}\" y2=\"{yp:.1}\" stroke=\"#333\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.2}</text>\n",
            x0 - 4.0,
            x0 - 7.0,
            yp + 4.0
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        PLOT_H - 10.0,
        xml_escape(x_label)
    );
    let _ = write!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(y_label)
    );
}

/// A multi-series line chart over (x, y) points.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let mut out = String::new();
    svg_open(&mut out, PLOT_W, PLOT_H);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        out.push_str("<text x=\"240\" y=\"160\" text-anchor=\"middle\">no data</text>\n</svg>\n");
        return out;
    }
    let xr = (
        points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let mut yr = (
        points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    if yr.0 >= 0.0 && yr.1 <= 1.0 {
        yr = (0.0, 1.0);
    }
    axes(&mut out, title, x_label, y_label, xr, yr);
    let (x0, x1) = (MARGIN_L, PLOT_W - MARGIN_R);
    let (y0, y1) = (PLOT_H - MARGIN_B, MARGIN_T);
    for (s, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    scale(*x, xr.0, xr.1, x0, x1),
                    scale(*y, yr.0, yr.1, y0, y1)
                )
            })
            .collect();
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        );
        for c in &coords {
            let (cx, cy) = c.split_once(',').expect("generated above");
            let _ = write!(out, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"2.5\" fill=\"{color}\"/>\n");
        }
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            x1 - 64.0,
            y1 + 14.0 * (s as f64 + 1.0),
            xml_escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms sharing one binning across all series.
pub fn histogram(title: &str, x_label: &str, series: &[(&str, &[f64])], bins: usize) -> String {
    let mut out = String::new();
    svg_open(&mut out, PLOT_W, PLOT_H);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if all.is_empty() || bins == 0 {
        out.push_str("<text x=\"240\" y=\"160\" text-anchor=\"middle\">no data</text>\n</svg>\n");
        return out;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, vals)| {
            let mut c = vec![0usize; bins];
            for &v in *vals {
                let idx = (((v - lo) / width) as usize).min(bins - 1);
                c[idx] += 1;
            }
            c
        })
        .collect();
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    axes(&mut out, title, x_label, "count", (lo, hi), (0.0, peak));
    let (x0, x1) = (MARGIN_L, PLOT_W - MARGIN_R);
    let y0 = PLOT_H - MARGIN_B;
    let y1 = MARGIN_T;
    for (s, (name, _)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        for (b, &count) in counts[s].iter().enumerate() {
            if count == 0 {
                continue;
            }
            let bx0 = scale(lo + b as f64 * width, lo, hi, x0, x1);
            let bx1 = scale(lo + (b as f64 + 1.0) * width, lo, hi, x0, x1);
            let by = scale(count as f64, 0.0, peak, y0, y1);
            let _ = write!(
                out,
                "<rect x=\"{bx0:.1}\" y=\"{by:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"{color}\" fill-opacity=\"0.45\"/>\n",
                bx1 - bx0,
                y0 - by
            );
        }
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            x1 - 110.0,
            y1 + 14.0 * (s as f64 + 1.0),
            xml_escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One colored band per condition; each cell is a position, colored by its
/// similarity to the final hidden state (blue = low, red = high), with
/// the position's role initial underneath.
pub fn similarity_strips(title: &str, strips: &[(String, Vec<String>, Vec<f64>)]) -> String {
    let mut out = String::new();
    let longest = strips.iter().map(|(_, _, s)| s.len()).max().unwrap_or(0);
    let cell = 12.0f64;
    let row_h = 44.0f64;
    let left = 110.0f64;
    let w = (left + longest as f64 * cell + 20.0).max(320.0);
    let h = 40.0 + strips.len() as f64 * row_h;
    svg_open(&mut out, w, h);
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    );
    for (r, (label, roles, sims)) in strips.iter().enumerate() {
        let top = 34.0 + r as f64 * row_h;
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            top + 14.0,
            xml_escape(label)
        );
        for (i, &sim) in sims.iter().enumerate() {
            let x = left + i as f64 * cell;
            let _ = write!(
                out,
                "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{cell:.1}\" height=\"18\" fill=\"{}\" \
                 stroke=\"#ddd\" stroke-width=\"0.3\"/>\n",
                diverging_color(sim)
            );
            if let Some(role) = roles.get(i) {
                let initial = role.chars().next().unwrap_or('?');
                let _ = write!(
                    out,
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"8\" fill=\"#777\">{initial}</text>\n",
                    x + cell / 2.0,
                    top + 28.0
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Maps [-1, 1] onto blue → white → red.
fn diverging_color(v: f64) -> String {
    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (lerp(45.0, 255.0, u), lerp(95.0, 255.0, u), lerp(168.0, 255.0, u))
    } else {
        let u = (t - 0.5) / 0.5;
        (lerp(255.0, 200.0, u), lerp(255.0, 50.0, u), lerp(255.0, 50.0, u))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
