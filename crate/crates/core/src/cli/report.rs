//! Aggregation of run directories into tables and static SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{read_json, write_artifact, write_json, EvalReport};
use crate::qat::TrainLog;

/// Mean and standard error over runs; `se` is absent for a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub se: Option<f64>,
    pub values: Vec<f64>,
}

impl Cell {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Cell { mean, se, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    /// Column (`overall` or a super-category) to cell.
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: String,
    pub sensitivity: Option<f64>,
    pub bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub runs: Vec<String>,
    pub columns: Vec<String>,
    /// Critical mAP per super-category (over its own classes) and overall mAP.
    pub map_table: Vec<Row>,
    /// FP minus checkpoint, per run, then aggregated.
    pub drop_table: Vec<Row>,
    /// Mean of the last five QAT epochs.
    pub trace_table: Vec<Row>,
    /// Allocation tag to per-layer rows, from the first run.
    pub sensitivity: BTreeMap<String, Vec<SensitivityRow>>,
}

fn list(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(mid) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) {
            out.push((mid.to_string(), p));
        }
    }
    out.sort();
    Ok(out)
}

fn columns_of(e: &EvalReport) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = e.critical.iter().map(|(k, r)| (k.clone(), r.map_critical_only)).collect();
    m.insert("overall".into(), e.overall.map);
    m
}

fn aggregate(per_run: &[BTreeMap<String, BTreeMap<String, f64>>]) -> Vec<Row> {
    let mut acc: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for run in per_run {
        for (row, cols) in run {
            for (c, v) in cols {
                acc.entry(row.clone()).or_default().entry(c.clone()).or_default().push(*v);
            }
        }
    }
    acc.into_iter()
        .map(|(name, cols)| Row {
            name,
            cells: cols.into_iter().map(|(c, v)| (c, Cell::of(v))).collect(),
        })
        .collect()
}

pub fn build_report(runs: &[PathBuf]) -> Result<Report> {
    let mut maps = Vec::new();
    let mut drops = Vec::new();
    let mut traces = Vec::new();
    let mut sensitivity = BTreeMap::new();
    let mut columns = Vec::new();
    for (i, dir) in runs.iter().enumerate() {
        if !dir.is_dir() {
            return Err(Error::Missing(format!("run directory {}", dir.display())));
        }
        let evals = list(dir, "eval_", ".json")?;
        if evals.is_empty() {
            return Err(Error::Missing(format!("no eval_*.json in {}", dir.display())));
        }
        let mut m = BTreeMap::new();
        for (name, p) in &evals {
            let e: EvalReport = read_json(p)?;
            m.insert(name.clone(), columns_of(&e));
        }
        if columns.is_empty() {
            columns = m.values().next().map(|c| c.keys().cloned().collect()).unwrap_or_default();
        }
        if let Some(fp) = m.get("fp").cloned() {
            let d = m
                .iter()
                .filter(|(n, _)| n.as_str() != "fp")
                .map(|(n, cols)| {
                    let row = cols
                        .iter()
                        .filter_map(|(c, v)| fp.get(c).map(|f| (c.clone(), f - v)))
                        .collect();
                    (n.clone(), row)
                })
                .collect();
            drops.push(d);
        }
        maps.push(m);
        let mut t = BTreeMap::new();
        for (name, p) in list(dir, "", "_log.json")? {
            let log: TrainLog = read_json(&p)?;
            if let Some(s) = log.summary() {
                let mut cols = BTreeMap::new();
                cols.insert("trace_f".to_string(), s.trace_f);
                cols.insert("loss_overall".to_string(), s.loss_overall);
                cols.insert("map_overall".to_string(), s.map_overall);
                cols.insert("map_critical".to_string(), s.map_critical_only);
                t.insert(name, cols);
            }
        }
        traces.push(t);
        if i == 0 {
            for (tag, p) in list(dir, "alloc_", ".csv")? {
                sensitivity.insert(tag, parse_alloc_csv(&fs::read_to_string(p)?)?);
            }
        }
    }
    Ok(Report {
        format_version: crate::model::io::FORMAT_VERSION,
        runs: runs.iter().map(|p| p.display().to_string()).collect(),
        columns,
        map_table: aggregate(&maps),
        drop_table: aggregate(&drops),
        trace_table: aggregate(&traces),
        sensitivity,
    })
}

fn parse_alloc_csv(text: &str) -> Result<Vec<SensitivityRow>> {
    let bad = || Error::Format("malformed allocation CSV".into());
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 3 {
                return Err(bad());
            }
            Ok(SensitivityRow {
                layer: f[0].to_string(),
                sensitivity: if f[1].is_empty() { None } else { Some(f[1].parse().map_err(|_| bad())?) },
                bits: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

impl Report {
    /// Long-format CSV: `table,row,column,mean,se,n`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,row,column,mean,se,n\n");
        for (table, rows) in [("map", &self.map_table), ("drop", &self.drop_table), ("trace", &self.trace_table)] {
            for r in rows {
                for (c, cell) in &r.cells {
                    let se = cell.se.map(|v| format!("{v:e}")).unwrap_or_default();
                    let _ = writeln!(s, "{table},{},{c},{:e},{se},{}", r.name, cell.mean, cell.values.len());
                }
            }
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        write_json(&out.join("report.json"), self)?;
        write_artifact(&out.join("report.csv"), self.to_csv().as_bytes())?;
        write_artifact(&out.join("map_by_group.svg"), bar_chart(&self.map_table, &self.columns, "mAP").as_bytes())?;
        for (tag, rows) in &self.sensitivity {
            write_artifact(&out.join(format!("sensitivity_{tag}.svg")), sensitivity_chart(tag, rows).as_bytes())?;
        }
        Ok(())
    }
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars: one group per column, one bar per row, with SE whiskers.
pub fn bar_chart(rows: &[Row], columns: &[String], ylabel: &str) -> String {
    let (w, h, left, bottom, top) = (120.0 + 160.0 * columns.len() as f64, 360.0, 60.0, 60.0, 20.0);
    let plot_h = h - bottom - top;
    let group_w = (w - left - 20.0) / columns.len().max(1) as f64;
    let bar_w = (group_w - 20.0) / rows.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        h + 16.0 * rows.len() as f64
    );
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>", h - bottom);
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>", h - bottom, w - 20.0);
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = h - bottom - v * plot_h;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.1}</text>", left - 4.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {0})\">{}</text>", top + plot_h / 2.0, esc(ylabel));
    for (ci, c) in columns.iter().enumerate() {
        let gx = left + 10.0 + ci as f64 * group_w;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", gx + group_w / 2.0 - 10.0, h - bottom + 16.0, esc(c));
        for (ri, r) in rows.iter().enumerate() {
            let Some(cell) = r.cells.get(c) else { continue };
            let v = cell.mean.clamp(0.0, 1.0);
            let x = gx + ri as f64 * bar_w;
            let y = h - bottom - v * plot_h;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                (bar_w - 2.0).max(1.0),
                v * plot_h,
                PALETTE[ri % PALETTE.len()]
            );
            if let Some(se) = cell.se {
                let cx = x + bar_w / 2.0 - 1.0;
                let y0 = h - bottom - (cell.mean - se).clamp(0.0, 1.0) * plot_h;
                let y1 = h - bottom - (cell.mean + se).clamp(0.0, 1.0) * plot_h;
                let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{y0:.1}\" x2=\"{cx:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>");
            }
        }
    }
    for (ri, r) in rows.iter().enumerate() {
        let y = h + 16.0 * ri as f64 - 10.0;
        let _ = writeln!(s, "<rect x=\"{left}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/>", PALETTE[ri % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", left + 14.0, y + 9.0, esc(&r.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Per-layer log10 sensitivity bars with the assigned bit-width as a line.
pub fn sensitivity_chart(tag: &str, rows: &[SensitivityRow]) -> String {
    let n = rows.len().max(1) as f64;
    let (w, h, left, bottom, top) = (80.0 + 14.0 * n, 320.0, 50.0, 140.0, 24.0);
    let plot_h = h - bottom - top;
    let step = (w - left - 30.0) / n;
    let logs: Vec<Option<f64>> = rows.iter().map(|r| r.sensitivity.filter(|&v| v > 0.0).map(f64::log10)).collect();
    let lo = logs.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"9\">\n");
    let _ = writeln!(s, "<text x=\"{left}\" y=\"14\" font-size=\"12\">{} : log10 sensitivity (bars), bits (line, 3 to 8)</text>", esc(tag));
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>", h - bottom, w - 20.0);
    let mut path = String::new();
    for (i, r) in rows.iter().enumerate() {
        let x = left + i as f64 * step;
        if let Some(l) = logs[i] {
            let bh = 4.0 + (l - lo) / span * (plot_h - 4.0);
            let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4e79a7\"/>", h - bottom - bh, (step - 2.0).max(1.0));
        }
        let by = h - bottom - (r.bits as f64 - 3.0) / 5.0 * plot_h;
        let cx = x + step / 2.0 - 1.0;
        let _ = write!(path, "{}{cx:.1},{by:.1}", if i == 0 { "M" } else { " L" });
        let _ = writeln!(s, "<circle cx=\"{cx:.1}\" cy=\"{by:.1}\" r=\"2.5\" fill=\"#e15759\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{0:.1}\" transform=\"rotate(-60 {cx:.1} {0:.1})\" text-anchor=\"end\">{1}</text>",
            h - bottom + 8.0,
            esc(&r.layer)
        );
    }
    if !path.is_empty() {
        let _ = writeln!(s, "<path d=\"{path}\" fill=\"none\" stroke=\"#e15759\"/>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_statistics() {
        let c = Cell::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(c.mean, 2.0);
        assert!((c.se.unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Cell::of(vec![0.5]).se, None);
    }

    #[test]
    fn alloc_csv_parses_uniform_and_fisher_rows() {
        let rows = parse_alloc_csv("layer,sensitivity,bits,fisher_trace\na,1e-3,4,2\nb,,4,\n").unwrap();
        assert_eq!(rows[0].sensitivity, Some(1e-3));
        assert_eq!(rows[1].sensitivity, None);
        assert!(sensitivity_chart("t", &rows).starts_with("<svg"));
    }
}
