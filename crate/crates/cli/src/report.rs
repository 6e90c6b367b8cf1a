//! Comparison table over finished run directories.

use crate::{CONFIG_ECHO, REPORT_FILE};
use paaa::config::{Mode, RunConfig};
use paaa::metrics::{gap, MetricReport};
use paaa::{Error, Result};
use std::fmt::Write;
use std::path::{Path, PathBuf};

struct Row {
    dir: PathBuf,
    mode: Mode,
    report: MetricReport,
}

fn load_row(dir: &Path) -> Result<Row> {
    let report = MetricReport::load(&dir.join(REPORT_FILE))?;
    let cfg_path = dir.join(CONFIG_ECHO);
    let text = std::fs::read_to_string(&cfg_path).map_err(|source| Error::Io { path: cfg_path.clone(), source })?;
    let cfg = RunConfig::from_toml(&text)?;
    Ok(Row { dir: dir.to_path_buf(), mode: cfg.train.mode, report })
}

/// Table with one row per run. GAP columns appear when an oracle directory
/// is named or `gap` asks for the run trained in oracle mode.
pub fn render(dirs: &[PathBuf], oracle: Option<&Path>, want_gap: bool) -> Result<String> {
    let rows = dirs.iter().map(|d| load_row(d)).collect::<Result<Vec<_>>>()?;
    let reference = match oracle {
        Some(dir) => Some(load_row(dir)?.report),
        None if want_gap => Some(
            rows.iter()
                .find(|r| r.mode == Mode::Oracle)
                .map(|r| r.report.clone())
                .ok_or_else(|| Error::Config("GAP requested but no run was trained in oracle mode".into()))?,
        ),
        None => None,
    };
    let mut out = String::new();
    let name = |r: &Row| format!("{} ({})", r.mode, r.dir.file_name().and_then(|n| n.to_str()).unwrap_or(""));
    let width = rows.iter().map(|r| name(r).len()).max().unwrap_or(6).max(6);
    write!(out, "{:<width$} {:>9} {:>9}", "method", "AUSDE", "IOU(%)").unwrap();
    if reference.is_some() {
        write!(out, " {:>10} {:>9}", "GAP_ausde", "GAP_iou").unwrap();
    }
    out.push('\n');
    for r in &rows {
        write!(out, "{:<width$} {:>9.2} {:>9.2}", name(r), r.report.ausde, 100.0 * r.report.iou).unwrap();
        if let Some(o) = &reference {
            let ga = gap(r.report.ausde, o.ausde);
            let gi = gap(100.0 * r.report.iou, 100.0 * o.iou);
            write!(out, " {ga:>10.2} {gi:>9.2}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
