//! CSV tables, the importance bar chart and run metadata.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::ablation::AblationCell;
use super::forest::ImportanceReport;
use crate::ensemble::MethodSelection;
use crate::error::{Error, Result};
use crate::te::Method;

pub const ABLATION_HEADER: [&str; 7] = ["deepten", "gap", "histogram", "fap", "mean_acc", "std_acc", "n_splits"];

/// One row of an ablation table. Published tables carry no spread or split
/// count, so those are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub selection: MethodSelection,
    pub mean_acc: f64,
    pub std_acc: Option<f64>,
    pub n_splits: Option<usize>,
}

impl From<&AblationCell> for AblationRow {
    fn from(c: &AblationCell) -> Self {
        AblationRow { selection: c.selection, mean_acc: c.mean, std_acc: Some(c.std), n_splits: Some(c.split_accuracies.len()) }
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        let mut rec: Vec<String> = Method::ALL.iter().map(|&m| flag(r.selection.contains(m)).to_string()).collect();
        rec.push(format!("{:?}", r.mean_acc));
        rec.push(r.std_acc.map(|v| format!("{v:?}")).unwrap_or_default());
        rec.push(r.n_splits.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<&str> {
    rec.get(i).map(str::trim).ok_or_else(|| Error::InvalidArgument(format!("row {line}: missing column {}", ABLATION_HEADER[i])))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.iter().map(String::as_str).ne(ABLATION_HEADER) {
        return Err(Error::InvalidArgument(format!("{}: header must be {}", path.display(), ABLATION_HEADER.join(","))));
    }
    let bad = |line: usize, what: &str| Error::InvalidArgument(format!("{} row {line}: {what}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let mut methods = Vec::new();
        for (j, &m) in Method::ALL.iter().enumerate() {
            match field(&rec, j, line)? {
                "1" => methods.push(m),
                "0" => {}
                other => return Err(bad(line, &format!("presence flag '{other}' must be 0 or 1"))),
            }
        }
        let selection = MethodSelection::new(&methods).map_err(|_| bad(line, "no method selected"))?;
        let mean_acc = field(&rec, 4, line)?.parse().map_err(|_| bad(line, "mean_acc is not a number"))?;
        let std_acc = match field(&rec, 5, line)? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(line, "std_acc is not a number"))?),
        };
        let n_splits = match field(&rec, 6, line)? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(line, "n_splits is not an integer"))?),
        };
        rows.push(AblationRow { selection, mean_acc, std_acc, n_splits });
    }
    Ok(rows)
}

pub fn write_importance_csv(path: &Path, report: &ImportanceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "importance", "rank"])?;
    for &m in &report.ranking {
        w.write_record([m.name(), &format!("{:.6}", report.importance(m)), &report.rank(m).to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart, bars in ranking order. The only `<rect>` elements are
/// the four bars.
pub fn importance_svg(report: &ImportanceReport) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, bottom, top) = (50.0, 270.0, 40.0);
    let slot = (w - left - 20.0) / report.ranking.len().max(1) as f64;
    let max = report.importances.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"  <text x="{}" y="22" text-anchor="middle" font-size="14">Method importance ({} trees, {} seeds)</text>"#, w / 2.0, report.n_trees, report.seeds.len());
    let _ = writeln!(s, r#"  <line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, w - 20.0);
    for (i, &m) in report.ranking.iter().enumerate() {
        let v = report.importance(m);
        let bh = (bottom - top) * v / max;
        let x = left + i as f64 * slot + slot * 0.15;
        let bw = slot * 0.7;
        let _ = writeln!(s, r##"  <rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{bh:.2}" fill="#4a7ab7"><title>{}: {v:.4}</title></rect>"##, bottom - bh, escape(m.label()));
        let _ = writeln!(s, r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#, x + bw / 2.0, bottom - bh - 5.0);
        let _ = writeln!(s, r#"  <text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x + bw / 2.0, bottom + 18.0, escape(m.label()));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_importance_svg(path: &Path, report: &ImportanceReport) -> Result<()> {
    std::fs::write(path, importance_svg(report)).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let rows: Vec<AblationRow> = MethodSelection::grid()
            .map(|s| AblationRow { selection: s, mean_acc: 50.0 + s.mask() as f64 / 3.0, std_acc: Some(0.1), n_splits: Some(2) })
            .collect();
        write_ablation_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("deepten,gap,histogram,fap,mean_acc,std_acc,n_splits\n"));
        assert_eq!(read_ablation_csv(&path).unwrap(), rows);
    }

    #[test]
    fn bad_flag_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "deepten,gap,histogram,fap,mean_acc,std_acc,n_splits\n2,0,0,0,1.0,,\n").unwrap();
        assert!(read_ablation_csv(&path).is_err());
    }
}
