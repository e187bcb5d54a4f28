use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Counts, EvaluationReport, ImageDetections, MetricRow, ThresholdTable};
use crate::boxgeom::{BBox, Detection};
use crate::data::ClassMap;
use crate::error::{Error, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv { path: path.to_path_buf(), detail: e.to_string() }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err(path))
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct DetectionRow {
    filename: String,
    class: String,
    score: f32,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

/// `filename,class,score,x1,y1,x2,y2`, one line per detection.
pub fn write_detections(path: &Path, images: &[ImageDetections], classes: &ClassMap) -> Result<()> {
    let rows = images.iter().flat_map(|img| {
        img.detections.iter().map(|d| DetectionRow {
            filename: img.filename.clone(),
            class: classes.name(d.class_id).unwrap_or("unknown").to_string(),
            score: d.score,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        })
    });
    write_rows(path, rows)
}

/// Reads a detection dump, grouped by filename in file order.
pub fn read_detections(path: &Path, classes: &ClassMap) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for row in r.deserialize::<DetectionRow>() {
        let row = row.map_err(csv_err(path))?;
        let class = classes
            .id(&row.class)
            .ok_or_else(|| Error::Validation(format!("{}: unknown class `{}`", path.display(), row.class)))?;
        let det = Detection::new(BBox::new(row.x1, row.y1, row.x2, row.y2)?, class, row.score)?;
        out.entry(row.filename).or_default().push(det);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricLine<'a> {
    class: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    f2: f64,
    precision: f64,
    recall: f64,
    ap: Option<f64>,
}

/// Per-class rows then `Overall`, whose `ap` column holds the mAP.
pub fn write_metrics(path: &Path, report: &EvaluationReport) -> Result<()> {
    fn line(r: &MetricRow, ap: Option<f64>) -> MetricLine<'_> {
        MetricLine {
            class: &r.class,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            f2: r.f2,
            precision: r.precision,
            recall: r.recall,
            ap,
        }
    }
    let mut lines: Vec<MetricLine> = report.rows.iter().zip(&report.ap).map(|(r, ap)| line(r, *ap)).collect();
    lines.push(line(&report.overall, report.map));
    write_rows(path, lines)
}

#[derive(Deserialize)]
struct CountLine {
    class: String,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
}

/// Reads `class,tp,fp,fn` lines (extra columns are ignored).
pub fn read_counts(path: &Path) -> Result<Vec<(String, Counts)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<CountLine>()
        .map(|row| row.map(|l| (l.class, Counts { tp: l.tp, fp: l.fp, fn_: l.fn_ })).map_err(csv_err(path)))
        .collect()
}

fn fmt_grid(t: f64) -> String {
    format!("{t:.1}")
}

/// `class,0.1,...,0.9,best`; classes without validation images show `NA`.
pub fn write_thresholds(path: &Path, table: &ThresholdTable) -> Result<()> {
    let mut header = vec!["class".to_string()];
    header.extend(table.grid.iter().map(|&t| fmt_grid(t)));
    header.push("best".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut line = vec![r.class.clone()];
            match &r.accuracy {
                Some(acc) => line.extend(acc.iter().map(|a| a.to_string())),
                None => line.extend(table.grid.iter().map(|_| "NA".to_string())),
            }
            line.push(r.best.map_or("NA".into(), fmt_grid));
            line
        })
        .collect();
    write_records(path, &header, &rows)
}

/// Reads a table written by [`write_thresholds`]; rows must name the
/// classes of `classes` in order.
pub fn read_thresholds(path: &Path, classes: &ClassMap) -> Result<ThresholdTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let bad = |detail: String| Error::Csv { path: path.to_path_buf(), detail };
    if header.len() < 3 || &header[0] != "class" || &header[header.len() - 1] != "best" {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
    let grid: Vec<f64> = header.iter().skip(1).take(header.len() - 2).map(num).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let cells: Vec<&str> = rec.iter().collect();
        let accuracy = if cells[1..cells.len() - 1].iter().all(|c| *c == "NA") {
            None
        } else {
            Some(cells[1..cells.len() - 1].iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?)
        };
        let best = match cells[cells.len() - 1] {
            "NA" => None,
            s => Some(num(s)?),
        };
        rows.push(super::ThresholdRow { class: cells[0].to_string(), accuracy, best });
    }
    let names: Vec<&str> = rows.iter().map(|r| r.class.as_str()).collect();
    if names != classes.names().iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad(format!("classes {names:?} do not match the model's {:?}", classes.names())));
    }
    Ok(ThresholdTable { grid, rows })
}

/// Square matrix with a header row of predicted labels; rows are ground truth.
pub fn write_confusion(path: &Path, report: &EvaluationReport, classes: &ClassMap) -> Result<()> {
    let labels: Vec<String> = (0..=classes.len()).map(|i| classes.name(i).unwrap_or("?").to_string()).collect();
    let mut header = vec!["truth/predicted".to_string()];
    header.extend(labels.iter().cloned());
    let rows: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(t, name)| {
            let mut line = vec![name.clone()];
            line.extend(report.confusion.row(t).iter().map(|c| c.to_string()));
            line
        })
        .collect();
    write_records(path, &header, &rows)
}

#[derive(Serialize)]
struct PrLine<'a> {
    class: &'a str,
    rank: usize,
    recall: f64,
    precision: f64,
}

/// `class,rank,recall,precision` for plotting precision-recall curves.
pub fn write_pr_curves(path: &Path, report: &EvaluationReport) -> Result<()> {
    let rows = report.rows.iter().zip(&report.pr_curves).flat_map(|(row, curve)| {
        curve.iter().enumerate().map(|(i, &(recall, precision))| PrLine { class: &row.class, rank: i + 1, recall, precision })
    });
    write_rows(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroundTruth;
    use crate::eval::{evaluate, threshold_grid};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("leafdet-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn detections_round_trip_bit_exactly() {
        let classes = ClassMap::new(vec!["a".into(), "b".into()]).unwrap();
        let images = vec![ImageDetections {
            filename: "x.ppm".into(),
            detections: vec![
                Detection::new(BBox::new(0.1, 0.2, 10.3, 20.7).unwrap(), 1, 0.123_456_79).unwrap(),
                Detection::new(BBox::new(1.0 / 3.0, 2.0, 3.0, 4.0).unwrap(), 0, 1.0).unwrap(),
            ],
            ground_truth: vec![],
        }];
        let path = tmp("dets.csv");
        write_detections(&path, &images, &classes).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("filename,class,score,x1,y1,x2,y2\nx.ppm,b,"));
        let back = read_detections(&path, &classes).unwrap();
        assert_eq!(back["x.ppm"], images[0].detections);
    }

    #[test]
    fn threshold_table_round_trips() {
        let classes = ClassMap::new(vec!["a".into(), "b".into()]).unwrap();
        let table = ThresholdTable::from_accuracy(
            threshold_grid(),
            vec![("a".into(), Some(vec![0.5, 0.75, 0.75, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0])), ("b".into(), None)],
        )
        .unwrap();
        let path = tmp("thr.csv");
        write_thresholds(&path, &table).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "class,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,best");
        assert!(text.contains("\nb,NA,NA,NA,NA,NA,NA,NA,NA,NA,NA\n"));
        let back = read_thresholds(&path, &classes).unwrap();
        assert_eq!(back.rows[0].best, Some(0.2));
        assert_eq!(back, table);
        let other = ClassMap::new(vec!["b".into(), "a".into()]).unwrap();
        assert!(read_thresholds(&path, &other).is_err());
    }

    #[test]
    fn metric_and_confusion_files() {
        let classes = ClassMap::new(vec!["a".into()]).unwrap();
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let images = vec![ImageDetections {
            filename: "1".into(),
            detections: vec![Detection::new(b, 0, 0.9).unwrap()],
            ground_truth: vec![GroundTruth { class_id: 0, bbox: b }],
        }];
        let r = evaluate(&images, &classes, 0.5, &[0.5]).unwrap();
        let m = tmp("metrics.csv");
        write_metrics(&m, &r).unwrap();
        assert_eq!(
            std::fs::read_to_string(&m).unwrap(),
            "class,tp,fp,fn,f2,precision,recall,ap\na,1,0,0,1.0,1.0,1.0,1.0\nOverall,1,0,0,1.0,1.0,1.0,1.0\n"
        );
        assert_eq!(read_counts(&m).unwrap()[1], ("Overall".to_string(), Counts { tp: 1, fp: 0, fn_: 0 }));
        let c = tmp("confusion.csv");
        write_confusion(&c, &r, &classes).unwrap();
        assert_eq!(std::fs::read_to_string(&c).unwrap(), "truth/predicted,a,background\na,1,0\nbackground,0,0\n");
        let p = tmp("pr.csv");
        write_pr_curves(&p, &r).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "class,rank,recall,precision\na,1,1.0,1.0\n");
    }
}
