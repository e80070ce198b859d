//! `metric = value` reports and tab-separated prediction dumps.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{AttributeMetrics, PredictionSet, RetrievalMetrics, SegmentationMetrics, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Named metrics in `[0, 1]`, plus integer bookkeeping counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    metrics: Vec<(String, f64)>,
    counts: Vec<(String, u64)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Numeric(format!("metric {name} = {value} outside [0, 1]")));
        }
        match self.metrics.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.metrics.push((name, value)),
        }
        Ok(())
    }

    pub fn count(&mut self, name: impl Into<String>, value: u64) {
        self.counts.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn get_count(&self, name: &str) -> Option<u64> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn metrics(&self) -> &[(String, f64)] {
        &self.metrics
    }

    pub fn from_attributes(m: &AttributeMetrics) -> Result<Self> {
        let mut r = Self::new();
        for (k, v) in [("mA", m.ma), ("Acc", m.accuracy), ("Prec", m.precision), ("Rec", m.recall), ("F1", m.f1)] {
            r.insert(k, v)?;
        }
        r.count("zero_denominators", m.zero_denominators as u64);
        Ok(r)
    }

    pub fn from_retrieval(m: &RetrievalMetrics) -> Result<Self> {
        let mut r = Self::new();
        r.insert("mAP", m.map)?;
        for &(k, v) in &m.rank_k {
            r.insert(format!("Rank-{k}"), v)?;
        }
        r.count("queries", m.n_queries as u64);
        r.count("excluded_queries", m.excluded as u64);
        Ok(r)
    }

    pub fn from_segmentation(m: &SegmentationMetrics) -> Result<Self> {
        let mut r = Self::new();
        r.insert("mIoU", m.miou)?;
        r.insert("mAcc", m.macc)?;
        r.count("classes_present", m.iou.iter().flatten().count() as u64);
        Ok(r)
    }

    /// Metrics as `name = value`, counts as `# name = value` comment lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (n, v) in &self.metrics {
            let _ = writeln!(out, "{n} = {v}");
        }
        for (n, v) in &self.counts {
            let _ = writeln!(out, "# {n} = {v}");
        }
        out
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut r = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (is_count, body) = match line.strip_prefix('#') {
                Some(rest) => (true, rest.trim()),
                None => (false, line.trim()),
            };
            let (name, value) =
                body.split_once(" = ").ok_or_else(|| Error::parse(source_name, i + 1, "expected `name = value`"))?;
            if is_count {
                let v = value.parse().map_err(|_| Error::parse(source_name, i + 1, format!("bad count {value:?}")))?;
                r.count(name, v);
            } else {
                let v: f64 =
                    value.parse().map_err(|_| Error::parse(source_name, i + 1, format!("bad value {value:?}")))?;
                r.insert(name, v).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
            }
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Writes `task` on the first line, then `key`, `score:<col>`… and `truth:<col>`… columns.
pub fn write_predictions(pred: &PredictionSet, path: &Path) -> Result<()> {
    let task = match pred.task {
        TaskKind::Multilabel => "multilabel",
        TaskKind::Multiclass => "multiclass",
        TaskKind::Retrieval => "retrieval",
        TaskKind::Segmentation => "segmentation",
    };
    let mut out = format!("#task\t{task}\nkey");
    for c in &pred.columns {
        let _ = write!(out, "\tscore:{c}");
    }
    for c in &pred.columns {
        let _ = write!(out, "\ttruth:{c}");
    }
    out.push('\n');
    for (i, k) in pred.keys.iter().enumerate() {
        out.push_str(k);
        for v in pred.scores.row(i).iter().chain(pred.ground_truth.row(i)) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let task = match lines.next().and_then(|l| l.strip_prefix("#task\t")) {
        Some("multilabel") => TaskKind::Multilabel,
        Some("multiclass") => TaskKind::Multiclass,
        Some("retrieval") => TaskKind::Retrieval,
        Some("segmentation") => TaskKind::Segmentation,
        _ => return Err(Error::parse(&name, 0, "first line must be `#task\\t<kind>`")),
    };
    let header: Vec<&str> =
        lines.next().ok_or_else(|| Error::parse(&name, 0, "missing column header"))?.split('\t').collect();
    let columns: Vec<String> = header.iter().filter_map(|h| h.strip_prefix("score:")).map(str::to_string).collect();
    let c = columns.len();
    if header.first() != Some(&"key") || header.len() != 1 + 2 * c {
        return Err(Error::parse(&name, 0, "header must be key, score columns, truth columns"));
    }
    let (mut keys, mut scores, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 1 + 2 * c {
            return Err(Error::parse(&name, i + 1, format!("expected {} fields, found {}", 1 + 2 * c, f.len())));
        }
        let vals = f[1..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| Error::parse(&name, i + 1, format!("bad number {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        keys.push(f[0].to_string());
        scores.extend_from_slice(&vals[..c]);
        truth.extend_from_slice(&vals[c..]);
    }
    let n = keys.len();
    PredictionSet::new(task, keys, columns, Mat::from_vec(n, c, scores)?, Mat::from_vec(n, c, truth)?)
}

/// Reads a whitespace-separated square count matrix, one truth class per line.
pub fn read_confusion(path: &Path) -> Result<Vec<Vec<u64>>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::parse(&name, i + 1, format!("bad count {t:?}"))))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips() {
        let mut r = MetricReport::new();
        r.insert("mA", 0.8125).unwrap();
        r.insert("Rank-1", 1.0 / 3.0).unwrap();
        r.count("excluded_queries", 2);
        assert!(r.insert("bad", 1.5).is_err());
        let text = r.to_text();
        assert!(text.starts_with("mA = 0.8125\n"));
        assert_eq!(MetricReport::parse(&text, "t").unwrap(), r);
        assert!(matches!(MetricReport::parse("mA 0.5", "t"), Err(Error::Parse { record: 1, .. })));
    }

    #[test]
    fn prediction_dumps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PredictionSet::new(
            TaskKind::Multiclass,
            vec!["image_00000.png".into(), "image_00001.png".into()],
            vec!["c0".into(), "c1".into()],
            Mat::from_rows(&[vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap(),
            Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let path = dir.path().join("p.tsv");
        write_predictions(&p, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
        let cm = dir.path().join("cm.txt");
        std::fs::write(&cm, "3 1\n1 3\n").unwrap();
        assert_eq!(read_confusion(&cm).unwrap(), vec![vec![3, 1], vec![1, 3]]);
    }
}
