//! `evaluate`: per-scene confusion counts and metrics against reference
//! masks, with pooled and scene-mean aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cloudfcn::metrics::{aggregate, compute_metrics, confusion, AggregateMode, ConfusionCounts, MetricReport};
use cloudfcn::raster::read_mask;

use crate::config::{PipelineConfig, TruthSource};
use crate::scene::csv_field;
use crate::Summary;

pub const REPORT_HEADER: &str = "scene_id,tp,tn,fp,fn,jaccard,precision,recall,accuracy";

fn ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |r| format!("{r:.6}"))
}

fn ratios(m: &MetricReport) -> String {
    format!("{},{},{},{}", ratio(m.jaccard), ratio(m.precision), ratio(m.recall), ratio(m.overall_accuracy))
}

pub fn count_row(id: &str, c: &ConfusionCounts) -> String {
    format!("{id},{},{},{},{},{}", c.tp, c.tn, c.fp, c.fn_, ratios(&compute_metrics(c)))
}

/// Report text for the scenes that were scored and those that failed. The
/// mean row has no counts.
pub fn format_report(rows: &[(String, Result<ConfusionCounts, String>)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    let mut ok = Vec::new();
    for (id, r) in rows {
        match r {
            Ok(c) => {
                ok.push(*c);
                let _ = writeln!(s, "{}", count_row(id, c));
            }
            Err(msg) => {
                let _ = writeln!(s, "{id},error,,,,,,,{}", csv_field(msg));
            }
        }
    }
    let pooled = ok.iter().copied().fold(ConfusionCounts::default(), |a, b| a + b);
    let _ = writeln!(s, "{}", count_row("aggregate:pooled", &pooled));
    let mean = aggregate(&ok, AggregateMode::Mean).unwrap_or_default();
    let _ = writeln!(s, "aggregate:mean,,,,,{}", ratios(&mean));
    s
}

fn truth_path(cfg: &PipelineConfig, id: &str) -> PathBuf {
    match &cfg.truth {
        TruthSource::Gt(label) => cfg.layout.gt_dir(id).join(label.file_name()),
        TruthSource::Dir(dir) => dir.join(format!("{id}.pgm")),
    }
}

fn scene(cfg: &PipelineConfig, id: &str) -> Result<ConfusionCounts> {
    let pred_path = cfg.layout.pred_mask(id);
    let pred = read_mask(&pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
    let truth_path = truth_path(cfg, id);
    let truth = read_mask(&truth_path).with_context(|| format!("reading {}", truth_path.display()))?;
    Ok(confusion(&pred, &truth)?)
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary> {
    let ids = cfg.scene_ids()?;
    let mut summary = Summary::default();
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let r = scene(cfg, id);
        if let Err(e) = &r {
            summary.fail(id, e);
        }
        rows.push((id.clone(), r.map_err(|e| format!("{e:#}"))));
    }
    let report = format_report(&rows);
    fs::create_dir_all(cfg.layout.eval())?;
    fs::write(cfg.layout.eval_report(), &report)?;
    for line in report.lines().filter(|l| l.starts_with("aggregate:")) {
        println!("{line}");
    }
    Ok(summary)
}
