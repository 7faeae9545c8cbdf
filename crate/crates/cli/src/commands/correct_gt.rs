//! `correct-gt`: snow mask, default and corrected ground truth per scene.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use cloudfcn::correction::{correct_scene, SceneCorrection, ThresholdSource};
use cloudfcn::raster::write_mask;

use crate::config::PipelineConfig;
use crate::scene::{csv_field, load_band, load_qa};
use crate::Summary;

pub const REPORT_HEADER: &str =
    "scene_id,status,threshold,threshold_source,default_pixels,snow_pixels,corrected_pixels,removed,message";

fn source_name(s: ThresholdSource) -> &'static str {
    match s {
        ThresholdSource::Fixed => "fixed",
        ThresholdSource::Percentile => "percentile",
        ThresholdSource::Fallback => "fallback",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |m| format!("{m:.6}"))
}

/// Plain-text stats for one scene.
pub fn stats_text(id: &str, cfg: &PipelineConfig, c: &SceneCorrection) -> String {
    let s = &c.stats;
    let mut t = String::new();
    let _ = writeln!(t, "scene_id {id}");
    let _ = writeln!(t, "size {}x{}", c.snow.width(), c.snow.height());
    let _ = writeln!(t, "snow_band {}", cfg.snow_band);
    let _ = writeln!(t, "threshold {:.6} {}", c.threshold.value, source_name(c.threshold.source));
    let _ = writeln!(t, "qa_snow pixels {} mean_gradient {}", s.count_snow, opt(s.mean_snow));
    let _ = writeln!(t, "qa_cloud pixels {} mean_gradient {}", s.count_cloud, opt(s.mean_cloud));
    let _ = writeln!(t, "qa_clear pixels {} mean_gradient {}", s.count_clear, opt(s.mean_clear));
    let _ = writeln!(t, "default_cloud_pixels {}", c.default_cloud.count());
    let _ = writeln!(t, "snow_mask_pixels {}", c.snow.count());
    let _ = writeln!(t, "corrected_cloud_pixels {}", c.corrected.count());
    let _ = writeln!(t, "removed_pixels {}", c.removed());
    t
}

fn scene(cfg: &PipelineConfig, id: &str) -> Result<SceneCorrection> {
    let band = load_band(&cfg.scenes_dir, id, cfg.snow_band)?;
    let qa = load_qa(&cfg.scenes_dir, id)?;
    let c = correct_scene(&band, &qa, &cfg.qa, cfg.threshold_rule)?;
    let dir = cfg.layout.gt_dir(id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_mask(&c.snow, dir.join("snow.pgm"))?;
    write_mask(&c.default_cloud, dir.join("default_gt.pgm"))?;
    write_mask(&c.corrected, dir.join("corrected_gt.pgm"))?;
    fs::write(dir.join("stats.txt"), stats_text(id, cfg, &c))?;
    Ok(c)
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary> {
    let ids = cfg.scene_ids()?;
    let mut summary = Summary::default();
    let mut report = format!("{REPORT_HEADER}\n");
    for id in &ids {
        match scene(cfg, id) {
            Ok(c) => {
                println!(
                    "{id}: threshold {:.6} ({}), removed {} of {} cloud pixels",
                    c.threshold.value,
                    source_name(c.threshold.source),
                    c.removed(),
                    c.default_cloud.count()
                );
                let _ = writeln!(
                    report,
                    "{id},ok,{:.6},{},{},{},{},{},",
                    c.threshold.value,
                    source_name(c.threshold.source),
                    c.default_cloud.count(),
                    c.snow.count(),
                    c.corrected.count(),
                    c.removed()
                );
            }
            Err(e) => {
                summary.fail(id, &e);
                let _ = writeln!(report, "{id},error,,,,,,,{}", csv_field(&format!("{e:#}")));
            }
        }
    }
    fs::create_dir_all(cfg.layout.gt_root())?;
    fs::write(cfg.layout.gt_report(), report)?;
    Ok(summary)
}
