//! `predict`: probability map and mask for every scene.

use std::fs;

use anyhow::{ensure, Context, Result};
use cloudfcn::patch::predict_scene;
use cloudfcn::raster::{write_mask, write_raster, BandId, Raster, SAMPLE_MAX};
use cloudfcn::unet::{load_params, ModelParams};

use crate::config::PipelineConfig;
use crate::scene::load_bands;
use crate::Summary;

fn scene(cfg: &PipelineConfig, params: &ModelParams<f32>, id: &str) -> Result<(usize, usize)> {
    let bands = load_bands(&cfg.scenes_dir, id)?;
    let [r, g, b, n] = &bands;
    let (prob, mask) = predict_scene(params, [r, g, b, n], &cfg.predict)?;
    let samples = prob.data().iter().map(|&p| (f64::from(p) * SAMPLE_MAX).round() as u16).collect();
    let prob = Raster::new(prob.width(), prob.height(), samples, BandId::Prob)?;
    write_raster(&prob, cfg.layout.pred_prob(id))?;
    write_mask(&mask, cfg.layout.pred_mask(id))?;
    Ok((mask.count(), mask.bits().len()))
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary> {
    let ckpt = &cfg.checkpoint;
    ensure!(ckpt.is_file(), "checkpoint {} does not exist", ckpt.display());
    let params = load_params::<f32>(ckpt, Some(&cfg.network)).with_context(|| format!("loading {}", ckpt.display()))?;
    let ids = cfg.scene_ids()?;
    fs::create_dir_all(cfg.layout.pred())?;
    let mut summary = Summary::default();
    for id in &ids {
        match scene(cfg, &params, id) {
            Ok((cloud, total)) => println!("{id}: {cloud} of {total} pixels cloud"),
            Err(e) => summary.fail(id, &e),
        }
    }
    Ok(summary)
}
