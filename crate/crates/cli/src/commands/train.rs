//! `train`: fit the network to the prepared patches, checkpointing as it
//! goes, optionally continuing from an earlier checkpoint.

use std::fs;

use anyhow::{ensure, Context, Result};
use cloudfcn::patch::{resize_bilinear, Grid};
use cloudfcn::raster::{read_mask, read_raster, BandId};
use cloudfcn::tensor::{Shape4, Tensor4};
use cloudfcn::training::{format_loss_log, resume, Sample, TrainState};
use cloudfcn::unet::CheckpointFile;

use super::prepare::{parse_manifest, GT_FILE};
use crate::config::PipelineConfig;
use crate::Summary;

/// Loads one prepared patch resized to the network input. The mask is
/// resized bilinearly and thresholded at 0.5.
fn load_sample(cfg: &PipelineConfig, patch: &str) -> Result<Sample<f32>> {
    let dir = cfg.layout.patch_dir(patch);
    let s = cfg.network.input_size;
    let mut x = Vec::with_capacity(4 * s * s);
    for band in BandId::RGBNIR {
        let path = dir.join(format!("{band}.csr"));
        let r = read_raster(&path).with_context(|| format!("reading {}", path.display()))?;
        ensure!(r.band() == band, "{} holds band {}", path.display(), r.band());
        x.extend(resize_bilinear(&Grid::<f32>::from_raster(&r), s, s)?.into_vec());
    }
    let path = dir.join(GT_FILE);
    let m = read_mask(&path).with_context(|| format!("reading {}", path.display()))?;
    let g = Grid::new(m.width(), m.height(), m.bits().iter().map(|&b| f32::from(u8::from(b))).collect())?;
    let h = resize_bilinear(&g, s, s)?.into_vec().into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Sample { x: Tensor4::from_vec(Shape4::new(1, 4, s, s), x)?, h: Tensor4::from_vec(Shape4::new(1, 1, s, s), h)? })
}

fn initial_state(cfg: &PipelineConfig) -> Result<TrainState<f32>> {
    let Some(path) = &cfg.resume_from else {
        return Ok(TrainState::fresh(&cfg.network, &cfg.train)?);
    };
    let file = CheckpointFile::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    ensure!(file.cfg == cfg.network, "checkpoint network {:?} differs from config {:?}", file.cfg, cfg.network);
    ensure!(file.seed == cfg.seed, "checkpoint seed {} differs from config seed {}", file.seed, cfg.seed);
    ensure!(file.init == cfg.train.init, "checkpoint init {:?} differs from config {:?}", file.init, cfg.train.init);
    Ok(TrainState::from_checkpoint(&file, cfg.train.adam)?)
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary> {
    let manifest = cfg.layout.manifest();
    ensure!(manifest.is_file(), "no patch manifest at {}; run prepare first", manifest.display());
    if let Some(p) = &cfg.resume_from {
        ensure!(p.is_file(), "resume checkpoint {} does not exist", p.display());
    }
    let records = parse_manifest(&fs::read_to_string(&manifest)?)?;
    ensure!(!records.is_empty(), "manifest {} lists no patches", manifest.display());
    let data = records.iter().map(|r| load_sample(cfg, &r.patch_id)).collect::<Result<Vec<_>>>()?;
    let state = initial_state(cfg)?;
    if state.epochs_done() > 0 {
        println!("resuming after epoch {}", state.epochs_done());
    }
    let log_path = cfg.layout.loss_log();
    fs::create_dir_all(cfg.layout.model())?;
    let epochs = cfg.train.epochs;
    let state = resume(state, &data, &cfg.train, |s| {
        let r = s.log.last().expect("called after an epoch");
        eprintln!("epoch {}/{epochs} loss {:.6}", r.epoch, r.mean_loss);
        fs::write(&log_path, format_loss_log(&s.log))?;
        Ok(())
    })?;
    fs::write(&log_path, format_loss_log(&state.log))?;
    let last = state.log.last().map_or(f64::NAN, |r| r.mean_loss);
    println!(
        "trained {} epochs on {} patches, final loss {last:.6}, checkpoint {}",
        state.epochs_done(),
        data.len(),
        cfg.layout.checkpoint().display()
    );
    Ok(Summary::default())
}
