//! `prepare`: cut every scene and its ground truth into native-size patches
//! and write a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use cloudfcn::patch::{tile, Grid, PatchGrid};
use cloudfcn::raster::{read_mask, write_mask, write_raster, BandId, MaskGrid, Raster, SAMPLE_MAX};

use crate::config::PipelineConfig;
use crate::scene::load_bands;
use crate::Summary;

pub const MANIFEST_HEADER: &str = "patch_id,scene_id,row,col,x0,y0";
pub const GT_FILE: &str = "gt.pgm";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
}

pub fn patch_id(scene: &str, row: usize, col: usize) -> String {
    format!("{scene}_r{row:03}_c{col:03}")
}

pub fn format_manifest(records: &[PatchRecord]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.patch_id, r.scene_id, r.row, r.col, r.x0, r.y0);
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<PatchRecord>> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(MANIFEST_HEADER), "manifest header must be {MANIFEST_HEADER:?}");
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let [patch_id, scene_id, row, col, x0, y0] = f.as_slice() else {
                bail!("manifest line {} has {} fields, expected 6", i + 2, f.len());
            };
            let num = |s: &str| s.parse::<usize>().with_context(|| format!("manifest line {}: bad number {s:?}", i + 2));
            Ok(PatchRecord {
                patch_id: (*patch_id).to_owned(),
                scene_id: (*scene_id).to_owned(),
                row: num(row)?,
                col: num(col)?,
                x0: num(x0)?,
                y0: num(y0)?,
            })
        })
        .collect()
}

fn quantize(v: f64) -> u16 {
    (v * SAMPLE_MAX).round() as u16
}

fn mask_grid(m: &MaskGrid) -> Grid<f64> {
    Grid::new(m.width(), m.height(), m.bits().iter().map(|&b| f64::from(u8::from(b))).collect())
        .expect("mask dims are consistent")
}

fn scene(cfg: &PipelineConfig, id: &str, out: &Path) -> Result<Vec<PatchRecord>> {
    let bands = load_bands(&cfg.scenes_dir, id)?;
    let gt_path = cfg.layout.gt_dir(id).join(cfg.train_label.file_name());
    let gt = read_mask(&gt_path).with_context(|| format!("reading {}", gt_path.display()))?;
    let (w, h) = (bands[0].width(), bands[0].height());
    ensure!((gt.width(), gt.height()) == (w, h), "ground truth is {}x{}, scene is {w}x{h}", gt.width(), gt.height());
    let grid = PatchGrid::new(w, h, cfg.native, cfg.network.input_size)?;
    let band_tiles = bands
        .iter()
        .map(|b| tile(&Grid::<f64>::from_raster(b), &grid))
        .collect::<cloudfcn::Result<Vec<_>>>()?;
    let gt_tiles = tile(&mask_grid(&gt), &grid)?;
    let mut records = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (row, col) = grid.position(i);
        let (x0, y0) = grid.origin(i);
        let pid = patch_id(id, row, col);
        let dir = out.join(&pid);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (tiles, band) in band_tiles.iter().zip(BandId::RGBNIR) {
            let t = &tiles[i];
            let r = Raster::new(t.width(), t.height(), t.data().iter().map(|&v| quantize(v)).collect(), band)?;
            write_raster(&r, dir.join(format!("{band}.csr")))?;
        }
        let g = &gt_tiles[i];
        write_mask(&MaskGrid::new(g.width(), g.height(), g.data().iter().map(|&v| v >= 0.5).collect())?, dir.join(GT_FILE))?;
        records.push(PatchRecord { patch_id: pid, scene_id: id.to_owned(), row, col, x0, y0 });
    }
    Ok(records)
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary> {
    let ids = cfg.scene_ids()?;
    let out = cfg.layout.patches();
    let mut summary = Summary::default();
    let mut records = Vec::new();
    for id in &ids {
        match scene(cfg, id, &out) {
            Ok(r) => {
                println!("{id}: {} patches", r.len());
                records.extend(r);
            }
            Err(e) => summary.fail(id, &e),
        }
    }
    fs::create_dir_all(&out)?;
    fs::write(cfg.layout.manifest(), format_manifest(&records))?;
    println!("{} patches from {} scenes", records.len(), ids.len() - summary.failed.len());
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let recs = vec![
            PatchRecord { patch_id: patch_id("a", 0, 1), scene_id: "a".into(), row: 0, col: 1, x0: 384, y0: 0 },
            PatchRecord { patch_id: patch_id("b", 2, 0), scene_id: "b".into(), row: 2, col: 0, x0: 0, y0: 768 },
        ];
        let text = format_manifest(&recs);
        assert!(text.starts_with("patch_id,scene_id,row,col,x0,y0\na_r000_c001,a,0,1,384,0\n"));
        assert_eq!(parse_manifest(&text).unwrap(), recs);
        assert!(parse_manifest("bad\n").is_err());
        assert!(parse_manifest(&format!("{MANIFEST_HEADER}\nx,y,1\n")).is_err());
    }

    #[test]
    fn quantize_inverts_normalisation() {
        for s in [0u16, 1, 2, 12345, 65534, 65535] {
            assert_eq!(quantize(f64::from(s) / SAMPLE_MAX), s);
        }
    }
}
