//! Scene directories: `<scenes>/<id>/{B2,B3,B4,B5,QA}.csr`.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use cloudfcn::raster::{read_qa, read_raster, BandId, QaRaster, Raster};

pub fn band_path(scenes: &Path, id: &str, band: BandId) -> PathBuf {
    scenes.join(id).join(format!("{band}.csr"))
}

/// Reads one band and checks that the file holds the band its name says.
pub fn load_band(scenes: &Path, id: &str, band: BandId) -> Result<Raster> {
    let path = band_path(scenes, id, band);
    let r = read_raster(&path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(r.band() == band, "{} holds band {}, expected {band}", path.display(), r.band());
    Ok(r)
}

/// Red, Green, Blue, Nir, all the same size.
pub fn load_bands(scenes: &Path, id: &str) -> Result<[Raster; 4]> {
    let [r, g, b, n] = BandId::RGBNIR;
    let bands = [load_band(scenes, id, r)?, load_band(scenes, id, g)?, load_band(scenes, id, b)?, load_band(scenes, id, n)?];
    let (w, h) = (bands[0].width(), bands[0].height());
    for b in &bands[1..] {
        ensure!(
            (b.width(), b.height()) == (w, h),
            "band {} is {}x{}, band {} is {w}x{h}",
            b.band(),
            b.width(),
            b.height(),
            bands[0].band()
        );
    }
    Ok(bands)
}

pub fn load_qa(scenes: &Path, id: &str) -> Result<QaRaster> {
    let path = band_path(scenes, id, BandId::Qa);
    read_qa(&path).with_context(|| format!("reading {}", path.display()))
}

/// Makes a value safe for one CSV field.
pub fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}
