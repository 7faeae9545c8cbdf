//! Band rasters, QA rasters and binary masks, with their on-disk formats.
//!
//! Band and QA rasters use the CSR1 layout: an ASCII header line
//! `CSR1 <width> <height> <band_id>\n` followed by `width * height`
//! little-endian `u16` samples in row-major order. Masks are 8-bit binary
//! PGM (`P5`), 0 for negative and 255 for positive.
//!
//! Scene identity is carried by the directory layout, not the file: a raster
//! read from `<root>/<scene_id>/B2.csr` gets `scene_id` from its parent
//! directory name.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Maximum value of a 16-bit sample, used for normalization into `[0, 1]`.
pub const SAMPLE_MAX: f64 = 65535.0;

const CSR_MAGIC: &str = "CSR1";
const MAX_HEADER_LEN: usize = 128;

/// Landsat 8 band identifiers, plus the two pseudo-bands this crate writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BandId {
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B9,
    B10,
    B11,
    /// Quality assessment words.
    Qa,
    /// Cloud probability map scaled to 16 bits.
    Prob,
}

impl BandId {
    pub const RED: BandId = BandId::B4;
    pub const GREEN: BandId = BandId::B3;
    pub const BLUE: BandId = BandId::B2;
    pub const NIR: BandId = BandId::B5;

    /// Network input order.
    pub const RGBNIR: [BandId; 4] = [BandId::B4, BandId::B3, BandId::B2, BandId::B5];

    pub fn token(self) -> &'static str {
        match self {
            BandId::B1 => "B1",
            BandId::B2 => "B2",
            BandId::B3 => "B3",
            BandId::B4 => "B4",
            BandId::B5 => "B5",
            BandId::B6 => "B6",
            BandId::B7 => "B7",
            BandId::B8 => "B8",
            BandId::B9 => "B9",
            BandId::B10 => "B10",
            BandId::B11 => "B11",
            BandId::Qa => "QA",
            BandId::Prob => "PROB",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BandId::B1 => "Ultra Blue",
            BandId::B2 => "Blue",
            BandId::B3 => "Green",
            BandId::B4 => "Red",
            BandId::B5 => "Near Infrared",
            BandId::B6 => "Shortwave Infrared 1",
            BandId::B7 => "Shortwave Infrared 2",
            BandId::B8 => "Panchromatic",
            BandId::B9 => "Cirrus",
            BandId::B10 => "Thermal Infrared 1",
            BandId::B11 => "Thermal Infrared 2",
            BandId::Qa => "Quality Assessment",
            BandId::Prob => "Cloud Probability",
        }
    }

    /// Wavelength range in micrometres, for spectral bands.
    pub fn wavelength_um(self) -> Option<(f64, f64)> {
        Some(match self {
            BandId::B1 => (0.435, 0.451),
            BandId::B2 => (0.452, 0.512),
            BandId::B3 => (0.533, 0.590),
            BandId::B4 => (0.636, 0.673),
            BandId::B5 => (0.851, 0.879),
            BandId::B6 => (1.566, 1.651),
            BandId::B7 => (2.107, 2.294),
            BandId::B8 => (0.503, 0.676),
            BandId::B9 => (1.363, 1.384),
            BandId::B10 => (10.60, 11.19),
            BandId::B11 => (11.50, 12.51),
            BandId::Qa | BandId::Prob => return None,
        })
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for BandId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "B1" => BandId::B1,
            "B2" => BandId::B2,
            "B3" => BandId::B3,
            "B4" => BandId::B4,
            "B5" => BandId::B5,
            "B6" => BandId::B6,
            "B7" => BandId::B7,
            "B8" => BandId::B8,
            "B9" => BandId::B9,
            "B10" => BandId::B10,
            "B11" => BandId::B11,
            "QA" => BandId::Qa,
            "PROB" => BandId::Prob,
            other => return Err(Error::format(format!("unknown band id {other:?}"))),
        })
    }
}

/// Single-band 2-D grid of 16-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    samples: Vec<u16>,
    band: BandId,
    scene_id: String,
}

impl Raster {
    pub fn new(width: usize, height: usize, samples: Vec<u16>, band: BandId) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("zero-area raster {width}x{height}")));
        }
        if samples.len() != width * height {
            return Err(Error::Length { expected: width * height, found: samples.len() });
        }
        Ok(Self { width, height, samples, band, scene_id: String::new() })
    }

    pub fn with_scene_id(mut self, scene_id: impl Into<String>) -> Self {
        self.scene_id = scene_id.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn band(&self) -> BandId {
        self.band
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }

    /// Samples divided by 65535.
    pub fn normalized(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| f64::from(s) / SAMPLE_MAX).collect()
    }
}

/// Per-pixel 16-bit quality words for one scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRaster {
    width: usize,
    height: usize,
    words: Vec<u16>,
}

impl QaRaster {
    pub fn new(width: usize, height: usize, words: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("zero-area QA raster {width}x{height}")));
        }
        if words.len() != width * height {
            return Err(Error::Length { expected: width * height, found: words.len() });
        }
        Ok(Self { width, height, words })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            samples: self.words.clone(),
            band: BandId::Qa,
            scene_id: String::new(),
        }
    }

    /// Checks that a companion band raster has the same dimensions.
    pub fn check_companion(&self, band: &Raster) -> Result<()> {
        if band.width() != self.width || band.height() != self.height {
            return Err(Error::shape(format!(
                "QA raster is {}x{} but band {} is {}x{}",
                self.width,
                self.height,
                band.band(),
                band.width(),
                band.height()
            )));
        }
        Ok(())
    }
}

impl From<Raster> for QaRaster {
    fn from(r: Raster) -> Self {
        Self { width: r.width, height: r.height, words: r.samples }
    }
}

/// Row-major binary grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Length { expected: width * height, found: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_dims(&self, other: &MaskGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_dims(&self, other: &MaskGrid, what: &str) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// `true` when every pixel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.same_dims(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// A set of QA bit positions and the values they must carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitPattern {
    mask: u16,
    value: u16,
}

impl BitPattern {
    /// Builds a pattern from `(position, required value)` pairs.
    pub fn new(bits: &[(u8, bool)]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Config("QA bit pattern must name at least one bit".into()));
        }
        let mut mask = 0u16;
        let mut value = 0u16;
        for &(pos, on) in bits {
            if pos > 15 {
                return Err(Error::Config(format!("QA bit position {pos} outside [0, 15]")));
            }
            let bit = 1u16 << pos;
            if mask & bit != 0 {
                return Err(Error::Config(format!("QA bit position {pos} listed twice")));
            }
            mask |= bit;
            if on {
                value |= bit;
            }
        }
        Ok(Self { mask, value })
    }

    pub fn mask(&self) -> u16 {
        self.mask
    }

    pub fn value(&self) -> u16 {
        self.value
    }

    pub fn matches(&self, word: u16) -> bool {
        word & self.mask == self.value
    }
}

/// Which QA bits mark cloud and which mark snow. Pixels matching neither
/// are clear; pixels matching both are cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QaBitConfig {
    pub cloud: BitPattern,
    pub snow: BitPattern,
}

/// Cloud/snow/clear partition decoded from a QA raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRegions {
    pub cloud: MaskGrid,
    pub snow: MaskGrid,
    pub clear: MaskGrid,
}

pub fn decode_qa(qa: &QaRaster, cfg: &QaBitConfig) -> QaRegions {
    let n = qa.words.len();
    let mut cloud = Vec::with_capacity(n);
    let mut snow = Vec::with_capacity(n);
    let mut clear = Vec::with_capacity(n);
    for &w in &qa.words {
        let c = cfg.cloud.matches(w);
        let s = !c && cfg.snow.matches(w);
        cloud.push(c);
        snow.push(s);
        clear.push(!c && !s);
    }
    let (w, h) = (qa.width, qa.height);
    QaRegions {
        cloud: MaskGrid { width: w, height: h, bits: cloud },
        snow: MaskGrid { width: w, height: h, bits: snow },
        clear: MaskGrid { width: w, height: h, bits: clear },
    }
}

/// Pixels whose QA word matches the cloud pattern but not the snow pattern.
///
/// These are the cloud pixels the QA band is not also flagging as snow, used
/// to calibrate the snow gradient threshold.
pub fn unambiguous_cloud(qa: &QaRaster, cfg: &QaBitConfig) -> MaskGrid {
    let bits = qa.words.iter().map(|&w| cfg.cloud.matches(w) && !cfg.snow.matches(w)).collect();
    MaskGrid { width: qa.width, height: qa.height, bits }
}

/// Stacks four bands ordered Red, Green, Blue, Nir into a `1x4xHxW` tensor
/// with values scaled into `[0, 1]`.
pub fn stack_bands<T: Scalar>(bands: [&Raster; 4]) -> Result<Tensor4<T>> {
    let (w, h) = (bands[0].width, bands[0].height);
    for (r, expected) in bands.iter().zip(BandId::RGBNIR) {
        if r.width != w || r.height != h {
            return Err(Error::shape(format!(
                "band {} is {}x{}, expected {w}x{h}",
                r.band, r.width, r.height
            )));
        }
        if r.band != expected {
            return Err(Error::shape(format!(
                "band order must be R,G,B,Nir (B4,B3,B2,B5); got {} where {} belongs",
                r.band, expected
            )));
        }
    }
    let mut data = Vec::with_capacity(4 * w * h);
    for r in bands {
        data.extend(r.samples.iter().map(|&s| T::from_f64(f64::from(s) / SAMPLE_MAX).unwrap()));
    }
    Tensor4::from_vec(Shape4::new(1, 4, h, w), data)
}

pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let header = format!("{CSR_MAGIC} {} {} {}\n", r.width, r.height, r.band);
    let mut buf = Vec::with_capacity(header.len() + 2 * r.samples.len());
    buf.extend_from_slice(header.as_bytes());
    for &s in &r.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER_LEN)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("missing CSR1 header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format("CSR1 header is not ASCII"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some(CSR_MAGIC) {
        return Err(Error::format("bad magic, expected CSR1"));
    }
    let mut dim = |what: &str| -> Result<usize> {
        let tok = tokens.next().ok_or_else(|| Error::format(format!("missing {what}")))?;
        tok.parse().map_err(|_| Error::format(format!("bad {what} {tok:?}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let band: BandId = tokens.next().ok_or_else(|| Error::format("missing band id"))?.parse()?;
    if tokens.next().is_some() {
        return Err(Error::format("trailing tokens in CSR1 header"));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(format!("zero-area header {width}x{height}")));
    }
    let payload = &bytes[nl + 1..];
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("raster dimensions overflow"))?;
    if payload.len() != expected * 2 {
        return Err(Error::Length { expected, found: payload.len() / 2 });
    }
    let samples = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Raster::new(width, height, samples, band)
}

pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    // Raster::new enforces non-zero area, but a raster can also arrive via From.
    if r.width == 0 || r.height == 0 {
        return Err(Error::shape("refusing to write a zero-area raster"));
    }
    fs::write(path, encode_raster(r))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let raster = decode_raster(&bytes)?;
    let scene_id = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    Ok(raster.with_scene_id(scene_id))
}

pub fn read_qa(path: impl AsRef<Path>) -> Result<QaRaster> {
    let r = read_raster(path)?;
    if r.band != BandId::Qa {
        return Err(Error::format(format!("expected a QA raster, found band {}", r.band)));
    }
    Ok(r.into())
}

pub fn encode_mask(m: &MaskGrid) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", m.width, m.height);
    let mut buf = Vec::with_capacity(header.len() + m.bits.len());
    buf.extend_from_slice(header.as_bytes());
    buf.extend(m.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    buf
}

/// Parses a binary PGM. Any non-zero sample is positive.
pub fn decode_mask(bytes: &[u8]) -> Result<MaskGrid> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_pnm_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format("bad magic, expected P5"));
    }
    for (i, what) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_pnm_token(bytes, &mut pos)?;
        fields[i] = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad PGM {what}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != width * height {
        return Err(Error::Length { expected: width * height, found: payload.len() });
    }
    MaskGrid::new(width, height, payload.iter().map(|&b| b != 0).collect())
}

fn next_pnm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("truncated PGM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

pub fn write_mask(m: &MaskGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_mask(m))?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskGrid> {
    decode_mask(&fs::read(path)?)
}
