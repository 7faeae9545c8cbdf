//! Scene tiling, resizing and stitching for patch-wise inference.
//!
//! A scene is cut into non-overlapping `native x native` patches (right and
//! bottom edges reflect-padded up to a whole number of patches), each patch
//! is resized to the network input size, run through the network, resized
//! back and placed into the scene-sized probability map. The map is
//! thresholded once, after stitching.

use crate::error::{Error, Result};
use crate::raster::{BandId, MaskGrid, Raster};
use crate::tensor::{Scalar, Shape4, Tensor4};
use crate::unet::{predict, ModelParams};

/// Row-major 2-D grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("grid must have positive dims, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Length { expected: width * height, found: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: T) -> Result<Self> {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, data)
    }

    /// Sample values divided by 65535.
    pub fn from_raster(r: &Raster) -> Self {
        let data = r.normalized().into_iter().map(T::of).collect();
        Self { width: r.width(), height: r.height(), data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }
}

/// How a scene is cut into patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub scene_width: usize,
    pub scene_height: usize,
    /// Patch edge in scene pixels.
    pub native: usize,
    /// Patch edge at network input.
    pub net: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
}

impl PatchGrid {
    pub const NATIVE: usize = 384;
    pub const NET: usize = 192;

    pub fn new(scene_width: usize, scene_height: usize, native: usize, net: usize) -> Result<Self> {
        if scene_width == 0 || scene_height == 0 || native == 0 || net == 0 {
            return Err(Error::Domain("scene and patch sizes must be positive".into()));
        }
        let cols = scene_width.div_ceil(native);
        let rows = scene_height.div_ceil(native);
        Ok(Self {
            scene_width,
            scene_height,
            native,
            net,
            rows,
            cols,
            pad_right: cols * native - scene_width,
            pad_bottom: rows * native - scene_height,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of the `index`-th patch in row-major order.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Scene pixel of the top-left corner of the `index`-th patch.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        let (r, c) = self.position(index);
        (c * self.native, r * self.native)
    }
}

/// Mirror index for out-of-bounds reads; repeats with period `2(n-1)`, so any
/// pad width is valid.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Cuts `img` into `native x native` patches in row-major order.
pub fn tile<T: Scalar>(img: &Grid<T>, grid: &PatchGrid) -> Result<Vec<Grid<T>>> {
    if img.width != grid.scene_width || img.height != grid.scene_height {
        return Err(Error::shape(format!(
            "image is {}x{}, patch grid built for {}x{}",
            img.width, img.height, grid.scene_width, grid.scene_height
        )));
    }
    let n = grid.native;
    Ok((0..grid.len())
        .map(|i| {
            let (x0, y0) = grid.origin(i);
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                let sy = reflect(y0 + y, img.height);
                for x in 0..n {
                    data.push(img.get(reflect(x0 + x, img.width), sy));
                }
            }
            Grid { width: n, height: n, data }
        })
        .collect())
}

/// `a + (b - a) t`, clamped to the interval spanned by `a` and `b`.
#[inline]
pub(crate) fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// Bilinear read at a fractional position; coordinates are clamped to the
/// plane.
pub(crate) fn sample_bilinear<T: Scalar>(plane: &[T], w: usize, h: usize, x: f64, y: f64) -> T {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = T::of(x - x0 as f64);
    let ty = T::of(y - y0 as f64);
    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
    let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
    lerp(top, bottom, ty)
}

/// Source coordinate of output index `i` under corner alignment: the first
/// and last samples of input and output coincide.
#[inline]
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

pub fn resize_bilinear<T: Scalar>(img: &Grid<T>, out_w: usize, out_h: usize) -> Result<Grid<T>> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Domain(format!("resize target must be positive, got {out_w}x{out_h}")));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    Grid::from_fn(out_w, out_h, |x, y| {
        sample_bilinear(
            &img.data,
            img.width,
            img.height,
            corner_aligned(x, img.width, out_w),
            corner_aligned(y, img.height, out_h),
        )
    })
}

/// Places `native x native` patches back into a scene-sized map, dropping the
/// padded margin.
pub fn stitch<T: Scalar>(patches: &[Grid<T>], grid: &PatchGrid) -> Result<Grid<T>> {
    if patches.len() != grid.len() {
        return Err(Error::shape(format!("expected {} patches, got {}", grid.len(), patches.len())));
    }
    let n = grid.native;
    if let Some(p) = patches.iter().find(|p| p.width != n || p.height != n) {
        return Err(Error::shape(format!("patch is {}x{}, expected {n}x{n}", p.width, p.height)));
    }
    let (w, h) = (grid.scene_width, grid.scene_height);
    let mut data = vec![T::zero(); w * h];
    for (i, p) in patches.iter().enumerate() {
        let (x0, y0) = grid.origin(i);
        for y in 0..n.min(h - y0) {
            let row = (y0 + y) * w + x0;
            let len = n.min(w - x0);
            data[row..row + len].copy_from_slice(&p.data[y * n..y * n + len]);
        }
    }
    Grid::new(w, h, data)
}

/// Pixel is set iff `prob >= threshold`.
pub fn binarize<T: Scalar>(prob: &Grid<T>, threshold: f64) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    MaskGrid::new(prob.width, prob.height, prob.data.iter().map(|p| p.as_f64() >= threshold).collect())
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const BANDS: usize = 4;

/// Patch layout and binarization settings for [`predict_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictConfig {
    pub native: usize,
    pub threshold: f64,
    /// Patches per forward call.
    pub batch: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { native: PatchGrid::NATIVE, threshold: DEFAULT_THRESHOLD, batch: 4 }
    }
}

/// Cloud probability map and binary mask for a scene given as Red, Green,
/// Blue, Nir rasters.
pub fn predict_scene<T: Scalar>(
    params: &ModelParams<T>,
    bands: [&Raster; BANDS],
    cfg: &PredictConfig,
) -> Result<(Grid<T>, MaskGrid)> {
    let n = scene_grid(params, bands, cfg)?.len();
    let order: Vec<usize> = (0..n).collect();
    predict_scene_in_order(params, bands, cfg, &order)
}

fn scene_grid<T: Scalar>(params: &ModelParams<T>, bands: [&Raster; BANDS], cfg: &PredictConfig) -> Result<PatchGrid> {
    let (w, h) = (bands[0].width(), bands[0].height());
    if let Some(b) = bands.iter().find(|b| (b.width(), b.height()) != (w, h)) {
        return Err(Error::shape(format!("band {} is {}x{}, expected {w}x{h}", b.band(), b.width(), b.height())));
    }
    for (b, id) in bands.iter().zip(BandId::RGBNIR) {
        if b.band() != id {
            return Err(Error::shape(format!("band order must be B4,B3,B2,B5; got {} where {id} belongs", b.band())));
        }
    }
    let net = params.config();
    if net.in_channels != BANDS {
        return Err(Error::Config(format!("network takes {} channels, scenes have {BANDS}", net.in_channels)));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("prediction batch must be positive".into()));
    }
    PatchGrid::new(w, h, cfg.native, net.input_size)
}

/// As [`predict_scene`], running patches in the given order. The result does
/// not depend on the order.
pub fn predict_scene_in_order<T: Scalar>(
    params: &ModelParams<T>,
    bands: [&Raster; BANDS],
    cfg: &PredictConfig,
    order: &[usize],
) -> Result<(Grid<T>, MaskGrid)> {
    let grid = scene_grid(params, bands, cfg)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..grid.len()).collect::<Vec<_>>() {
        return Err(Error::Input(format!("order must be a permutation of 0..{}", grid.len())));
    }
    let net = grid.net;
    let per_band: Vec<Vec<Grid<T>>> =
        bands.iter().map(|b| tile(&Grid::from_raster(b), &grid)).collect::<Result<_>>()?;

    let mut probs: Vec<Option<Grid<T>>> = vec![None; grid.len()];
    for chunk in order.chunks(cfg.batch) {
        let mut data = Vec::with_capacity(chunk.len() * BANDS * net * net);
        for &i in chunk {
            for band in &per_band {
                data.extend(resize_bilinear(&band[i], net, net)?.into_vec());
            }
        }
        let x = Tensor4::from_vec(Shape4::new(chunk.len(), BANDS, net, net), data)?;
        let out = predict(params, &x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let small = Grid::new(net, net, out.plane(k, 0).to_vec())?;
            probs[i] = Some(resize_bilinear(&small, grid.native, grid.native)?);
        }
    }
    let probs: Vec<Grid<T>> = probs.into_iter().map(|p| p.expect("every patch predicted")).collect();
    let map = stitch(&probs, &grid)?;
    let mask = binarize(&map, cfg.threshold)?;
    Ok((map, mask))
}
