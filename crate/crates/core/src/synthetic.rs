//! Synthetic scenes with known cloud and snow labels.
//!
//! Clouds are bright, spatially smooth and have soft edges. Snow is bright
//! with strong pixel-scale texture. The QA band flags snow as cloud as well
//! as snow, reproducing the mislabelling of default ground truths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::raster::{BandId, BitPattern, MaskGrid, QaBitConfig, QaRaster, Raster};
use crate::tensor::{Scalar, Shape4, Tensor4};
use crate::training::Sample;

pub const CLOUD_BIT: u8 = 4;
pub const SNOW_BITS: [u8; 2] = [9, 10];

/// QA bit layout used by every generator here: bit 4 for cloud, bits 9 and
/// 10 both set for snow.
pub fn qa_config() -> QaBitConfig {
    QaBitConfig {
        cloud: BitPattern::new(&[(CLOUD_BIT, true)]).expect("valid pattern"),
        snow: BitPattern::new(&[(SNOW_BITS[0], true), (SNOW_BITS[1], true)]).expect("valid pattern"),
    }
}

fn cloud_word() -> u16 {
    1 << CLOUD_BIT
}

fn snow_word() -> u16 {
    (1 << SNOW_BITS[0]) | (1 << SNOW_BITS[1])
}

/// A generated scene and its true labels.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Red, Green, Blue, Nir.
    pub bands: [Raster; 4],
    pub qa: QaRaster,
    pub cloud: MaskGrid,
    pub snow: MaskGrid,
}

impl SyntheticScene {
    pub fn band_refs(&self) -> [&Raster; 4] {
        [&self.bands[0], &self.bands[1], &self.bands[2], &self.bands[3]]
    }

    pub fn blue(&self) -> &Raster {
        &self.bands[2]
    }

    /// Cloud or snow: what the QA band calls cloud.
    pub fn default_label(&self) -> MaskGrid {
        MaskGrid::from_fn(self.cloud.width(), self.cloud.height(), |x, y| self.cloud.get(x, y) || self.snow.get(x, y))
    }
}

fn smoothstep(e0: f64, e1: f64, v: f64) -> f64 {
    let t = ((v - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Reflectance of clear ground per band (R, G, B, Nir).
const GROUND: [f64; 4] = [0.16, 0.13, 0.10, 0.32];
const CLOUD: [f64; 4] = [0.78, 0.80, 0.82, 0.74];
const SNOW: [f64; 4] = [0.66, 0.68, 0.70, 0.58];
/// Half-width of the uniform per-pixel snow texture.
const SNOW_TEXTURE: f64 = 0.32;

/// Soft-edged ellipse: opacity 1 inside `r - soft/2`, 0 outside `r + soft/2`.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    soft: f64,
}

impl Blob {
    fn opacity(&self, x: f64, y: f64) -> f64 {
        let d = (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt();
        let r = self.rx.min(self.ry);
        // distance outside the ellipse, approximately in pixels
        let out = (d - 1.0) * r;
        1.0 - smoothstep(-self.soft / 2.0, self.soft / 2.0, out)
    }
}

/// Builds a scene from cloud opacity and snow membership functions.
fn compose(
    w: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
    opacity: impl Fn(f64, f64) -> f64,
    in_snow: impl Fn(f64, f64) -> bool,
) -> SyntheticScene {
    let phase: [f64; 2] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let mut bands: [Vec<u16>; 4] = Default::default();
    let mut cloud = Vec::with_capacity(w * h);
    let mut snow = Vec::with_capacity(w * h);
    let mut words = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let a = opacity(fx, fy);
            let s = in_snow(fx, fy);
            let ground_var = 0.03 * ((fx / 23.0 + phase[0]).sin() + (fy / 31.0 + phase[1]).cos());
            let texture = if s { rng.gen_range(-SNOW_TEXTURE..SNOW_TEXTURE) } else { 0.0 };
            let cloud_var = 0.04 * ((fx + fy) / 40.0 + phase[1]).sin();
            for (b, out) in bands.iter_mut().enumerate() {
                let surface = if s { SNOW[b] + texture } else { GROUND[b] + ground_var };
                out.push(quantize((1.0 - a) * surface + a * (CLOUD[b] + cloud_var)));
            }
            let is_cloud = a > 0.5;
            let visible_snow = s && !is_cloud;
            cloud.push(is_cloud);
            snow.push(visible_snow);
            words.push(
                if is_cloud || visible_snow { cloud_word() } else { 0 } | if visible_snow { snow_word() } else { 0 },
            );
        }
    }
    let [r, g, b, n] = bands;
    let mk = |v: Vec<u16>, id: BandId| Raster::new(w, h, v, id).expect("dims match");
    SyntheticScene {
        bands: [mk(r, BandId::B4), mk(g, BandId::B3), mk(b, BandId::B2), mk(n, BandId::B5)],
        qa: QaRaster::new(w, h, words).expect("dims match"),
        cloud: MaskGrid::new(w, h, cloud).expect("dims match"),
        snow: MaskGrid::new(w, h, snow).expect("dims match"),
    }
}

/// 256x256 scene: one smooth soft-edged cloud on the left, one textured snow
/// field on the right, clear ground elsewhere. Both are cloud in the QA band.
pub fn snow_and_cloud_256(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blob = Blob { cx: 72.0, cy: 128.0, rx: 60.0, ry: 80.0, soft: 40.0 };
    compose(256, 256, &mut rng, |x, y| blob.opacity(x, y), |x, y| (150.0..240.0).contains(&x) && (30.0..226.0).contains(&y))
}

/// Scene of size `w x h` with `clouds` random soft ellipses and `snow_fields`
/// random textured snow ellipses.
pub fn random_scene(w: usize, h: usize, clouds: usize, snow_fields: usize, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = w.min(h) as f64;
    let blob = |rng: &mut ChaCha8Rng, soft: f64| Blob {
        cx: rng.gen_range(0.0..w as f64),
        cy: rng.gen_range(0.0..h as f64),
        rx: rng.gen_range(0.08..0.22) * scale,
        ry: rng.gen_range(0.08..0.22) * scale,
        soft,
    };
    let cloud_blobs: Vec<Blob> = (0..clouds).map(|_| blob(&mut rng, 0.1 * scale)).collect();
    let snow_blobs: Vec<Blob> = (0..snow_fields).map(|_| blob(&mut rng, 0.0)).collect();
    compose(
        w,
        h,
        &mut rng,
        |x, y| cloud_blobs.iter().map(|b| b.opacity(x, y)).fold(0.0, f64::max),
        |x, y| snow_blobs.iter().any(|b| b.opacity(x, y) > 0.5),
    )
}

/// Training pairs cut from a scene into `size x size` tiles (scene dims must
/// be multiples of `size`), labelled with `label`.
pub fn scene_samples<T: Scalar>(scene: &SyntheticScene, label: &MaskGrid, size: usize) -> Result<Vec<Sample<T>>> {
    let (w, h) = (label.width(), label.height());
    let mut out = Vec::new();
    for ty in 0..h / size {
        for tx in 0..w / size {
            let (x0, y0) = (tx * size, ty * size);
            let x = Tensor4::from_fn(Shape4::new(1, 4, size, size), |_, c, y, x| {
                T::of(f64::from(scene.bands[c].get(x0 + x, y0 + y)) / 65535.0)
            });
            let hm = Tensor4::from_fn(Shape4::new(1, 1, size, size), |_, _, y, x| {
                if label.get(x0 + x, y0 + y) {
                    T::one()
                } else {
                    T::zero()
                }
            });
            out.push(Sample { x, h: hm });
        }
    }
    Ok(out)
}

/// `n` patches of `size x size` with one to three bright geometric clouds
/// (discs, rectangles, ellipses) over darker ground; the mask marks the
/// clouds.
pub fn geometric_patches<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<Sample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    (0..n)
        .map(|_| {
            let shapes: Vec<(u8, f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    (
                        rng.gen_range(0..3u8),
                        rng.gen_range(0.15 * s..0.85 * s),
                        rng.gen_range(0.15 * s..0.85 * s),
                        rng.gen_range(0.1 * s..0.3 * s),
                        rng.gen_range(0.1 * s..0.3 * s),
                    )
                })
                .collect();
            let inside = |x: f64, y: f64| {
                shapes.iter().any(|&(kind, cx, cy, a, b)| match kind {
                    0 => (x - cx).hypot(y - cy) <= a,
                    1 => (x - cx).abs() <= a && (y - cy).abs() <= b,
                    _ => ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0,
                })
            };
            let mask: Vec<bool> =
                (0..size * size).map(|i| inside((i % size) as f64 + 0.5, (i / size) as f64 + 0.5)).collect();
            let h = Tensor4::from_fn(Shape4::new(1, 1, size, size), |_, _, y, x| {
                if mask[y * size + x] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let x = Tensor4::from_fn(Shape4::new(1, 4, size, size), |_, c, y, x| {
                let base = if mask[y * size + x] { CLOUD[c] } else { GROUND[c] };
                T::of(base + rng.gen_range(-0.03..0.03))
            });
            Sample { x, h }
        })
        .collect()
}
