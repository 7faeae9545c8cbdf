//! Snow/ice removal from default cloud ground truths.
//!
//! Snow and ice carry high-frequency texture in the blue band while cloud
//! interiors are smooth, so pixels whose Sobel gradient magnitude exceeds a
//! global threshold are treated as snow and dropped from the cloud mask.

use crate::error::{Error, Result};
use crate::raster::{unambiguous_cloud, decode_qa, BandId, MaskGrid, QaBitConfig, QaRaster, QaRegions, Raster};

/// Band used for snow detection unless overridden.
pub const DEFAULT_SNOW_BAND: BandId = BandId::B2;

/// Default percentile of calibration-region magnitudes used as the threshold.
pub const DEFAULT_PERCENTILE: f64 = 95.0;

/// Per-pixel gradient magnitude of a normalized band.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    magnitudes: Vec<f64>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.magnitudes[y * self.width + x]
    }

    fn check_mask(&self, m: &MaskGrid, what: &str) -> Result<()> {
        if m.width() != self.width || m.height() != self.height {
            return Err(Error::Shape(format!(
                "{what} mask is {}x{}, gradient field is {}x{}",
                m.width(),
                m.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Sobel gradient magnitude over `values` (row-major, `width * height`),
/// with replicate padding at the borders.
pub fn sobel_magnitude(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(values.len(), width * height);
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        values[yc * width + xc]
    };
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Gradient magnitude of a band after scaling its samples into `[0, 1]`.
pub fn gradient_magnitude(band: &Raster) -> GradientField {
    GradientField {
        width: band.width(),
        height: band.height(),
        magnitudes: sobel_magnitude(&band.normalized(), band.width(), band.height()),
    }
}

/// Mean gradient magnitude per QA region. A region with no pixels has no
/// mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionGradientStats {
    pub mean_snow: Option<f64>,
    pub mean_cloud: Option<f64>,
    pub mean_clear: Option<f64>,
    pub count_snow: usize,
    pub count_cloud: usize,
    pub count_clear: usize,
}

pub fn region_stats(g: &GradientField, regions: &QaRegions) -> Result<RegionGradientStats> {
    g.check_mask(&regions.cloud, "cloud")?;
    g.check_mask(&regions.snow, "snow")?;
    g.check_mask(&regions.clear, "clear")?;

    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let masks = [&regions.snow, &regions.cloud, &regions.clear];
    for (i, &m) in g.magnitudes.iter().enumerate() {
        let hits: Vec<usize> = (0..3).filter(|&r| masks[r].bits()[i]).collect();
        if hits.len() != 1 {
            return Err(Error::Input(format!("region masks do not partition pixel {i}")));
        }
        sums[hits[0]] += m;
        counts[hits[0]] += 1;
    }
    let mean = |r: usize| (counts[r] > 0).then(|| sums[r] / counts[r] as f64);
    Ok(RegionGradientStats {
        mean_snow: mean(0),
        mean_cloud: mean(1),
        mean_clear: mean(2),
        count_snow: counts[0],
        count_cloud: counts[1],
        count_clear: counts[2],
    })
}

/// Pixels with magnitude strictly greater than `threshold`.
pub fn snow_mask(g: &GradientField, threshold: f64) -> Result<MaskGrid> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Domain(format!("snow threshold must be >= 0, got {threshold}")));
    }
    MaskGrid::new(g.width, g.height, g.magnitudes.iter().map(|&m| m > threshold).collect())
}

/// `default_cloud AND NOT snow`.
pub fn correct_ground_truth(default_cloud: &MaskGrid, snow: &MaskGrid) -> Result<MaskGrid> {
    default_cloud.check_dims(snow, "ground truth vs snow mask")?;
    let bits = default_cloud.bits().iter().zip(snow.bits()).map(|(&c, &s)| c && !s).collect();
    MaskGrid::new(default_cloud.width(), default_cloud.height(), bits)
}

/// Nearest-rank percentile of the magnitudes inside `region`; `None` when the
/// region is empty.
///
/// With `p` in percent, this is the smallest magnitude `t` such that at least
/// `p`% of region pixels are `<= t`, so at most `(100 - p)`% lie strictly
/// above it.
pub fn region_percentile(g: &GradientField, region: &MaskGrid, p: f64) -> Result<Option<f64>> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Domain(format!("percentile must be in [0, 100], got {p}")));
    }
    g.check_mask(region, "calibration")?;
    let mut vals: Vec<f64> =
        g.magnitudes.iter().zip(region.bits()).filter(|(_, &b)| b).map(|(&m, _)| m).collect();
    if vals.is_empty() {
        return Ok(None);
    }
    vals.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * vals.len() as f64).ceil() as usize;
    Ok(Some(vals[rank.clamp(1, vals.len()) - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    Fixed(f64),
    /// Percentile of magnitudes over the calibration cloud region, or
    /// `fallback` when that region is empty.
    CloudPercentile { percentile: f64, fallback: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::CloudPercentile { percentile: DEFAULT_PERCENTILE, fallback: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdSource {
    Fixed,
    Percentile,
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChosenThreshold {
    pub value: f64,
    pub source: ThresholdSource,
}

impl ThresholdRule {
    pub fn resolve(&self, g: &GradientField, calibration: Option<&MaskGrid>) -> Result<ChosenThreshold> {
        match *self {
            ThresholdRule::Fixed(value) => Ok(ChosenThreshold { value, source: ThresholdSource::Fixed }),
            ThresholdRule::CloudPercentile { percentile, fallback } => {
                let found = match calibration {
                    Some(region) => region_percentile(g, region, percentile)?,
                    None => None,
                };
                Ok(match found {
                    Some(value) => ChosenThreshold { value, source: ThresholdSource::Percentile },
                    None => ChosenThreshold { value: fallback, source: ThresholdSource::Fallback },
                })
            }
        }
    }
}

/// Everything produced by correcting one scene.
#[derive(Clone, Debug)]
pub struct SceneCorrection {
    pub regions: QaRegions,
    pub stats: RegionGradientStats,
    pub threshold: ChosenThreshold,
    pub snow: MaskGrid,
    pub default_cloud: MaskGrid,
    pub corrected: MaskGrid,
}

impl SceneCorrection {
    /// Default-cloud pixels removed by the correction.
    pub fn removed(&self) -> usize {
        self.default_cloud.count() - self.corrected.count()
    }
}

/// Runs the full correction for one scene: decode the QA band, measure the
/// snow band's gradient, pick the threshold from QA cloud pixels not also
/// flagged as snow, and subtract the snow mask from the default cloud mask.
pub fn correct_scene(
    snow_band: &Raster,
    qa: &QaRaster,
    qa_cfg: &QaBitConfig,
    rule: ThresholdRule,
) -> Result<SceneCorrection> {
    qa.check_companion(snow_band)?;
    let g = gradient_magnitude(snow_band);
    let regions = decode_qa(qa, qa_cfg);
    let stats = region_stats(&g, &regions)?;
    let calibration = unambiguous_cloud(qa, qa_cfg);
    let threshold = rule.resolve(&g, Some(&calibration))?;
    let snow = snow_mask(&g, threshold.value)?;
    let corrected = correct_ground_truth(&regions.cloud, &snow)?;
    Ok(SceneCorrection { default_cloud: regions.cloud.clone(), regions, stats, threshold, snow, corrected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BitPattern;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(w: usize, h: usize, m: Vec<f64>) -> GradientField {
        GradientField { width: w, height: h, magnitudes: m }
    }

    fn mask(w: usize, h: usize, bits: &[u8]) -> MaskGrid {
        MaskGrid::new(w, h, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    /// Per-pixel Sobel written out tap by tap.
    fn sobel_oracle(v: &[f64], w: usize, h: usize, x: usize, y: usize) -> f64 {
        const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let (mut gx, mut gy) = (0.0, 0.0);
        for (r, (kx_row, ky_row)) in KX.iter().zip(&KY).enumerate() {
            for c in 0..3 {
                let yy = (y as isize + r as isize - 1).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + c as isize - 1).clamp(0, w as isize - 1) as usize;
                gx += kx_row[c] * v[yy * w + xx];
                gy += ky_row[c] * v[yy * w + xx];
            }
        }
        (gx * gx + gy * gy).sqrt()
    }

    #[test]
    fn constant_raster_has_zero_gradient() {
        let r = Raster::new(5, 4, vec![1234; 20], BandId::B2).unwrap();
        assert!(gradient_magnitude(&r).magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn vertical_step_edge() {
        let r = Raster::new(6, 5, (0..30).map(|i| if i % 6 >= 3 { 65535 } else { 0 }).collect(), BandId::B2).unwrap();
        let g = gradient_magnitude(&r);
        // interior pixels either side of the step
        assert_eq!(g.get(2, 2), 4.0);
        assert_eq!(g.get(3, 2), 4.0);
        assert_eq!(g.get(0, 2), 0.0);
        assert_eq!(g.get(5, 2), 0.0);
    }

    #[test]
    fn random_raster_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<u16> = (0..64).map(|_| rng.gen()).collect();
        let r = Raster::new(8, 8, samples, BandId::B2).unwrap();
        let g = gradient_magnitude(&r);
        let v = r.normalized();
        for y in 0..8 {
            for x in 0..8 {
                assert!((g.get(x, y) - sobel_oracle(&v, 8, 8, x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_with_absent_regions() {
        let g = field(2, 2, vec![0.0; 4]);
        let regions = QaRegions {
            cloud: MaskGrid::empty(2, 2),
            snow: MaskGrid::empty(2, 2),
            clear: MaskGrid::full(2, 2),
        };
        let s = region_stats(&g, &regions).unwrap();
        assert_eq!(s.mean_clear, Some(0.0));
        assert_eq!((s.mean_cloud, s.mean_snow), (None, None));
    }

    #[test]
    fn stats_hand_arithmetic() {
        let g = field(4, 1, vec![2.0, 4.0, 1.0, 0.0]);
        let regions = QaRegions {
            snow: mask(4, 1, &[1, 1, 0, 0]),
            cloud: mask(4, 1, &[0, 0, 1, 0]),
            clear: mask(4, 1, &[0, 0, 0, 1]),
        };
        let s = region_stats(&g, &regions).unwrap();
        assert_eq!((s.mean_snow, s.mean_cloud, s.mean_clear), (Some(3.0), Some(1.0), Some(0.0)));
        assert_eq!((s.count_snow, s.count_cloud, s.count_clear), (2, 1, 1));
    }

    #[test]
    fn stats_reject_bad_masks() {
        let g = field(2, 1, vec![1.0, 1.0]);
        let overlapping = QaRegions { snow: mask(2, 1, &[1, 1]), cloud: mask(2, 1, &[1, 0]), clear: mask(2, 1, &[0, 0]) };
        assert!(matches!(region_stats(&g, &overlapping), Err(Error::Input(_))));
        let wrong_dims = QaRegions { snow: MaskGrid::empty(1, 2), cloud: MaskGrid::empty(2, 1), clear: MaskGrid::full(2, 1) };
        assert!(matches!(region_stats(&g, &wrong_dims), Err(Error::Shape(_))));
    }

    #[test]
    fn snow_mask_is_strict() {
        let g = field(3, 1, vec![0.0, 3.0, 5.0]);
        assert_eq!(snow_mask(&g, 3.0).unwrap().bits(), &[false, false, true]);
        assert_eq!(snow_mask(&g, 0.0).unwrap().bits(), &[false, true, true]);
        assert_eq!(snow_mask(&g, 1e300).unwrap().count(), 0);
        assert!(snow_mask(&g, -1.0).is_err());
    }

    #[test]
    fn truth_table_correction() {
        let d = mask(4, 1, &[1, 1, 0, 0]);
        let s = mask(4, 1, &[0, 1, 0, 1]);
        assert_eq!(correct_ground_truth(&d, &s).unwrap(), mask(4, 1, &[1, 0, 0, 0]));
        assert_eq!(correct_ground_truth(&d, &MaskGrid::empty(4, 1)).unwrap(), d);
        assert_eq!(correct_ground_truth(&d, &MaskGrid::full(4, 1)).unwrap().count(), 0);
        assert!(correct_ground_truth(&d, &MaskGrid::empty(2, 2)).is_err());
    }

    #[test]
    fn nearest_rank_percentile() {
        let g = field(5, 1, vec![5.0, 1.0, 4.0, 2.0, 3.0]);
        let all = MaskGrid::full(5, 1);
        assert_eq!(region_percentile(&g, &all, 95.0).unwrap(), Some(5.0));
        assert_eq!(region_percentile(&g, &all, 60.0).unwrap(), Some(3.0));
        assert_eq!(region_percentile(&g, &all, 0.0).unwrap(), Some(1.0));
        assert_eq!(region_percentile(&g, &MaskGrid::empty(5, 1), 50.0).unwrap(), None);
    }

    #[test]
    fn threshold_rule_falls_back_on_empty_region() {
        let g = field(2, 1, vec![0.1, 0.9]);
        let rule = ThresholdRule::CloudPercentile { percentile: 95.0, fallback: 0.42 };
        let t = rule.resolve(&g, Some(&MaskGrid::empty(2, 1))).unwrap();
        assert_eq!(t, ChosenThreshold { value: 0.42, source: ThresholdSource::Fallback });
        let t = rule.resolve(&g, Some(&MaskGrid::full(2, 1))).unwrap();
        assert_eq!(t, ChosenThreshold { value: 0.9, source: ThresholdSource::Percentile });
    }

    #[test]
    fn scene_correction_end_to_end() {
        // cols 0-2 flat cloud, 3-4 flat clear, 5-9 textured snow also flagged as cloud
        let (w, h) = (10usize, 8usize);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let band: Vec<u16> = (0..w * h)
            .map(|i| if i % w < 5 { 50000 } else { rng.gen_range(20000..65000) })
            .collect();
        let band = Raster::new(w, h, band, BandId::B2).unwrap();
        let (cloud_bit, snow_bit) = (1u16 << 4, 1u16 << 9);
        let words = (0..w * h)
            .map(|i| match i % w {
                0..=2 => cloud_bit,
                3 | 4 => 0,
                _ => cloud_bit | snow_bit,
            })
            .collect();
        let qa = QaRaster::new(w, h, words).unwrap();
        let cfg = QaBitConfig {
            cloud: BitPattern::new(&[(4, true)]).unwrap(),
            snow: BitPattern::new(&[(9, true)]).unwrap(),
        };
        let out = correct_scene(&band, &qa, &cfg, ThresholdRule::default()).unwrap();
        assert_eq!(out.default_cloud.count(), 8 * 8);
        assert_eq!(out.threshold, ChosenThreshold { value: 0.0, source: ThresholdSource::Percentile });
        assert_eq!(out.stats.count_cloud, 64);
        assert_eq!(out.stats.count_snow, 0);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(out.corrected.get(x, y), x < 3, "({x}, {y})");
            }
        }
        assert_eq!(out.removed(), 40);
    }

    proptest! {
        #[test]
        fn correction_never_adds_cloud(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
            let n = bits.len();
            let d = MaskGrid::new(n, 1, bits.iter().map(|b| b.0).collect()).unwrap();
            let s = MaskGrid::new(n, 1, bits.iter().map(|b| b.1).collect()).unwrap();
            prop_assert!(correct_ground_truth(&d, &s).unwrap().is_subset_of(&d));
        }

        #[test]
        fn snow_mask_monotone(m in proptest::collection::vec(0.0f64..10.0, 1..64), t1 in 0.0f64..10.0, t2 in 0.0f64..10.0) {
            let g = field(m.len(), 1, m);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(snow_mask(&g, hi).unwrap().is_subset_of(&snow_mask(&g, lo).unwrap()));
        }

        #[test]
        fn translation_equivariant_on_interior(seed in any::<u64>(), dx in 0usize..3, dy in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (12usize, 12usize);
            let big: Vec<f64> = (0..(w + 3) * (h + 3)).map(|_| rng.gen()).collect();
            let crop = |ox: usize, oy: usize| -> Vec<f64> {
                (0..w * h).map(|i| big[(oy + i / w) * (w + 3) + ox + i % w]).collect()
            };
            let a = sobel_magnitude(&crop(0, 0), w, h);
            let b = sobel_magnitude(&crop(dx, dy), w, h);
            for y in 1..h - 1 - dy {
                for x in 1..w - 1 - dx {
                    prop_assert_eq!(b[y * w + x], a[(y + dy) * w + x + dx]);
                }
            }
        }

        #[test]
        fn stats_decompose_global_mean(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10 * 7;
            let g = field(10, 7, (0..n).map(|_| rng.gen_range(0.0..5.0)).collect());
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let pick = |k: u8| MaskGrid::new(10, 7, labels.iter().map(|&l| l == k).collect()).unwrap();
            let regions = QaRegions { snow: pick(0), cloud: pick(1), clear: pick(2) };
            let s = region_stats(&g, &regions).unwrap();
            let weighted: f64 = [(s.mean_snow, s.count_snow), (s.mean_cloud, s.count_cloud), (s.mean_clear, s.count_clear)]
                .iter()
                .map(|&(m, c)| m.unwrap_or(0.0) * c as f64)
                .sum::<f64>() / n as f64;
            let global = g.magnitudes().iter().sum::<f64>() / n as f64;
            prop_assert!((weighted - global).abs() <= 1e-9 * global.abs().max(1e-300));
        }
    }
}
