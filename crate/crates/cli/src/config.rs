//! Pipeline configuration: one TOML file, validated in full before any
//! command touches its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use cloudfcn::correction::ThresholdRule;
use cloudfcn::patch::PredictConfig;
use cloudfcn::raster::{BandId, BitPattern, QaBitConfig};
use cloudfcn::training::{AdamConfig, AugmentConfig, CheckpointPolicy, LossReduction, TrainConfig};
use cloudfcn::unet::{InitMode, NetworkConfig};
use serde::Deserialize;

use crate::layout::Layout;

/// Values given on the command line that replace the file's.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
}

/// Which ground-truth mask from `correct-gt` a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtLabel {
    Corrected,
    Default,
}

impl GtLabel {
    fn parse(s: &str, key: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(GtLabel::Corrected),
            "default" => Ok(GtLabel::Default),
            other => bail!("{key} must be \"corrected\" or \"default\", got {other:?}"),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            GtLabel::Corrected => "corrected_gt.pgm",
            GtLabel::Default => "default_gt.pgm",
        }
    }
}

/// Where `evaluate` finds the reference masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TruthSource {
    Gt(GtLabel),
    /// `<dir>/<scene_id>.pgm`.
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenes_dir: PathBuf,
    pub layout: Layout,
    pub scene_ids: Option<Vec<String>>,
    pub qa: QaBitConfig,
    pub snow_band: BandId,
    pub threshold_rule: ThresholdRule,
    pub network: NetworkConfig,
    pub native: usize,
    pub train: TrainConfig,
    pub train_label: GtLabel,
    pub resume_from: Option<PathBuf>,
    pub predict: PredictConfig,
    pub checkpoint: PathBuf,
    pub truth: TruthSource,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    paths: RawPaths,
    qa: RawQa,
    #[serde(default)]
    correction: RawCorrection,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    patch: RawPatch,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    predict: RawPredict,
    #[serde(default)]
    evaluate: RawEvaluate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    scenes: PathBuf,
    work: PathBuf,
    scene_ids: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBit {
    bit: u8,
    set: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQa {
    cloud: Vec<RawBit>,
    snow: Vec<RawBit>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawCorrection {
    band: String,
    rule: String,
    percentile: f64,
    fallback: f64,
    threshold: Option<f64>,
}

impl Default for RawCorrection {
    fn default() -> Self {
        Self { band: "B2".into(), rule: "percentile".into(), percentile: 95.0, fallback: 0.5, threshold: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawNetwork {
    input_size: usize,
    base_channels: usize,
    channel_cap: usize,
}

impl Default for RawNetwork {
    fn default() -> Self {
        let f = NetworkConfig::FULL;
        Self { input_size: f.input_size, base_channels: f.base_channels, channel_cap: f.channel_cap }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPatch {
    native: usize,
}

impl Default for RawPatch {
    fn default() -> Self {
        Self { native: PredictConfig::default().native }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrain {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    loss_eps: f64,
    reduction: String,
    init: String,
    init_scale: f64,
    hflip: bool,
    rotate90: bool,
    rotate_any: bool,
    /// `[min, max]`, or empty for no zoom.
    zoom: Vec<f64>,
    label: String,
    checkpoint_every: usize,
    resume_from: Option<PathBuf>,
    log_wall_time: bool,
}

impl Default for RawTrain {
    fn default() -> Self {
        let t = TrainConfig::default();
        let zoom = t.augment.zoom.map(|(a, b)| vec![a, b]).unwrap_or_default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            loss_eps: t.loss_eps,
            reduction: "batch".into(),
            init: "fan-in".into(),
            init_scale: 1.0,
            hflip: t.augment.hflip,
            rotate90: t.augment.rotate90,
            rotate_any: t.augment.rotate_any,
            zoom,
            label: "corrected".into(),
            checkpoint_every: 10,
            resume_from: None,
            log_wall_time: t.log_wall_time,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPredict {
    threshold: f64,
    batch: usize,
    checkpoint: Option<PathBuf>,
}

impl Default for RawPredict {
    fn default() -> Self {
        let p = PredictConfig::default();
        Self { threshold: p.threshold, batch: p.batch, checkpoint: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEvaluate {
    truth: String,
    truth_dir: Option<PathBuf>,
}

impl Default for RawEvaluate {
    fn default() -> Self {
        Self { truth: "corrected".into(), truth_dir: None }
    }
}

fn pattern(bits: &[RawBit], what: &str) -> Result<BitPattern> {
    let pairs: Vec<(u8, bool)> = bits.iter().map(|b| (b.bit, b.set)).collect();
    BitPattern::new(&pairs).with_context(|| format!("qa.{what}"))
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn check_scene_id(id: &str) -> Result<()> {
    ensure!(
        !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']),
        "invalid scene id {id:?}"
    );
    Ok(())
}

impl PipelineConfig {
    /// Reads, applies `overrides`, and validates. Relative paths are taken
    /// relative to the config file's directory.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    pub fn parse(text: &str, base: &Path, overrides: Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).context("parsing config")?;
        let seed = overrides.seed.unwrap_or(raw.seed);

        let scenes_dir = resolve(base, raw.paths.scenes);
        ensure!(scenes_dir.is_dir(), "scenes directory {} does not exist", scenes_dir.display());
        let layout = Layout::new(resolve(base, raw.paths.work));
        if let Some(ids) = &raw.paths.scene_ids {
            ensure!(!ids.is_empty(), "paths.scene_ids is empty");
            for id in ids {
                check_scene_id(id)?;
            }
        }

        let qa = QaBitConfig { cloud: pattern(&raw.qa.cloud, "cloud")?, snow: pattern(&raw.qa.snow, "snow")? };

        let c = raw.correction;
        let snow_band: BandId = c.band.parse().context("correction.band")?;
        ensure!(BandId::RGBNIR.contains(&snow_band), "correction.band must be one of B2, B3, B4, B5");
        let threshold_rule = match c.rule.as_str() {
            "percentile" => {
                ensure!(c.percentile > 0.0 && c.percentile <= 100.0, "correction.percentile must be in (0, 100]");
                ensure!(c.fallback.is_finite() && c.fallback >= 0.0, "correction.fallback must be finite and >= 0");
                ThresholdRule::CloudPercentile { percentile: c.percentile, fallback: c.fallback }
            }
            "fixed" => {
                let t = c.threshold.ok_or_else(|| anyhow!("correction.rule = \"fixed\" needs correction.threshold"))?;
                ensure!(t.is_finite() && t >= 0.0, "correction.threshold must be finite and >= 0");
                ThresholdRule::Fixed(t)
            }
            other => bail!("correction.rule must be \"percentile\" or \"fixed\", got {other:?}"),
        };

        let n = raw.network;
        let network = NetworkConfig::new(n.input_size, BandId::RGBNIR.len(), n.base_channels, n.channel_cap)
            .context("network")?;
        let native = raw.patch.native;
        ensure!(native > 0, "patch.native must be positive");

        let t = raw.train;
        let reduction = match t.reduction.as_str() {
            "batch" => LossReduction::Batch,
            "per-sample" => LossReduction::PerSample,
            other => bail!("train.reduction must be \"batch\" or \"per-sample\", got {other:?}"),
        };
        let init = match t.init.as_str() {
            "uniform" => InitMode::Uniform { scale: t.init_scale },
            "fan-in" => InitMode::FanIn,
            "he" => InitMode::He,
            other => bail!("train.init must be \"uniform\", \"fan-in\" or \"he\", got {other:?}"),
        };
        let zoom = match t.zoom.as_slice() {
            [] => None,
            &[a, b] => Some((a, b)),
            _ => bail!("train.zoom must be [min, max] or []"),
        };
        let layout_ckpt = layout.checkpoint();
        let train = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
            adam: AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps },
            loss_eps: t.loss_eps,
            reduction,
            augment: AugmentConfig { hflip: t.hflip, rotate90: t.rotate90, rotate_any: t.rotate_any, zoom },
            init,
            checkpoint: Some(CheckpointPolicy { path: layout_ckpt.clone(), every: t.checkpoint_every }),
            log_wall_time: t.log_wall_time,
        };
        train.validate().context("train")?;
        let train_label = GtLabel::parse(&t.label, "train.label")?;

        let p = raw.predict;
        let threshold = overrides.threshold.unwrap_or(p.threshold);
        ensure!((0.0..=1.0).contains(&threshold), "prediction threshold must be in [0, 1], got {threshold}");
        ensure!(p.batch > 0, "predict.batch must be positive");
        let predict = PredictConfig { native, threshold, batch: p.batch };

        let truth = match raw.evaluate.truth_dir {
            Some(dir) => TruthSource::Dir(resolve(base, dir)),
            None => TruthSource::Gt(GtLabel::parse(&raw.evaluate.truth, "evaluate.truth")?),
        };

        Ok(Self {
            seed,
            scenes_dir,
            layout,
            scene_ids: raw.paths.scene_ids,
            qa,
            snow_band,
            threshold_rule,
            network,
            native,
            train,
            train_label,
            resume_from: t.resume_from.map(|p| resolve(base, p)),
            predict,
            checkpoint: p.checkpoint.map(|p| resolve(base, p)).unwrap_or(layout_ckpt),
            truth,
        })
    }

    /// Scene ids from the config, or every subdirectory of the scenes
    /// directory in name order.
    pub fn scene_ids(&self) -> Result<Vec<String>> {
        if let Some(ids) = &self.scene_ids {
            return Ok(ids.clone());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.scenes_dir).with_context(|| format!("listing {}", self.scenes_dir.display()))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                let name = entry.file_name();
                let name = name.to_str().ok_or_else(|| anyhow!("scene directory name is not UTF-8: {name:?}"))?;
                ids.push(name.to_owned());
            }
        }
        ids.sort();
        ensure!(!ids.is_empty(), "no scene directories in {}", self.scenes_dir.display());
        Ok(ids)
    }
}
