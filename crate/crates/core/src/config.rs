//! Flat `key = value` experiment configuration. One schema serves every
//! command; unknown keys are errors.

use std::fs;
use std::path::Path;

use crate::model::{EncoderConfig, ModelConfig};
use crate::preprocess::SensorModel;
use crate::synthgen::dataset::DatasetSpec;
use crate::synthgen::{Condition, ConditionKind};
use crate::{Error, Result};

/// Optimization-loop settings (desk-scale defaults).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_identities: usize,
    pub batch_seqs_per_identity: usize,
    pub frames_lidar: usize,
    pub frames_camera: usize,
    pub total_iters: u64,
    pub lr: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_factor: f64,
    pub lambda: f64,
    pub margin_triplet: f64,
    pub margin_contrastive: f64,
    pub train_seed: u64,
    pub checkpoint_every: u64,
    /// Worker cap; 0 means single-threaded deterministic mode. Parallel
    /// runs reduce in fixed order and match it bit for bit.
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_identities: 4,
            batch_seqs_per_identity: 4,
            frames_lidar: 8,
            frames_camera: 8,
            total_iters: 2000,
            lr: 1e-3,
            lr_milestones: vec![1000, 1400, 1800],
            lr_factor: 0.1,
            lambda: 2.0,
            margin_triplet: 0.2,
            margin_contrastive: 0.2,
            train_seed: 1,
            checkpoint_every: 500,
            threads: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_identities < 2 || self.batch_seqs_per_identity < 1 {
            return Err(Error::Config(
                "batch needs >= 2 identities and >= 1 sequence per identity".into(),
            ));
        }
        if self.frames_lidar == 0 || self.frames_camera == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        let mut prev = 0u64;
        for &m in &self.lr_milestones {
            if m <= prev || m >= self.total_iters {
                return Err(Error::Config(format!(
                    "lr_milestones must be strictly increasing and < total_iters, got {:?}",
                    self.lr_milestones
                )));
            }
            prev = m;
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainSettings,
    /// Raw depth projection window (per-frame, centroid-centered).
    pub depth_image_px: usize,
    pub depth_half_extent: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset: DatasetSpec {
                dataset_seed: 7,
                num_identities: 32,
                train_identities: 24,
                walks_per_identity: 2,
                views: vec![0, 90, 180, 270],
                conditions: vec![Condition::normal()],
                camera_frames: 24,
                lidar_frames: 8,
                point_budget: 1024,
                sensor_noise_sigma: 0.01,
                raw_image_px: 128,
            },
            // desk-scale encoder: 64 -> 4x4 map with 32 channels
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_size: 64,
                    stem_channels: 6,
                    stem_stride: 2,
                    stage_channels: vec![6, 12, 24],
                    stage_strides: vec![2, 2, 2],
                },
                prototypes: 2,
                parts: 4,
                cmfa: true,
            },
            train: TrainSettings::default(),
            depth_image_px: 48,
            depth_half_extent: 1.3,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse element {s:?}")))
        })
        .collect()
}

fn parse_conditions(value: &str) -> Result<Vec<Condition>> {
    value
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (name, severity) = match item.split_once(':') {
                Some((n, s)) => (
                    n,
                    s.parse::<f64>()
                        .map_err(|_| Error::Config(format!("conditions: bad severity in {item:?}")))?,
                ),
                None => (item, 0.5),
            };
            let kind = ConditionKind::parse(name)?;
            let severity = if kind == ConditionKind::Normal { 0.0 } else { severity };
            if !(0.0..=1.0).contains(&severity) {
                return Err(Error::Config(format!(
                    "conditions: severity {severity} outside [0, 1]"
                )));
            }
            Ok(Condition { kind, severity })
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

impl Config {
    /// Parse `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: cannot parse {what} from {value:?}"));
        match key {
            "dataset_seed" => self.dataset.dataset_seed = value.parse().map_err(|_| bad("u64"))?,
            "num_identities" => {
                self.dataset.num_identities = value.parse().map_err(|_| bad("u32"))?
            }
            "train_identities" => {
                self.dataset.train_identities = value.parse().map_err(|_| bad("u32"))?
            }
            "walks_per_identity" => {
                self.dataset.walks_per_identity = value.parse().map_err(|_| bad("u32"))?
            }
            "views" => self.dataset.views = parse_list(key, value)?,
            "conditions" => self.dataset.conditions = parse_conditions(value)?,
            "camera_frames" => self.dataset.camera_frames = value.parse().map_err(|_| bad("usize"))?,
            "lidar_frames" => self.dataset.lidar_frames = value.parse().map_err(|_| bad("usize"))?,
            "point_budget" => self.dataset.point_budget = value.parse().map_err(|_| bad("usize"))?,
            "sensor_noise_sigma" => {
                self.dataset.sensor_noise_sigma = value.parse().map_err(|_| bad("f64"))?
            }
            "raw_image_px" => self.dataset.raw_image_px = value.parse().map_err(|_| bad("usize"))?,
            "encoder_stem_channels" => {
                self.model.encoder.stem_channels = value.parse().map_err(|_| bad("usize"))?
            }
            "encoder_stem_stride" => {
                self.model.encoder.stem_stride = value.parse().map_err(|_| bad("usize"))?
            }
            "encoder_stage_channels" => {
                self.model.encoder.stage_channels = parse_list(key, value)?
            }
            "encoder_stage_strides" => self.model.encoder.stage_strides = parse_list(key, value)?,
            "prototypes" => self.model.prototypes = value.parse().map_err(|_| bad("usize"))?,
            "parts" => self.model.parts = value.parse().map_err(|_| bad("usize"))?,
            "cmfa" => self.model.cmfa = parse_bool(key, value)?,
            "batch_identities" => {
                self.train.batch_identities = value.parse().map_err(|_| bad("usize"))?
            }
            "batch_seqs_per_identity" => {
                self.train.batch_seqs_per_identity = value.parse().map_err(|_| bad("usize"))?
            }
            "frames_lidar" => self.train.frames_lidar = value.parse().map_err(|_| bad("usize"))?,
            "frames_camera" => self.train.frames_camera = value.parse().map_err(|_| bad("usize"))?,
            "total_iters" => self.train.total_iters = value.parse().map_err(|_| bad("u64"))?,
            "lr" => self.train.lr = value.parse().map_err(|_| bad("f64"))?,
            "lr_milestones" => self.train.lr_milestones = parse_list(key, value)?,
            "lr_factor" => self.train.lr_factor = value.parse().map_err(|_| bad("f64"))?,
            "lambda" => self.train.lambda = value.parse().map_err(|_| bad("f64"))?,
            "margin_triplet" => self.train.margin_triplet = value.parse().map_err(|_| bad("f64"))?,
            "margin_contrastive" => {
                self.train.margin_contrastive = value.parse().map_err(|_| bad("f64"))?
            }
            "train_seed" => self.train.train_seed = value.parse().map_err(|_| bad("u64"))?,
            "checkpoint_every" => {
                self.train.checkpoint_every = value.parse().map_err(|_| bad("u64"))?
            }
            "threads" => self.train.threads = value.parse().map_err(|_| bad("usize"))?,
            "depth_image_px" => self.depth_image_px = value.parse().map_err(|_| bad("usize"))?,
            "depth_half_extent" => {
                self.depth_half_extent = value.parse().map_err(|_| bad("f64"))?
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.train_identities < self.train.batch_identities as u32 {
            return Err(Error::Config(format!(
                "batch_identities ({}) exceeds train_identities ({})",
                self.train.batch_identities, self.dataset.train_identities
            )));
        }
        Ok(())
    }

    /// Depth projection sensor for a given view.
    pub fn depth_sensor(&self, view_deg: f64) -> SensorModel {
        SensorModel {
            view_deg,
            image_h: self.depth_image_px,
            image_w: self.depth_image_px,
            half_extent_h: self.depth_half_extent,
            half_extent_v: self.depth_half_extent,
        }
    }

    /// Full echo of the effective configuration.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let views = self
            .dataset
            .views
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let conds = self
            .dataset
            .conditions
            .iter()
            .map(|c| format!("{}:{}", c.kind.name(), c.severity))
            .collect::<Vec<_>>()
            .join(",");
        let miles = self
            .train
            .lr_milestones
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "dataset_seed = {}\nnum_identities = {}\ntrain_identities = {}\n\
             walks_per_identity = {}\nviews = {}\nconditions = {}\ncamera_frames = {}\n\
             lidar_frames = {}\npoint_budget = {}\nsensor_noise_sigma = {}\nraw_image_px = {}\n\
             encoder_stem_channels = {}\nencoder_stem_stride = {}\nencoder_stage_channels = {}\n\
             encoder_stage_strides = {}\nprototypes = {}\nparts = {}\ncmfa = {}\n\
             batch_identities = {}\nbatch_seqs_per_identity = {}\nframes_lidar = {}\n\
             frames_camera = {}\ntotal_iters = {}\nlr = {}\nlr_milestones = {}\nlr_factor = {}\n\
             lambda = {}\nmargin_triplet = {}\nmargin_contrastive = {}\ntrain_seed = {}\n\
             checkpoint_every = {}\nthreads = {}\ndepth_image_px = {}\ndepth_half_extent = {}\n",
            self.dataset.dataset_seed,
            self.dataset.num_identities,
            self.dataset.train_identities,
            self.dataset.walks_per_identity,
            views,
            conds,
            self.dataset.camera_frames,
            self.dataset.lidar_frames,
            self.dataset.point_budget,
            self.dataset.sensor_noise_sigma,
            self.dataset.raw_image_px,
            self.model.encoder.stem_channels,
            self.model.encoder.stem_stride,
            list(&self.model.encoder.stage_channels),
            list(&self.model.encoder.stage_strides),
            self.model.prototypes,
            self.model.parts,
            if self.model.cmfa { "on" } else { "off" },
            self.train.batch_identities,
            self.train.batch_seqs_per_identity,
            self.train.frames_lidar,
            self.train.frames_camera,
            self.train.total_iters,
            self.train.lr,
            miles,
            self.train.lr_factor,
            self.train.lambda,
            self.train.margin_triplet,
            self.train.margin_contrastive,
            self.train.train_seed,
            self.train.checkpoint_every,
            self.train.threads,
            self.depth_image_px,
            self.depth_half_extent,
        )
    }
}
