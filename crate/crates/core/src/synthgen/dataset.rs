//! On-disk dataset layout and manifest.
//!
//! Layout: `<root>/<id:04>/<condition>/<view:03>/<modality>/<walk:02>/`
//! holding `frame_%05d.pgm` (binary P5, 0/255) for silhouettes and
//! `frame_%05d.xyz` for point clouds. `manifest.csv` lists every sequence;
//! `dataset.cfg` echoes the generation spec so readers know the split.

use std::fs;
use std::path::{Path, PathBuf};

use super::render::{fit_window, render_silhouette, sample_point_cloud};
use super::{
    apply_condition_geometry, apply_condition_silhouette, pose_at, sample_identity,
    walk_time_offset, Condition, ConditionKind, FrameData, GaitSequence, Modality, WalkerFrame,
    CAMERA_FPS, LIDAR_FPS,
};
use crate::formats::{read_pgm, read_xyz, write_pgm, write_xyz};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,walk,condition,view,modality,frames,path";
pub const DATASET_CFG_NAME: &str = "dataset.cfg";

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub dataset_seed: u64,
    pub num_identities: u32,
    pub train_identities: u32,
    pub walks_per_identity: u32,
    pub views: Vec<u16>,
    pub conditions: Vec<Condition>,
    /// Camera frames per sequence (T); must equal 3 * lidar_frames.
    pub camera_frames: usize,
    /// LiDAR frames per sequence (t).
    pub lidar_frames: usize,
    pub point_budget: usize,
    pub sensor_noise_sigma: f64,
    pub raw_image_px: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.camera_frames != 3 * self.lidar_frames {
            return Err(Error::Config(format!(
                "camera_frames ({}) must be 3 x lidar_frames ({})",
                self.camera_frames, self.lidar_frames
            )));
        }
        if self.lidar_frames == 0 {
            return Err(Error::Config("lidar_frames must be positive".into()));
        }
        if !(256..=1024).contains(&self.point_budget) {
            return Err(Error::Config(format!(
                "point_budget {} outside [256, 1024]",
                self.point_budget
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Config("views must be nonempty".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("conditions must be nonempty".into()));
        }
        if self.train_identities > self.num_identities {
            return Err(Error::Config(format!(
                "train_identities ({}) exceeds num_identities ({})",
                self.train_identities, self.num_identities
            )));
        }
        if self.num_identities == 0 || self.walks_per_identity == 0 {
            return Err(Error::Config("need at least one identity and walk".into()));
        }
        Ok(())
    }

    /// Key=value echo written next to the manifest.
    pub fn to_config_text(&self) -> String {
        let views = self
            .views
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let conditions = self
            .conditions
            .iter()
            .map(|c| format!("{}:{}", c.kind.name(), c.severity))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "dataset_seed = {}\nnum_identities = {}\ntrain_identities = {}\n\
             walks_per_identity = {}\nviews = {}\nconditions = {}\n\
             camera_frames = {}\nlidar_frames = {}\npoint_budget = {}\n\
             sensor_noise_sigma = {}\nraw_image_px = {}\n",
            self.dataset_seed,
            self.num_identities,
            self.train_identities,
            self.walks_per_identity,
            views,
            conditions,
            self.camera_frames,
            self.lidar_frames,
            self.point_budget,
            self.sensor_noise_sigma,
            self.raw_image_px,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: u32,
    pub walk: u32,
    pub condition: ConditionKind,
    pub view: u16,
    pub modality: Modality,
    pub frames: usize,
    pub path: String,
}

impl ManifestRow {
    pub fn sequence_id(&self) -> String {
        format!(
            "{:04}-{:02}-{}-{:03}-{}",
            self.id,
            self.walk,
            self.condition.name(),
            self.view,
            self.modality.name()
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id,
                r.walk,
                r.condition.name(),
                r.view,
                r.modality.name(),
                r.frames,
                r.path
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Config(format!(
                    "bad manifest header: {other:?}, expected {MANIFEST_HEADER:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 7 columns, got {}",
                    i + 2,
                    cols.len()
                )));
            }
            let parse_err = |what: &str| Error::Config(format!("manifest line {}: bad {what}", i + 2));
            rows.push(ManifestRow {
                id: cols[0].parse().map_err(|_| parse_err("id"))?,
                walk: cols[1].parse().map_err(|_| parse_err("walk"))?,
                condition: ConditionKind::parse(cols[2])?,
                view: cols[3].parse().map_err(|_| parse_err("view"))?,
                modality: Modality::parse(cols[4])?,
                frames: cols[5].parse().map_err(|_| parse_err("frames"))?,
                path: cols[6].to_string(),
            });
        }
        Ok(Manifest { rows })
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Manifest::parse_csv(&text)
}

fn sequence_dir(row: &ManifestRow) -> String {
    format!(
        "{:04}/{}/{:03}/{}/{:02}",
        row.id,
        row.condition.name(),
        row.view,
        row.modality.name(),
        row.walk
    )
}

/// Generate the full dataset under `out_dir`. Any failure aborts and
/// removes the incomplete output.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if out_dir.exists() {
        return Err(Error::Config(format!(
            "output directory {} already exists",
            out_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    match generate_into(spec, out_dir) {
        Ok(m) => Ok(m),
        Err(e) => {
            let _ = fs::remove_dir_all(out_dir);
            Err(e)
        }
    }
}

fn generate_into(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let duration = spec.camera_frames as f64 / CAMERA_FPS;
    for id_idx in 0..spec.num_identities {
        let identity = sample_identity(spec.dataset_seed, id_idx);
        for walk in 0..spec.walks_per_identity {
            let t_off =
                walk_time_offset(spec.dataset_seed, id_idx, walk) / identity.stride_frequency;
            let camera_frames: Vec<WalkerFrame> = (0..spec.camera_frames)
                .map(|j| pose_at(&identity, t_off + j as f64 / CAMERA_FPS))
                .collect();
            let lidar_frames: Vec<WalkerFrame> = (0..spec.lidar_frames)
                .map(|i| pose_at(&identity, t_off + i as f64 / LIDAR_FPS.min(CAMERA_FPS / 3.0)))
                .collect();
            let _ = duration;
            for &cond in &spec.conditions {
                let shaped = |frames: &[WalkerFrame]| -> Vec<WalkerFrame> {
                    frames
                        .iter()
                        .map(|f| {
                            let mut g = f.clone();
                            apply_condition_geometry(&mut g, &cond);
                            g
                        })
                        .collect()
                };
                let cam_shaped = shaped(&camera_frames);
                let lidar_shaped = shaped(&lidar_frames);
                for &view in &spec.views {
                    // camera silhouettes
                    let win = fit_window(&cam_shaped, view as f64, spec.raw_image_px, 0.15);
                    let mut night_rng =
                        super::sequence_rng(spec.dataset_seed, id_idx, walk, view, Modality::Silhouette);
                    let mut sil_row = ManifestRow {
                        id: id_idx,
                        walk,
                        condition: cond.kind,
                        view,
                        modality: Modality::Silhouette,
                        frames: spec.camera_frames,
                        path: String::new(),
                    };
                    sil_row.path = sequence_dir(&sil_row);
                    let dir = out_dir.join(&sil_row.path);
                    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                    for (j, frame) in cam_shaped.iter().enumerate() {
                        let mut mask = render_silhouette(frame, view as f64, &win)?;
                        apply_condition_silhouette(&mut mask, &cond, &mut night_rng);
                        write_pgm(&dir.join(format!("frame_{j:05}.pgm")), &mask)?;
                    }
                    manifest.rows.push(sil_row);

                    // LiDAR point clouds
                    let mut pc_rng =
                        super::sequence_rng(spec.dataset_seed, id_idx, walk, view, Modality::Pointcloud);
                    let mut pc_row = ManifestRow {
                        id: id_idx,
                        walk,
                        condition: cond.kind,
                        view,
                        modality: Modality::Pointcloud,
                        frames: spec.lidar_frames,
                        path: String::new(),
                    };
                    pc_row.path = sequence_dir(&pc_row);
                    let dir = out_dir.join(&pc_row.path);
                    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                    for (i, frame) in lidar_shaped.iter().enumerate() {
                        let pts = sample_point_cloud(
                            frame,
                            view as f64,
                            spec.sensor_noise_sigma,
                            spec.point_budget,
                            &mut pc_rng,
                        )?;
                        write_xyz(&dir.join(format!("frame_{i:05}.xyz")), &pts)?;
                    }
                    manifest.rows.push(pc_row);
                }
            }
        }
    }
    manifest.rows.sort_by(|a, b| {
        (a.id, a.walk, a.condition, a.view, a.modality).cmp(&(
            b.id,
            b.walk,
            b.condition,
            b.view,
            b.modality,
        ))
    });
    let manifest_path = out_dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest.to_csv())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let cfg_path = out_dir.join(DATASET_CFG_NAME);
    fs::write(&cfg_path, spec.to_config_text())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    Ok(manifest)
}

/// Load one sequence's frames from disk.
pub fn load_sequence(root: &Path, row: &ManifestRow) -> Result<GaitSequence> {
    let dir = root.join(&row.path);
    let mut frames = Vec::with_capacity(row.frames);
    for i in 0..row.frames {
        let frame = match row.modality {
            Modality::Silhouette => {
                FrameData::Mask(read_pgm(&dir.join(format!("frame_{i:05}.pgm")))?)
            }
            Modality::Depth => FrameData::Depth(read_pgm(&dir.join(format!("frame_{i:05}.pgm")))?),
            Modality::Pointcloud => {
                FrameData::Points(read_xyz(&dir.join(format!("frame_{i:05}.xyz")))?)
            }
        };
        frames.push(frame);
    }
    Ok(GaitSequence {
        identity_index: row.id,
        walk_index: row.walk,
        condition: Condition {
            kind: row.condition,
            severity: f64::NAN, // severity is not recorded per sequence
        },
        view_deg: row.view,
        modality: row.modality,
        frames,
    })
}

/// Directory of a sequence, for tooling.
pub fn sequence_path(root: &Path, row: &ManifestRow) -> PathBuf {
    root.join(&row.path)
}
