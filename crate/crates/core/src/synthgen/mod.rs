//! Deterministic generator of paired-modality gait data: one articulated
//! capsule walker per identity, rendered as camera silhouette sequences and
//! LiDAR point-cloud sequences under multiple views and conditions.

pub mod dataset;
pub mod render;

use std::f64::consts::PI;

use rand::Rng;

use crate::formats::GrayImage;
use crate::geometry::{v3, Vec3};
use crate::seeds;
use crate::{Error, Result};

/// Tag values for RNG stream derivation.
mod tag {
    pub const IDENTITY: u64 = 0x1d;
    pub const WALK: u64 = 0x3a;
    pub const SEQUENCE: u64 = 0x5e;
}

// ── identities ───────────────────────────────────────────────────────

/// Generative body/gait parameters defining one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub body_height: f64,
    pub torso_radius: f64,
    pub head_radius: f64,
    pub leg_length_ratio: f64,
    pub arm_swing_amplitude: f64,
    pub hip_swing_amplitude: f64,
    pub stride_frequency: f64,
    pub phase_offset: f64,
}

pub const IDENTITY_RANGES: [(&str, f64, f64); 8] = [
    ("body_height", 1.50, 1.90),
    ("torso_radius", 0.10, 0.18),
    ("head_radius", 0.08, 0.12),
    ("leg_length_ratio", 0.45, 0.55),
    ("arm_swing_amplitude", 0.2, 0.6),
    ("hip_swing_amplitude", 0.3, 0.7),
    ("stride_frequency", 0.7, 1.2),
    ("phase_offset", 0.0, 2.0 * PI),
];

impl IdentityParams {
    pub fn fields(&self) -> [f64; 8] {
        [
            self.body_height,
            self.torso_radius,
            self.head_radius,
            self.leg_length_ratio,
            self.arm_swing_amplitude,
            self.hip_swing_amplitude,
            self.stride_frequency,
            self.phase_offset,
        ]
    }

    pub fn leg_length(&self) -> f64 {
        self.leg_length_ratio * self.body_height
    }

    /// Forward speed in m/s, proportional to stride frequency.
    pub fn walk_speed(&self) -> f64 {
        let stride_len = 1.4 * self.leg_length() * self.hip_swing_amplitude.sin();
        self.stride_frequency * stride_len
    }
}

/// Deterministic identity draw: field order is fixed, so (seed, index)
/// fully determines the result.
pub fn sample_identity(dataset_seed: u64, identity_index: u32) -> IdentityParams {
    let mut rng = seeds::stream(dataset_seed, &[tag::IDENTITY, identity_index as u64]);
    let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
    IdentityParams {
        body_height: draw(1.50, 1.90),
        torso_radius: draw(0.10, 0.18),
        head_radius: draw(0.08, 0.12),
        leg_length_ratio: draw(0.45, 0.55),
        arm_swing_amplitude: draw(0.2, 0.6),
        hip_swing_amplitude: draw(0.3, 0.7),
        stride_frequency: draw(0.7, 1.2),
        phase_offset: draw(0.0, 2.0 * PI),
    }
}

// ── conditions ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConditionKind {
    Normal,
    Clothing,
    Carrying,
    Night,
}

impl ConditionKind {
    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Normal => "normal",
            ConditionKind::Clothing => "clothing",
            ConditionKind::Carrying => "carrying",
            ConditionKind::Night => "night",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ConditionKind::Normal => 0,
            ConditionKind::Clothing => 1,
            ConditionKind::Carrying => 2,
            ConditionKind::Night => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ConditionKind::Normal),
            "clothing" => Ok(ConditionKind::Clothing),
            "carrying" => Ok(ConditionKind::Carrying),
            "night" => Ok(ConditionKind::Night),
            other => Err(Error::Config(format!("unknown condition kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub severity: f64,
}

impl Condition {
    pub fn normal() -> Self {
        Condition {
            kind: ConditionKind::Normal,
            severity: 0.0,
        }
    }
}

// ── walker frames ────────────────────────────────────────────────────

/// Joint positions in meters, world frame (X forward, Y up, Z lateral).
#[derive(Debug, Clone, PartialEq)]
pub struct Joints {
    pub head: Vec3,
    pub neck: Vec3,
    pub pelvis: Vec3,
    pub hip_l: Vec3,
    pub hip_r: Vec3,
    pub knee_l: Vec3,
    pub knee_r: Vec3,
    pub ankle_l: Vec3,
    pub ankle_r: Vec3,
    pub shoulder_l: Vec3,
    pub shoulder_r: Vec3,
    pub elbow_l: Vec3,
    pub elbow_r: Vec3,
    pub wrist_l: Vec3,
    pub wrist_r: Vec3,
}

/// Per-segment capsule radii in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbRadii {
    pub torso: f64,
    pub head: f64,
    pub neck: f64,
    pub pelvis_bar: f64,
    pub clavicle: f64,
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub forearm: f64,
}

impl LimbRadii {
    fn for_identity(id: &IdentityParams) -> Self {
        let tr = id.torso_radius;
        LimbRadii {
            torso: tr,
            head: id.head_radius,
            neck: (0.35 * tr).max(0.030),
            pelvis_bar: 0.6 * tr,
            clavicle: (0.30 * tr).max(0.030),
            thigh: (0.50 * tr).max(0.040),
            shin: (0.38 * tr).max(0.034),
            upper_arm: (0.30 * tr).max(0.030),
            forearm: (0.25 * tr).max(0.028),
        }
    }
}

/// Capsule: segment [a, b] swept by a sphere of radius r. A sphere when a == b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub r: f64,
}

/// One instant of the articulated walker.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerFrame {
    pub joints: Joints,
    pub radii: LimbRadii,
    /// Carried object, present under the carrying condition.
    pub carry: Option<Capsule>,
}

impl WalkerFrame {
    pub fn capsules(&self) -> Vec<Capsule> {
        let j = &self.joints;
        let r = &self.radii;
        let mut out = vec![
            Capsule { a: j.head, b: j.head, r: r.head },
            Capsule { a: j.neck, b: j.head, r: r.neck },
            Capsule { a: j.pelvis, b: j.neck, r: r.torso },
            Capsule { a: j.pelvis, b: j.hip_l, r: r.pelvis_bar },
            Capsule { a: j.pelvis, b: j.hip_r, r: r.pelvis_bar },
            Capsule { a: j.neck, b: j.shoulder_l, r: r.clavicle },
            Capsule { a: j.neck, b: j.shoulder_r, r: r.clavicle },
            Capsule { a: j.hip_l, b: j.knee_l, r: r.thigh },
            Capsule { a: j.hip_r, b: j.knee_r, r: r.thigh },
            Capsule { a: j.knee_l, b: j.ankle_l, r: r.shin },
            Capsule { a: j.knee_r, b: j.ankle_r, r: r.shin },
            Capsule { a: j.shoulder_l, b: j.elbow_l, r: r.upper_arm },
            Capsule { a: j.shoulder_r, b: j.elbow_r, r: r.upper_arm },
            Capsule { a: j.elbow_l, b: j.wrist_l, r: r.forearm },
            Capsule { a: j.elbow_r, b: j.wrist_r, r: r.forearm },
        ];
        if let Some(c) = self.carry {
            out.push(c);
        }
        out
    }
}

/// Sinusoidal walking kinematics. Hips swing antiphase, knees flex on the
/// swing phase, arms swing antiphase to their ipsilateral legs, and the
/// pelvis advances along +X at a stride-frequency-proportional speed.
pub fn pose_at(id: &IdentityParams, time_sec: f64) -> WalkerFrame {
    let phi = 2.0 * PI * id.stride_frequency * time_sec + id.phase_offset;
    let h = id.body_height;
    let leg_len = id.leg_length();
    let thigh_len = 0.52 * leg_len;
    let shin_len = 0.44 * leg_len;
    let upper_arm_len = 0.18 * h;
    let forearm_len = 0.15 * h;
    let hip_half = 0.7 * id.torso_radius;
    let shoulder_half = 1.15 * id.torso_radius;

    let forward_x = id.walk_speed() * time_sec;
    let bob = 0.015 * leg_len * (1.0 - (2.0 * phi).cos()) * 0.5;
    let pelvis = v3(forward_x, leg_len - bob, 0.0);
    let neck = pelvis + v3(0.0, h - 2.0 * id.head_radius - 0.02 - leg_len, 0.0);
    let head = pelvis + v3(0.0, h - id.head_radius - leg_len, 0.0);

    // sagittal-plane angle from vertical, positive = forward
    let hip_angle = |side_phi: f64| id.hip_swing_amplitude * side_phi.sin();
    let knee_flex =
        |side_phi: f64| 0.8 * id.hip_swing_amplitude * (0.5 + 0.5 * (side_phi - 0.5).cos());
    let leg = |side_phi: f64, z: f64| {
        let hip = pelvis + v3(0.0, 0.0, z);
        let theta = hip_angle(side_phi);
        let knee = hip + v3(theta.sin() * thigh_len, -theta.cos() * thigh_len, 0.0);
        let shin_angle = theta - knee_flex(side_phi);
        let ankle = knee + v3(shin_angle.sin() * shin_len, -shin_angle.cos() * shin_len, 0.0);
        (hip, knee, ankle)
    };
    let (hip_l, knee_l, ankle_l) = leg(phi, hip_half);
    let (hip_r, knee_r, ankle_r) = leg(phi + PI, -hip_half);

    let arm = |side_phi: f64, z: f64| {
        let shoulder = neck + v3(0.0, -0.02, z);
        let alpha = id.arm_swing_amplitude * side_phi.sin();
        let elbow =
            shoulder + v3(alpha.sin() * upper_arm_len, -alpha.cos() * upper_arm_len, 0.0);
        let fore_angle = alpha + 0.25;
        let wrist =
            elbow + v3(fore_angle.sin() * forearm_len, -fore_angle.cos() * forearm_len, 0.0);
        (shoulder, elbow, wrist)
    };
    // arms antiphase to ipsilateral legs
    let (shoulder_l, elbow_l, wrist_l) = arm(phi + PI, shoulder_half);
    let (shoulder_r, elbow_r, wrist_r) = arm(phi, -shoulder_half);

    WalkerFrame {
        joints: Joints {
            head,
            neck,
            pelvis,
            hip_l,
            hip_r,
            knee_l,
            knee_r,
            ankle_l,
            ankle_r,
            shoulder_l,
            shoulder_r,
            elbow_l,
            elbow_r,
            wrist_l,
            wrist_r,
        },
        radii: LimbRadii::for_identity(id),
        carry: None,
    }
}

/// Geometry-level condition adjustment, applied before rendering.
pub fn apply_condition_geometry(frame: &mut WalkerFrame, cond: &Condition) {
    match cond.kind {
        ConditionKind::Normal | ConditionKind::Night => {}
        ConditionKind::Clothing => {
            let s = 1.0 + 0.4 * cond.severity;
            let r = &mut frame.radii;
            r.torso *= s;
            r.neck *= s;
            r.pelvis_bar *= s;
            r.clavicle *= s;
            r.thigh *= s;
            r.shin *= s;
            r.upper_arm *= s;
            r.forearm *= s;
        }
        ConditionKind::Carrying => {
            if cond.severity > 0.0 {
                let w = frame.joints.wrist_l;
                frame.carry = Some(Capsule {
                    a: w,
                    b: w + v3(0.0, -0.30 * cond.severity, 0.0),
                    r: 0.09 * cond.severity,
                });
            }
        }
    }
}

/// Pixel-level night degradation: 1-px boundary erosion plus random
/// foreground dropout with probability 0.3 * severity. Severity 0 leaves
/// the mask untouched.
pub fn apply_condition_silhouette<R: Rng>(mask: &mut GrayImage, cond: &Condition, rng: &mut R) {
    if cond.kind != ConditionKind::Night || cond.severity <= 0.0 {
        return;
    }
    let (h, w) = (mask.h, mask.w);
    let mut eroded = mask.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) > 0 {
                let boundary = r == 0
                    || c == 0
                    || r == h - 1
                    || c == w - 1
                    || mask.get(r - 1, c) == 0
                    || mask.get(r + 1, c) == 0
                    || mask.get(r, c - 1) == 0
                    || mask.get(r, c + 1) == 0;
                if boundary {
                    eroded.set(r, c, 0);
                }
            }
        }
    }
    let p = 0.3 * cond.severity;
    for px in eroded.pixels.iter_mut() {
        if *px > 0 && rng.gen::<f64>() < p {
            *px = 0;
        }
    }
    *mask = eroded;
}

// ── sequences ────────────────────────────────────────────────────────

pub const CAMERA_FPS: f64 = 30.0;
pub const LIDAR_FPS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Silhouette,
    Pointcloud,
    Depth,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Silhouette => "silhouette",
            Modality::Pointcloud => "pointcloud",
            Modality::Depth => "depth",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::Silhouette => 0,
            Modality::Pointcloud => 1,
            Modality::Depth => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silhouette" => Ok(Modality::Silhouette),
            "pointcloud" => Ok(Modality::Pointcloud),
            "depth" => Ok(Modality::Depth),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FrameData {
    Mask(GrayImage),
    Points(Vec<Vec3>),
    Depth(GrayImage),
}

/// Ordered frames of one modality with identity/condition/view labels.
#[derive(Debug, Clone)]
pub struct GaitSequence {
    pub identity_index: u32,
    pub walk_index: u32,
    pub condition: Condition,
    pub view_deg: u16,
    pub modality: Modality,
    pub frames: Vec<FrameData>,
}

/// Post-render condition pass over a sequence. Night degrades silhouette
/// frames only; geometric conditions act before rendering and leave an
/// already-rendered sequence unchanged here.
pub fn apply_condition(seq: &mut GaitSequence, cond: &Condition, rng_seed: u64) {
    if cond.kind == ConditionKind::Night && seq.modality == Modality::Silhouette {
        let mut rng = seeds::stream(rng_seed, &[tag::SEQUENCE, cond.kind.code() as u64]);
        for f in &mut seq.frames {
            if let FrameData::Mask(mask) = f {
                apply_condition_silhouette(mask, cond, &mut rng);
            }
        }
    }
}

/// Per-walk nuisance: a deterministic time offset so two walks of one
/// identity differ in gait phase.
pub fn walk_time_offset(dataset_seed: u64, identity_index: u32, walk_index: u32) -> f64 {
    let mut rng = seeds::stream(
        dataset_seed,
        &[tag::WALK, identity_index as u64, walk_index as u64],
    );
    rng.gen::<f64>()
}

/// RNG stream for one sequence, independent of generation order.
pub fn sequence_rng(
    dataset_seed: u64,
    identity_index: u32,
    walk_index: u32,
    view_deg: u16,
    modality: Modality,
) -> rand_chacha::ChaCha8Rng {
    seeds::stream(
        dataset_seed,
        &[
            tag::SEQUENCE,
            identity_index as u64,
            walk_index as u64,
            view_deg as u64,
            modality.code() as u64,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sampling_is_deterministic() {
        let a = sample_identity(99, 3);
        let b = sample_identity(99, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_fields_stay_in_range_over_many_draws() {
        for idx in 0..1000 {
            let id = sample_identity(2024, idx);
            for (value, (name, lo, hi)) in id.fields().iter().zip(IDENTITY_RANGES) {
                assert!(
                    (lo..=hi).contains(value),
                    "{name} = {value} outside [{lo}, {hi}] at index {idx}"
                );
            }
        }
    }

    #[test]
    fn distinct_indices_give_distinct_params() {
        for pair in 0..100u32 {
            let a = sample_identity(5, 2 * pair);
            let b = sample_identity(5, 2 * pair + 1);
            assert_ne!(a, b, "indices {} and {} collided", 2 * pair, 2 * pair + 1);
        }
    }

    #[test]
    fn pose_is_periodic_relative_to_pelvis() {
        let id = sample_identity(1, 0);
        let t0 = 0.37;
        let f0 = pose_at(&id, t0);
        let f1 = pose_at(&id, t0 + 1.0 / id.stride_frequency);
        let rel = |f: &WalkerFrame, j: Vec3| j - f.joints.pelvis;
        for (a, b) in [
            (rel(&f0, f0.joints.knee_l), rel(&f1, f1.joints.knee_l)),
            (rel(&f0, f0.joints.ankle_r), rel(&f1, f1.joints.ankle_r)),
            (rel(&f0, f0.joints.wrist_l), rel(&f1, f1.joints.wrist_l)),
            (rel(&f0, f0.joints.head), rel(&f1, f1.joints.head)),
        ] {
            assert!((a - b).norm() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn hip_angles_are_antiphase() {
        let id = sample_identity(1, 1);
        for k in 0..50 {
            let f = pose_at(&id, k as f64 * 0.031);
            let angle = |hip: Vec3, knee: Vec3| {
                let d = knee - hip;
                d.x.atan2(-d.y)
            };
            let left = angle(f.joints.hip_l, f.joints.knee_l);
            let right = angle(f.joints.hip_r, f.joints.knee_r);
            // antiphase sinusoids sum to twice the zero mean
            assert!((left + right).abs() < 1e-9, "left {left} right {right}");
        }
    }

    #[test]
    fn segment_lengths_are_rigid_across_frames() {
        let id = sample_identity(7, 4);
        let reference = pose_at(&id, 0.0);
        let seg_lengths = |f: &WalkerFrame| {
            f.capsules()
                .iter()
                .map(|c| (c.b - c.a).norm())
                .collect::<Vec<_>>()
        };
        let want = seg_lengths(&reference);
        for k in 1..100 {
            let f = pose_at(&id, k as f64 * 0.033);
            for (a, b) in seg_lengths(&f).iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clothing_scales_radii_and_severity_zero_is_identity() {
        let id = sample_identity(3, 2);
        let base = pose_at(&id, 0.5);
        let mut zero = base.clone();
        apply_condition_geometry(
            &mut zero,
            &Condition {
                kind: ConditionKind::Clothing,
                severity: 0.0,
            },
        );
        assert_eq!(zero, base);
        let mut thick = base.clone();
        apply_condition_geometry(
            &mut thick,
            &Condition {
                kind: ConditionKind::Clothing,
                severity: 1.0,
            },
        );
        assert!((thick.radii.torso - base.radii.torso * 1.4).abs() < 1e-12);
        assert!((thick.radii.thigh - base.radii.thigh * 1.4).abs() < 1e-12);
        assert_eq!(thick.radii.head, base.radii.head);
    }

    #[test]
    fn carrying_attaches_box_scaled_by_severity() {
        let id = sample_identity(3, 2);
        let mut f = pose_at(&id, 0.1);
        apply_condition_geometry(
            &mut f,
            &Condition {
                kind: ConditionKind::Carrying,
                severity: 0.0,
            },
        );
        assert!(f.carry.is_none());
        apply_condition_geometry(
            &mut f,
            &Condition {
                kind: ConditionKind::Carrying,
                severity: 1.0,
            },
        );
        let c = f.carry.unwrap();
        assert_eq!(c.a, f.joints.wrist_l);
        assert!((c.r - 0.09).abs() < 1e-12);
    }

    #[test]
    fn night_severity_zero_leaves_mask_untouched() {
        let mut mask = GrayImage::new(8, 8);
        for r in 2..6 {
            for c in 2..6 {
                mask.set(r, c, 255);
            }
        }
        let orig = mask.clone();
        let mut rng = seeds::stream(1, &[2]);
        apply_condition_silhouette(
            &mut mask,
            &Condition {
                kind: ConditionKind::Night,
                severity: 0.0,
            },
            &mut rng,
        );
        assert_eq!(mask, orig);
    }
}
