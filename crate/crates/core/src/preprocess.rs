//! Raw modality data to aligned 64x64 network inputs: point clouds are
//! projected to depth maps, silhouettes and depths are cropped to the
//! person, height-scaled, and centered on the foreground center of mass.

use crate::formats::GrayImage;
use crate::geometry::{view_basis, Vec3};
use crate::synthgen::{FrameData, GaitSequence};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Side length of normalized network inputs.
pub const NORM_SIZE: usize = 64;

/// Minimum foreground pixels for a frame to be usable.
pub const MIN_PIXELS: usize = 16;

/// Orthographic depth sensor. The projection window is centered on the
/// cloud centroid, so the result is translation invariant by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub view_deg: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Meters from window center to each horizontal edge.
    pub half_extent_h: f64,
    /// Meters from window center to the top/bottom edge.
    pub half_extent_v: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            view_deg: 0.0,
            image_h: 64,
            image_w: 64,
            half_extent_h: 1.4,
            half_extent_v: 1.4,
        }
    }
}

/// Float image with 0 background and foreground depths in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

/// Z-buffered orthographic projection. The nearest point wins each pixel;
/// foreground depths are min-max normalized into (0, 1] with the nearest
/// surface mapped to 1.
pub fn project_points_to_depth(points: &[Vec3], sensor: &SensorModel) -> Result<DepthImage> {
    if points.is_empty() {
        return Err(Error::Contract("projectPointsToDepth: empty cloud".into()));
    }
    let (right, up, forward) = view_basis(sensor.view_deg);
    let inv_n = 1.0 / points.len() as f64;
    let mut centroid = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    for p in points {
        centroid = centroid + *p * inv_n;
    }
    let (h, w) = (sensor.image_h, sensor.image_w);
    let pitch_x = 2.0 * sensor.half_extent_h / w as f64;
    let pitch_y = 2.0 * sensor.half_extent_v / h as f64;
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut hits = 0usize;
    for p in points {
        let d = *p - centroid;
        let u = d.dot(right);
        let v = d.dot(up);
        let depth = d.dot(forward);
        let col = ((u + sensor.half_extent_h) / pitch_x).floor();
        let row = ((sensor.half_extent_v - v) / pitch_y).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        let idx = row as usize * w + col as usize;
        hits += 1;
        if depth < zbuf[idx] {
            zbuf[idx] = depth;
        }
    }
    if hits == 0 {
        return Err(Error::Contract(
            "projectPointsToDepth: all points outside sensor extent".into(),
        ));
    }
    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    for &z in zbuf.iter().filter(|z| z.is_finite()) {
        dmin = dmin.min(z);
        dmax = dmax.max(z);
    }
    let range = dmax - dmin;
    let values = zbuf
        .iter()
        .map(|&z| {
            if !z.is_finite() {
                0.0
            } else if range <= 0.0 {
                1.0
            } else {
                (0.05 + 0.95 * (dmax - z) / range) as f32
            }
        })
        .collect();
    Ok(DepthImage { h, w, values })
}

/// Aligned 64x64 frame: silhouettes hold exactly {0, 1}, depths hold [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    pub pixels: Vec<f32>,
}

/// Crop box and center-of-mass of a foreground support mask. All quantities
/// are relative to integer crop coordinates so that integer translations of
/// the input produce bit-identical normalized output.
struct SupportFrame {
    top: usize,
    col_min: usize,
    height: usize,
    /// Center of mass of foreground pixel centers, relative to `col_min`.
    com_rel: f64,
}

fn support_frame(is_fg: impl Fn(usize, usize) -> bool, h: usize, w: usize) -> Option<SupportFrame> {
    let (mut top, mut bot) = (usize::MAX, 0usize);
    let mut col_min = usize::MAX;
    let mut col_sum = 0u64;
    let mut count = 0u64;
    for r in 0..h {
        for c in 0..w {
            if is_fg(r, c) {
                top = top.min(r);
                bot = bot.max(r);
                col_min = col_min.min(c);
                col_sum += c as u64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return None;
    }
    let com_abs = col_sum as f64 / count as f64 + 0.5;
    Some(SupportFrame {
        top,
        col_min,
        height: bot - top + 1,
        com_rel: com_abs - col_min as f64,
    })
}

fn count_fg(is_fg: impl Fn(usize, usize) -> bool, h: usize, w: usize) -> usize {
    let mut n = 0;
    for r in 0..h {
        for c in 0..w {
            if is_fg(r, c) {
                n += 1;
            }
        }
    }
    n
}

/// Crop to foreground rows, scale height to 64 preserving aspect ratio,
/// center the foreground center-of-mass column, binarize. Nearest-neighbor
/// resampling keeps the output exactly {0, 1}.
pub fn normalize_silhouette(mask: &GrayImage) -> Result<NormalizedFrame> {
    let fg = |r: usize, c: usize| mask.get(r, c) > 0;
    let n_fg = count_fg(fg, mask.h, mask.w);
    if n_fg < MIN_PIXELS {
        return Err(Error::DegenerateFrame {
            pixels: n_fg,
            min: MIN_PIXELS,
        });
    }
    let sup = support_frame(fg, mask.h, mask.w).expect("nonempty");
    let scale = NORM_SIZE as f64 / sup.height as f64;
    let mut out = vec![0.0f32; NORM_SIZE * NORM_SIZE];
    let half = NORM_SIZE as f64 / 2.0;
    for r in 0..NORM_SIZE {
        let iy = ((r as f64 + 0.5) / scale).floor();
        let src_r = sup.top as i64 + iy as i64;
        if src_r < 0 || src_r >= mask.h as i64 {
            continue;
        }
        for c in 0..NORM_SIZE {
            let ix = (sup.com_rel + (c as f64 - half) / scale).floor();
            let src_c = sup.col_min as i64 + ix as i64;
            if src_c < 0 || src_c >= mask.w as i64 {
                continue;
            }
            if mask.get(src_r as usize, src_c as usize) > 0 {
                out[r * NORM_SIZE + c] = 1.0;
            }
        }
    }
    Ok(NormalizedFrame { pixels: out })
}

/// Same crop/center/scale as silhouettes, driven by the nonzero support,
/// but depth values are bilinearly resampled instead of binarized.
pub fn normalize_depth_frame(depth: &DepthImage) -> Result<NormalizedFrame> {
    let fg = |r: usize, c: usize| depth.values[r * depth.w + c] > 0.0;
    let n_fg = count_fg(fg, depth.h, depth.w);
    if n_fg < MIN_PIXELS {
        return Err(Error::DegenerateFrame {
            pixels: n_fg,
            min: MIN_PIXELS,
        });
    }
    let sup = support_frame(fg, depth.h, depth.w).expect("nonempty");
    let scale = NORM_SIZE as f64 / sup.height as f64;
    let sample = |y: f64, x: f64| -> f32 {
        // bilinear with zero padding outside
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let at = |r: i64, c: i64| -> f32 {
            if r < 0 || c < 0 || r >= depth.h as i64 || c >= depth.w as i64 {
                0.0
            } else {
                depth.values[r as usize * depth.w + c as usize]
            }
        };
        let (r0, c0) = (y0 as i64, x0 as i64);
        at(r0, c0) * (1.0 - fy) * (1.0 - fx)
            + at(r0, c0 + 1) * (1.0 - fy) * fx
            + at(r0 + 1, c0) * fy * (1.0 - fx)
            + at(r0 + 1, c0 + 1) * fy * fx
    };
    let mut out = vec![0.0f32; NORM_SIZE * NORM_SIZE];
    let half = NORM_SIZE as f64 / 2.0;
    for r in 0..NORM_SIZE {
        let iy = sup.top as f64 + (r as f64 + 0.5) / scale - 0.5;
        for c in 0..NORM_SIZE {
            let ix = sup.col_min as f64 + sup.com_rel + (c as f64 - half) / scale - 0.5;
            out[r * NORM_SIZE + c] = sample(iy, ix).clamp(0.0, 1.0);
        }
    }
    Ok(NormalizedFrame { pixels: out })
}

fn gray_to_depth(img: &GrayImage) -> DepthImage {
    DepthImage {
        h: img.h,
        w: img.w,
        values: img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    }
}

/// Stack per-frame normalized images into a T x 1 x 64 x 64 tensor,
/// dropping degenerate frames. Sequences with fewer than two valid frames
/// are rejected.
pub fn preprocess_sequence(seq: &GaitSequence, sensor: &SensorModel) -> Result<Tensor<f32>> {
    let mut frames: Vec<NormalizedFrame> = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let normalized = match frame {
            FrameData::Mask(img) => normalize_silhouette(img),
            FrameData::Depth(img) => normalize_depth_frame(&gray_to_depth(img)),
            FrameData::Points(pts) => {
                let mut s = *sensor;
                s.view_deg = seq.view_deg as f64;
                match project_points_to_depth(pts, &s) {
                    Ok(d) => normalize_depth_frame(&d),
                    Err(e @ Error::Contract(_)) => Err(e),
                    Err(e) => Err(e),
                }
            }
        };
        match normalized {
            Ok(f) => frames.push(f),
            Err(Error::DegenerateFrame { .. }) => continue, // drop the frame
            Err(e) => return Err(e),
        }
    }
    if frames.len() < 2 {
        return Err(Error::SequenceRejected(format!(
            "{} valid frames after dropping degenerates (need >= 2)",
            frames.len()
        )));
    }
    let t = frames.len();
    let mut data = Vec::with_capacity(t * NORM_SIZE * NORM_SIZE);
    for f in &frames {
        data.extend_from_slice(&f.pixels);
    }
    Ok(Tensor::new(vec![t, 1, NORM_SIZE, NORM_SIZE], data))
}

/// Intersection-over-union of two binarized frames.
pub fn frame_iou(a: &NormalizedFrame, b: &NormalizedFrame) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        let (fx, fy) = (x > 0.5, y > 0.5);
        if fx && fy {
            inter += 1;
        }
        if fx || fy {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::v3;
    use crate::synthgen::Modality;

    fn rect_mask(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> GrayImage {
        let mut img = GrayImage::new(h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                img.set(r, c, 255);
            }
        }
        img
    }

    #[test]
    fn single_point_maps_to_center_with_value_one() {
        let sensor = SensorModel::default();
        let d = project_points_to_depth(&[v3(3.0, 1.0, -2.0)], &sensor).unwrap();
        let nonzero: Vec<usize> = (0..d.values.len()).filter(|&i| d.values[i] > 0.0).collect();
        assert_eq!(nonzero, vec![(d.h / 2) * d.w + d.w / 2]);
        assert_eq!(d.values[nonzero[0]], 1.0);
    }

    #[test]
    fn z_buffer_keeps_nearest_point() {
        let sensor = SensorModel {
            view_deg: 0.0,
            ..SensorModel::default()
        };
        // forward at view 0 is -Z: smaller dot(p-c, fwd) is nearer
        // three points: two share a pixel (different depths), one offset in x
        let pts = vec![v3(0.0, 0.0, 2.0), v3(0.0, 0.0, 3.0), v3(0.5, 0.0, 2.5)];
        let d = project_points_to_depth(&pts, &sensor).unwrap();
        // the z=3 point is nearer (depth along -Z): its pixel must carry 1.0
        let nz: Vec<f32> = d.values.iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(nz.len(), 2, "two occupied pixels");
        assert!(nz.contains(&1.0));
    }

    #[test]
    fn occupied_pixels_never_exceed_point_count() {
        let mut rng = crate::seeds::stream(3, &[1]);
        use rand::Rng;
        let pts: Vec<_> = (0..200)
            .map(|_| {
                v3(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() * 1.8,
                    rng.gen::<f64>() - 0.5,
                )
            })
            .collect();
        let d = project_points_to_depth(&pts, &SensorModel::default()).unwrap();
        assert!(d.values.iter().filter(|&&v| v > 0.0).count() <= 200);
    }

    #[test]
    fn empty_cloud_errors() {
        assert!(project_points_to_depth(&[], &SensorModel::default()).is_err());
    }

    #[test]
    fn all_points_outside_extent_errors() {
        // two points both far from their centroid horizontally
        let pts = vec![v3(-50.0, 0.0, 0.0), v3(50.0, 0.0, 0.0)];
        let err = project_points_to_depth(&pts, &SensorModel::default()).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn centered_full_height_rectangle_is_fixed_point() {
        let mask = rect_mask(64, 64, 0, 64, 24, 40);
        let out = normalize_silhouette(&mask).unwrap();
        let want: Vec<f32> = mask.pixels.iter().map(|&p| f32::from(p > 0)).collect();
        let same = out
            .pixels
            .iter()
            .zip(&want)
            .filter(|(a, b)| (**a > 0.5) == (**b > 0.5))
            .count();
        let iou = frame_iou(&out, &NormalizedFrame { pixels: want });
        assert!(iou >= 0.99, "IoU {iou}, same {same}");
    }

    #[test]
    fn translation_gives_bit_identical_output() {
        let mask = rect_mask(96, 96, 10, 80, 30, 48);
        let shifted = rect_mask(96, 96, 14, 84, 41, 59);
        let a = normalize_silhouette(&mask).unwrap();
        let b = normalize_silhouette(&shifted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn double_scale_keeps_high_iou() {
        // an L-shaped figure, then its 2x nearest upscale
        let mut mask = GrayImage::new(64, 64);
        for r in 10..50 {
            for c in 20..30 {
                mask.set(r, c, 255);
            }
        }
        for r in 40..50 {
            for c in 30..44 {
                mask.set(r, c, 255);
            }
        }
        let mut big = GrayImage::new(128, 128);
        for r in 0..128 {
            for c in 0..128 {
                if mask.get(r / 2, c / 2) > 0 {
                    big.set(r, c, 255);
                }
            }
        }
        let a = normalize_silhouette(&mask).unwrap();
        let b = normalize_silhouette(&big).unwrap();
        let iou = frame_iou(&a, &b);
        assert!(iou >= 0.95, "IoU {iou}");
    }

    #[test]
    fn tiny_mask_is_degenerate() {
        let mask = rect_mask(32, 32, 4, 6, 4, 9); // 10 px < 16
        assert!(matches!(
            normalize_silhouette(&mask),
            Err(Error::DegenerateFrame { pixels: 10, min: 16 })
        ));
    }

    #[test]
    fn binary_depth_matches_silhouette_of_support() {
        let mask = rect_mask(80, 80, 8, 72, 30, 50);
        let depth = DepthImage {
            h: 80,
            w: 80,
            values: mask.pixels.iter().map(|&p| f32::from(p > 0)).collect(),
        };
        let s = normalize_silhouette(&mask).unwrap();
        let d = normalize_depth_frame(&depth).unwrap();
        let d_bin = NormalizedFrame {
            pixels: d.pixels.iter().map(|&v| f32::from(v > 0.5)).collect(),
        };
        let iou = frame_iou(&s, &d_bin);
        assert!(iou >= 0.9, "IoU {iou}");
    }

    #[test]
    fn constant_depth_person_stays_constant() {
        let mask = rect_mask(80, 80, 8, 72, 30, 50);
        let depth = DepthImage {
            h: 80,
            w: 80,
            values: mask.pixels.iter().map(|&p| if p > 0 { 0.7 } else { 0.0 }).collect(),
        };
        let d = normalize_depth_frame(&depth).unwrap();
        // strictly inside the person (away from the bilinear boundary ring)
        // every pixel keeps the constant depth
        let mut interior = 0;
        for r in 2..62 {
            for c in 24..40 {
                let v = d.pixels[r * NORM_SIZE + c];
                assert!((v - 0.7).abs() < 1e-6, "interior value {v} at ({r},{c})");
                interior += 1;
            }
        }
        assert!(interior > 900, "only {interior} interior pixels checked");
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let id = crate::synthgen::sample_identity(40, 2);
        let frame = crate::synthgen::pose_at(&id, 0.25);
        let mut rng = crate::seeds::stream(40, &[5]);
        let pts =
            crate::synthgen::render::sample_point_cloud(&frame, 90.0, 0.01, 512, &mut rng).unwrap();
        let sensor = SensorModel {
            view_deg: 90.0,
            ..SensorModel::default()
        };
        let d = project_points_to_depth(&pts, &sensor).unwrap();
        let n = normalize_depth_frame(&d).unwrap();
        for &v in &n.pixels {
            assert!((0.0..=1.0).contains(&v));
        }
        let fg = n.pixels.iter().filter(|&&v| v > 0.0).count() as f64 / n.pixels.len() as f64;
        assert!((0.05..=0.80).contains(&fg), "foreground fraction {fg}");
    }

    #[test]
    fn point_order_permutation_invariance() {
        let mut rng = crate::seeds::stream(9, &[9]);
        use rand::Rng;
        let pts: Vec<_> = (0..300)
            .map(|_| {
                v3(
                    rng.gen::<f64>() * 0.8,
                    rng.gen::<f64>() * 1.8,
                    rng.gen::<f64>() * 0.4,
                )
            })
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = project_points_to_depth(&pts, &SensorModel::default()).unwrap();
        let b = project_points_to_depth(&rev, &SensorModel::default()).unwrap();
        // centroid summation order differs, so allow tiny float slack
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn sequence_with_one_empty_frame_drops_it() {
        let id = crate::synthgen::sample_identity(50, 1);
        let frames: Vec<FrameData> = (0..10)
            .map(|i| {
                if i == 5 {
                    FrameData::Mask(GrayImage::new(32, 32)) // empty frame
                } else {
                    let f = crate::synthgen::pose_at(&id, i as f64 / 30.0);
                    let win = crate::synthgen::render::fit_window(
                        std::slice::from_ref(&f),
                        90.0,
                        96,
                        0.15,
                    );
                    FrameData::Mask(
                        crate::synthgen::render::render_silhouette(&f, 90.0, &win).unwrap(),
                    )
                }
            })
            .collect();
        let seq = GaitSequence {
            identity_index: 0,
            walk_index: 0,
            condition: crate::synthgen::Condition::normal(),
            view_deg: 90,
            modality: Modality::Silhouette,
            frames,
        };
        let t = preprocess_sequence(&seq, &SensorModel::default()).unwrap();
        assert_eq!(t.shape, vec![9, 1, NORM_SIZE, NORM_SIZE]);
    }

    #[test]
    fn sequence_with_too_few_valid_frames_is_rejected() {
        let seq = GaitSequence {
            identity_index: 0,
            walk_index: 0,
            condition: crate::synthgen::Condition::normal(),
            view_deg: 0,
            modality: Modality::Silhouette,
            frames: vec![
                FrameData::Mask(GrayImage::new(16, 16)),
                FrameData::Mask(GrayImage::new(16, 16)),
            ],
        };
        assert!(matches!(
            preprocess_sequence(&seq, &SensorModel::default()),
            Err(Error::SequenceRejected(_))
        ));
    }
}
