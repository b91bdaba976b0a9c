//! Orthographic capsule rendering: silhouette masks and surface-sampled
//! point clouds.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Capsule, WalkerFrame};
use crate::formats::GrayImage;
use crate::geometry::{dist_point_segment_2d, v3, view_basis, Vec3};
use crate::{Error, Result};

/// Square orthographic window: `center` in world meters, `half_extent`
/// meters mapped to `px` pixels on each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderWindow {
    pub center: Vec3,
    pub half_extent: f64,
    pub px: usize,
}

/// Projected axis-aligned bounding box of all capsules, in window
/// coordinates (u right, v up, meters relative to window center).
pub fn projected_bbox(frame: &WalkerFrame, view_deg: f64, center: Vec3) -> (f64, f64, f64, f64) {
    let (right, up, _) = view_basis(view_deg);
    let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for cap in frame.capsules() {
        for p in [cap.a, cap.b] {
            let d = p - center;
            let (u, v) = (d.dot(right), d.dot(up));
            umin = umin.min(u - cap.r);
            umax = umax.max(u + cap.r);
            vmin = vmin.min(v - cap.r);
            vmax = vmax.max(v + cap.r);
        }
    }
    (umin, umax, vmin, vmax)
}

/// Window that tightly covers all frames of one walk from one view,
/// padded and squared so the walker never leaves frame.
pub fn fit_window(frames: &[WalkerFrame], view_deg: f64, px: usize, pad_m: f64) -> RenderWindow {
    let rough_center = frames[0].joints.pelvis;
    let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for f in frames {
        let (u0, u1, v0, v1) = projected_bbox(f, view_deg, rough_center);
        umin = umin.min(u0);
        umax = umax.max(u1);
        vmin = vmin.min(v0);
        vmax = vmax.max(v1);
    }
    let (right, up, _) = view_basis(view_deg);
    let cu = (umin + umax) / 2.0;
    let cv = (vmin + vmax) / 2.0;
    let center = rough_center + right * cu + up * cv;
    let half = ((umax - umin).max(vmax - vmin) / 2.0) + pad_m;
    RenderWindow {
        center,
        half_extent: half,
        px,
    }
}

/// Orthographic projection of all capsules onto the plane perpendicular to
/// the view direction; each capsule rasterizes as a filled stadium.
pub fn render_silhouette(
    frame: &WalkerFrame,
    view_deg: f64,
    win: &RenderWindow,
) -> Result<GrayImage> {
    let (umin, umax, vmin, vmax) = projected_bbox(frame, view_deg, win.center);
    let he = win.half_extent;
    if umin < -he || umax > he || vmin < -he || vmax > he {
        return Err(Error::Contract(format!(
            "walker outside frame: bbox u [{umin:.3}, {umax:.3}] v [{vmin:.3}, {vmax:.3}] \
             vs half extent {he:.3}"
        )));
    }
    let (right, up, _) = view_basis(view_deg);
    let n = win.px;
    let pitch = 2.0 * he / n as f64; // meters per pixel
    let mut img = GrayImage::new(n, n);
    for cap in frame.capsules() {
        let da = cap.a - win.center;
        let db = cap.b - win.center;
        let (au, av) = (da.dot(right), da.dot(up));
        let (bu, bv) = (db.dot(right), db.dot(up));
        // pixel bounds of the padded stadium bbox
        let u0 = au.min(bu) - cap.r;
        let u1 = au.max(bu) + cap.r;
        let v0 = av.min(bv) - cap.r;
        let v1 = av.max(bv) + cap.r;
        let c0 = (((u0 + he) / pitch).floor().max(0.0)) as usize;
        let c1 = (((u1 + he) / pitch).ceil() as usize).min(n);
        let r0 = (((he - v1) / pitch).floor().max(0.0)) as usize;
        let r1 = (((he - v0) / pitch).ceil() as usize).min(n);
        for r in r0..r1 {
            let pv = he - (r as f64 + 0.5) * pitch;
            for c in c0..c1 {
                let pu = (c as f64 + 0.5) * pitch - he;
                if dist_point_segment_2d(pu, pv, au, av, bu, bv) <= cap.r {
                    img.set(r, c, 255);
                }
            }
        }
    }
    Ok(img)
}

fn capsule_area(c: &Capsule) -> f64 {
    let len = (c.b - c.a).norm();
    2.0 * std::f64::consts::PI * c.r * len + 4.0 * std::f64::consts::PI * c.r * c.r
}

/// Orthonormal basis perpendicular to `axis`.
fn perp_basis(axis: Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 {
        v3(1.0, 0.0, 0.0)
    } else {
        v3(0.0, 1.0, 0.0)
    };
    let e1 = axis.cross(helper).normalized();
    let e2 = axis.cross(e1).normalized();
    (e1, e2)
}

/// Uniform-by-area point with outward normal on a capsule surface.
fn sample_capsule_surface<R: Rng>(cap: &Capsule, rng: &mut R) -> (Vec3, Vec3) {
    let axis = cap.b - cap.a;
    let len = axis.norm();
    let cyl_area = 2.0 * std::f64::consts::PI * cap.r * len;
    let cap_area = 4.0 * std::f64::consts::PI * cap.r * cap.r;
    let pick = rng.gen::<f64>() * (cyl_area + cap_area);
    if pick < cyl_area {
        let dir = axis * (1.0 / len);
        let (e1, e2) = perp_basis(dir);
        let t = rng.gen::<f64>();
        let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        let normal = e1 * theta.cos() + e2 * theta.sin();
        (cap.a + axis * t + normal * cap.r, normal)
    } else {
        // uniform direction on the sphere; the hemisphere facing the axis
        // belongs to the b-end cap, the other to the a-end
        let z = 2.0 * rng.gen::<f64>() - 1.0;
        let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        let rxy = (1.0 - z * z).sqrt();
        let dir = v3(rxy * phi.cos(), rxy * phi.sin(), z);
        let at_b = len == 0.0 || dir.dot(axis) > 0.0;
        let anchor = if at_b { cap.b } else { cap.a };
        (anchor + dir * cap.r, dir)
    }
}

/// Exactly `point_budget` points sampled uniformly by surface area on
/// capsules facing the sensor half-space, with Gaussian perturbation.
pub fn sample_point_cloud<R: Rng>(
    frame: &WalkerFrame,
    view_deg: f64,
    sensor_noise_sigma: f64,
    point_budget: usize,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    if !(256..=1024).contains(&point_budget) {
        return Err(Error::Contract(format!(
            "point budget {point_budget} outside [256, 1024]"
        )));
    }
    let (_, _, forward) = view_basis(view_deg);
    let toward_sensor = forward * -1.0;
    let capsules = frame.capsules();
    let areas: Vec<f64> = capsules.iter().map(capsule_area).collect();
    let total: f64 = areas.iter().sum();
    let noise = Normal::new(0.0, sensor_noise_sigma.max(0.0)).expect("valid sigma");
    let mut points = Vec::with_capacity(point_budget);
    while points.len() < point_budget {
        let mut pick = rng.gen::<f64>() * total;
        let mut idx = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
            idx = i;
        }
        let (p, normal) = sample_capsule_surface(&capsules[idx], rng);
        if normal.dot(toward_sensor) <= 0.0 {
            continue; // back-facing; self-occluded from the sensor
        }
        let jitter = if sensor_noise_sigma > 0.0 {
            v3(
                noise.sample(rng),
                noise.sample(rng),
                noise.sample(rng),
            )
        } else {
            v3(0.0, 0.0, 0.0)
        };
        points.push(p + jitter);
    }
    Ok(points)
}
