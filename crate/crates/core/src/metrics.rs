//! Landmark evaluation metrics: lip position, lip velocity and mouth area on
//! registered tracks, and landmark position, velocity, head rotation and
//! head position on tracks with head motion.
//!
//! Every value is a fraction (or degrees for `d_rot`); the text report prints
//! fractions as percentages.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    decompose_sequence, register_to_template, rotation_angle_between, LandmarkFrame, LandmarkSequence, PartTopology,
    RegistrationMode,
};

const LIP_CORNERS: (usize, usize) = (48, 54);
const INNER_LIP: &str = "inner_lip";
const JAW_LIP_PARTS: [&str; 3] = ["jaw", "outer_lip", "inner_lip"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipMetrics {
    pub d_ll: f64,
    pub d_vl: f64,
    pub d_a: f64,
    /// Maximum reference lip width over the clip.
    pub lip_width: f64,
    /// Maximum reference inner-mouth area over the clip.
    pub mouth_area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseMetrics {
    pub d_l: f64,
    pub d_v: f64,
    /// Degrees.
    pub d_rot: f64,
    pub d_pos: f64,
    /// Maximum reference face width over the clip.
    pub face_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub clip_id: String,
    pub d_ll: f64,
    pub d_vl: f64,
    pub d_a: f64,
    pub d_l: f64,
    pub d_v: f64,
    pub d_rot: f64,
    pub d_pos: f64,
    pub lip_width: f64,
    pub mouth_area: f64,
    pub face_width: f64,
}

impl MetricReport {
    pub fn new(clip_id: impl Into<String>, lip: LipMetrics, pose: PoseMetrics) -> Self {
        Self {
            clip_id: clip_id.into(),
            d_ll: lip.d_ll,
            d_vl: lip.d_vl,
            d_a: lip.d_a,
            d_l: pose.d_l,
            d_v: pose.d_v,
            d_rot: pose.d_rot,
            d_pos: pose.d_pos,
            lip_width: lip.lip_width,
            mouth_area: lip.mouth_area,
            face_width: pose.face_width,
        }
    }

    fn values(&self) -> [f64; 10] {
        [
            self.d_ll,
            self.d_vl,
            self.d_a,
            self.d_l,
            self.d_v,
            self.d_rot,
            self.d_pos,
            self.lip_width,
            self.mouth_area,
            self.face_width,
        ]
    }
}

fn check_lengths(pred: &LandmarkSequence, reference: &LandmarkSequence) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Validation(format!("{} predicted frames vs {} reference frames", pred.len(), reference.len())));
    }
    Ok(())
}

fn part_indices(topo: &PartTopology, names: &[&str]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for name in names {
        let part = topo
            .parts()
            .iter()
            .find(|p| p.name == *name)
            .ok_or_else(|| Error::Validation(format!("topology has no '{name}' part")))?;
        out.extend_from_slice(&part.indices);
    }
    Ok(out)
}

/// Shoelace area of the polygon through `indices`, in the image (x, y) plane.
pub fn polygon_area(frame: &LandmarkFrame, indices: &[usize]) -> f64 {
    let n = indices.len();
    let mut twice = 0.0;
    for k in 0..n {
        let a = frame.point(indices[k]);
        let b = frame.point(indices[(k + 1) % n]);
        twice += a.x * b.y - b.x * a.y;
    }
    twice.abs() / 2.0
}

/// Mean point distance over `idx`, per frame and per point.
fn mean_distance(pred: &LandmarkSequence, reference: &LandmarkSequence, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, r) in pred.frames().iter().zip(reference.frames()) {
        total += idx.iter().map(|&i| (p.point(i) - r.point(i)).norm()).sum::<f64>();
    }
    total / (pred.len() * idx.len()) as f64
}

/// Mean distance between frame-to-frame displacements; 0 for one frame.
fn mean_velocity_distance(pred: &LandmarkSequence, reference: &LandmarkSequence, idx: &[usize]) -> f64 {
    if pred.len() < 2 {
        return 0.0;
    }
    let (p, r) = (pred.frames(), reference.frames());
    let mut total = 0.0;
    for t in 1..p.len() {
        for &i in idx {
            let vp = p[t].point(i) - p[t - 1].point(i);
            let vr = r[t].point(i) - r[t - 1].point(i);
            total += (vp - vr).norm();
        }
    }
    total / ((p.len() - 1) * idx.len()) as f64
}

/// Lip metrics of two registered tracks of equal length.
pub fn lip_metrics(pred: &LandmarkSequence, reference: &LandmarkSequence, topo: &PartTopology) -> Result<LipMetrics> {
    check_lengths(pred, reference)?;
    let idx = part_indices(topo, &JAW_LIP_PARTS)?;
    let inner = part_indices(topo, &[INNER_LIP])?;
    let lip_width = reference
        .frames()
        .iter()
        .map(|f| (f.point(LIP_CORNERS.0) - f.point(LIP_CORNERS.1)).norm())
        .fold(0.0, f64::max);
    if !(lip_width > 0.0) {
        return Err(Error::MetricUndefined("reference lips have zero width".into()));
    }
    let areas: Vec<(f64, f64)> =
        pred.frames().iter().zip(reference.frames()).map(|(p, r)| (polygon_area(p, &inner), polygon_area(r, &inner))).collect();
    let mouth_area = areas.iter().map(|a| a.1).fold(0.0, f64::max);
    if !(mouth_area > 0.0) {
        return Err(Error::MetricUndefined("reference mouth never opens".into()));
    }
    Ok(LipMetrics {
        d_ll: mean_distance(pred, reference, &idx) / lip_width,
        d_vl: mean_velocity_distance(pred, reference, &idx) / lip_width,
        d_a: areas.iter().map(|(p, r)| (p - r).abs()).sum::<f64>() / areas.len() as f64 / mouth_area,
        lip_width,
        mouth_area,
    })
}

/// Landmark and head-pose metrics of two tracks with head motion.
/// Rotation error is the geodesic angle between the decomposed head
/// rotations, averaged over frames.
pub fn pose_metrics(pred: &LandmarkSequence, reference: &LandmarkSequence, template: &LandmarkFrame) -> Result<PoseMetrics> {
    check_lengths(pred, reference)?;
    let face_width = reference.frames().iter().map(LandmarkFrame::face_width).fold(0.0, f64::max);
    if !(face_width > 0.0) {
        return Err(Error::MetricUndefined("reference face has zero width".into()));
    }
    let all: Vec<usize> = (0..crate::geometry::N_LANDMARKS).collect();
    let pp = decompose_sequence(pred, template)?;
    let rp = decompose_sequence(reference, template)?;
    let n = pp.len() as f64;
    Ok(PoseMetrics {
        d_l: mean_distance(pred, reference, &all) / face_width,
        d_v: mean_velocity_distance(pred, reference, &all) / face_width,
        d_rot: pp.iter().zip(&rp).map(|(a, b)| rotation_angle_between(&a.rotation(), &b.rotation())).sum::<f64>() / n,
        d_pos: pp.iter().zip(&rp).map(|(a, b)| (a.translation - b.translation).norm()).sum::<f64>() / n,
        face_width,
    })
}

/// Full report for one clip. Both tracks carry head motion; lip metrics are
/// taken after per-frame registration to `template`.
pub fn clip_report(
    clip_id: &str,
    pred: &LandmarkSequence,
    reference: &LandmarkSequence,
    template: &LandmarkFrame,
    topo: &PartTopology,
) -> Result<MetricReport> {
    check_lengths(pred, reference)?;
    let pr = register_to_template(pred, template, RegistrationMode::PerFrame)?.sequence;
    let rr = register_to_template(reference, template, RegistrationMode::PerFrame)?.sequence;
    Ok(MetricReport::new(clip_id, lip_metrics(&pr, &rr, topo)?, pose_metrics(pred, reference, template)?))
}

/// Reports for many `(clip_id, pred, reference)` triples, computed in parallel.
pub fn corpus_reports(
    clips: &[(String, LandmarkSequence, LandmarkSequence)],
    template: &LandmarkFrame,
    topo: &PartTopology,
) -> Result<Vec<MetricReport>> {
    clips.par_iter().map(|(id, p, r)| clip_report(id, p, r, template, topo)).collect()
}

/// Unweighted mean over clips.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Validation("no clip reports to aggregate".into()));
    }
    let mut sum = [0.0; 10];
    for r in reports {
        for (s, v) in sum.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let n = reports.len() as f64;
    let m = sum.map(|s| s / n);
    Ok(MetricReport {
        clip_id: "mean".into(),
        d_ll: m[0],
        d_vl: m[1],
        d_a: m[2],
        d_l: m[3],
        d_v: m[4],
        d_rot: m[5],
        d_pos: m[6],
        lip_width: m[7],
        mouth_area: m[8],
        face_width: m[9],
    })
}

/// Tab-separated report: a header, one row per clip, then the mean row.
/// Fractions are printed as percentages and `d_rot` in degrees.
pub fn format_report(reports: &[MetricReport]) -> Result<String> {
    let mean = aggregate(reports)?;
    let mut out = String::from("clip_id\td_ll_pct\td_vl_pct\td_a_pct\td_l_pct\td_v_pct\td_rot_deg\td_pos_pct\tlip_width\tmouth_area\tface_width\n");
    for r in reports.iter().chain(std::iter::once(&mean)) {
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\t{:.6}",
            r.clip_id,
            100.0 * r.d_ll,
            100.0 * r.d_vl,
            100.0 * r.d_a,
            100.0 * r.d_l,
            100.0 * r.d_v,
            r.d_rot,
            100.0 * r.d_pos,
            r.lip_width,
            r.mouth_area,
            r.face_width
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_head_pose, standard_template, HeadPose, Point3, CANONICAL_FPS};

    fn seq(frames: Vec<LandmarkFrame>) -> LandmarkSequence {
        LandmarkSequence::new(frames, CANONICAL_FPS).unwrap()
    }

    #[test]
    fn identical_tracks_score_zero() {
        let t = standard_template();
        let s = seq(vec![t.clone(), t.translated(&Point3::new(0.01, 0.0, 0.0))]);
        let topo = PartTopology::standard68();
        let r = clip_report("x", &s, &s, &t, &topo).unwrap();
        assert_eq!(r.values()[..7], [0.0; 7]);
    }

    #[test]
    fn constant_lip_offset_has_no_velocity_error() {
        let t = standard_template();
        let topo = PartTopology::standard68();
        let jl = part_indices(&topo, &JAW_LIP_PARTS).unwrap();
        let u = Point3::new(0.03, -0.04, 0.0);
        let shift = |f: &LandmarkFrame| f.map(|i, p| if jl.contains(&i) { p + u } else { *p }).unwrap();
        let r = seq(vec![t.clone(), t.translated(&Point3::new(0.0, 0.02, 0.0))]);
        let p = seq(r.frames().iter().map(shift).collect());
        let m = lip_metrics(&p, &r, &topo).unwrap();
        let w = (t.point(48) - t.point(54)).norm();
        assert!((m.d_ll - 0.05 / w).abs() < 1e-12);
        assert!(m.d_vl.abs() < 1e-12);
    }

    #[test]
    fn mouth_area_square() {
        let topo = PartTopology::standard68();
        let inner = part_indices(&topo, &[INNER_LIP]).unwrap();
        let square = |side: f64| {
            let corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
            let mut pts = standard_template().points().to_vec();
            for (k, &i) in inner.iter().enumerate() {
                let (a, b) = (corners[k / 2], corners[(k / 2 + 1) % 4]);
                let s = (k % 2) as f64 * 0.5;
                pts[i] = Point3::new(a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s, 0.0);
            }
            LandmarkFrame::new(pts).unwrap()
        };
        assert!((polygon_area(&square(1.0), &inner) - 1.0).abs() < 1e-12);
        let m = lip_metrics(&seq(vec![square(2.0)]), &seq(vec![square(1.0)]), &topo).unwrap();
        assert!((m.d_a - 3.0).abs() < 1e-12);
    }

    #[test]
    fn extra_yaw_is_measured_in_degrees() {
        let t = standard_template();
        let base = seq(vec![t.clone(); 3]);
        let reference = apply_head_pose(&base, &[HeadPose::from_angles(10.0, 4.0, -3.0).unwrap()]).unwrap();
        let pred = apply_head_pose(&base, &[HeadPose::from_angles(15.0, 4.0, -3.0).unwrap()]).unwrap();
        let m = pose_metrics(&pred, &reference, &t).unwrap();
        assert!((m.d_rot - 5.0).abs() < 1e-6, "{}", m.d_rot);
        assert!(m.d_pos < 1e-9);
        assert!(m.d_v < 1e-12);
    }

    #[test]
    fn degenerate_reference_rejected() {
        let topo = PartTopology::standard68();
        let flat = seq(vec![LandmarkFrame::constant(Point3::new(1.0, 1.0, 0.0))]);
        assert!(matches!(lip_metrics(&flat, &flat, &topo), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn report_has_stable_layout() {
        let t = standard_template();
        let s = seq(vec![t.clone(), t.clone()]);
        let r = clip_report("c1", &s, &s, &t, &PartTopology::standard68()).unwrap();
        let text = format_report(&[r]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("clip_id\td_ll_pct"));
        assert!(lines[1].starts_with("c1\t0.0000\t0.0000\t0.0000"));
        assert!(lines[2].starts_with("mean\t"));
    }
}
