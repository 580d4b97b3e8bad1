//! Single-image animation by piecewise-affine warping over a Delaunay mesh
//! of the portrait's landmarks plus fixed border anchors.
//!
//! Pixel centres sit at integer coordinates. Sampling is bilinear with
//! clamp-to-edge addressing.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkFrame, LandmarkSequence, Point3, N_LANDMARKS};

pub const N_BORDER_ANCHORS: usize = 8;

/// RGB portrait with its 68 landmarks in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PortraitImage {
    pub image: RgbImage,
    pub landmarks: Vec<[f64; 2]>,
}

impl PortraitImage {
    pub fn new(image: RgbImage, landmarks: Vec<[f64; 2]>) -> Result<Self> {
        if landmarks.len() != N_LANDMARKS {
            return Err(Error::Validation(format!("portrait needs {N_LANDMARKS} landmarks, got {}", landmarks.len())));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        if w < 2.0 || h < 2.0 {
            return Err(Error::Validation("portrait must be at least 2x2 pixels".into()));
        }
        if let Some((i, p)) =
            landmarks.iter().enumerate().find(|(_, p)| !(p[0] >= 0.0 && p[0] <= w - 1.0 && p[1] >= 0.0 && p[1] <= h - 1.0))
        {
            return Err(Error::Validation(format!("landmark {i} at ({}, {}) lies outside the {w}x{h} image", p[0], p[1])));
        }
        Ok(Self { image, landmarks })
    }

    /// Loads a PNG and a single-frame landmark file (x, y in pixels; z ignored).
    pub fn load(image_path: impl AsRef<Path>, landmarks_path: impl AsRef<Path>) -> Result<Self> {
        let image = image::open(image_path.as_ref()).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
        let seq = crate::geometry::load_sequence(landmarks_path)?;
        let lm = seq.frame(0).points().iter().map(|p| [p.x, p.y]).collect();
        Self::new(image, lm)
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Landmarks followed by the 4 corners and 4 edge midpoints.
    pub fn mesh_vertices(&self) -> Vec<[f64; 2]> {
        let mut v = self.landmarks.clone();
        v.extend(border_anchors(self.width(), self.height()));
        v
    }

    /// A flat-shaded cartoon face drawn from `template`, for demos and tests.
    pub fn synthetic(size: u32, template: &LandmarkFrame) -> Result<Self> {
        if size < 16 {
            return Err(Error::Validation("synthetic portrait needs at least 16 pixels".into()));
        }
        let map = PixelMapping::centered(size, size);
        let lm: Vec<[f64; 2]> = template.points().iter().map(|p| map.apply(p)).collect();
        let s = size as f64;
        let poly = |idx: std::ops::RangeInclusive<usize>| idx.map(|i| lm[i]).collect::<Vec<_>>();
        let (jaw, outer, inner, eye_r, eye_l) = (poly(0..=16), poly(48..=59), poly(60..=67), poly(36..=41), poly(42..=47));
        let brow_top = lm[17..=26].iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let face_c = [(lm[0][0] + lm[16][0]) / 2.0, (brow_top + lm[8][1]) / 2.0];
        let face_r = [(lm[16][0] - lm[0][0]) / 2.0, (lm[8][1] - brow_top) / 2.0 + 0.08 * s];
        let image = RgbImage::from_fn(size, size, |x, y| {
            let p = [x as f64, y as f64];
            let in_face = ((p[0] - face_c[0]) / face_r[0]).powi(2) + ((p[1] - face_c[1]) / face_r[1]).powi(2) <= 1.0
                || inside_polygon(&jaw, p);
            let near_brow = lm[17..=26].windows(2).filter(|w| w[0] != lm[21] || w[1] != lm[22]).any(|w| seg_dist(p, w[0], w[1]) < 0.012 * s);
            let c = if inside_polygon(&inner, p) {
                [90, 20, 30]
            } else if inside_polygon(&outer, p) {
                [200, 60, 70]
            } else if inside_polygon(&eye_r, p) || inside_polygon(&eye_l, p) {
                [30, 30, 40]
            } else if near_brow {
                [80, 50, 30]
            } else if in_face {
                [240, 200, 160]
            } else {
                let t = p[1] / s;
                [(60.0 + 80.0 * t) as u8, (120.0 + 40.0 * t) as u8, (200.0 - 60.0 * t) as u8]
            };
            Rgb(c)
        });
        Self::new(image, lm)
    }
}

fn inside_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]) {
            inside = !inside;
        }
    }
    inside
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

pub fn border_anchors(width: u32, height: u32) -> [[f64; 2]; N_BORDER_ANCHORS] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [[0.0, 0.0], [w / 2.0, 0.0], [w, 0.0], [w, h / 2.0], [w, h], [w / 2.0, h], [0.0, h], [0.0, h / 2.0]]
}

/// Least-squares 2D affine map from landmark space (x, y) to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMapping {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl PixelMapping {
    /// Puts the standard template's face, 2 units wide, across half of a
    /// `width` x `height` image.
    pub fn centered(width: u32, height: u32) -> Self {
        let s = 0.25 * width.min(height) as f64;
        Self { linear: [[s, 0.0], [0.0, s]], offset: [width as f64 / 2.0, height as f64 / 2.0] }
    }

    pub fn fit(model: &LandmarkFrame, pixels: &[[f64; 2]]) -> Result<Self> {
        if pixels.len() != N_LANDMARKS {
            return Err(Error::Validation(format!("expected {N_LANDMARKS} pixel landmarks, got {}", pixels.len())));
        }
        let mut ata = Matrix3::zeros();
        let mut atx = Vector3::zeros();
        let mut aty = Vector3::zeros();
        for (p, q) in model.points().iter().zip(pixels) {
            let r = Vector3::new(p.x, p.y, 1.0);
            ata += r * r.transpose();
            atx += r * q[0];
            aty += r * q[1];
        }
        let inv = ata.try_inverse().ok_or_else(|| Error::Degenerate("landmarks are collinear".into()))?;
        let (cx, cy) = (inv * atx, inv * aty);
        Ok(Self { linear: [[cx[0], cx[1]], [cy[0], cy[1]]], offset: [cx[2], cy[2]] })
    }

    /// Orthographic projection: z is dropped.
    pub fn apply(&self, p: &Point3) -> [f64; 2] {
        let l = &self.linear;
        [l[0][0] * p.x + l[0][1] * p.y + self.offset[0], l[1][0] * p.x + l[1][1] * p.y + self.offset[1]]
    }

    /// Landmark-space (x, y) of a pixel position.
    pub fn invert(&self, q: [f64; 2]) -> Result<[f64; 2]> {
        let l = &self.linear;
        let det = l[0][0] * l[1][1] - l[0][1] * l[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::Degenerate("pixel mapping is singular".into()));
        }
        let (x, y) = (q[0] - self.offset[0], q[1] - self.offset[1]);
        Ok([(l[1][1] * x - l[0][1] * y) / det, (l[0][0] * y - l[1][0] * x) / det])
    }

    /// The portrait's face in landmark space, with depth taken from `template`.
    pub fn portrait_face(&self, portrait: &PortraitImage, template: &LandmarkFrame) -> Result<LandmarkFrame> {
        let pts = portrait
            .landmarks
            .iter()
            .zip(template.points())
            .map(|(q, t)| self.invert(*q).map(|[x, y]| Point3::new(x, y, t.z)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LandmarkFrame::new(pts)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    /// Source positions; texture coordinates into the source image.
    pub vertices: Vec<[f64; 2]>,
    /// Counter-clockwise index triples in canonical order.
    pub triangles: Vec<[usize; 3]>,
}

/// Twice the signed area of `abc`; positive when counter-clockwise in a
/// y-up frame.
pub fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Delaunay triangulation. Points are inserted in lexicographic order so the
/// result does not depend on the input permutation; cocircular ties follow
/// that order.
pub fn triangulate(points: &[[f64; 2]]) -> Result<TriangleMesh> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Validation(format!("point {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(points[a][1].total_cmp(&points[b][1])).then(a.cmp(&b)));
    let mut dt: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    let mut handle_to_index = Vec::with_capacity(points.len());
    for &i in &order {
        let h = dt
            .insert(Point2::new(points[i][0], points[i][1]))
            .map_err(|e| Error::Degenerate(format!("point {i}: {e:?}")))?;
        if h.index() != handle_to_index.len() {
            return Err(Error::Degenerate(format!("point {i} duplicates another point")));
        }
        handle_to_index.push(i);
    }
    let mut triangles: Vec<[usize; 3]> = dt
        .inner_faces()
        .map(|f| {
            let v = f.vertices().map(|h| handle_to_index[h.fix().index()]);
            let mut t = if orient(points[v[0]], points[v[1]], points[v[2]]) < 0.0 { [v[0], v[2], v[1]] } else { v };
            let m = (0..3).min_by_key(|&k| t[k]).unwrap();
            t.rotate_left(m);
            t
        })
        .collect();
    if triangles.is_empty() {
        return Err(Error::Degenerate("all points are collinear".into()));
    }
    triangles.sort_unstable();
    Ok(TriangleMesh { vertices: points.to_vec(), triangles })
}

/// Bilinear sample with clamp-to-edge addressing.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| img.get_pixel(xi.clamp(0, w - 1) as u32, yi.clamp(0, h - 1) as u32).0;
    let (a, b, c, d) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = top * (1.0 - fy) + bot * fy;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpOutput {
    pub image: RgbImage,
    /// Triangles whose orientation flipped between source and target.
    pub fold_overs: usize,
}

/// Piecewise-affine warp of `src` from `mesh.vertices` to `target`.
pub fn warp_frame(src: &RgbImage, mesh: &TriangleMesh, target: &[[f64; 2]]) -> Result<WarpOutput> {
    if target.len() != mesh.vertices.len() {
        return Err(Error::Validation(format!("{} target vertices for a mesh of {}", target.len(), mesh.vertices.len())));
    }
    if target.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Validation("target vertices must be finite".into()));
    }
    let mut out = src.clone();
    let (w, h) = (src.width() as i64, src.height() as i64);
    let mut fold_overs = 0;
    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|i| target[i]);
        let [sa, sb, sc] = tri.map(|i| mesh.vertices[i]);
        let area = orient(a, b, c);
        if area == 0.0 {
            continue;
        }
        if (area > 0.0) != (orient(sa, sb, sc) > 0.0) {
            fold_overs += 1;
        }
        let x_lo = a[0].min(b[0]).min(c[0]).ceil().max(0.0) as i64;
        let x_hi = (a[0].max(b[0]).max(c[0]).floor() as i64).min(w - 1);
        let y_lo = a[1].min(b[1]).min(c[1]).ceil().max(0.0) as i64;
        let y_hi = (a[1].max(b[1]).max(c[1]).floor() as i64).min(h - 1);
        let eps = 1e-9 * area.abs();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let p = [x as f64, y as f64];
                let l0 = orient(b, c, p) / area;
                let l1 = orient(c, a, p) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 * area.abs() < -eps || l1 * area.abs() < -eps || l2 * area.abs() < -eps {
                    continue;
                }
                let sx = l0 * sa[0] + l1 * sb[0] + l2 * sc[0];
                let sy = l0 * sa[1] + l1 * sb[1] + l2 * sc[1];
                let v = sample_bilinear(src, sx, sy);
                out.put_pixel(x as u32, y as u32, Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8)));
            }
        }
    }
    Ok(WarpOutput { image: out, fold_overs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub fps: f64,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<String>,
    pub fold_overs: Vec<usize>,
}

/// Renders one PNG per frame of `seq`, which must already be in pixel
/// coordinates (z is dropped). Border anchors stay fixed.
pub fn render_animation(src: &PortraitImage, seq: &LandmarkSequence, out_dir: impl AsRef<Path>) -> Result<RenderManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mesh = triangulate(&src.mesh_vertices())?;
    let anchors = border_anchors(src.width(), src.height());
    let results: Vec<(String, usize)> = seq
        .frames()
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let mut target: Vec<[f64; 2]> = f.points().iter().map(|p| [p.x, p.y]).collect();
            target.extend(anchors);
            let w = warp_frame(&src.image, &mesh, &target)?;
            let name = format!("frame_{t:06}.png");
            w.image.save(out_dir.join(&name)).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Io(io),
                e => Error::Image(e.to_string()),
            })?;
            Ok((name, w.fold_overs))
        })
        .collect::<Result<_>>()?;
    let manifest = RenderManifest {
        fps: seq.fps(),
        frame_count: results.len(),
        width: src.width(),
        height: src.height(),
        frames: results.iter().map(|r| r.0.clone()).collect(),
        fold_overs: results.iter().map(|r| r.1).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Maps a landmark-space sequence into the portrait's pixel frame.
pub fn to_pixel_space(seq: &LandmarkSequence, map: &PixelMapping) -> Result<LandmarkSequence> {
    Ok(seq.map_frames(|_, f| f.map(|_, p| {
        let [x, y] = map.apply(p);
        Point3::new(x, y, 0.0)
    }))?)
}

pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&dyn Fn(u32, u32) -> bool>) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (x, y, pa) in a.enumerate_pixels() {
        if mask.is_some_and(|m| !m(x, y)) {
            continue;
        }
        let pb = b.get_pixel(x, y);
        for k in 0..3 {
            se += (pa[k] as f64 - pb[k] as f64).powi(2);
        }
        n += 3;
    }
    if se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64.powi(2) / (se / n as f64)).log10()
}

/// Image positions inside the convex hull of `mesh` (pixel centres).
pub fn inside_hull(mesh: &TriangleMesh, x: f64, y: f64) -> bool {
    mesh.triangles.iter().any(|t| {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        let area = orient(a, b, c);
        let eps = -1e-9 * area.abs();
        orient(b, c, [x, y]) * area.signum() >= eps && orient(c, a, [x, y]) * area.signum() >= eps && orient(a, b, [x, y]) * area.signum() >= eps
    })
}

/// Output file paths of a manifest.
pub fn frame_paths(dir: impl AsRef<Path>, manifest: &RenderManifest) -> Vec<PathBuf> {
    manifest.frames.iter().map(|f| dir.as_ref().join(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::standard_template;

    fn circumcircle_ok(mesh: &TriangleMesh) -> bool {
        mesh.triangles.iter().all(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            mesh.vertices.iter().enumerate().filter(|(i, _)| !t.contains(i)).all(|(_, d)| {
                let m = [
                    [a[0] - d[0], a[1] - d[1], (a[0] - d[0]).powi(2) + (a[1] - d[1]).powi(2)],
                    [b[0] - d[0], b[1] - d[1], (b[0] - d[0]).powi(2) + (b[1] - d[1]).powi(2)],
                    [c[0] - d[0], c[1] - d[1], (c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)],
                ];
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                det <= 1e-9
            })
        })
    }

    #[test]
    fn three_points_one_triangle() {
        let m = triangulate(&[[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn unit_square_two_delaunay_triangles() {
        let m = triangulate(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(m.triangles.len(), 2);
        assert!(circumcircle_ok(&m));
    }

    #[test]
    fn collinear_and_duplicate_rejected() {
        assert!(triangulate(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
        assert!(triangulate(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn permutation_gives_same_triangles() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 2.0], [2.0, 0.5]];
        let m = triangulate(&pts).unwrap();
        let perm = [3, 5, 0, 2, 4, 1];
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&i| pts[i]).collect();
        let ms = triangulate(&shuffled).unwrap();
        let mut back: Vec<[usize; 3]> = ms
            .triangles
            .iter()
            .map(|t| {
                let mut t = t.map(|i| perm[i]);
                let m = (0..3).min_by_key(|&k| t[k]).unwrap();
                t.rotate_left(m);
                t
            })
            .collect();
        back.sort_unstable();
        assert_eq!(back, m.triangles);
    }

    #[test]
    fn scaled_triangle_centre_samples_source_centroid() {
        let src = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 3) as u8, (y * 3) as u8, 7]));
        let mesh = triangulate(&[[20.0, 20.0], [32.0, 20.0], [20.0, 32.0]]).unwrap();
        let c = [24.0, 24.0];
        let target: Vec<[f64; 2]> = mesh.vertices.iter().map(|v| [c[0] + 2.0 * (v[0] - c[0]), c[1] + 2.0 * (v[1] - c[1])]).collect();
        let out = warp_frame(&src, &mesh, &target).unwrap();
        assert_eq!(out.image.get_pixel(24, 24), src.get_pixel(24, 24));
        assert_eq!(out.fold_overs, 0);
    }

    #[test]
    fn inverted_target_counted() {
        let src = RgbImage::new(16, 16);
        let mesh = triangulate(&[[2.0, 2.0], [10.0, 2.0], [2.0, 10.0]]).unwrap();
        let out = warp_frame(&src, &mesh, &[[2.0, 2.0], [2.0, 10.0], [10.0, 2.0]]).unwrap();
        assert_eq!(out.fold_overs, 1);
    }

    #[test]
    fn synthetic_portrait_and_mapping() {
        let t = standard_template();
        let p = PortraitImage::synthetic(64, &t).unwrap();
        let map = PixelMapping::fit(&t, &p.landmarks).unwrap();
        let face = map.portrait_face(&p, &t).unwrap();
        for (a, b) in face.points().iter().zip(t.points()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn portrait_landmarks_must_be_inside() {
        let mut lm = vec![[1.0, 1.0]; N_LANDMARKS];
        lm[5] = [100.0, 1.0];
        assert!(PortraitImage::new(RgbImage::new(32, 32), lm).is_err());
    }
}
