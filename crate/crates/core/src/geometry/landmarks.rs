use nalgebra::Vector3;

use super::GeometryError;

pub type Point3 = Vector3<f64>;

/// Number of landmarks in the 68-point facial annotation.
pub const N_LANDMARKS: usize = 68;
/// Length of a flattened frame (`68 * 3`).
pub const FLAT_DIM: usize = N_LANDMARKS * 3;
/// Frame rate every sequence is brought to before it enters the networks.
pub const CANONICAL_FPS: f64 = 62.5;

/// Landmarks that barely move while speaking: eye corners, the nose and the
/// two ends of the jaw contour. Used for registration and pose fitting.
pub const STABLE_INDICES: [usize; 15] = [0, 16, 27, 28, 29, 30, 31, 32, 33, 34, 35, 36, 39, 42, 45];

/// One frame of 68 ordered 3D landmarks (x right, y down, z toward camera).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<Point3>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() != N_LANDMARKS {
            return Err(GeometryError::InvalidFrame(format!(
                "expected {N_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::InvalidFrame(format!("landmark {i} is not finite")));
        }
        Ok(Self { points })
    }

    /// Builds a frame from `x1 y1 z1 ... x68 y68 z68`.
    pub fn from_flat(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != FLAT_DIM {
            return Err(GeometryError::InvalidFrame(format!(
                "expected {FLAT_DIM} coordinates, got {}",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks_exact(3)
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    /// All points at the same location.
    pub fn constant(p: Point3) -> Self {
        Self { points: vec![p; N_LANDMARKS] }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Applies `f` to every point. The result is re-validated.
    pub fn map(&self, mut f: impl FnMut(usize, &Point3) -> Point3) -> Result<Self, GeometryError> {
        Self::new(self.points.iter().enumerate().map(|(i, p)| f(i, p)).collect())
    }

    pub fn translated(&self, t: &Point3) -> Self {
        Self { points: self.points.iter().map(|p| p + t).collect() }
    }

    pub fn centroid_of(&self, indices: &[usize]) -> Point3 {
        let sum = indices.iter().fold(Point3::zeros(), |acc, &i| acc + self.points[i]);
        sum / indices.len() as f64
    }

    pub fn stable_centroid(&self) -> Point3 {
        self.centroid_of(&STABLE_INDICES)
    }

    /// Distance between the two ends of the jaw contour.
    pub fn face_width(&self) -> f64 {
        (self.points[0] - self.points[16]).norm()
    }

    /// Drops z and returns `(x, y)` pairs.
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

/// A fixed-rate sequence of landmark frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    frames: Vec<LandmarkFrame>,
    fps: f64,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkFrame>, fps: f64) -> Result<Self, GeometryError> {
        if frames.is_empty() {
            return Err(GeometryError::InvalidSequence("sequence has no frames".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(GeometryError::InvalidSequence(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    /// `n` copies of `frame`.
    pub fn repeat(frame: &LandmarkFrame, n: usize, fps: f64) -> Result<Self, GeometryError> {
        Self::new(vec![frame.clone(); n], fps)
    }

    /// Builds a sequence from row-major `[n_frames, 204]` values.
    pub fn from_flat(values: &[f64], fps: f64) -> Result<Self, GeometryError> {
        if values.is_empty() || !values.len().is_multiple_of(FLAT_DIM) {
            return Err(GeometryError::InvalidSequence(format!(
                "flat length {} is not a positive multiple of {FLAT_DIM}",
                values.len()
            )));
        }
        let frames = values
            .chunks_exact(FLAT_DIM)
            .map(LandmarkFrame::from_flat)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(frames, fps)
    }

    pub fn frames(&self) -> &[LandmarkFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<LandmarkFrame> {
        self.frames
    }

    pub fn frame(&self, t: usize) -> &LandmarkFrame {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.to_flat()).collect()
    }

    pub fn map_frames(
        &self,
        f: impl Fn(usize, &LandmarkFrame) -> Result<LandmarkFrame, GeometryError>,
    ) -> Result<Self, GeometryError> {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(t, fr)| f(t, fr))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(frames, self.fps)
    }

    /// Duration covered by the frame timestamps, in seconds.
    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.fps
    }
}

/// Canonical front-facing 68-point template in normalized units.
///
/// The face spans x in [-1, 1] between the jaw ends, so the face width is 2.
pub fn standard_template() -> LandmarkFrame {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(N_LANDMARKS);

    // jaw 0..=16
    for k in 0..17 {
        let phi = PI * k as f64 / 16.0;
        pts.push(Point3::new(-phi.cos(), -0.1 + 1.1 * phi.sin(), -0.5 + 0.5 * phi.sin()));
    }
    // brows 17..=21, 22..=26
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let s = k as f64 / 4.0;
            let x = if side < 0.0 { -0.8 + 0.6 * s } else { 0.2 + 0.6 * s };
            pts.push(Point3::new(x, -0.55 - 0.08 * (PI * s).sin(), 0.15));
        }
    }
    // nose bridge 27..=30
    for k in 0..4 {
        let s = k as f64 / 3.0;
        pts.push(Point3::new(0.0, -0.4 + 0.45 * s, 0.25 + 0.25 * s));
    }
    // nose base 31..=35
    for k in 0..5 {
        let s = k as f64 / 4.0;
        let x = -0.18 + 0.36 * s;
        pts.push(Point3::new(x, 0.15 + 0.03 * (PI * s).sin(), 0.3 + 0.05 * (PI * s).sin()));
    }
    // eyes 36..=41 (outer corner first) and 42..=47 (inner corner first)
    for (cx, start) in [(-0.45, PI), (0.45, PI)] {
        for k in 0..6 {
            let a = start - k as f64 * PI / 3.0;
            pts.push(Point3::new(cx + 0.16 * a.cos(), -0.32 - 0.06 * a.sin(), 0.1));
        }
    }
    // outer lip 48..=59
    for k in 0..12 {
        let a = PI - k as f64 * 2.0 * PI / 12.0;
        pts.push(Point3::new(0.4 * a.cos(), 0.5 - 0.15 * a.sin(), 0.2 + 0.08 * a.sin().abs()));
    }
    // inner lip 60..=67
    for k in 0..8 {
        let a = PI - k as f64 * 2.0 * PI / 8.0;
        pts.push(Point3::new(0.28 * a.cos(), 0.5 - 0.05 * a.sin(), 0.22));
    }
    LandmarkFrame::new(pts).expect("template is well formed")
}
