use nalgebra::{Matrix3, SymmetricEigen};

use super::landmarks::{LandmarkFrame, LandmarkSequence, Point3, STABLE_INDICES};
use super::GeometryError;

/// Smallest allowed ratio between the smallest and largest eigenvalue of the
/// scatter matrix of the stable subset before the fit is declared degenerate.
const DEGENERACY_RATIO: f64 = 1e-10;

/// `x -> linear * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub offset: Point3,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self { linear: Matrix3::identity(), offset: Point3::zeros() }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.linear * p + self.offset
    }

    pub fn apply_frame(&self, frame: &LandmarkFrame) -> Result<LandmarkFrame, GeometryError> {
        frame.map(|_, p| self.apply(p))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Self {
        Self { linear: self.linear * other.linear, offset: self.linear * other.offset + self.offset }
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self
            .linear
            .try_inverse()
            .ok_or_else(|| GeometryError::Registration("affine map is singular".into()))?;
        Ok(Self { linear: inv, offset: -(inv * self.offset) })
    }

    /// 2-norm condition number of the linear part.
    pub fn condition_number(&self) -> f64 {
        let sv = self.linear.singular_values();
        sv.max() / sv.min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegistrationMode {
    /// One affine map per frame.
    #[default]
    PerFrame,
    /// A single affine map shared by the whole clip.
    PerClip,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub sequence: LandmarkSequence,
    /// Maps each input frame onto the template; invert to undo.
    pub transforms: Vec<AffineTransform>,
    /// RMS residual over the stable subset, per frame.
    pub residuals: Vec<f64>,
}

/// Least-squares affine map taking `src[k]` onto `dst[k]`.
pub fn fit_affine(src: &[Point3], dst: &[Point3]) -> Result<AffineTransform, GeometryError> {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let sc = src.iter().sum::<Point3>() / n;
    let dc = dst.iter().sum::<Point3>() / n;
    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let ds = s - sc;
        scatter += ds * ds.transpose();
        cross += (d - dc) * ds.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 0.0) || lo / hi < DEGENERACY_RATIO {
        return Err(GeometryError::Registration(
            "stable landmarks are coplanar; affine fit is undetermined".into(),
        ));
    }
    let inv = scatter
        .try_inverse()
        .ok_or_else(|| GeometryError::Registration("singular scatter matrix".into()))?;
    let linear = cross * inv;
    Ok(AffineTransform { linear, offset: dc - linear * sc })
}

fn rms_residual(t: &AffineTransform, frame: &LandmarkFrame, template: &LandmarkFrame) -> f64 {
    let ss: f64 = STABLE_INDICES
        .iter()
        .map(|&i| (t.apply(&frame.point(i)) - template.point(i)).norm_squared())
        .sum();
    (ss / STABLE_INDICES.len() as f64).sqrt()
}

/// Registers every frame to the template with an affine map fitted on the
/// stable subset.
pub fn register_to_template(
    seq: &LandmarkSequence,
    template: &LandmarkFrame,
    mode: RegistrationMode,
) -> Result<Registration, GeometryError> {
    let dst: Vec<Point3> = STABLE_INDICES.iter().map(|&i| template.point(i)).collect();
    let transforms = match mode {
        RegistrationMode::PerFrame => seq
            .frames()
            .iter()
            .map(|f| {
                let src: Vec<Point3> = STABLE_INDICES.iter().map(|&i| f.point(i)).collect();
                fit_affine(&src, &dst)
            })
            .collect::<Result<Vec<_>, _>>()?,
        RegistrationMode::PerClip => {
            let mut src = Vec::new();
            let mut all_dst = Vec::new();
            for f in seq.frames() {
                src.extend(STABLE_INDICES.iter().map(|&i| f.point(i)));
                all_dst.extend_from_slice(&dst);
            }
            vec![fit_affine(&src, &all_dst)?; seq.len()]
        }
    };
    let residuals = seq
        .frames()
        .iter()
        .zip(&transforms)
        .map(|(f, t)| rms_residual(t, f, template))
        .collect();
    let sequence = seq.map_frames(|t, f| transforms[t].apply_frame(f))?;
    Ok(Registration { sequence, transforms, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::landmarks::standard_template;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn template_registers_to_identity() {
        let t = standard_template();
        let seq = LandmarkSequence::repeat(&t, 3, 62.5).unwrap();
        let reg = register_to_template(&seq, &t, RegistrationMode::PerFrame).unwrap();
        for (tr, r) in reg.transforms.iter().zip(&reg.residuals) {
            assert!((tr.linear - Matrix3::identity()).norm() < 1e-12);
            assert!(tr.offset.norm() < 1e-12);
            assert!(*r < 1e-12);
        }
    }

    #[test]
    fn scaled_translated_template_is_inverted() {
        let t = standard_template();
        let known = AffineTransform { linear: Matrix3::identity() * 2.0, offset: Point3::new(1.0, 2.0, 3.0) };
        let moved = known.apply_frame(&t).unwrap();
        let seq = LandmarkSequence::repeat(&moved, 2, 62.5).unwrap();
        for mode in [RegistrationMode::PerFrame, RegistrationMode::PerClip] {
            let reg = register_to_template(&seq, &t, mode).unwrap();
            let round = reg.transforms[0].compose(&known);
            assert!((round.linear - Matrix3::identity()).norm() < 1e-9);
            assert!(round.offset.norm() < 1e-9);
            assert!(reg.residuals[0] < 1e-9);
            for (a, b) in reg.sequence.frame(1).points().iter().zip(t.points()) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn noisy_template_residual_bounded_by_noise() {
        let t = standard_template();
        let sigma = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, sigma).unwrap();
        for _ in 0..20 {
            let noisy = t.map(|_, p| p + Point3::from_fn(|_, _| normal.sample(&mut rng))).unwrap();
            // identity is a feasible affine map, so the optimum can't do worse
            let identity_rms = rms_residual(&AffineTransform::identity(), &noisy, &t);
            let seq = LandmarkSequence::repeat(&noisy, 1, 62.5).unwrap();
            let reg = register_to_template(&seq, &t, RegistrationMode::PerFrame).unwrap();
            assert!(reg.residuals[0] <= identity_rms + 1e-15);
            assert!(reg.residuals[0] <= 2.0 * sigma);
        }
    }

    #[test]
    fn coplanar_stable_subset_is_rejected() {
        let flat = standard_template().map(|_, p| Point3::new(p.x, p.y, 0.0)).unwrap();
        let seq = LandmarkSequence::repeat(&flat, 1, 62.5).unwrap();
        let err = register_to_template(&seq, &standard_template(), RegistrationMode::PerFrame).unwrap_err();
        assert!(matches!(err, GeometryError::Registration(_)));
    }

    #[test]
    fn registration_is_idempotent() {
        let t = standard_template();
        let known = AffineTransform {
            linear: Matrix3::new(1.1, 0.05, 0.0, -0.02, 0.95, 0.1, 0.0, 0.03, 1.02),
            offset: Point3::new(0.2, -0.1, 0.4),
        };
        let seq = LandmarkSequence::repeat(&known.apply_frame(&t).unwrap(), 2, 62.5).unwrap();
        let once = register_to_template(&seq, &t, RegistrationMode::PerFrame).unwrap();
        let twice = register_to_template(&once.sequence, &t, RegistrationMode::PerFrame).unwrap();
        for tr in &twice.transforms {
            assert!((tr.linear - Matrix3::identity()).norm() < 1e-6);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a = AffineTransform {
            linear: Matrix3::new(2.0, 0.1, 0.0, 0.0, 1.0, 0.3, 0.2, 0.0, 0.5),
            offset: Point3::new(1.0, -1.0, 0.5),
        };
        let id = a.compose(&a.inverse().unwrap());
        assert!((id.linear - Matrix3::identity()).norm() < 1e-12);
        assert!(id.offset.norm() < 1e-12);
        assert!(a.condition_number() >= 1.0);
    }
}
