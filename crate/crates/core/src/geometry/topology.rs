use super::landmarks::{LandmarkFrame, Point3, N_LANDMARKS};
use super::GeometryError;

/// One facial part: an ordered run of landmark indices, either an open chain
/// (brows, jaw, nose) or a closed loop (eyes, lips).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacialPart {
    pub name: String,
    pub indices: Vec<usize>,
    pub closed: bool,
}

/// Facial parts and the neighbor map `N(i)` they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartTopology {
    parts: Vec<FacialPart>,
    neighbors: Vec<Vec<usize>>,
    part_of: Vec<Option<usize>>,
}

impl PartTopology {
    /// Validates the parts and builds the neighbor map.
    pub fn from_parts(parts: Vec<FacialPart>) -> Result<Self, GeometryError> {
        let mut part_of: Vec<Option<usize>> = vec![None; N_LANDMARKS];
        let mut neighbors = vec![Vec::new(); N_LANDMARKS];
        for (pi, part) in parts.iter().enumerate() {
            for &i in &part.indices {
                if i >= N_LANDMARKS {
                    return Err(GeometryError::Topology(format!(
                        "part '{}' references landmark {i}",
                        part.name
                    )));
                }
                if let Some(other) = part_of[i] {
                    return Err(GeometryError::Topology(format!(
                        "landmark {i} belongs to both '{}' and '{}'",
                        parts[other].name, part.name
                    )));
                }
                part_of[i] = Some(pi);
            }
            let n = part.indices.len();
            let mut link = |a: usize, b: usize| {
                if a != b && !neighbors[a].contains(&b) {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            };
            for k in 0..n.saturating_sub(1) {
                link(part.indices[k], part.indices[k + 1]);
            }
            if part.closed && n > 2 {
                link(part.indices[n - 1], part.indices[0]);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self { parts, neighbors, part_of })
    }

    /// The 8-part split of the 68-point annotation.
    pub fn standard68() -> Self {
        let part = |name: &str, range: std::ops::RangeInclusive<usize>, closed: bool| FacialPart {
            name: name.to_string(),
            indices: range.collect(),
            closed,
        };
        Self::from_parts(vec![
            part("jaw", 0..=16, false),
            part("right_brow", 17..=21, false),
            part("left_brow", 22..=26, false),
            part("nose", 27..=35, false),
            part("right_eye", 36..=41, true),
            part("left_eye", 42..=47, true),
            part("outer_lip", 48..=59, true),
            part("inner_lip", 60..=67, true),
        ])
        .expect("standard topology is valid")
    }

    pub fn parts(&self) -> &[FacialPart] {
        &self.parts
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn part_of(&self, i: usize) -> Option<usize> {
        self.part_of[i]
    }

    /// Polyline segments `(a, b)` of every part, in part order.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (pi, part) in self.parts.iter().enumerate() {
            let n = part.indices.len();
            for k in 0..n.saturating_sub(1) {
                out.push((pi, part.indices[k], part.indices[k + 1]));
            }
            if part.closed && n > 2 {
                out.push((pi, part.indices[n - 1], part.indices[0]));
            }
        }
        out
    }

    /// Sparse rows of the Laplacian operator: `L(p)_i = p_i - mean_{j in N(i)} p_j`.
    /// Each row lists `(column, weight)` pairs including the diagonal.
    pub fn laplacian_rows(&self) -> Result<Vec<Vec<(usize, f64)>>, GeometryError> {
        (0..N_LANDMARKS)
            .map(|i| {
                let nb = &self.neighbors[i];
                if nb.is_empty() {
                    return Err(GeometryError::Topology(format!("landmark {i} has no neighbors")));
                }
                let w = 1.0 / nb.len() as f64;
                let mut row = vec![(i, 1.0)];
                row.extend(nb.iter().map(|&j| (j, -w)));
                Ok(row)
            })
            .collect()
    }

    /// Dense `68 x 68` row-major Laplacian matrix.
    pub fn laplacian_matrix(&self) -> Result<Vec<f64>, GeometryError> {
        let rows = self.laplacian_rows()?;
        let mut m = vec![0.0; N_LANDMARKS * N_LANDMARKS];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                m[i * N_LANDMARKS + j] += w;
            }
        }
        Ok(m)
    }
}

/// Graph-Laplacian coordinates of every landmark within its facial part.
pub fn laplacian_coords(frame: &LandmarkFrame, topo: &PartTopology) -> Result<Vec<Point3>, GeometryError> {
    let pts = frame.points();
    (0..N_LANDMARKS)
        .map(|i| {
            let nb = topo.neighbors(i);
            if nb.is_empty() {
                return Err(GeometryError::Topology(format!("landmark {i} has no neighbors")));
            }
            let mean = nb.iter().fold(Point3::zeros(), |acc, &j| acc + pts[j]) / nb.len() as f64;
            Ok(pts[i] - mean)
        })
        .collect()
}
