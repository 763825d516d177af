//! Point sets on the box `(0, ℓ)^d`.

use crate::error::{Error, Result};

/// A flat list of points in `d` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn from_coords(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates do not form {dim}-dimensional points",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    /// Cell-centred uniform grid with `per_axis` points along each axis.
    ///
    /// In 2D the first coordinate varies slowest.
    pub fn midpoint_grid(dim: usize, per_axis: usize, length: f64) -> Self {
        let h = length / per_axis as f64;
        let axis: Vec<f64> = (0..per_axis).map(|i| (i as f64 + 0.5) * h).collect();
        let coords = match dim {
            1 => axis,
            2 => axis.iter().flat_map(|&x| axis.iter().flat_map(move |&y| [x, y])).collect(),
            _ => panic!("midpoint grids are 1D or 2D"),
        };
        Self { dim, coords }
    }

    /// Points on `∂Ω`: `per_side` evenly spaced samples per face, corners included.
    pub fn boundary_sample(dim: usize, per_side: usize, length: f64) -> Self {
        let coords = match dim {
            1 => vec![0.0, length],
            2 => {
                let mut c = Vec::with_capacity(8 * per_side);
                for i in 0..=per_side {
                    let t = length * i as f64 / per_side as f64;
                    c.extend([t, 0.0, t, length, 0.0, t, length, t]);
                }
                c
            }
            _ => panic!("boundary samples are 1D or 2D"),
        };
        Self { dim, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_grid_layout() {
        let g = PointSet::midpoint_grid(1, 4, 1.0);
        assert_eq!(g.coords(), &[0.125, 0.375, 0.625, 0.875]);
        let g = PointSet::midpoint_grid(2, 2, 1.0);
        assert_eq!(g.len(), 4);
        assert_eq!(g.point(1), &[0.25, 0.75]);
        assert_eq!(g.point(2), &[0.75, 0.25]);
    }

    #[test]
    fn boundary_sample_is_on_boundary() {
        let b = PointSet::boundary_sample(2, 30, 1.0);
        assert!(b.len() >= 100);
        for p in b.iter() {
            assert!(p.iter().any(|&c| c == 0.0 || c == 1.0));
        }
    }

    #[test]
    fn rejects_ragged_coordinates() {
        assert!(PointSet::from_coords(2, vec![0.1, 0.2, 0.3]).is_err());
    }
}
