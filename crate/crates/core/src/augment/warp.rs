use serde::{Deserialize, Serialize};

use super::{CropRect, ViewParams};

/// Tolerance on the `[0, 1]` bounds test, absorbs round-off in composed maps.
const BOUNDS_EPS: f64 = 1e-9;

/// Geometric part of a view: where it was cropped and whether it was flipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub crop: CropRect,
    pub hflip: bool,
}

impl ViewGeometry {
    /// Normalized view coordinate `(row, col)` to continuous source pixels.
    pub fn to_source(&self, (a, b): (f64, f64)) -> (f64, f64) {
        let b = if self.hflip { 1.0 - b } else { b };
        (self.crop.top + self.crop.height * a, self.crop.left + self.crop.width * b)
    }

    /// Continuous source pixels to the normalized view coordinate.
    pub fn from_source(&self, (y, x): (f64, f64)) -> (f64, f64) {
        let a = (y - self.crop.top) / self.crop.height;
        let b = (x - self.crop.left) / self.crop.width;
        (a, if self.hflip { 1.0 - b } else { b })
    }

    /// Affine map normalized view → source pixels, as a 2×3 matrix on
    /// `(row, col, 1)`.
    fn to_source_matrix(&self) -> [[f64; 3]; 2] {
        let c = &self.crop;
        let (sx, ox) = if self.hflip {
            (-c.width, c.left + c.width)
        } else {
            (c.width, c.left)
        };
        [[c.height, 0.0, c.top], [0.0, sx, ox]]
    }
}

/// Affine map between normalized view coordinates, `(row, col) ∈ [0,1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineWarp {
    /// Rows map `(row, col, 1)` to the output row and column.
    pub matrix: [[f64; 3]; 2],
    pub from: Option<ViewGeometry>,
    pub to: Option<ViewGeometry>,
}

fn invert(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let i00 = m[1][1] / det;
    let i01 = -m[0][1] / det;
    let i10 = -m[1][0] / det;
    let i11 = m[0][0] / det;
    [
        [i00, i01, -(i00 * m[0][2] + i01 * m[1][2])],
        [i10, i11, -(i10 * m[0][2] + i11 * m[1][2])],
    ]
}

/// `outer ∘ inner`
fn compose(outer: &[[f64; 3]; 2], inner: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let mut out = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = outer[r][0] * inner[0][c] + outer[r][1] * inner[1][c];
        }
        out[r][2] += outer[r][2];
    }
    out
}

impl AffineWarp {
    pub fn identity() -> Self {
        Self::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub fn from_matrix(matrix: [[f64; 3]; 2]) -> Self {
        AffineWarp {
            matrix,
            from: None,
            to: None,
        }
    }

    /// Pure translation by `(dr, dc)` normalized units.
    pub fn translation(dr: f64, dc: f64) -> Self {
        Self::from_matrix([[1.0, 0.0, dr], [0.0, 1.0, dc]])
    }

    #[inline]
    pub fn apply(&self, (r, c): (f64, f64)) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * r + m[0][1] * c + m[0][2], m[1][0] * r + m[1][1] * c + m[1][2])
    }

    /// `next ∘ self`: first this warp, then `next`.
    pub fn then(&self, next: &AffineWarp) -> AffineWarp {
        AffineWarp {
            matrix: compose(&next.matrix, &self.matrix),
            from: self.from,
            to: next.to,
        }
    }

    pub fn inverse(&self) -> AffineWarp {
        AffineWarp {
            matrix: invert(&self.matrix),
            from: self.to,
            to: self.from,
        }
    }
}

/// Warp sending view-1 normalized coordinates to view-2 normalized
/// coordinates. Only crop and flip enter; photometric parameters are ignored.
pub fn warp_between(p1: &ViewParams, p2: &ViewParams) -> AffineWarp {
    let g1 = p1.geometry();
    let g2 = p2.geometry();
    AffineWarp {
        matrix: compose(&invert(&g2.to_source_matrix()), &g1.to_source_matrix()),
        from: Some(g1),
        to: Some(g2),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mapped {
    /// `cell` is the nearest destination cell; `coord` the continuous
    /// destination index (cell centres at integers) for interpolation.
    Inside { cell: (usize, usize), coord: (f64, f64) },
    OutOfBounds,
}

impl Mapped {
    pub fn is_inside(&self) -> bool {
        matches!(self, Mapped::Inside { .. })
    }
}

#[inline]
fn in_unit(t: f64) -> bool {
    (-BOUNDS_EPS..=1.0 + BOUNDS_EPS).contains(&t)
}

/// Maps grid cell `(i, j)` of an `res_src` grid through `warp` onto an
/// `res_dst` grid. Cells are addressed by their centres in normalized
/// coordinates, so the map is independent of resolution.
pub fn map_coords(warp: &AffineWarp, (i, j): (usize, usize), res_src: (usize, usize), res_dst: (usize, usize)) -> Mapped {
    let u = ((i as f64 + 0.5) / res_src.0 as f64, (j as f64 + 0.5) / res_src.1 as f64);
    let (ur, uc) = warp.apply(u);
    if !(in_unit(ur) && in_unit(uc)) {
        return Mapped::OutOfBounds;
    }
    let (h, w) = res_dst;
    let cell_r = ((ur * h as f64).floor().max(0.0) as usize).min(h - 1);
    let cell_c = ((uc * w as f64).floor().max(0.0) as usize).min(w - 1);
    Mapped::Inside {
        cell: (cell_r, cell_c),
        coord: (ur * h as f64 - 0.5, uc * w as f64 - 0.5),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMask {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
    pub count: usize,
}

impl OverlapMask {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }
}

/// Cells of an `res` grid in the source view whose image under `warp` lies
/// inside the destination view.
pub fn overlap_mask(warp: &AffineWarp, res: (usize, usize)) -> OverlapMask {
    let mut valid = Vec::with_capacity(res.0 * res.1);
    for i in 0..res.0 {
        for j in 0..res.1 {
            valid.push(map_coords(warp, (i, j), res, res).is_inside());
        }
    }
    let count = valid.iter().filter(|&&v| v).count();
    OverlapMask {
        height: res.0,
        width: res.1,
        valid,
        count,
    }
}
