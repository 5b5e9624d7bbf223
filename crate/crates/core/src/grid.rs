//! Structured-grid primitives: integer lattice points, inclusive boxes,
//! ghosted per-point data, and periodic ghost exchange over a block
//! decomposition of the unit square.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("point {point:?} is outside box [{lo:?}, {hi:?}]")]
    PointOutsideBox {
        point: Vec<i64>,
        lo: Vec<i64>,
        hi: Vec<i64>,
    },
    #[error("ordinal {ordinal} out of range for box of size {size}")]
    OrdinalOutOfRange { ordinal: usize, size: usize },
    #[error("patch grid shape mismatch: expected {expected} patches, got {got}")]
    PatchShapeMismatch { expected: usize, got: usize },
    #[error("patch {index} box mismatch: expected {expected:?}, got {got:?}")]
    PatchBoxMismatch {
        index: usize,
        expected: Box<2>,
        got: Box<2>,
    },
}

/// A point in Z^D. Componentwise integer arithmetic, also used for offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point<const D: usize>(pub [i64; D]);

pub type Point2 = Point<2>;

impl<const D: usize> Point<D> {
    pub fn zero() -> Self {
        Point([0; D])
    }

    pub fn splat(v: i64) -> Self {
        Point([v; D])
    }
}

impl Point<2> {
    pub fn xy(x: i64, y: i64) -> Self {
        Point([x, y])
    }
}

impl<const D: usize> std::ops::Add for Point<D> {
    type Output = Point<D>;
    fn add(self, rhs: Point<D>) -> Point<D> {
        let mut c = self.0;
        for d in 0..D {
            c[d] += rhs.0[d];
        }
        Point(c)
    }
}

impl<const D: usize> std::ops::Sub for Point<D> {
    type Output = Point<D>;
    fn sub(self, rhs: Point<D>) -> Point<D> {
        let mut c = self.0;
        for d in 0..D {
            c[d] -= rhs.0[d];
        }
        Point(c)
    }
}

impl<const D: usize> std::ops::Neg for Point<D> {
    type Output = Point<D>;
    fn neg(self) -> Point<D> {
        Point(self.0.map(|c| -c))
    }
}

impl<const D: usize> std::ops::Index<usize> for Point<D> {
    type Output = i64;
    fn index(&self, d: usize) -> &i64 {
        &self.0[d]
    }
}

/// Rectangular subset of Z^D with inclusive corners `lo` and `hi`.
/// The empty box is a value (any `lo_d > hi_d`), not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Box<const D: usize> {
    lo: Point<D>,
    hi: Point<D>,
}

pub type Box2 = Box<2>;

impl<const D: usize> Box<D> {
    pub fn new(lo: Point<D>, hi: Point<D>) -> Self {
        Box { lo, hi }
    }

    /// Canonical empty box.
    pub fn empty() -> Self {
        Box {
            lo: Point::splat(0),
            hi: Point::splat(-1),
        }
    }

    /// Box spanning `[0, edge)` in every dimension.
    pub fn cube(edge: i64) -> Self {
        Box {
            lo: Point::splat(0),
            hi: Point::splat(edge - 1),
        }
    }

    pub fn lo(&self) -> Point<D> {
        self.lo
    }

    pub fn hi(&self) -> Point<D> {
        self.hi
    }

    pub fn is_empty(&self) -> bool {
        (0..D).any(|d| self.lo[d] > self.hi[d])
    }

    pub fn extent(&self, d: usize) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.hi[d] - self.lo[d] + 1) as usize
        }
    }

    /// Number of points: Π_d (hi_d − lo_d + 1), 0 when empty.
    pub fn size(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (0..D).map(|d| self.extent(d)).product()
        }
    }

    pub fn contains(&self, p: Point<D>) -> bool {
        (0..D).all(|d| self.lo[d] <= p[d] && p[d] <= self.hi[d])
    }

    /// Grow every face outward by `r` (shrink when negative; may go empty).
    pub fn grow(&self, r: i64) -> Self {
        Box {
            lo: self.lo - Point::splat(r),
            hi: self.hi + Point::splat(r),
        }
    }

    pub fn shift(&self, p: Point<D>) -> Self {
        Box {
            lo: self.lo + p,
            hi: self.hi + p,
        }
    }

    /// Componentwise max of lo, min of hi; empty when disjoint.
    pub fn intersect(&self, other: &Box<D>) -> Self {
        if self.is_empty() || other.is_empty() {
            return Box::empty();
        }
        let mut lo = [0i64; D];
        let mut hi = [0i64; D];
        for d in 0..D {
            lo[d] = self.lo[d].max(other.lo[d]);
            hi[d] = self.hi[d].min(other.hi[d]);
        }
        let r = Box {
            lo: Point(lo),
            hi: Point(hi),
        };
        // Canonical empty, so all empty intersections compare equal.
        if r.is_empty() {
            Box::empty()
        } else {
            r
        }
    }

    /// Linear ordinal of `p` in this box, dimension-0-fastest:
    /// stride_0 = 1, stride_d = stride_{d-1} * extent_{d-1}.
    pub fn ordinal(&self, p: Point<D>) -> Result<usize, GridError> {
        if !self.contains(p) {
            return Err(GridError::PointOutsideBox {
                point: p.0.to_vec(),
                lo: self.lo.0.to_vec(),
                hi: self.hi.0.to_vec(),
            });
        }
        let mut ord = 0usize;
        let mut stride = 1usize;
        for d in 0..D {
            ord += (p[d] - self.lo[d]) as usize * stride;
            stride *= self.extent(d);
        }
        Ok(ord)
    }

    /// Inverse of [`ordinal`](Self::ordinal).
    pub fn point_at(&self, ordinal: usize) -> Result<Point<D>, GridError> {
        if ordinal >= self.size() {
            return Err(GridError::OrdinalOutOfRange {
                ordinal,
                size: self.size(),
            });
        }
        let mut rem = ordinal;
        let mut c = [0i64; D];
        for d in 0..D {
            let e = self.extent(d);
            c[d] = self.lo[d] + (rem % e) as i64;
            rem /= e;
        }
        Ok(Point(c))
    }

    /// Iterate all points in ordinal order.
    pub fn iter(&self) -> impl Iterator<Item = Point<D>> + '_ {
        let n = self.size();
        (0..n).map(move |k| self.point_at(k).unwrap())
    }
}

/// Block decomposition of the unit square: `nb x nb` boxes of `n x n`
/// interior points each, ghost radius `g`, mesh spacing `h = 1/(n*nb)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub n: usize,
    pub nb: usize,
    pub g: usize,
    pub h: f64,
}

impl GridLayout {
    pub fn new(n: usize, nb: usize, g: usize) -> Self {
        assert!(n >= 1 && nb >= 1 && g >= 1);
        GridLayout {
            n,
            nb,
            g,
            h: 1.0 / (n as f64 * nb as f64),
        }
    }

    /// Allocated box edge including ghosts.
    pub fn m(&self) -> usize {
        self.n + 2 * self.g
    }

    /// Global domain edge in points.
    pub fn domain_edge(&self) -> usize {
        self.n * self.nb
    }

    /// Interior box of patch (bi, bj).
    pub fn interior_box(&self, bi: usize, bj: usize) -> Box<2> {
        let n = self.n as i64;
        let lo = Point::xy(bi as i64 * n, bj as i64 * n);
        Box::new(lo, lo + Point::xy(n - 1, n - 1))
    }

    /// Allocated (ghosted) box of patch (bi, bj).
    pub fn ghosted_box(&self, bi: usize, bj: usize) -> Box<2> {
        self.interior_box(bi, bj).grow(self.g as i64)
    }

    pub fn patch_count(&self) -> usize {
        self.nb * self.nb
    }

    /// Patch index, dimension-0-fastest over (bi, bj).
    pub fn patch_index(&self, bi: usize, bj: usize) -> usize {
        bj * self.nb + bi
    }
}

/// Scalar field on a box, stored dense in ordinal order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxData<const D: usize> {
    boxx: Box<D>,
    values: Vec<f64>,
}

impl<const D: usize> BoxData<D> {
    pub fn zeros(boxx: Box<D>) -> Self {
        BoxData {
            boxx,
            values: vec![0.0; boxx.size()],
        }
    }

    pub fn from_fn(boxx: Box<D>, mut f: impl FnMut(Point<D>) -> f64) -> Self {
        let values = boxx.iter().map(|p| f(p)).collect();
        BoxData { boxx, values }
    }

    pub fn from_values(boxx: Box<D>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), boxx.size());
        BoxData { boxx, values }
    }

    pub fn boxx(&self) -> Box<D> {
        self.boxx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, p: Point<D>) -> Result<f64, GridError> {
        Ok(self.values[self.boxx.ordinal(p)?])
    }

    pub fn set(&mut self, p: Point<D>, v: f64) -> Result<(), GridError> {
        let k = self.boxx.ordinal(p)?;
        self.values[k] = v;
        Ok(())
    }
}

/// The nb x nb collection of patches over one layout. `ghosted` says whether
/// each patch carries a ghost frame (phi does, rho does not).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub layout: GridLayout,
    pub ghosted: bool,
    patches: Vec<BoxData<2>>,
}

impl PatchGrid {
    pub fn zeros(layout: GridLayout, ghosted: bool) -> Self {
        let patches = (0..layout.nb)
            .flat_map(|bj| (0..layout.nb).map(move |bi| (bi, bj)))
            .map(|(bi, bj)| {
                let b = if ghosted {
                    layout.ghosted_box(bi, bj)
                } else {
                    layout.interior_box(bi, bj)
                };
                BoxData::zeros(b)
            })
            .collect();
        PatchGrid {
            layout,
            ghosted,
            patches,
        }
    }

    /// Fill interiors from a global function of the lattice point; ghosts
    /// (if any) are left untouched.
    pub fn from_global_fn(
        layout: GridLayout,
        ghosted: bool,
        mut f: impl FnMut(Point<2>) -> f64,
    ) -> Self {
        let mut pg = PatchGrid::zeros(layout, ghosted);
        for idx in 0..pg.patches.len() {
            let interior = layout.interior_box(idx % layout.nb, idx / layout.nb);
            for p in interior.iter() {
                pg.patches[idx].set(p, f(p)).unwrap();
            }
        }
        pg
    }

    pub fn patches(&self) -> &[BoxData<2>] {
        &self.patches
    }

    pub fn patches_mut(&mut self) -> &mut [BoxData<2>] {
        &mut self.patches
    }

    pub fn patch(&self, bi: usize, bj: usize) -> &BoxData<2> {
        &self.patches[self.layout.patch_index(bi, bj)]
    }

    /// Interior value at a global lattice point (no wrapping).
    pub fn interior_value(&self, p: Point<2>) -> f64 {
        let n = self.layout.n as i64;
        let (bi, bj) = ((p[0] / n) as usize, (p[1] / n) as usize);
        self.patch(bi, bj).get(p).unwrap()
    }

    fn check_shapes(&self) -> Result<(), GridError> {
        let expected = self.layout.patch_count();
        if self.patches.len() != expected {
            return Err(GridError::PatchShapeMismatch {
                expected,
                got: self.patches.len(),
            });
        }
        for idx in 0..expected {
            let (bi, bj) = (idx % self.layout.nb, idx / self.layout.nb);
            let want = if self.ghosted {
                self.layout.ghosted_box(bi, bj)
            } else {
                self.layout.interior_box(bi, bj)
            };
            if self.patches[idx].boxx() != want {
                return Err(GridError::PatchBoxMismatch {
                    index: idx,
                    expected: want,
                    got: self.patches[idx].boxx(),
                });
            }
        }
        Ok(())
    }
}

fn wrap(c: i64, edge: i64) -> i64 {
    c.rem_euclid(edge)
}

/// Fill every ghost cell with the interior value of the periodically wrapped
/// owning patch. Interior cells are untouched; calling twice is a no-op.
pub fn exchange_ghosts(phi: &mut PatchGrid) -> Result<(), GridError> {
    assert!(phi.ghosted, "exchange_ghosts needs ghosted patches");
    phi.check_shapes()?;
    let layout = phi.layout;
    let edge = layout.domain_edge() as i64;
    let n = layout.n as i64;

    // Snapshot interiors so fill order cannot matter.
    let src = phi.clone();
    for idx in 0..phi.patches.len() {
        let (bi, bj) = (idx % layout.nb, idx / layout.nb);
        let interior = layout.interior_box(bi, bj);
        let ghosted = layout.ghosted_box(bi, bj);
        // Four ghost strips around the interior.
        let strips = [
            Box::new(ghosted.lo(), Point::xy(ghosted.hi()[0], interior.lo()[1] - 1)),
            Box::new(Point::xy(ghosted.lo()[0], interior.hi()[1] + 1), ghosted.hi()),
            Box::new(
                Point::xy(ghosted.lo()[0], interior.lo()[1]),
                Point::xy(interior.lo()[0] - 1, interior.hi()[1]),
            ),
            Box::new(
                Point::xy(interior.hi()[0] + 1, interior.lo()[1]),
                Point::xy(ghosted.hi()[0], interior.hi()[1]),
            ),
        ];
        for strip in strips {
            for q in strip.iter() {
                let gw = Point::xy(wrap(q[0], edge), wrap(q[1], edge));
                let (obi, obj) = ((gw[0] / n) as usize, (gw[1] / n) as usize);
                let v = src.patch(obi, obj).get(gw).unwrap();
                phi.patches[idx].set(q, v).unwrap();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grow_matches_fig5_allocation() {
        let b = Box::new(Point::xy(0, 0), Point::xy(63, 63));
        let g = b.grow(1);
        assert_eq!(g, Box::new(Point::xy(-1, -1), Point::xy(64, 64)));
        assert_eq!(g.size(), 66 * 66);
    }

    #[test]
    fn grow_identity_and_overshrink() {
        let b = Box::new(Point::xy(2, 3), Point::xy(7, 9));
        assert_eq!(b.grow(0), b);
        let tiny = Box::new(Point::xy(0, 0), Point::xy(1, 1));
        assert!(tiny.grow(-1).is_empty());
        assert_eq!(tiny.grow(-1).size(), 0);
    }

    #[test]
    fn intersect_cases() {
        let a = Box::new(Point::xy(0, 0), Point::xy(3, 3));
        let b = Box::new(Point::xy(2, 2), Point::xy(5, 5));
        assert_eq!(a.intersect(&a), a);
        assert_eq!(a.intersect(&b), Box::new(Point::xy(2, 2), Point::xy(3, 3)));
        let far = Box::new(Point::xy(5, 5), Point::xy(6, 6));
        let tiny = Box::new(Point::xy(0, 0), Point::xy(1, 1));
        assert!(tiny.intersect(&far).is_empty());
    }

    #[test]
    fn ordinal_matches_generated_index_arithmetic() {
        // 64x64 interior grown by 1: stride 66, interior origin at 67.
        let b = Box::new(Point::xy(-1, -1), Point::xy(64, 64));
        assert_eq!(b.ordinal(Point::xy(0, 0)).unwrap(), 67);
        assert_eq!(b.ordinal(Point::xy(1, 0)).unwrap(), 68);
        assert_eq!(b.ordinal(Point::xy(0, 1)).unwrap(), 133);
        assert_eq!(b.ordinal(b.lo()).unwrap(), 0);
    }

    #[test]
    fn ordinal_outside_errors() {
        let b = Box::cube(4);
        assert!(matches!(
            b.ordinal(Point::xy(4, 0)),
            Err(GridError::PointOutsideBox { .. })
        ));
    }

    #[test]
    fn exchange_single_patch_self_wraps() {
        let layout = GridLayout::new(4, 1, 1);
        let mut phi = PatchGrid::from_global_fn(layout, true, |p| (p[0] + 10 * p[1]) as f64);
        exchange_ghosts(&mut phi).unwrap();
        let pd = phi.patch(0, 0);
        for q in pd.boxx().iter() {
            let w = Point::xy(wrap(q[0], 4), wrap(q[1], 4));
            assert_eq!(pd.get(q).unwrap(), (w[0] + 10 * w[1]) as f64);
        }
    }

    #[test]
    fn exchange_matches_global_periodic_field() {
        // nb=2, n=2, g=1 against a flat periodic oracle.
        let layout = GridLayout::new(2, 2, 1);
        let global = |p: Point<2>| (wrap(p[0], 4) + 10 * wrap(p[1], 4)) as f64;
        let mut phi = PatchGrid::from_global_fn(layout, true, global);
        exchange_ghosts(&mut phi).unwrap();
        for bd in phi.patches() {
            for q in bd.boxx().iter() {
                assert_eq!(bd.get(q).unwrap(), global(q), "at {:?}", q);
            }
        }
    }

    #[test]
    fn exchange_is_idempotent() {
        let layout = GridLayout::new(3, 2, 1);
        let mut phi = PatchGrid::from_global_fn(layout, true, |p| (3 * p[0] - p[1]) as f64);
        exchange_ghosts(&mut phi).unwrap();
        let once = phi.clone();
        exchange_ghosts(&mut phi).unwrap();
        assert_eq!(phi, once);
    }

    #[test]
    fn patch_shape_mismatch_detected() {
        let layout = GridLayout::new(2, 2, 1);
        let mut phi = PatchGrid::zeros(layout, true);
        phi.patches.pop();
        assert!(matches!(
            exchange_ghosts(&mut phi),
            Err(GridError::PatchShapeMismatch { .. })
        ));
    }
}
