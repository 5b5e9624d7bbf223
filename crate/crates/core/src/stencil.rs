//! Stencils as offset/coefficient maps, applied as y_i = sum_j alpha_j x_{i+j}.
//!
//! Coefficients are undivided: no 1/h^2 factor is baked in. Mesh-spacing
//! scaling happens downstream in the Jacobi update and residual formulas.

use crate::grid::{Box, BoxData, Point};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StencilError {
    #[error("stencil has no taps")]
    EmptyStencil,
    #[error("stencil read out of range: dest point {point:?} with offset {offset:?} falls outside the source box")]
    OutOfRange { point: Vec<i64>, offset: Vec<i64> },
}

/// Finite map from integer offsets to real coefficients. Taps are kept in
/// span-ordinal order (dimension-0-fastest over the span box) so every
/// consumer folds the linear combination in the same order; cross-backend
/// residual equality depends on this.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil<const D: usize> {
    taps: Vec<(Point<D>, f64)>,
    span: Box<D>,
}

impl<const D: usize> Stencil<D> {
    /// Build from (offset, coefficient) pairs. Zero coefficients are dropped;
    /// duplicate offsets are summed.
    pub fn new(entries: impl IntoIterator<Item = (Point<D>, f64)>) -> Result<Self, StencilError> {
        let mut map = std::collections::BTreeMap::new();
        for (p, c) in entries {
            *map.entry(p).or_insert(0.0) += c;
        }
        map.retain(|_, c| *c != 0.0);
        if map.is_empty() {
            return Err(StencilError::EmptyStencil);
        }
        let mut lo = [i64::MAX; D];
        let mut hi = [i64::MIN; D];
        for p in map.keys() {
            for d in 0..D {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let span = Box::new(Point(lo), Point(hi));
        let mut taps: Vec<_> = map.into_iter().collect();
        taps.sort_by_key(|(p, _)| span.ordinal(*p).unwrap());
        Ok(Stencil { taps, span })
    }

    pub fn taps(&self) -> &[(Point<D>, f64)] {
        &self.taps
    }

    /// Smallest box containing all offsets.
    pub fn span(&self) -> Box<D> {
        self.span
    }

    /// Largest ghost radius the stencil needs.
    pub fn radius(&self) -> i64 {
        let mut r = 0;
        for (p, _) in &self.taps {
            for d in 0..D {
                r = r.max(p[d].abs());
            }
        }
        r
    }
}

/// The classic 5-point Laplacian: center -4, unit neighbors.
pub fn laplacian_5pt() -> Stencil<2> {
    Stencil::new([
        (Point::xy(0, -1), 1.0),
        (Point::xy(-1, 0), 1.0),
        (Point::xy(0, 0), -4.0),
        (Point::xy(1, 0), 1.0),
        (Point::xy(0, 1), 1.0),
    ])
    .unwrap()
}

/// Apply `s` to `src` at every point of `dest_box`. Every read must land in
/// `src.boxx()`; out-of-range reads are a hard error, never truncated.
pub fn stencil_apply<const D: usize>(
    s: &Stencil<D>,
    src: &BoxData<D>,
    dest_box: Box<D>,
) -> Result<BoxData<D>, StencilError> {
    let sb = src.boxx();
    // Pre: dest_box shifted by every offset stays inside src.
    for d in 0..D {
        if dest_box.lo()[d] + s.span().lo()[d] < sb.lo()[d]
            || dest_box.hi()[d] + s.span().hi()[d] > sb.hi()[d]
        {
            // Name the first offending (point, offset) pair.
            for i in dest_box.iter() {
                for (j, _) in s.taps() {
                    if !sb.contains(i + *j) {
                        return Err(StencilError::OutOfRange {
                            point: i.0.to_vec(),
                            offset: j.0.to_vec(),
                        });
                    }
                }
            }
        }
    }

    // Constant ordinal deltas per tap; walk dest rows with a running base.
    let deltas: Vec<(isize, f64)> = s
        .taps()
        .iter()
        .map(|(j, c)| {
            let d = sb.ordinal(dest_box.lo() + *j).unwrap() as isize
                - sb.ordinal(dest_box.lo()).unwrap() as isize;
            (d, *c)
        })
        .collect();

    let mut out = BoxData::zeros(dest_box);
    let xs = src.values();
    let ext0 = dest_box.extent(0);
    let rows = dest_box.size() / ext0.max(1);
    let out_vals = out.values_mut();
    for row in 0..rows {
        let row_lo = dest_box.point_at(row * ext0).unwrap();
        let base = sb.ordinal(row_lo).unwrap();
        for k in 0..ext0 {
            let c = base + k;
            let mut acc = 0.0;
            let mut first = true;
            for &(d, coef) in &deltas {
                let v = coef * xs[(c as isize + d) as usize];
                if first {
                    acc = v;
                    first = false;
                } else {
                    acc += v;
                }
            }
            out_vals[row * ext0 + k] = acc;
        }
    }
    Ok(out)
}
