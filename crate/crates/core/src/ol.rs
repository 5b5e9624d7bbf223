//! Operator-language IR: an algebra of matrix-shaped operators (compose,
//! direct sum, row-vector tensor, stacks, gather/scatter, filters, pointwise
//! maps, max reduction) with shape checking, a functional evaluator, a dense
//! materializer for linear subtrees, and builders for the Jacobi/Poisson
//! pipeline.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OLError {
    #[error("dimension mismatch at {node}: {left} vs {right}")]
    DimMismatch {
        node: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("input length {got} does not match operator cols {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tensor product is restricted to RowVec ⊗ Identity")]
    BadTensor,
    #[error("filter instance evaluated outside an iterative stack (no bound index)")]
    UnboundIndex,
    #[error("cannot materialize nonlinear node {node}")]
    Nonlinear { node: &'static str },
    #[error("index {index} out of range {len} in {node}")]
    IndexOutOfRange {
        node: &'static str,
        index: usize,
        len: usize,
    },
    #[error("size inconsistency: {0}")]
    SizeInconsistency(String),
}

/// Operator shape under the matrix reading A: R^cols -> R^rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }
}

/// Closed tag set of pointwise scalar functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwFn {
    Abs,
}

impl PwFn {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            PwFn::Abs => x.abs(),
        }
    }
}

/// Operator-language expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum OLExpr {
    /// A ∘ B: apply B, then A. Requires cols(A) = rows(B).
    Compose(Box<OLExpr>, Box<OLExpr>),
    /// Block-diagonal direct sum: input and output both split.
    DirectSum(Box<OLExpr>, Box<OLExpr>),
    /// Tensor product, restricted to RowVec ⊗ Identity.
    Tensor(Box<OLExpr>, Box<OLExpr>),
    /// Vertical stack: both operands read the same input, outputs concatenate.
    VStack(Box<OLExpr>, Box<OLExpr>),
    /// `count` copies of `body` stacked vertically, with the instance index
    /// bound inside `body` (filters read their window through it).
    IterVStack { body: Box<OLExpr>, count: usize },
    Identity(usize),
    /// Elementwise scalar function on a vector of length `len`.
    Pointwise { f: PwFn, len: usize },
    /// Row vector with three entries; shape 1x3.
    RowVec([f64; 3]),
    /// y_i = x[map[i]].
    Gather { map: Vec<usize>, in_len: usize },
    /// y[map[i]] += x_i; untouched outputs are 0.
    Scatter { map: Vec<usize>, out_len: usize },
    /// One 3x3 filter instance over an m x m patch stored row-stride m.
    /// Instance i (bound by IterVStack) reads the window whose base ordinal
    /// is b(i) = m*(i/n) + (i mod n); tap (r,c) reads x[b + r*m + c].
    Filt { taps: Vec<f64>, n: usize, m: usize },
    /// y = [max_i x_i].
    MaxReduce(usize),
}

use OLExpr::*;

/// Shape of `e`, validating all composition/stack constraints recursively.
pub fn ol_shape(e: &OLExpr) -> Result<Shape, OLError> {
    match e {
        Compose(a, b) => {
            let (sa, sb) = (ol_shape(a)?, ol_shape(b)?);
            if sa.cols != sb.rows {
                return Err(OLError::DimMismatch {
                    node: "Compose",
                    left: sa,
                    right: sb,
                });
            }
            Ok(Shape::new(sa.rows, sb.cols))
        }
        DirectSum(a, b) => {
            let (sa, sb) = (ol_shape(a)?, ol_shape(b)?);
            Ok(Shape::new(sa.rows + sb.rows, sa.cols + sb.cols))
        }
        Tensor(a, b) => match (a.as_ref(), b.as_ref()) {
            (RowVec(_), Identity(k)) => Ok(Shape::new(*k, 3 * k)),
            _ => Err(OLError::BadTensor),
        },
        VStack(a, b) => {
            let (sa, sb) = (ol_shape(a)?, ol_shape(b)?);
            if sa.cols != sb.cols {
                return Err(OLError::DimMismatch {
                    node: "VStack",
                    left: sa,
                    right: sb,
                });
            }
            Ok(Shape::new(sa.rows + sb.rows, sa.cols))
        }
        IterVStack { body, count } => {
            let sb = ol_shape(body)?;
            Ok(Shape::new(sb.rows * count, sb.cols))
        }
        Identity(k) => Ok(Shape::new(*k, *k)),
        Pointwise { len, .. } => Ok(Shape::new(*len, *len)),
        RowVec(_) => Ok(Shape::new(1, 3)),
        Gather { map, in_len } => {
            for (i, &t) in map.iter().enumerate() {
                if t >= *in_len {
                    return Err(OLError::IndexOutOfRange {
                        node: "Gather",
                        index: i,
                        len: *in_len,
                    });
                }
            }
            Ok(Shape::new(map.len(), *in_len))
        }
        Scatter { map, out_len } => {
            for (i, &t) in map.iter().enumerate() {
                if t >= *out_len {
                    return Err(OLError::IndexOutOfRange {
                        node: "Scatter",
                        index: i,
                        len: *out_len,
                    });
                }
            }
            Ok(Shape::new(*out_len, map.len()))
        }
        Filt { taps, m, .. } => {
            if taps.len() != 9 {
                return Err(OLError::SizeInconsistency(format!(
                    "Filt wants 9 taps, got {}",
                    taps.len()
                )));
            }
            Ok(Shape::new(1, m * m))
        }
        MaxReduce(len) => Ok(Shape::new(1, *len)),
    }
}

fn eval_inner(e: &OLExpr, x: &[f64], idx: Option<usize>) -> Result<Vec<f64>, OLError> {
    match e {
        Compose(a, b) => {
            let t = eval_inner(b, x, idx)?;
            eval_inner(a, &t, idx)
        }
        DirectSum(a, b) => {
            let ca = ol_shape(a)?.cols;
            let (xa, xb) = x.split_at(ca);
            let mut y = eval_inner(a, xa, idx)?;
            y.extend(eval_inner(b, xb, idx)?);
            Ok(y)
        }
        Tensor(a, b) => match (a.as_ref(), b.as_ref()) {
            (RowVec(r), Identity(k)) => {
                let k = *k;
                Ok((0..k)
                    .map(|i| {
                        let mut acc = r[0] * x[i];
                        acc += r[1] * x[k + i];
                        acc += r[2] * x[2 * k + i];
                        acc
                    })
                    .collect())
            }
            _ => Err(OLError::BadTensor),
        },
        VStack(a, b) => {
            let mut y = eval_inner(a, x, idx)?;
            y.extend(eval_inner(b, x, idx)?);
            Ok(y)
        }
        IterVStack { body, count } => {
            let mut y = Vec::with_capacity(*count);
            for i in 0..*count {
                y.extend(eval_inner(body, x, Some(i))?);
            }
            Ok(y)
        }
        Identity(_) => Ok(x.to_vec()),
        Pointwise { f, .. } => Ok(x.iter().map(|&v| f.apply(v)).collect()),
        RowVec(r) => {
            let mut acc = r[0] * x[0];
            acc += r[1] * x[1];
            acc += r[2] * x[2];
            Ok(vec![acc])
        }
        Gather { map, .. } => Ok(map.iter().map(|&t| x[t]).collect()),
        Scatter { map, out_len } => {
            let mut y = vec![0.0; *out_len];
            for (i, &t) in map.iter().enumerate() {
                y[t] += x[i];
            }
            Ok(y)
        }
        Filt { taps, n, m } => {
            let i = idx.ok_or(OLError::UnboundIndex)?;
            let b = m * (i / n) + (i % n);
            let mut acc = 0.0;
            let mut first = true;
            for r in 0..3 {
                for c in 0..3 {
                    let t = taps[3 * r + c];
                    if t == 0.0 {
                        continue;
                    }
                    let k = b + r * m + c;
                    if k >= x.len() {
                        return Err(OLError::IndexOutOfRange {
                            node: "Filt",
                            index: k,
                            len: x.len(),
                        });
                    }
                    let v = t * x[k];
                    if first {
                        acc = v;
                        first = false;
                    } else {
                        acc += v;
                    }
                }
            }
            Ok(vec![acc])
        }
        MaxReduce(_) => Ok(vec![x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))]),
    }
}

/// Functional evaluation of `e` on `x`.
pub fn ol_eval(e: &OLExpr, x: &[f64]) -> Result<Vec<f64>, OLError> {
    let s = ol_shape(e)?;
    if x.len() != s.cols {
        return Err(OLError::LengthMismatch {
            expected: s.cols,
            got: x.len(),
        });
    }
    eval_inner(e, x, None)
}

/// Dense row-major matrix, used for materializing linear operators.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) * x[c]).sum())
            .collect()
    }
}

fn contains_nonlinear(e: &OLExpr) -> Option<&'static str> {
    match e {
        Pointwise { .. } => Some("Pointwise"),
        MaxReduce(_) => Some("MaxReduce"),
        Compose(a, b) | DirectSum(a, b) | VStack(a, b) | Tensor(a, b) => {
            contains_nonlinear(a).or_else(|| contains_nonlinear(b))
        }
        IterVStack { body, .. } => contains_nonlinear(body),
        _ => None,
    }
}

/// Materialize a linear expression as the matrix M with ol_eval(e, x) = Mx,
/// by evaluation on standard basis vectors.
pub fn ol_to_dense(e: &OLExpr) -> Result<DenseMatrix, OLError> {
    if let Some(node) = contains_nonlinear(e) {
        return Err(OLError::Nonlinear { node });
    }
    let s = ol_shape(e)?;
    let mut m = DenseMatrix::zeros(s.rows, s.cols);
    let mut basis = vec![0.0; s.cols];
    for c in 0..s.cols {
        basis[c] = 1.0;
        let col = ol_eval(e, &basis)?;
        basis[c] = 0.0;
        for (r, &v) in col.iter().enumerate() {
            m.set(r, c, v);
        }
    }
    Ok(m)
}

/// Ghosted-patch ordinal of interior point i: b(i) = m*(i/n) + i%n, with the
/// window center at b(i) + m + 1.
pub fn interior_ordinal(n: usize, m: usize, i: usize) -> usize {
    m * (i / n) + (i % n) + m + 1
}

/// Laplace operator of shape (n², m²): n² filter instances over the ghosted
/// patch composed with a scatter onto the interior range.
pub fn build_laplace_ol(n: usize, m: usize, taps: &[f64]) -> Result<OLExpr, OLError> {
    if m != n + 2 {
        return Err(OLError::SizeInconsistency(format!(
            "expected m = n + 2, got n={n}, m={m}"
        )));
    }
    if taps.len() != 9 {
        return Err(OLError::SizeInconsistency(format!(
            "expected 9 taps, got {}",
            taps.len()
        )));
    }
    let n2 = n * n;
    Ok(Compose(
        Box::new(Scatter {
            map: (0..n2).collect(),
            out_len: n2,
        }),
        Box::new(IterVStack {
            body: Box::new(Filt {
                taps: taps.to_vec(),
                n,
                m,
            }),
            count: n2,
        }),
    ))
}

/// Jacobi update operator (1, w, −λ) ⊗ I_{n²} on the blocked input
/// (φ_interior | Lφ | ρ).
pub fn build_jacobi_ol(n: usize, w: f64, lambda: f64) -> OLExpr {
    Tensor(
        Box::new(RowVec([1.0, w, -lambda])),
        Box::new(Identity(n * n)),
    )
}

/// Max-norm residual operator: Max ∘ pw_abs ∘ (0, 1/h², −1) ⊗ I_{n²}.
pub fn build_maxnorm_ol(n: usize, h: f64) -> OLExpr {
    assert!(h > 0.0);
    let n2 = n * n;
    Compose(
        Box::new(MaxReduce(n2)),
        Box::new(Compose(
            Box::new(Pointwise {
                f: PwFn::Abs,
                len: n2,
            }),
            Box::new(Tensor(
                Box::new(RowVec([0.0, 1.0 / (h * h), -1.0])),
                Box::new(Identity(n2)),
            )),
        )),
    )
}

/// Full single-patch pipeline of shape (n²+1, m²+n²) on input
/// X = (φ ghosted, m² | ρ, n²): output is (updated interior φ | residual).
///
/// The inner stack's first operand extracts the n² interior values of the
/// ghosted φ via a gather; a literal identity would not shape-check against
/// the (n², m²) Laplace operand.
pub fn build_poisson_ol(n: usize, m: usize, w: f64, lambda: f64, h: f64) -> Result<OLExpr, OLError> {
    let n2 = n * n;
    let laplace = build_laplace_ol(n, m, &FIVE_POINT_TAPS)?;
    let interior = Gather {
        map: (0..n2).map(|i| interior_ordinal(n, m, i)).collect(),
        in_len: m * m,
    };
    let inner = DirectSum(
        Box::new(VStack(Box::new(interior), Box::new(laplace))),
        Box::new(Identity(n2)),
    );
    let outer = VStack(
        Box::new(build_jacobi_ol(n, w, lambda)),
        Box::new(build_maxnorm_ol(n, h)),
    );
    let e = Compose(Box::new(outer), Box::new(inner));
    ol_shape(&e)?; // surface any inconsistency now
    Ok(e)
}

/// 3x3 taps of the 5-point Laplacian, flattened row-major.
pub const FIVE_POINT_TAPS: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

fn pretty_into(e: &OLExpr, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let line = match e {
        Compose(..) => "Compose".to_string(),
        DirectSum(..) => "DirectSum".to_string(),
        Tensor(..) => "Tensor".to_string(),
        VStack(..) => "VStack".to_string(),
        IterVStack { count, .. } => format!("IterVStack count={count}"),
        Identity(k) => format!("Identity {k}"),
        Pointwise { f, len } => format!("Pointwise {f:?} len={len}"),
        RowVec(r) => format!("RowVec ({}, {}, {})", r[0], r[1], r[2]),
        Gather { map, in_len } => format!("Gather {}<-{}", map.len(), in_len),
        Scatter { map, out_len } => format!("Scatter {}<-{}", out_len, map.len()),
        Filt { n, m, .. } => format!("Filt 3x3 n={n} m={m}"),
        MaxReduce(len) => format!("MaxReduce len={len}"),
    };
    out.push_str(&pad);
    out.push_str(&line);
    out.push('\n');
    match e {
        Compose(a, b) | DirectSum(a, b) | Tensor(a, b) | VStack(a, b) => {
            pretty_into(a, depth + 1, out);
            pretty_into(b, depth + 1, out);
        }
        IterVStack { body, .. } => pretty_into(body, depth + 1, out),
        _ => {}
    }
}

/// One node per line, children indented.
pub fn pretty(e: &OLExpr) -> String {
    let mut s = String::new();
    pretty_into(e, 0, &mut s);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_basics() {
        assert_eq!(ol_shape(&Identity(9)).unwrap(), Shape::new(9, 9));
        let bad = Compose(Box::new(Identity(4)), Box::new(Identity(5)));
        assert!(matches!(
            ol_shape(&bad),
            Err(OLError::DimMismatch { node: "Compose", .. })
        ));
    }

    #[test]
    fn shape_of_scatter_filt_compose() {
        // Scatter 16<-36 over 36 stacked filter instances: (16, 36).
        let e = Compose(
            Box::new(Scatter {
                map: (0..36).map(|i| i % 16).collect(),
                out_len: 16,
            }),
            Box::new(IterVStack {
                body: Box::new(Filt {
                    taps: FIVE_POINT_TAPS.to_vec(),
                    n: 4,
                    m: 6,
                }),
                count: 36,
            }),
        );
        assert_eq!(ol_shape(&e).unwrap(), Shape::new(16, 36));
    }

    #[test]
    fn eval_identity_and_length_check() {
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(ol_eval(&Identity(3), &x).unwrap(), x);
        assert!(matches!(
            ol_eval(&Identity(4), &x),
            Err(OLError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn jacobi_tensor_pointwise_formula() {
        let n = 2;
        let e = build_jacobi_ol(n, 0.25, 0.01);
        assert_eq!(ol_shape(&e).unwrap(), Shape::new(4, 12));
        let phi = [1.0, -2.0, 0.5, 3.0];
        let lap = [4.0, 1.0, -1.0, 2.0];
        let rho = [10.0, 0.0, -5.0, 1.0];
        let x: Vec<f64> = phi.iter().chain(&lap).chain(&rho).copied().collect();
        let y = ol_eval(&e, &x).unwrap();
        for i in 0..4 {
            assert_eq!(y[i], phi[i] + 0.25 * lap[i] - 0.01 * rho[i]);
        }
    }

    #[test]
    fn jacobi_dense_is_block_row() {
        let e = build_jacobi_ol(2, 0.25, 0.01);
        let m = ol_to_dense(&e).unwrap();
        for i in 0..4 {
            for c in 0..12 {
                let want = if c == i {
                    1.0
                } else if c == 4 + i {
                    0.25
                } else if c == 8 + i {
                    -0.01
                } else {
                    0.0
                };
                assert_eq!(m.get(i, c), want);
            }
        }
    }

    #[test]
    fn maxnorm_scalar_case() {
        let e = build_maxnorm_ol(1, 1.0);
        let y = ol_eval(&e, &[5.0, 3.0, 10.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        // |.| makes the output sign-invariant in (Lφ/h² − ρ).
        let y2 = ol_eval(&e, &[5.0, -3.0, -10.0]).unwrap();
        assert_eq!(y2, vec![7.0]);
    }

    #[test]
    fn maxnorm_zero_residual() {
        let n = 2;
        let h = 0.5;
        let e = build_maxnorm_ol(n, h);
        let rho = [1.0, -2.0, 3.0, 0.5];
        let lap: Vec<f64> = rho.iter().map(|r| r * h * h).collect();
        let x: Vec<f64> = [0.0; 4].iter().chain(&lap).chain(&rho).copied().collect();
        let y = ol_eval(&e, &x).unwrap();
        assert!(y[0].abs() < 1e-15);
    }

    #[test]
    fn laplace_center_pick_at_n1() {
        let mut taps = [0.0; 9];
        taps[4] = 1.0; // identity filter
        let e = build_laplace_ol(1, 3, &taps).unwrap();
        let m = ol_to_dense(&e).unwrap();
        assert_eq!(m.rows, 1);
        assert_eq!(m.cols, 9);
        for c in 0..9 {
            assert_eq!(m.get(0, c), if c == 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn laplace_gather_ordinals_at_n64() {
        // Window reads for output i are {b+1, b+66, b+67, b+68, b+133},
        // b = 66*(i/64) + (i mod 64).
        let n = 64;
        let m = 66;
        for &i in &[0usize, 63, 64, 4095] {
            let b = m * (i / n) + (i % n);
            assert_eq!(interior_ordinal(n, m, i), b + 67);
            let reads = [b + 1, b + 66, b + 67, b + 68, b + 133];
            // Tap (r,c) reads b + r*m + c; nonzero taps in row-major order.
            let got: Vec<usize> = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .filter(|&(r, c)| FIVE_POINT_TAPS[3 * r + c] != 0.0)
                .map(|(r, c)| b + r * m + c)
                .collect();
            assert_eq!(got, reads);
        }
    }

    #[test]
    fn poisson_trivial_weights_pass_interior_through() {
        let (n, m) = (4, 6);
        let e = build_poisson_ol(n, m, 0.0, 0.0, 0.1).unwrap();
        assert_eq!(ol_shape(&e).unwrap(), Shape::new(n * n + 1, m * m + n * n));
        let x: Vec<f64> = (0..m * m + n * n).map(|k| (k as f64).sin()).collect();
        let y = ol_eval(&e, &x).unwrap();
        for i in 0..n * n {
            assert_eq!(y[i], x[interior_ordinal(n, m, i)]);
        }
    }

    #[test]
    fn poisson_matches_three_stage_hand_pipeline() {
        let (n, m, w, lambda, h) = (4usize, 6usize, 0.25, 0.01, 0.125);
        let e = build_poisson_ol(n, m, w, lambda, h).unwrap();
        let x: Vec<f64> = (0..m * m + n * n)
            .map(|k| ((k * 37 + 11) % 17) as f64 / 7.0 - 1.0)
            .collect();
        let y = ol_eval(&e, &x).unwrap();

        let lap_e = build_laplace_ol(n, m, &FIVE_POINT_TAPS).unwrap();
        let lap = ol_eval(&lap_e, &x[..m * m]).unwrap();
        let rho = &x[m * m..];
        let mut resid = f64::NEG_INFINITY;
        for i in 0..n * n {
            let phi = x[interior_ordinal(n, m, i)];
            let want = phi + w * lap[i] - lambda * rho[i];
            assert!((y[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            resid = resid.max((lap[i] / (h * h) - rho[i]).abs());
        }
        assert!((y[n * n] - resid).abs() <= 1e-12 * resid.abs().max(1.0));
    }

    #[test]
    fn dense_rejects_nonlinear() {
        let e = build_maxnorm_ol(2, 1.0);
        assert!(matches!(ol_to_dense(&e), Err(OLError::Nonlinear { .. })));
    }

    #[test]
    fn direct_sum_dense_blocks() {
        let e = DirectSum(
            Box::new(Identity(2)),
            Box::new(RowVec([1.0, 2.0, 3.0])),
        );
        let m = ol_to_dense(&e).unwrap();
        assert_eq!((m.rows, m.cols), (3, 5));
        let expect = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 2.0, 3.0],
        ];
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(m.get(r, c), expect[r][c]);
            }
        }
    }

    #[test]
    fn pretty_prints_one_node_per_line() {
        let e = build_poisson_ol(2, 4, 0.25, 0.01, 0.25).unwrap();
        let p = pretty(&e);
        assert!(p.lines().count() >= 10);
        assert!(p.contains("Filt"));
        assert!(p.contains("MaxReduce"));
    }
}
