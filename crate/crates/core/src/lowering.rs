//! Lowering of the Poisson pipeline into explicit scatter/kernel/gather loop
//! stages, plus fusion of the three stages into one straight-line per-point
//! program with value reuse and no intermediate arrays.
//!
//! Floating-point term order is pinned: every route (functional evaluation,
//! staged evaluation, fused interpreter, compiled fused loop) folds the same
//! linear combinations left to right, so residual scalars match bit for bit.

use crate::ol::{interior_ordinal, ol_shape, OLExpr};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LoweringError {
    #[error("unrecognized pattern: expected {expected}, found {found}")]
    UnrecognizedPattern {
        expected: &'static str,
        found: String,
    },
    #[error("fusion illegal between stages {producer} and {consumer}: gather and scatter disagree at loop index {j}")]
    FusionIllegal {
        producer: usize,
        consumer: usize,
        j: usize,
    },
    #[error("ordinal {ordinal} out of range {len} in {what}")]
    OrdinalOutOfRange {
        what: &'static str,
        ordinal: i64,
        len: usize,
    },
    #[error("input length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("fused program does not have the compilable three-stage shape: {0}")]
    NotCompilable(String),
}

/// Which buffer an index slot addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Buf {
    /// Ghosted φ patch, m² values.
    Phi,
    /// Right-hand side, n² values.
    Rho,
    /// Output of an earlier stage.
    Stage(usize),
    /// The owning stage's own output.
    Out,
}

/// Affine ordinal: base + per_div*(j div n) + per_mod*(j mod n) + per_j*j.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AffineIdx {
    pub base: i64,
    pub per_div: i64,
    pub per_mod: i64,
    pub per_j: i64,
}

impl AffineIdx {
    pub fn of_j() -> Self {
        AffineIdx {
            base: 0,
            per_div: 0,
            per_mod: 0,
            per_j: 1,
        }
    }

    /// Window read at `base` ordinals past b(j) = m*(j div n) + (j mod n).
    pub fn window(base: i64, m: usize) -> Self {
        AffineIdx {
            base,
            per_div: m as i64,
            per_mod: 1,
            per_j: 0,
        }
    }

    pub fn eval(&self, j: usize, n: usize) -> i64 {
        self.base
            + self.per_div * (j / n) as i64
            + self.per_mod * (j % n) as i64
            + self.per_j * j as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexSlot {
    pub buf: Buf,
    pub idx: AffineIdx,
}

/// Ordered list of per-iteration reads or writes; arity = slots.len().
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub n: usize,
    pub slots: Vec<IndexSlot>,
}

impl IndexMap {
    pub fn arity(&self) -> usize {
        self.slots.len()
    }
}

/// Scalar coefficient with its role, so executors read the value and the
/// emitter prints the parameter name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coeff {
    Lit(f64),
    /// Jacobi stencil weight w.
    Weight(f64),
    /// Stored multiplier is already −λ.
    NegLambda(f64),
    /// Stored multiplier is 1/h².
    InvH2(f64),
}

impl Coeff {
    pub fn value(&self) -> f64 {
        match *self {
            Coeff::Lit(v) | Coeff::Weight(v) | Coeff::NegLambda(v) | Coeff::InvH2(v) => v,
        }
    }
}

/// Per-point arithmetic of a stage: linear combination of the gathered
/// values, optional absolute value, optional running-max accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub coeffs: Vec<Coeff>,
    pub abs: bool,
    pub reduce_max: bool,
}

impl Kernel {
    /// Left-to-right fold; the first term initializes the accumulator.
    pub fn eval(&self, vals: &[f64]) -> f64 {
        debug_assert_eq!(vals.len(), self.coeffs.len());
        let mut acc = self.coeffs[0].value() * vals[0];
        for k in 1..self.coeffs.len() {
            acc += self.coeffs[k].value() * vals[k];
        }
        if self.abs {
            acc = acc.abs();
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageName {
    Laplace,
    Jacobi,
    MaxNorm,
}

/// One scatter/kernel/gather loop of trip count `trip`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: StageName,
    pub trip: usize,
    pub gather: IndexMap,
    pub scatter: IndexMap,
    pub kernel: Kernel,
}

impl Stage {
    /// Size of the stage's materialized output in the unfused execution.
    pub fn out_len(&self) -> usize {
        if self.kernel.reduce_max {
            1
        } else {
            self.trip
        }
    }
}

/// Pretty-print one stage, one line per index slot.
pub fn pretty_stage(s: &Stage) -> String {
    let mut out = format!("{:?} trip={}\n", s.name, s.trip);
    for (slot, c) in s.gather.slots.iter().zip(&s.kernel.coeffs) {
        out.push_str(&format!(
            "  gather {:?} base={} per_div={} per_mod={} per_j={} coeff={:?}\n",
            slot.buf, slot.idx.base, slot.idx.per_div, slot.idx.per_mod, slot.idx.per_j, c
        ));
    }
    for slot in &s.scatter.slots {
        let tag = if s.kernel.reduce_max { "max-acc" } else { "scatter" };
        out.push_str(&format!(
            "  {} {:?} base={} per_div={} per_mod={} per_j={}\n",
            tag, slot.buf, slot.idx.base, slot.idx.per_div, slot.idx.per_mod, slot.idx.per_j
        ));
    }
    out
}

/// Parameters recovered from a recognized Poisson pipeline expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonParams {
    pub n: usize,
    pub m: usize,
    pub w: f64,
    /// Stored as the update multiplier −λ.
    pub neg_lambda: f64,
    /// 1/h².
    pub inv_h2: f64,
}

fn unrecognized(expected: &'static str, e: &OLExpr) -> LoweringError {
    let found = match ol_shape(e) {
        Ok(s) => format!("{:?} of shape {}", variant_name(e), s),
        Err(_) => format!("{:?}", variant_name(e)),
    };
    LoweringError::UnrecognizedPattern { expected, found }
}

fn variant_name(e: &OLExpr) -> &'static str {
    match e {
        OLExpr::Compose(..) => "Compose",
        OLExpr::DirectSum(..) => "DirectSum",
        OLExpr::Tensor(..) => "Tensor",
        OLExpr::VStack(..) => "VStack",
        OLExpr::IterVStack { .. } => "IterVStack",
        OLExpr::Identity(_) => "Identity",
        OLExpr::Pointwise { .. } => "Pointwise",
        OLExpr::RowVec(_) => "RowVec",
        OLExpr::Gather { .. } => "Gather",
        OLExpr::Scatter { .. } => "Scatter",
        OLExpr::Filt { .. } => "Filt",
        OLExpr::MaxReduce(_) => "MaxReduce",
    }
}

fn match_poisson(e: &OLExpr) -> Result<(PoissonParams, Vec<f64>), LoweringError> {
    use OLExpr::*;
    let (outer, inner) = match e {
        Compose(a, b) => (a.as_ref(), b.as_ref()),
        _ => return Err(unrecognized("Compose(outer, inner)", e)),
    };
    let (jacobi, maxnorm) = match outer {
        VStack(a, b) => (a.as_ref(), b.as_ref()),
        _ => return Err(unrecognized("VStack(Jacobi, MaxNorm)", outer)),
    };
    let (jac_row, n2) = match jacobi {
        Tensor(a, b) => match (a.as_ref(), b.as_ref()) {
            (RowVec(r), Identity(k)) => (*r, *k),
            _ => return Err(unrecognized("RowVec ⊗ Identity", jacobi)),
        },
        _ => return Err(unrecognized("Tensor", jacobi)),
    };
    let norm_row = match maxnorm {
        Compose(mr, rest) => match (mr.as_ref(), rest.as_ref()) {
            (MaxReduce(_), Compose(pw, t)) => match (pw.as_ref(), t.as_ref()) {
                (Pointwise { .. }, Tensor(a, b)) => match (a.as_ref(), b.as_ref()) {
                    (RowVec(r), Identity(_)) => *r,
                    _ => return Err(unrecognized("RowVec ⊗ Identity", t)),
                },
                _ => return Err(unrecognized("Pointwise ∘ Tensor", rest)),
            },
            _ => return Err(unrecognized("MaxReduce ∘ (Pointwise ∘ Tensor)", maxnorm)),
        },
        _ => return Err(unrecognized("Compose", maxnorm)),
    };
    let (stack, _rho_id) = match inner {
        DirectSum(a, b) => match b.as_ref() {
            Identity(k) if *k == n2 => (a.as_ref(), *k),
            _ => return Err(unrecognized("DirectSum(.., Identity(n²))", inner)),
        },
        _ => return Err(unrecognized("DirectSum", inner)),
    };
    let (interior, laplace) = match stack {
        VStack(a, b) => (a.as_ref(), b.as_ref()),
        _ => return Err(unrecognized("VStack(interior, Laplace)", stack)),
    };
    let (taps, n, m) = match laplace {
        Compose(sc, stack) => match (sc.as_ref(), stack.as_ref()) {
            (Scatter { map, out_len }, IterVStack { body, count }) => match body.as_ref() {
                Filt { taps, n, m } => {
                    let identity = map.len() == *out_len
                        && *out_len == *count
                        && map.iter().enumerate().all(|(i, &t)| i == t);
                    if !identity || *count != n * n {
                        return Err(unrecognized("identity Scatter over n² filters", laplace));
                    }
                    (taps.clone(), *n, *m)
                }
                other => return Err(unrecognized("Filt", other)),
            },
            _ => return Err(unrecognized("Scatter ∘ IterVStack", laplace)),
        },
        _ => return Err(unrecognized("Compose(Scatter, IterVStack)", laplace)),
    };
    if n * n != n2 {
        return Err(unrecognized("matching n² across operands", e));
    }
    match interior {
        Gather { map, in_len } => {
            let ok = *in_len == m * m
                && map.len() == n2
                && map
                    .iter()
                    .enumerate()
                    .all(|(i, &t)| t == interior_ordinal(n, m, i));
            if !ok {
                return Err(unrecognized("interior-extraction Gather", interior));
            }
        }
        other => return Err(unrecognized("Gather", other)),
    }
    if jac_row[0] != 1.0 || norm_row[0] != 0.0 || norm_row[2] != -1.0 {
        return Err(unrecognized("rows (1,w,−λ) and (0,1/h²,−1)", e));
    }
    Ok((
        PoissonParams {
            n,
            m,
            w: jac_row[1],
            neg_lambda: jac_row[2],
            inv_h2: norm_row[1],
        },
        taps,
    ))
}

/// Lower a Poisson pipeline expression into the three loop stages
/// Laplace, Jacobi, MaxNorm, each of trip count n².
pub fn lower(e: &OLExpr) -> Result<Vec<Stage>, LoweringError> {
    let (p, taps) = match_poisson(e)?;
    let (n, m, n2) = (p.n, p.m, p.n * p.n);

    // Nonzero taps in row-major (ordinal) order; same fold order as Filt.
    let mut lap_gather = Vec::new();
    let mut lap_coeffs = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            let t = taps[3 * r + c];
            if t != 0.0 {
                lap_gather.push(IndexSlot {
                    buf: Buf::Phi,
                    idx: AffineIdx::window((r * m + c) as i64, m),
                });
                lap_coeffs.push(Coeff::Lit(t));
            }
        }
    }
    let center = IndexSlot {
        buf: Buf::Phi,
        idx: AffineIdx::window((m + 1) as i64, m),
    };
    let out_j = IndexSlot {
        buf: Buf::Out,
        idx: AffineIdx::of_j(),
    };

    let laplace = Stage {
        name: StageName::Laplace,
        trip: n2,
        gather: IndexMap {
            n,
            slots: lap_gather,
        },
        scatter: IndexMap {
            n,
            slots: vec![out_j],
        },
        kernel: Kernel {
            coeffs: lap_coeffs,
            abs: false,
            reduce_max: false,
        },
    };
    let jacobi = Stage {
        name: StageName::Jacobi,
        trip: n2,
        gather: IndexMap {
            n,
            slots: vec![
                center,
                IndexSlot {
                    buf: Buf::Stage(0),
                    idx: AffineIdx::of_j(),
                },
                IndexSlot {
                    buf: Buf::Rho,
                    idx: AffineIdx::of_j(),
                },
            ],
        },
        scatter: IndexMap {
            n,
            slots: vec![out_j],
        },
        kernel: Kernel {
            coeffs: vec![Coeff::Lit(1.0), Coeff::Weight(p.w), Coeff::NegLambda(p.neg_lambda)],
            abs: false,
            reduce_max: false,
        },
    };
    let maxnorm = Stage {
        name: StageName::MaxNorm,
        trip: n2,
        gather: IndexMap {
            n,
            slots: vec![
                center,
                IndexSlot {
                    buf: Buf::Stage(0),
                    idx: AffineIdx::of_j(),
                },
                IndexSlot {
                    buf: Buf::Rho,
                    idx: AffineIdx::of_j(),
                },
            ],
        },
        scatter: IndexMap {
            n,
            slots: vec![out_j],
        },
        kernel: Kernel {
            coeffs: vec![Coeff::Lit(0.0), Coeff::InvH2(p.inv_h2), Coeff::Lit(-1.0)],
            abs: true,
            reduce_max: true,
        },
    };
    Ok(vec![laplace, jacobi, maxnorm])
}

fn checked_ordinal(
    what: &'static str,
    ord: i64,
    len: usize,
) -> Result<usize, LoweringError> {
    if ord < 0 || ord as usize >= len {
        Err(LoweringError::OrdinalOutOfRange {
            what,
            ordinal: ord,
            len,
        })
    } else {
        Ok(ord as usize)
    }
}

/// Execute the stages one after another with materialized intermediate
/// vectors; returns (φ' interior, n² | residual, 1).
pub fn sigma_eval(stages: &[Stage], x: &[f64]) -> Result<Vec<f64>, LoweringError> {
    let (n, m) = stage_sizes(stages)?;
    let (m2, n2) = (m * m, n * n);
    if x.len() != m2 + n2 {
        return Err(LoweringError::InputLength {
            expected: m2 + n2,
            got: x.len(),
        });
    }
    let (phi, rho) = x.split_at(m2);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(stages.len());
    for stage in stages {
        let mut out = if stage.kernel.reduce_max {
            vec![f64::NEG_INFINITY]
        } else {
            vec![0.0; stage.out_len()]
        };
        let mut vals = vec![0.0; stage.gather.arity()];
        for j in 0..stage.trip {
            for (slot, v) in stage.gather.slots.iter().zip(vals.iter_mut()) {
                let ord = slot.idx.eval(j, stage.gather.n);
                *v = match slot.buf {
                    Buf::Phi => phi[checked_ordinal("gather from phi", ord, phi.len())?],
                    Buf::Rho => rho[checked_ordinal("gather from rho", ord, rho.len())?],
                    Buf::Stage(i) => {
                        let src = &outputs[i];
                        src[checked_ordinal("gather from stage output", ord, src.len())?]
                    }
                    Buf::Out => {
                        return Err(LoweringError::UnrecognizedPattern {
                            expected: "gather from Phi/Rho/Stage",
                            found: "Out".into(),
                        })
                    }
                };
            }
            let val = stage.kernel.eval(&vals);
            if stage.kernel.reduce_max {
                out[0] = out[0].max(val);
            } else {
                let ord = stage.scatter.slots[0].idx.eval(j, stage.scatter.n);
                out[checked_ordinal("scatter to stage output", ord, stage.trip)?] = val;
            }
        }
        outputs.push(out);
    }
    // (Jacobi output | MaxNorm accumulator).
    let mut y = outputs[1].clone();
    y.extend_from_slice(&outputs[2]);
    Ok(y)
}

fn stage_sizes(stages: &[Stage]) -> Result<(usize, usize), LoweringError> {
    let lap = stages
        .iter()
        .find(|s| s.name == StageName::Laplace)
        .ok_or(LoweringError::UnrecognizedPattern {
            expected: "a Laplace stage",
            found: "none".into(),
        })?;
    let n = lap.gather.n;
    let m = lap
        .gather
        .slots
        .iter()
        .map(|s| s.idx.per_div)
        .max()
        .unwrap_or(0) as usize;
    Ok((n, m))
}

/// Primary-input read slot of the fused loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadSlot {
    pub buf: PrimBuf,
    pub idx: AffineIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimBuf {
    Phi,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SOperand {
    /// Inline read of a primary input slot.
    Read(usize),
    Temp(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinTerm {
    pub coeff: Coeff,
    pub op: SOperand,
}

/// Straight-line body statement: either load a primary read into a temp, or
/// compute a linear combination of reads and earlier temps.
#[derive(Debug, Clone, PartialEq)]
pub enum TempDef {
    Load(usize),
    Lin(Vec<LinTerm>),
}

/// The single fused loop: per iteration it reads only primary inputs, keeps
/// each intermediate value in a scalar temporary, writes one φ output, and
/// folds one residual value into a running max.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedProgram {
    pub n: usize,
    pub m: usize,
    pub trip: usize,
    pub reads: Vec<ReadSlot>,
    pub temps: Vec<TempDef>,
    pub write_idx: AffineIdx,
    pub write: Vec<LinTerm>,
    /// Folded as max(acc, |Σ terms|).
    pub reduction: Vec<LinTerm>,
}

/// Fuse the three stages into one per-point program. Legality is checked by
/// exhaustive index-map evaluation: every cross-stage read must hit exactly
/// what its producer scattered at the same loop index.
pub fn fuse(stages: &[Stage]) -> Result<FusedProgram, LoweringError> {
    let trip = stages.first().map(|s| s.trip).unwrap_or(0);
    // Legality: pointwise producer-consumer alignment at every j.
    for (k, stage) in stages.iter().enumerate() {
        if stage.trip != trip {
            return Err(LoweringError::FusionIllegal {
                producer: 0,
                consumer: k,
                j: 0,
            });
        }
        for slot in &stage.gather.slots {
            if let Buf::Stage(i) = slot.buf {
                if i >= k {
                    return Err(LoweringError::FusionIllegal {
                        producer: i,
                        consumer: k,
                        j: 0,
                    });
                }
                let producer = &stages[i];
                for j in 0..trip {
                    let wrote = producer.scatter.slots[0].idx.eval(j, producer.scatter.n);
                    let reads = slot.idx.eval(j, stage.gather.n);
                    if wrote != reads {
                        return Err(LoweringError::FusionIllegal {
                            producer: i,
                            consumer: k,
                            j,
                        });
                    }
                }
            }
        }
    }

    let (n, m) = stage_sizes(stages)?;

    // Count uses of primary read slots and stage outputs (zero-coefficient
    // terms are dropped from the fused body).
    let mut read_uses: Vec<(ReadSlot, usize)> = Vec::new();
    let mut stage_uses = vec![0usize; stages.len()];
    let mut note_read = |slot: &IndexSlot| {
        let rs = ReadSlot {
            buf: match slot.buf {
                Buf::Phi => PrimBuf::Phi,
                Buf::Rho => PrimBuf::Rho,
                _ => unreachable!(),
            },
            idx: slot.idx,
        };
        if let Some(e) = read_uses.iter_mut().find(|(s, _)| *s == rs) {
            e.1 += 1;
        } else {
            read_uses.push((rs, 1));
        }
    };
    for stage in stages {
        for (slot, c) in stage.gather.slots.iter().zip(&stage.kernel.coeffs) {
            if c.value() == 0.0 {
                continue;
            }
            match slot.buf {
                Buf::Phi | Buf::Rho => note_read(slot),
                Buf::Stage(i) => stage_uses[i] += 1,
                Buf::Out => {}
            }
        }
    }

    // Assemble the body stage by stage. Multi-use reads get load temps the
    // first time they are needed; single-use reads stay inline. A stage value
    // gets a temp only if consumed more than once.
    let mut reads: Vec<ReadSlot> = Vec::new();
    let mut temps: Vec<TempDef> = Vec::new();
    let mut read_temp: Vec<Option<usize>> = Vec::new(); // per reads entry
    let mut stage_value: Vec<Option<SOperand>> = vec![None; stages.len()];
    let mut write_terms: Option<(AffineIdx, Vec<LinTerm>)> = None;
    let mut reduction: Option<Vec<LinTerm>> = None;

    let slot_index = |reads: &mut Vec<ReadSlot>, rs: ReadSlot| -> usize {
        if let Some(k) = reads.iter().position(|s| *s == rs) {
            k
        } else {
            reads.push(rs);
            k_last(reads)
        }
    };

    fn k_last(reads: &[ReadSlot]) -> usize {
        reads.len() - 1
    }

    for (k, stage) in stages.iter().enumerate() {
        let mut terms = Vec::new();
        for (slot, c) in stage.gather.slots.iter().zip(&stage.kernel.coeffs) {
            if c.value() == 0.0 {
                continue;
            }
            let op = match slot.buf {
                Buf::Phi | Buf::Rho => {
                    let rs = ReadSlot {
                        buf: if slot.buf == Buf::Phi {
                            PrimBuf::Phi
                        } else {
                            PrimBuf::Rho
                        },
                        idx: slot.idx,
                    };
                    let ri = slot_index(&mut reads, rs);
                    if read_temp.len() <= ri {
                        read_temp.resize(ri + 1, None);
                    }
                    let multi = read_uses.iter().any(|(s, u)| *s == rs && *u > 1);
                    if multi {
                        let ti = *read_temp[ri].get_or_insert_with(|| {
                            temps.push(TempDef::Load(ri));
                            temps.len() - 1
                        });
                        SOperand::Temp(ti)
                    } else {
                        SOperand::Read(ri)
                    }
                }
                Buf::Stage(i) => stage_value[i].expect("legality checked above"),
                Buf::Out => unreachable!(),
            };
            terms.push(LinTerm { coeff: *c, op });
        }

        if stage.kernel.reduce_max {
            reduction = Some(terms);
        } else if stage_uses_later(stages, k) {
            if stage_uses[k] > 1 {
                temps.push(TempDef::Lin(terms));
                stage_value[k] = Some(SOperand::Temp(temps.len() - 1));
            } else {
                // Single later consumer: still needs a temp, the consumer
                // term references a scalar, not a re-computation.
                temps.push(TempDef::Lin(terms));
                stage_value[k] = Some(SOperand::Temp(temps.len() - 1));
            }
        } else {
            // Terminal non-reducing stage: its scatter is the φ write.
            let center = AffineIdx::window((m + 1) as i64, m);
            write_terms = Some((center, terms));
        }
    }

    let (write_idx, write) = write_terms.ok_or(LoweringError::UnrecognizedPattern {
        expected: "a terminal φ-writing stage",
        found: "none".into(),
    })?;
    let reduction = reduction.ok_or(LoweringError::UnrecognizedPattern {
        expected: "a max-reducing stage",
        found: "none".into(),
    })?;

    Ok(FusedProgram {
        n,
        m,
        trip,
        reads,
        temps,
        write_idx,
        write,
        reduction,
    })
}

fn stage_uses_later(stages: &[Stage], k: usize) -> bool {
    stages.iter().skip(k + 1).any(|s| {
        s.gather
            .slots
            .iter()
            .zip(&s.kernel.coeffs)
            .any(|(slot, c)| slot.buf == Buf::Stage(k) && c.value() != 0.0)
    })
}

impl FusedProgram {
    /// Interpret the fused loop: read φ (m²) and ρ (n²), write the interior
    /// of `y` (m²), fold the residual into `acc` and return it.
    pub fn run(
        &self,
        phi: &[f64],
        rho: &[f64],
        y: &mut [f64],
        mut acc: f64,
    ) -> Result<f64, LoweringError> {
        if phi.len() != self.m * self.m || y.len() != phi.len() || rho.len() != self.n * self.n {
            return Err(LoweringError::InputLength {
                expected: self.m * self.m,
                got: phi.len(),
            });
        }
        let mut tvals = vec![0.0; self.temps.len()];
        for j in 0..self.trip {
            let read = |k: usize| -> Result<f64, LoweringError> {
                let slot = &self.reads[k];
                let ord = slot.idx.eval(j, self.n);
                Ok(match slot.buf {
                    PrimBuf::Phi => phi[checked_ordinal("fused read phi", ord, phi.len())?],
                    PrimBuf::Rho => rho[checked_ordinal("fused read rho", ord, rho.len())?],
                })
            };
            let eval_lin = |terms: &[LinTerm], tvals: &[f64]| -> Result<f64, LoweringError> {
                let mut acc = 0.0;
                for (i, t) in terms.iter().enumerate() {
                    let v = match t.op {
                        SOperand::Read(k) => read(k)?,
                        SOperand::Temp(k) => tvals[k],
                    };
                    let term = t.coeff.value() * v;
                    if i == 0 {
                        acc = term;
                    } else {
                        acc += term;
                    }
                }
                Ok(acc)
            };
            for (ti, t) in self.temps.iter().enumerate() {
                tvals[ti] = match t {
                    TempDef::Load(k) => read(*k)?,
                    TempDef::Lin(terms) => eval_lin(terms, &tvals)?,
                };
            }
            let ord = self.write_idx.eval(j, self.n);
            y[checked_ordinal("fused write", ord, y.len())?] = eval_lin(&self.write, &tvals)?;
            let r = eval_lin(&self.reduction, &tvals)?.abs();
            acc = acc.max(r);
        }
        Ok(acc)
    }

    /// Like [`run`](Self::run) but on a standalone (φ|ρ) vector, returning
    /// (φ' interior | residual) in the same layout as `sigma_eval`.
    pub fn run_vector(&self, x: &[f64]) -> Result<Vec<f64>, LoweringError> {
        let m2 = self.m * self.m;
        let n2 = self.n * self.n;
        if x.len() != m2 + n2 {
            return Err(LoweringError::InputLength {
                expected: m2 + n2,
                got: x.len(),
            });
        }
        let (phi, rho) = x.split_at(m2);
        let mut y = vec![0.0; m2];
        let acc = self.run(phi, rho, &mut y, f64::NEG_INFINITY)?;
        let mut out: Vec<f64> = (0..n2)
            .map(|i| y[interior_ordinal(self.n, self.m, i)])
            .collect();
        out.push(acc);
        Ok(out)
    }

    /// Specialize into the tight three-temp loop. Errors if the body does not
    /// have the expected φ-center / Laplacian / ρ shape.
    pub fn compile(&self) -> Result<CompiledPoisson, LoweringError> {
        let fail = |msg: &str| LoweringError::NotCompilable(msg.to_string());
        if self.temps.len() != 3 {
            return Err(fail("expected 3 temporaries"));
        }
        let center = match &self.temps[0] {
            TempDef::Load(k) if self.reads[*k].buf == PrimBuf::Phi => {
                self.reads[*k].idx.base as usize
            }
            _ => return Err(fail("temp 0 is not a φ load")),
        };
        let lap_terms = match &self.temps[1] {
            TempDef::Lin(terms) => terms,
            _ => return Err(fail("temp 1 is not a linear combination")),
        };
        let mut taps = Vec::with_capacity(lap_terms.len());
        for t in lap_terms {
            let rel = match t.op {
                SOperand::Read(k) if self.reads[k].buf == PrimBuf::Phi => {
                    self.reads[k].idx.base as usize
                }
                SOperand::Temp(0) => center,
                _ => return Err(fail("Laplacian term is not a φ read")),
            };
            taps.push((rel, t.coeff.value()));
        }
        match &self.temps[2] {
            TempDef::Load(k)
                if self.reads[*k].buf == PrimBuf::Rho && self.reads[*k].idx == AffineIdx::of_j() => {}
            _ => return Err(fail("temp 2 is not a ρ load")),
        }
        let tri = |terms: &[LinTerm]| -> Result<Vec<(usize, f64)>, LoweringError> {
            terms
                .iter()
                .map(|t| match t.op {
                    SOperand::Temp(k) => Ok((k, t.coeff.value())),
                    _ => Err(fail("expected temp operands")),
                })
                .collect()
        };
        let write = tri(&self.write)?;
        let reduction = tri(&self.reduction)?;
        if self.write_idx != AffineIdx::window((self.m + 1) as i64, self.m) {
            return Err(fail("write is not the window center"));
        }
        Ok(CompiledPoisson {
            n: self.n,
            m: self.m,
            trip: self.trip,
            center,
            taps,
            write,
            reduction,
        })
    }
}

/// Pretty-print the fused body, one statement per line.
pub fn pretty_fused(p: &FusedProgram) -> String {
    let slot_str = |s: &ReadSlot| {
        let buf = match s.buf {
            PrimBuf::Phi => "X",
            PrimBuf::Rho => "rhs",
        };
        if s.idx.per_j == 1 && s.idx.per_div == 0 && s.idx.per_mod == 0 && s.idx.base == 0 {
            format!("{buf}[j]")
        } else {
            format!("{buf}[b + {}]", s.idx.base)
        }
    };
    let op_str = |op: &SOperand| match op {
        SOperand::Read(k) => slot_str(&p.reads[*k]),
        SOperand::Temp(k) => format!("s{k}"),
    };
    let lin_str = |terms: &[LinTerm]| {
        terms
            .iter()
            .map(|t| format!("{:?}*{}", t.coeff, op_str(&t.op)))
            .collect::<Vec<_>>()
            .join(" + ")
    };
    let mut out = format!(
        "fused trip={} (n={}, m={}), b = {}*(j/{}) + (j%{})\n",
        p.trip, p.n, p.m, p.m, p.n, p.n
    );
    for (i, t) in p.temps.iter().enumerate() {
        match t {
            TempDef::Load(k) => out.push_str(&format!("  s{i} = {}\n", slot_str(&p.reads[*k]))),
            TempDef::Lin(terms) => out.push_str(&format!("  s{i} = {}\n", lin_str(terms))),
        }
    }
    out.push_str(&format!("  Y[b + {}] = {}\n", p.write_idx.base, lin_str(&p.write)));
    out.push_str(&format!("  acc = max(acc, |{}|)\n", lin_str(&p.reduction)));
    out
}

/// Fused loop specialized to the Poisson shape: straight-line arithmetic,
/// no per-point interpretation overhead.
#[derive(Debug, Clone)]
pub struct CompiledPoisson {
    pub n: usize,
    pub m: usize,
    pub trip: usize,
    /// Ordinal offset of the window center past b(j).
    pub center: usize,
    /// (offset past b(j), coefficient), in fold order.
    pub taps: Vec<(usize, f64)>,
    /// (temp id, coefficient) over [φ-center, Laplacian, ρ].
    pub write: Vec<(usize, f64)>,
    pub reduction: Vec<(usize, f64)>,
}

impl CompiledPoisson {
    pub fn run(&self, phi: &[f64], rho: &[f64], y: &mut [f64], mut acc: f64) -> f64 {
        let (n, m) = (self.n, self.m);
        debug_assert_eq!(phi.len(), m * m);
        debug_assert_eq!(rho.len(), n * n);
        for j in 0..self.trip {
            let b = m * (j / n) + (j % n);
            let mut lap = 0.0;
            for (i, &(off, c)) in self.taps.iter().enumerate() {
                let v = c * phi[b + off];
                if i == 0 {
                    lap = v;
                } else {
                    lap += v;
                }
            }
            let t = [phi[b + self.center], lap, rho[j]];
            let mut w = 0.0;
            for (i, &(k, c)) in self.write.iter().enumerate() {
                let v = c * t[k];
                if i == 0 {
                    w = v;
                } else {
                    w += v;
                }
            }
            y[b + self.center] = w;
            let mut r = 0.0;
            for (i, &(k, c)) in self.reduction.iter().enumerate() {
                let v = c * t[k];
                if i == 0 {
                    r = v;
                } else {
                    r += v;
                }
            }
            acc = acc.max(r.abs());
        }
        acc
    }
}
