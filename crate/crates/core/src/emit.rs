//! C source emission for a fused per-point program: a scalar variant and an
//! OpenMP thread-strided variant. Output is deterministic text; compiling it
//! is an optional test path, never a core dependency.

use crate::lowering::{Coeff, FusedProgram, LinTerm, PrimBuf, ReadSlot, SOperand, TempDef};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmitError {
    #[error("config/program size mismatch: config n={cfg_n}, program n={prog_n}")]
    SizeMismatch { cfg_n: usize, prog_n: usize },
    #[error("config invariant violated: {0}")]
    BadConfig(String),
}

/// Emission parameters. Coefficients stay symbolic function parameters
/// (weight1, lambda1, a_h1); sizes are baked into the index arithmetic.
#[derive(Debug, Clone)]
pub struct EmitConfig {
    pub n: usize,
    pub m: usize,
    pub func_name: String,
    /// OpenMP variant only.
    pub threads: usize,
}

impl EmitConfig {
    pub fn new(n: usize, func_name: &str) -> Self {
        EmitConfig {
            n,
            m: n + 2,
            func_name: func_name.to_string(),
            threads: 4,
        }
    }

    fn validate(&self, p: &FusedProgram) -> Result<(), EmitError> {
        if self.m != self.n + 2 {
            return Err(EmitError::BadConfig(format!(
                "m must be n + 2, got n={} m={}",
                self.n, self.m
            )));
        }
        if self.threads < 1 {
            return Err(EmitError::BadConfig("threads must be >= 1".into()));
        }
        if self.n != p.n || self.m != p.m {
            return Err(EmitError::SizeMismatch {
                cfg_n: self.n,
                prog_n: p.n,
            });
        }
        Ok(())
    }
}

fn c_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        format!("{v}")
    }
}

fn read_expr(p: &FusedProgram, slot: &ReadSlot, center_var: &str) -> String {
    match slot.buf {
        PrimBuf::Phi => {
            if slot.idx == p.write_idx {
                format!("X[{center_var}]")
            } else {
                format!("X[(b15 + {})]", slot.idx.base)
            }
        }
        PrimBuf::Rho => "rhs[i1]".to_string(),
    }
}

fn operand_expr(p: &FusedProgram, op: &SOperand, center_var: &str) -> String {
    match op {
        SOperand::Read(k) => read_expr(p, &p.reads[*k], center_var),
        SOperand::Temp(k) => format!("s{}", 20 + k),
    }
}

/// (negated, text) for one linear term.
fn term_expr(p: &FusedProgram, t: &LinTerm, center_var: &str) -> (bool, String) {
    let op = operand_expr(p, &t.op, center_var);
    match t.coeff {
        Coeff::Lit(v) => {
            let neg = v < 0.0;
            let mag = v.abs();
            if mag == 1.0 {
                (neg, op)
            } else {
                (neg, format!("({}*{})", c_f64(mag), op))
            }
        }
        Coeff::Weight(_) => (false, format!("(weight1*{op})")),
        Coeff::NegLambda(_) => (true, format!("(lambda1*{op})")),
        Coeff::InvH2(_) => (false, format!("((1.0/(a_h1*a_h1))*{op})")),
    }
}

fn lin_expr(p: &FusedProgram, terms: &[LinTerm], center_var: &str) -> String {
    let mut out = String::from("(");
    for (i, t) in terms.iter().enumerate() {
        let (neg, txt) = term_expr(p, t, center_var);
        if i == 0 {
            if neg {
                out.push('-');
            }
        } else if neg {
            out.push_str(" - ");
        } else {
            out.push_str(" + ");
        }
        out.push_str(&txt);
    }
    out.push(')');
    out
}

fn body_lines(p: &FusedProgram, indent: &str) -> Vec<String> {
    let mut lines = Vec::new();
    let temp_names: Vec<String> = (0..p.temps.len()).map(|i| format!("s{}", 20 + i)).collect();
    lines.push(format!("{indent}double {};", temp_names.join(", ")));
    lines.push(format!("{indent}int a48, b15;"));
    lines.push(format!(
        "{indent}b15 = (({}*(i1 / {})) + (i1 % {}));",
        p.m, p.n, p.n
    ));
    lines.push(format!("{indent}a48 = (b15 + {});", p.write_idx.base));
    for (i, t) in p.temps.iter().enumerate() {
        let rhs = match t {
            TempDef::Load(k) => read_expr(p, &p.reads[*k], "a48"),
            TempDef::Lin(terms) => lin_expr(p, terms, "a48"),
        };
        lines.push(format!("{indent}{} = {};", temp_names[i], rhs));
    }
    lines.push(format!(
        "{indent}Y[a48] = {};",
        lin_expr(p, &p.write, "a48")
    ));
    lines
}

fn residual_expr(p: &FusedProgram) -> String {
    format!("fabs({})", lin_expr(p, &p.reduction, "a48"))
}

const SIGNATURE: &str =
    "double *Y, double *X, double weight1, double lambda1, double *rhs, double a_h1, double *retval1";

/// Single function, single loop over n² points, running-max residual through
/// the out-parameter, no heap allocation and no intermediate arrays.
pub fn emit_c_scalar(p: &FusedProgram, cfg: &EmitConfig) -> Result<String, EmitError> {
    cfg.validate(p)?;
    let mut out = String::new();
    out.push_str("#include <math.h>\n\n");
    out.push_str(&format!("void {}({}) {{\n", cfg.func_name, SIGNATURE));
    out.push_str(&format!(
        "    for (int i1 = 0; i1 <= {}; i1++) {{\n",
        p.trip - 1
    ));
    for line in body_lines(p, "        ") {
        out.push_str(&line);
        out.push('\n');
    }
    let r = residual_expr(p);
    out.push_str(&format!(
        "        *(retval1) = ((*(retval1) >= {r}) ? *(retval1) : {r});\n"
    ));
    out.push_str("    }\n}\n");
    Ok(out)
}

/// Scalar contract plus a parallel region with the configured thread count,
/// thread-strided iteration and a max reduction on the residual. The pragma
/// governs correctness; the explicit running-max body mirrors the scalar
/// variant.
pub fn emit_c_openmp(p: &FusedProgram, cfg: &EmitConfig) -> Result<String, EmitError> {
    cfg.validate(p)?;
    let t = cfg.threads;
    let mut out = String::new();
    out.push_str("#include <omp.h>\n#include <math.h>\n\n");
    out.push_str(&format!("void {}({}) {{\n", cfg.func_name, SIGNATURE));
    out.push_str("    double retval = *(retval1);\n");
    out.push_str(&format!(
        "    #pragma omp parallel num_threads({t}) reduction(max : retval)\n"
    ));
    out.push_str("    { /* begin parallel loop */\n");
    out.push_str("        int tid1 = omp_get_thread_num();\n");
    out.push_str(&format!(
        "        for (int i1 = tid1; i1 <= {}; i1 += {t}) {{\n",
        p.trip - 1
    ));
    for line in body_lines(p, "            ") {
        out.push_str(&line);
        out.push('\n');
    }
    let r = residual_expr(p);
    out.push_str(&format!(
        "            retval = ((retval >= {r}) ? retval : {r});\n"
    ));
    out.push_str("        }\n");
    out.push_str("    } /* end parallel loop */\n");
    out.push_str("    *(retval1) = retval;\n");
    out.push_str("}\n");
    Ok(out)
}
