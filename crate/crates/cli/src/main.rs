//! Command-line front end: verify the numerical oracles, run a solve with
//! either executor, benchmark fused vs reference, or emit the fused kernel
//! as C source.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridfuse_core::emit::{emit_c_openmp, emit_c_scalar, EmitConfig};
use gridfuse_core::exec::{
    max_interior_diff, run_fused, run_reference, ProblemConfig, SolveReport,
};
use gridfuse_core::grid::{exchange_ghosts, GridLayout, PatchGrid};
use gridfuse_core::ol;
use gridfuse_core::{fuse, lower, sigma_eval};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gridfuse", version, about = "Structured-grid Jacobi/Poisson kernels: verify, solve, bench, emit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the numerical oracle battery and print a pass/fail table.
    Verify(VerifyArgs),
    /// Solve the periodic Poisson problem for a fixed iteration budget.
    Solve(SolveArgs),
    /// Time fused vs reference executors over a size sweep.
    Bench(BenchArgs),
    /// Emit the fused per-point kernel as C source.
    Emit(EmitArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Reference,
    Fused,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitKind {
    Scalar,
    Openmp,
}

#[derive(Args)]
struct VerifyArgs {
    /// RNG seed for the randomized properties.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SolveArgs {
    /// Interior points per box per dimension.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Boxes per dimension.
    #[arg(long, default_value_t = 4)]
    nb: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = BackendArg::Fused)]
    backend: BackendArg,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed for the right-hand side.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop early once the max-norm residual drops below this.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated interior sizes per box, e.g. 64,128,256.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    nb: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Timed repeats per backend (median reported); a discarded warmup run
    /// precedes them.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, value_enum, default_value_t = EmitKind::Scalar)]
    emit: EmitKind,
    /// Thread count baked into the OpenMP variant.
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Verify(a) => cmd_verify(&a),
        Cmd::Solve(a) => cmd_solve(&a),
        Cmd::Bench(a) => cmd_bench(&a),
        Cmd::Emit(a) => cmd_emit(&a),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

/// Zero-mean right-hand side: a few seeded sinusoid-product modes. Each mode
/// sums to zero over whole periods, so the periodic problem stays solvable.
fn seeded_rho(layout: GridLayout, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                rng.random_range(1..4) as f64,
                rng.random_range(1..4) as f64,
            )
        })
        .collect();
    let tau = std::f64::consts::TAU;
    let h = layout.h;
    PatchGrid::from_global_fn(layout, false, |p| {
        let (x, y) = (p[0] as f64 * h, p[1] as f64 * h);
        modes
            .iter()
            .map(|(a, kx, ky)| a * (tau * kx * x).sin() * (tau * ky * y).sin())
            .sum()
    })
}

fn solve_once(
    layout: GridLayout,
    iters: usize,
    backend: BackendArg,
    threads: usize,
    seed: u64,
    tol: Option<f64>,
) -> Result<(PatchGrid, SolveReport)> {
    let mut cfg = ProblemConfig::new(layout, iters);
    cfg.threads = threads;
    cfg.tol = tol;
    let phi0 = PatchGrid::zeros(layout, true);
    let rho = seeded_rho(layout, seed);
    let run = match backend {
        BackendArg::Reference => run_reference,
        BackendArg::Fused => run_fused,
    };
    Ok(run(&cfg, &phi0, &rho)?)
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let layout = GridLayout::new(a.n, a.nb, 1);
    let (_, rep) = solve_once(layout, a.iters, a.backend, a.threads, a.seed, a.tol)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "backend={} n={} nb={} global={}^2 iters={}",
        rep.backend,
        a.n,
        a.nb,
        layout.domain_edge(),
        rep.residuals.len()
    );
    for (k, r) in rep.residuals.iter().enumerate() {
        if k < 3 || k + 1 == rep.residuals.len() || (k + 1) % 10 == 0 {
            println!("iter {:>4}  residual {r:.6e}", k + 1);
        }
    }
    println!("wall time {:.3} s", rep.wall_time);
    if let (Some(tol), Some(last)) = (a.tol, rep.residuals.last()) {
        if *last > tol {
            bail!("residual {last:.3e} did not reach tol {tol:.3e}");
        }
    }
    Ok(())
}

fn median_secs(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.repeats < 3 {
        bail!("--repeats must be at least 3 for a stable median");
    }
    if a.sizes.is_empty() {
        bail!("--sizes must name at least one size");
    }
    let mut rows: Vec<(usize, String, f64, f64, Option<f64>)> = Vec::new();
    for &n in &a.sizes {
        let layout = GridLayout::new(n, a.nb, 1);
        let mut medians = [0.0f64; 2];
        for (bi, backend) in [BackendArg::Reference, BackendArg::Fused].into_iter().enumerate() {
            let mut times = Vec::with_capacity(a.repeats);
            let mut final_res = 0.0;
            for rep in 0..=a.repeats {
                let (_, report) =
                    solve_once(layout, a.iters, backend, a.threads, a.seed, None)?;
                if rep == 0 {
                    continue; // warmup, discarded
                }
                times.push(report.wall_time);
                final_res = *report.residuals.last().unwrap_or(&f64::NAN);
            }
            medians[bi] = median_secs(times);
            let name = if bi == 0 { "reference" } else { "fused" };
            let speedup = (bi == 1).then(|| medians[0] / medians[1]);
            rows.push((n, name.to_string(), medians[bi], final_res, speedup));
            match speedup {
                Some(s) => println!(
                    "n={n} nb={} {name}: median {:.3} s over {} repeats, speedup {s:.2}x",
                    a.nb, medians[bi], a.repeats
                ),
                None => println!(
                    "n={n} nb={} {name}: median {:.3} s over {} repeats",
                    a.nb, medians[bi], a.repeats
                ),
            }
        }
    }
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["n", "nb", "iters", "backend", "seconds", "final_residual", "speedup"])?;
        for (n, backend, secs, res, speedup) in &rows {
            w.write_record([
                n.to_string(),
                a.nb.to_string(),
                a.iters.to_string(),
                backend.clone(),
                format!("{secs:.6}"),
                format!("{res:.12e}"),
                speedup.map(|s| format!("{s:.4}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_emit(a: &EmitArgs) -> Result<()> {
    let layout = GridLayout::new(a.n, 1, 1);
    let cfg = ProblemConfig::new(layout, 1);
    let program = gridfuse_core::exec::build_fused_program(&cfg)?;
    let mut ec = EmitConfig::new(a.n, &format!("fused_jacobi_{}", a.n));
    ec.threads = a.threads;
    let src = match a.emit {
        EmitKind::Scalar => emit_c_scalar(&program, &ec)?,
        EmitKind::Openmp => emit_c_openmp(&program, &ec)?,
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, &src).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            std::io::stdout().write_all(src.as_bytes())?;
        }
    }
    Ok(())
}

struct Check {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, r: std::result::Result<String, String>| match r {
        Ok(detail) => checks.push(Check { name, ok: true, detail }),
        Err(detail) => checks.push(Check { name, ok: false, detail }),
    };

    push("ghost exchange periodicity", verify_ghosts(a.seed));
    push("stencil vs dense matrix", verify_dense());
    push("operator routes agree", verify_routes(a.seed));
    push("backends agree", verify_backends(a.seed));
    push("truncation order", verify_order());
    push("emission deterministic", verify_emit());

    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for c in &checks {
        let status = if c.ok { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {}", c.name, c.detail);
        if !c.ok {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn verify_ghosts(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let n = rng.random_range(1usize..6);
        let nb = rng.random_range(1usize..4);
        let layout = GridLayout::new(n, nb, 1);
        let edge = layout.domain_edge() as i64;
        let mut global = vec![0.0; (edge * edge) as usize];
        for v in global.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut phi = PatchGrid::from_global_fn(layout, true, |p| {
            global[(p[1] * edge + p[0]) as usize]
        });
        exchange_ghosts(&mut phi).map_err(|e| e.to_string())?;
        for bd in phi.patches() {
            for q in bd.boxx().iter() {
                let w = (q[1].rem_euclid(edge) * edge + q[0].rem_euclid(edge)) as usize;
                if bd.get(q).unwrap() != global[w] {
                    return Err(format!("mismatch at {q:?} (n={n}, nb={nb})"));
                }
            }
        }
    }
    Ok("50 random layouts match the flat periodic oracle".into())
}

fn verify_dense() -> std::result::Result<String, String> {
    for n in [1usize, 2, 4, 8] {
        let e = ol::build_laplace_ol(n, n + 2, &ol::FIVE_POINT_TAPS).map_err(|e| e.to_string())?;
        let dm = gridfuse_core::ol_to_dense(&e).map_err(|e| e.to_string())?;
        // Row sums of the periodic-free Laplace matrix are 0 (taps sum to 0).
        for r in 0..dm.rows {
            let s: f64 = (0..dm.cols).map(|c| dm.get(r, c)).sum();
            if s != 0.0 {
                return Err(format!("row {r} of n={n} operator sums to {s}"));
            }
        }
    }
    Ok("Laplace operator rows sum to zero for n in {1,2,4,8}".into())
}

fn verify_routes(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    for n in [2usize, 4, 8] {
        let layout = GridLayout::new(n, 1, 1);
        let cfg = ProblemConfig::new(layout, 1);
        let e = ol::build_poisson_ol(n, layout.m(), cfg.w, cfg.lambda, layout.h)
            .map_err(|e| e.to_string())?;
        let stages = lower(&e).map_err(|e| e.to_string())?;
        let prog = fuse(&stages).map_err(|e| e.to_string())?;
        let m2 = layout.m() * layout.m();
        for _ in 0..10 {
            let x: Vec<f64> = (0..m2 + n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = gridfuse_core::ol_eval(&e, &x).map_err(|e| e.to_string())?;
            let b = sigma_eval(&stages, &x).map_err(|e| e.to_string())?;
            let c = prog.run_vector(&x).map_err(|e| e.to_string())?;
            for i in 0..a.len() {
                let tol = 1e-12 * b[i].abs().max(1.0);
                if (a[i] - b[i]).abs() > tol || (c[i] - b[i]).abs() > tol {
                    return Err(format!("n={n} point {i}: {} / {} / {}", a[i], b[i], c[i]));
                }
            }
        }
    }
    Ok("operator tree, staged loops, fused loop agree to 1e-12".into())
}

fn verify_backends(seed: u64) -> std::result::Result<String, String> {
    let layout = GridLayout::new(16, 2, 1);
    let mut cfg = ProblemConfig::new(layout, 20);
    cfg.threads = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB2);
    let phi0 = PatchGrid::from_global_fn(layout, true, |_| rng.random_range(-1.0..1.0));
    let rho = seeded_rho(layout, seed);
    let (pr, rr) = run_reference(&cfg, &phi0, &rho).map_err(|e| e.to_string())?;
    let (pf, rf) = run_fused(&cfg, &phi0, &rho).map_err(|e| e.to_string())?;
    let diff = max_interior_diff(&pr, &pf);
    if diff > 1e-12 {
        return Err(format!("phi diff {diff:e} after 20 iterations"));
    }
    if rr.residuals != rf.residuals {
        return Err("residual sequences differ".into());
    }
    Ok(format!("20 iterations: phi diff {diff:e}, residuals identical"))
}

fn verify_order() -> std::result::Result<String, String> {
    let tau = std::f64::consts::TAU;
    let mut errs = Vec::new();
    for edge in [16usize, 32, 64] {
        let layout = GridLayout::new(edge, 1, 1);
        let h = layout.h;
        let f = move |p: gridfuse_core::Point2| {
            (tau * p[0] as f64 * h).sin() * (tau * p[1] as f64 * h).sin()
        };
        let mut phi = PatchGrid::from_global_fn(layout, true, f);
        let rho = PatchGrid::from_global_fn(layout, false, |p| -2.0 * tau * tau * f(p));
        exchange_ghosts(&mut phi).map_err(|e| e.to_string())?;
        errs.push(gridfuse_core::residual_maxnorm(&phi, &rho, h).map_err(|e| e.to_string())?);
    }
    for k in 0..errs.len() - 1 {
        let r = errs[k] / errs[k + 1];
        if !(3.6..=4.4).contains(&r) {
            return Err(format!("ratio {r:.2} outside [3.6, 4.4]"));
        }
    }
    Ok(format!(
        "residual ratios {:.2}, {:.2} across halvings (expect ~4)",
        errs[0] / errs[1],
        errs[1] / errs[2]
    ))
}

fn verify_emit() -> std::result::Result<String, String> {
    let cfg = ProblemConfig::new(GridLayout::new(64, 1, 1), 1);
    let p = gridfuse_core::exec::build_fused_program(&cfg).map_err(|e| e.to_string())?;
    let ec = EmitConfig::new(64, "fused_jacobi_64");
    let a = emit_c_scalar(&p, &ec).map_err(|e| e.to_string())?;
    let b = emit_c_scalar(&p, &ec).map_err(|e| e.to_string())?;
    if a != b {
        return Err("scalar emission differs across runs".into());
    }
    if !a.contains("i1 <= 4095") {
        return Err("loop bound 4095 missing at n=64".into());
    }
    Ok("byte-identical scalar emission with expected loop bound".into())
}
