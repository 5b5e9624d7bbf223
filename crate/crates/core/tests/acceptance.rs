//! Acceptance gate: one test per shipping criterion, each printing a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`.

use gridfuse_core::emit::{emit_c_openmp, emit_c_scalar, EmitConfig};
use gridfuse_core::exec::{
    build_fused_program, max_interior_diff, residual_maxnorm, run_fused, run_reference,
    ProblemConfig,
};
use gridfuse_core::grid::{exchange_ghosts, Box2, BoxData, GridLayout, PatchGrid, Point2};
use gridfuse_core::lowering::{fuse, lower};
use gridfuse_core::ol::{self, ol_eval, ol_to_dense, DenseMatrix};
use gridfuse_core::stencil::{laplacian_5pt, stencil_apply, Stencil};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn gate(idx: usize, name: &str, r: Result<String, String>) {
    match r {
        Ok(detail) => println!("[PASS] criterion {idx} ({name}): {detail}"),
        Err(detail) => {
            println!("[FAIL] criterion {idx} ({name}): {detail}");
            panic!("criterion {idx} ({name}) failed: {detail}");
        }
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn interior_mean(phi: &PatchGrid) -> f64 {
    let layout = phi.layout;
    let mut sum = 0.0;
    for idx in 0..phi.patches().len() {
        let (bi, bj) = (idx % layout.nb, idx / layout.nb);
        for p in layout.interior_box(bi, bj).iter() {
            sum += phi.patches()[idx].get(p).unwrap();
        }
    }
    sum / (layout.domain_edge() * layout.domain_edge()) as f64
}

fn random_phi(layout: GridLayout, rng: &mut ChaCha8Rng) -> PatchGrid {
    PatchGrid::from_global_fn(layout, true, |_| rng.random_range(-1.0..1.0))
}

fn random_rho(layout: GridLayout, rng: &mut ChaCha8Rng) -> PatchGrid {
    PatchGrid::from_global_fn(layout, false, |_| rng.random_range(-1.0..1.0))
}

fn zero_mean_rho(layout: GridLayout, rng: &mut ChaCha8Rng) -> PatchGrid {
    let edge = layout.domain_edge();
    let mut vals = vec![0.0; edge * edge];
    for v in vals.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    PatchGrid::from_global_fn(layout, false, |p| {
        vals[(p[1] as usize) * edge + p[0] as usize] - mean
    })
}

/// Criterion 1: the three evaluation routes for one pipeline application —
/// operator-tree interpretation, staged loop interpretation, and the fused
/// loop — agree per patch on seeded random data.
#[test]
fn criterion_1_oracle_chain_equivalence() {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let mut cases = 0usize;
        for n in [2usize, 4, 8, 16] {
            for nb in [1usize, 4] {
                let layout = GridLayout::new(n, nb, 1);
                let cfg = ProblemConfig::new(layout, 1);
                let e = ol::build_poisson_ol(n, layout.m(), cfg.w, cfg.lambda, layout.h)
                    .map_err(|e| e.to_string())?;
                let stages = lower(&e).map_err(|e| e.to_string())?;
                let prog = fuse(&stages).map_err(|e| e.to_string())?;
                for seed in 0..25u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + n as u64 * 10 + nb as u64);
                    let mut phi = random_phi(layout, &mut rng);
                    let rho = random_rho(layout, &mut rng);
                    exchange_ghosts(&mut phi).map_err(|e| e.to_string())?;
                    for idx in 0..phi.patches().len() {
                        let mut x = phi.patches()[idx].values().to_vec();
                        x.extend_from_slice(rho.patches()[idx].values());
                        let a = ol_eval(&e, &x).map_err(|e| e.to_string())?;
                        let b = gridfuse_core::sigma_eval(&stages, &x).map_err(|e| e.to_string())?;
                        let c = prog.run_vector(&x).map_err(|e| e.to_string())?;
                        let n2 = n * n;
                        for i in 0..n2 {
                            if !rel_close(a[i], b[i], 1e-12) || !rel_close(c[i], b[i], 1e-12) {
                                return Err(format!(
                                    "n={n} nb={nb} seed={seed} patch={idx} point {i}: \
                                     ol={} sigma={} fused={}",
                                    a[i], b[i], c[i]
                                ));
                            }
                        }
                        if a[n2].to_bits() != b[n2].to_bits() || c[n2].to_bits() != b[n2].to_bits() {
                            return Err(format!(
                                "n={n} nb={nb} seed={seed} patch={idx} residual not bit-identical: \
                                 ol={} sigma={} fused={}",
                                a[n2], b[n2], c[n2]
                            ));
                        }
                        cases += 1;
                    }
                }
            }
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 60.0 {
            return Err(format!("runtime {secs:.1} s exceeds 60 s budget"));
        }
        Ok(format!(
            "3 routes agree (1e-12 rel, residual bit-exact) over {cases} patch cases in {secs:.1} s"
        ))
    };
    gate(1, "oracle-chain equivalence", run());
}

/// Criterion 2: reference (per-stage arrays) and fused executors match over a
/// full 100-iteration solve on a 4x4 block decomposition of a 256^2 domain.
#[test]
fn criterion_2_backend_equivalence_at_scale() {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let layout = GridLayout::new(64, 4, 1);
        let cfg = ProblemConfig::new(layout, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let phi0 = random_phi(layout, &mut rng);
        let rho = zero_mean_rho(layout, &mut rng);
        let (phi_r, rep_r) = run_reference(&cfg, &phi0, &rho).map_err(|e| e.to_string())?;
        let (phi_f, rep_f) = run_fused(&cfg, &phi0, &rho).map_err(|e| e.to_string())?;
        let diff = max_interior_diff(&phi_r, &phi_f);
        if diff > 1e-12 {
            return Err(format!("max elementwise phi difference {diff:e} > 1e-12"));
        }
        if rep_r.residuals != rep_f.residuals {
            let k = rep_r
                .residuals
                .iter()
                .zip(&rep_f.residuals)
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(format!(
                "residual sequences differ first at iteration {k}: {} vs {}",
                rep_r.residuals[k], rep_f.residuals[k]
            ));
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 120.0 {
            return Err(format!("runtime {secs:.1} s exceeds 120 s budget"));
        }
        Ok(format!(
            "100 iterations at 256^2 (nb=4): max phi diff {diff:e}, \
             100 residuals identical, {secs:.1} s"
        ))
    };
    gate(2, "backend equivalence at scale", run());
}

/// Independent dense form of a stencil straight from its defining sum
/// y_i = sum_j alpha_j x_{i+j}; no shared code with the operator builders.
fn brute_force_matrix(s: &Stencil<2>, src: Box2, dest: Box2) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(dest.size(), src.size());
    for (r, i) in dest.iter().enumerate() {
        for (j, a) in s.taps() {
            let q = i + *j;
            let c = ((q[0] - src.lo()[0]) + (q[1] - src.lo()[1]) * src.extent(0) as i64) as usize;
            m.set(r, c, m.get(r, c) + a);
        }
    }
    m
}

/// Criterion 3: the dense form of the built Laplace operator equals the
/// brute-force stencil matrix exactly (integer coefficients).
#[test]
fn criterion_3_dense_matrix_equivalence() {
    let run = || -> Result<String, String> {
        let lap = laplacian_5pt();
        for n in [1usize, 2, 4, 8] {
            let e = ol::build_laplace_ol(n, n + 2, &ol::FIVE_POINT_TAPS)
                .map_err(|e| e.to_string())?;
            let got = ol_to_dense(&e).map_err(|e| e.to_string())?;
            let dest = Box2::cube(n as i64);
            let want = brute_force_matrix(&lap, dest.grow(1), dest);
            if got != want {
                return Err(format!("dense operator differs from stencil matrix at n={n}"));
            }
        }
        Ok("Laplace operator == brute-force matrix, exact, n in {1,2,4,8}".into())
    };
    gate(3, "dense-matrix stencil equivalence", run());
}

/// Criterion 4: the residual of the sampled analytic pair
/// phi = sin(2 pi x) sin(2 pi y), rho = -8 pi^2 phi is pure truncation error
/// and must shrink ~4x per grid-halving (second-order accuracy).
#[test]
fn criterion_4_truncation_order() {
    let run = || -> Result<String, String> {
        let tau = std::f64::consts::TAU;
        let mut errs = Vec::new();
        for edge in [16usize, 32, 64] {
            let layout = GridLayout::new(edge, 1, 1);
            let h = layout.h;
            let f = |p: Point2| (tau * p[0] as f64 * h).sin() * (tau * p[1] as f64 * h).sin();
            let mut phi = PatchGrid::from_global_fn(layout, true, f);
            let rho = PatchGrid::from_global_fn(layout, false, |p| -2.0 * tau * tau * f(p));
            exchange_ghosts(&mut phi).map_err(|e| e.to_string())?;
            errs.push(residual_maxnorm(&phi, &rho, h).map_err(|e| e.to_string())?);
        }
        let mut ratios = Vec::new();
        for k in 0..errs.len() - 1 {
            let r = errs[k] / errs[k + 1];
            if !(3.6..=4.4).contains(&r) {
                return Err(format!(
                    "error ratio {r:.3} outside [3.6, 4.4] (errors {errs:?})"
                ));
            }
            ratios.push(r);
        }
        Ok(format!(
            "second-order: errors {:?} shrink by {:.2}x, {:.2}x per halving",
            errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
            ratios[0],
            ratios[1]
        ))
    };
    gate(4, "truncation order", run());
}

/// Criterion 5: structural shape of the emitted C at n=64, and determinism.
#[test]
fn criterion_5_emitted_code_structure() {
    let run = || -> Result<String, String> {
        let cfg = ProblemConfig::new(GridLayout::new(64, 1, 1), 1);
        let p = build_fused_program(&cfg).map_err(|e| e.to_string())?;
        let ec = EmitConfig::new(64, "fused_jacobi_64");
        let scalar = emit_c_scalar(&p, &ec).map_err(|e| e.to_string())?;

        if !scalar.contains("i1 <= 4095") {
            return Err("scalar emission lacks loop bound 4095".into());
        }
        for off in [1i64, 66, 67, 68, 133] {
            if !scalar.contains(&format!("+ {off})")) {
                return Err(format!("scalar emission lacks window offset +{off}"));
            }
        }
        if scalar.matches("for (").count() != 1 {
            return Err("scalar emission must contain exactly one loop".into());
        }
        // Every subscript must address a kernel argument, never a temp array.
        for (k, _) in scalar.match_indices('[') {
            let head = &scalar[..k];
            if !(head.ends_with('Y') || head.ends_with('X') || head.ends_with("rhs")) {
                return Err(format!("unexpected array access near byte {k}"));
            }
        }
        let omp = emit_c_openmp(&p, &ec).map_err(|e| e.to_string())?;
        if !omp.contains("#pragma omp parallel") || !omp.contains("reduction(max") {
            return Err("OpenMP emission lacks parallel pragma or max reduction".into());
        }
        if scalar != emit_c_scalar(&p, &ec).map_err(|e| e.to_string())?
            || omp != emit_c_openmp(&p, &ec).map_err(|e| e.to_string())?
        {
            return Err("emission is not byte-identical across runs".into());
        }
        Ok("bound 4095, offsets {+1,+66,+67,+68,+133}, one loop, no temp arrays, \
            OpenMP pragma + max reduction, deterministic"
            .into())
    };
    gate(5, "emitted-code structure", run());
}

/// Criterion 6: fused executor is faster than the reference on the
/// fixed-100-iteration sweep; gated at 1.2x on the largest size.
#[test]
fn criterion_6_fused_speedup() {
    let run = || -> Result<String, String> {
        let mut lines = Vec::new();
        let mut largest_speedup = 0.0f64;
        for (k, n) in [64usize, 128, 256].into_iter().enumerate() {
            let layout = GridLayout::new(n, 4, 1);
            let cfg = ProblemConfig::new(layout, 100);
            let mut rng = ChaCha8Rng::seed_from_u64(7 + n as u64);
            let phi0 = random_phi(layout, &mut rng);
            let rho = zero_mean_rho(layout, &mut rng);
            let median = |f: &dyn Fn() -> Result<f64, String>| -> Result<f64, String> {
                f()?; // warmup, discarded
                let mut t = [f()?, f()?, f()?];
                t.sort_by(f64::total_cmp);
                Ok(t[1])
            };
            let t_ref = median(&|| {
                run_reference(&cfg, &phi0, &rho)
                    .map(|(_, r)| r.wall_time)
                    .map_err(|e| e.to_string())
            })?;
            let t_fus = median(&|| {
                run_fused(&cfg, &phi0, &rho)
                    .map(|(_, r)| r.wall_time)
                    .map_err(|e| e.to_string())
            })?;
            let speedup = t_ref / t_fus;
            lines.push(format!(
                "n={n} nb=4: reference {t_ref:.3} s, fused {t_fus:.3} s, {speedup:.2}x"
            ));
            if k == 2 {
                largest_speedup = speedup;
                if t_fus > t_ref {
                    return Err(format!("fused slower than reference at n={n}: {}", lines[k]));
                }
            }
        }
        let detail = lines.join("; ");
        if largest_speedup < 1.2 {
            return Err(format!("speedup {largest_speedup:.2}x < 1.2x on largest size; {detail}"));
        }
        Ok(detail)
    };
    gate(6, "fused-vs-reference performance", run());
}

/// Criterion 7: randomized property suites, 200 trials each.
#[test]
fn criterion_7_property_suites() {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);

        // Ghost-exchange periodicity against a flat global oracle.
        for trial in 0..200 {
            let n = rng.random_range(1usize..6);
            let nb = rng.random_range(1usize..4);
            let layout = GridLayout::new(n, nb, 1);
            let edge = layout.domain_edge() as i64;
            let mut global = vec![0.0; (edge * edge) as usize];
            for v in global.iter_mut() {
                *v = rng.random_range(-500.0..500.0);
            }
            let mut phi = PatchGrid::from_global_fn(layout, true, |p| {
                global[(p[1] * edge + p[0]) as usize]
            });
            exchange_ghosts(&mut phi).map_err(|e| e.to_string())?;
            for bd in phi.patches() {
                for q in bd.boxx().iter() {
                    let w = (q[1].rem_euclid(edge) * edge + q[0].rem_euclid(edge)) as usize;
                    if bd.get(q).unwrap() != global[w] {
                        return Err(format!("ghost periodicity trial {trial} at {q:?}"));
                    }
                }
            }
        }

        // Stencil linearity and translation equivariance.
        let lap = laplacian_5pt();
        for trial in 0..200 {
            let b = Box2::cube(6).grow(1);
            let dest = Box2::cube(6);
            let (alpha, beta) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let x = BoxData::from_fn(b, |_| rng.random_range(-1.0..1.0));
            let y = BoxData::from_fn(b, |_| rng.random_range(-1.0..1.0));
            let combo =
                BoxData::from_fn(b, |p| alpha * x.get(p).unwrap() + beta * y.get(p).unwrap());
            let sxy = stencil_apply(&lap, &combo, dest).map_err(|e| e.to_string())?;
            let sx = stencil_apply(&lap, &x, dest).map_err(|e| e.to_string())?;
            let sy = stencil_apply(&lap, &y, dest).map_err(|e| e.to_string())?;
            for p in dest.iter() {
                let want = alpha * sx.get(p).unwrap() + beta * sy.get(p).unwrap();
                if !rel_close(sxy.get(p).unwrap(), want, 1e-12) {
                    return Err(format!("stencil linearity trial {trial} at {p:?}"));
                }
            }

            let shift = Point2::xy(rng.random_range(-10i64..10), rng.random_range(-10i64..10));
            let xs = BoxData::from_values(b.shift(shift), x.values().to_vec());
            let out_s =
                stencil_apply(&lap, &xs, dest.shift(shift)).map_err(|e| e.to_string())?;
            for p in dest.iter() {
                if sx.get(p).unwrap() != out_s.get(p + shift).unwrap() {
                    return Err(format!("translation equivariance trial {trial} at {p:?}"));
                }
            }
        }

        // Ordinal round-trip.
        for trial in 0..200 {
            let lo = Point2::xy(rng.random_range(-10i64..10), rng.random_range(-10i64..10));
            let hi = lo + Point2::xy(rng.random_range(0i64..8), rng.random_range(0i64..8));
            let b = Box2::new(lo, hi);
            for k in 0..b.size() {
                let p = b.point_at(k).unwrap();
                if b.ordinal(p).unwrap() != k {
                    return Err(format!("ordinal round-trip trial {trial} ordinal {k}"));
                }
            }
        }

        // Constant preservation and mean preservation of the Jacobi update.
        for trial in 0..200 {
            let n = rng.random_range(2usize..6);
            let nb = rng.random_range(1usize..3);
            let layout = GridLayout::new(n, nb, 1);
            let cfg = ProblemConfig::new(layout, rng.random_range(1usize..4));

            let c = rng.random_range(-5.0..5.0);
            let phi0 = PatchGrid::from_global_fn(layout, true, |_| c);
            let rho0 = PatchGrid::zeros(layout, false);
            for runner in [run_reference, run_fused] {
                let (phi, _) = runner(&cfg, &phi0, &rho0).map_err(|e| e.to_string())?;
                for idx in 0..phi.patches().len() {
                    let (bi, bj) = (idx % layout.nb, idx / layout.nb);
                    for p in layout.interior_box(bi, bj).iter() {
                        if phi.patches()[idx].get(p).unwrap() != c {
                            return Err(format!("constant not preserved, trial {trial}"));
                        }
                    }
                }
            }

            let phi0 = random_phi(layout, &mut rng);
            let rho = zero_mean_rho(layout, &mut rng);
            let before = interior_mean(&phi0);
            for runner in [run_reference, run_fused] {
                let (phi, _) = runner(&cfg, &phi0, &rho).map_err(|e| e.to_string())?;
                let after = interior_mean(&phi);
                if (after - before).abs() > 1e-10 {
                    return Err(format!(
                        "mean drift {:e} > 1e-10, trial {trial}",
                        (after - before).abs()
                    ));
                }
            }
        }

        Ok("ghost periodicity, linearity, translation equivariance, ordinal round-trip, \
            constant and mean preservation: 200 trials each"
            .into())
    };
    gate(7, "property suites", run());
}
