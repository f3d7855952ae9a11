//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p iforge --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use iforge::commands::run_check_parallel;
use iforge_core::theoremlab::{CheckId, CheckReport, CheckSpec, CorrelationResult};

const SEED: u64 = 2024;

type Extra = fn(&Path) -> Result<String, String>;

struct Criterion {
    name: &'static str,
    checks: Vec<CheckSpec>,
    budget: Duration,
    extra: Option<Extra>,
}

fn spec(id: CheckId) -> CheckSpec {
    CheckSpec::default_for(id, SEED)
}

fn criteria() -> Vec<Criterion> {
    use CheckId::*;
    let secs = Duration::from_secs;
    let c = |name, checks, budget| Criterion { name, checks, budget, extra: None };
    vec![
        c("1 shapley axioms", vec![spec(A1Shapley)], secs(60)),
        c("2 interaction forms and sum identity", vec![spec(A2Forms)], secs(60)),
        c("3 utility decomposition", vec![spec(T1)], secs(600)),
        c("4 closed-form multi-step dynamics", vec![spec(L1ClosedForm), spec(C1Infinite)], secs(600)),
        c("5 spectral interaction and PSD hessians", vec![spec(L2Spectral), spec(C2Psd)], secs(600)),
        c("6 multi-step vs single-step", vec![spec(TMultiSingle), CheckSpec::multi_single_same_norm(SEED)], secs(600)),
        c("7 MI / PI / RAP / LinBP / IL", vec![spec(P1), spec(P4), spec(P6), spec(P2), spec(P7)], secs(600)),
        c("8 balance of off-class probabilities", vec![spec(T2Balance), spec(T2Grid)], secs(600)),
        c("9 variance reduction", vec![spec(P8), spec(P9)], secs(600)),
        c("10 adversarial training and IA finetuning", vec![spec(P3), spec(P5)], secs(600)),
        c("11 gradient and hessian vs finite differences", vec![spec(FdGrad)], secs(600)),
        Criterion {
            name: "12 interaction-reduced attack",
            checks: vec![spec(IrTrend)],
            budget: secs(600),
            extra: Some(ir_lambda_zero_matches_pgd),
        },
        Criterion {
            name: "13 transfer utility vs interaction",
            checks: vec![spec(H1Correlation)],
            budget: secs(300),
            extra: Some(correlate_scatter),
        },
    ]
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["iforge"];
    argv.extend_from_slice(args);
    match iforge::cli_run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", argv.join(" "))),
    }
}

/// The CLI `ir` attack at λ = 0 writes the same perturbation bytes as `pgd`.
fn ir_lambda_zero_matches_pgd(dir: &Path) -> Result<String, String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    cli(&[
        "gen-data",
        "--generator",
        "grid-texture",
        "--classes",
        "3",
        "--samples",
        "40",
        "--height",
        "6",
        "--width",
        "6",
        "--seed",
        "7",
        "--out",
        &p("grid.json"),
    ])?;
    cli(&[
        "train",
        "--data",
        &p("grid.json"),
        "--hidden",
        "12",
        "--epochs",
        "5",
        "--lr",
        "0.02",
        "--seed",
        "7",
        "--out",
        &p("net.json"),
    ])?;
    let common = [
        "--net",
        &p("net.json"),
        "--data",
        &p("grid.json"),
        "--index",
        "3",
        "--norm",
        "linf",
        "--epsilon",
        "0.1",
        "--beta",
        "0.5",
        "--m",
        "20",
    ];
    let mut pgd = vec!["attack", "--method", "pgd", "--out"];
    let pgd_out = p("pgd");
    pgd.push(&pgd_out);
    pgd.extend_from_slice(&common);
    cli(&pgd)?;
    let ir_out = p("ir");
    let mut ir = vec!["attack", "--method", "ir", "--lambda", "0", "--out", &ir_out];
    ir.extend_from_slice(&common);
    cli(&ir)?;
    let a = std::fs::read(dir.join("pgd/delta.dat")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.join("ir/delta.dat")).map_err(|e| e.to_string())?;
    if a == b {
        Ok(format!("ir(λ=0) delta.dat byte-identical to pgd ({} bytes)", a.len()))
    } else {
        Err("ir(λ=0) and pgd perturbations differ".into())
    }
}

/// `iforge correlate` reproduces the check's sign and writes the scatter file.
fn correlate_scatter(dir: &Path) -> Result<String, String> {
    let out = dir.join("correlate");
    cli(&["correlate", "--seed", &SEED.to_string(), "--out", &out.to_string_lossy()])?;
    let scatter = std::fs::read_to_string(out.join("scatter.dat")).map_err(|e| e.to_string())?;
    let rows = scatter.lines().filter(|l| !l.starts_with('#')).count();
    let res: CorrelationResult = iforge::io::read_json(&out.join("correlation.json")).map_err(|e| e.to_string())?;
    if rows != res.cells.len() {
        return Err(format!("scatter.dat has {rows} rows for {} cells", res.cells.len()));
    }
    if res.degenerate || res.pearson_r.is_nan() || res.pearson_r >= 0.0 {
        return Err(format!("pearson r = {} (degenerate: {})", res.pearson_r, res.degenerate));
    }
    Ok(format!("pearson r = {:.4} over {rows} cells, scatter.dat written", res.pearson_r))
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().build().expect("thread pool");
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for (k, crit) in criteria().into_iter().enumerate() {
        let start = Instant::now();
        let mut notes = Vec::new();
        let mut ok = true;
        for spec in &crit.checks {
            match run_check_parallel(spec, &pool) {
                Ok(r) => {
                    ok &= r.passed;
                    notes.push(detail(&r));
                }
                Err(e) => {
                    ok = false;
                    notes.push(format!("{}: error {e}", spec.id));
                }
            }
        }
        if let Some(extra) = crit.extra {
            let sub = dir.path().join(format!("c{k}"));
            match extra(&sub) {
                Ok(msg) => notes.push(msg),
                Err(msg) => {
                    ok = false;
                    notes.push(msg);
                }
            }
        }
        let elapsed = start.elapsed();
        if elapsed > crit.budget {
            ok = false;
            notes.push(format!("over the {:?} budget", crit.budget));
        }
        failed += usize::from(!ok);
        println!(
            "{} criterion {} [{:.1}s]: {}",
            if ok { "PASS" } else { "FAIL" },
            crit.name,
            elapsed.as_secs_f64(),
            notes.join("; ")
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

fn detail(r: &CheckReport) -> String {
    let variant = match r.metadata.get("fairness") {
        Some(f) => format!(" ({f})"),
        None => String::new(),
    };
    format!(
        "{}{variant} {}/{} (worst gap {:.2e}, tol {:.0e}, rate {:.3})",
        r.id,
        r.eligible - r.failures,
        r.eligible,
        r.worst_gap,
        r.tolerance,
        r.pass_rate
    )
}
