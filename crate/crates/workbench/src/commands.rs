//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use iforge_core::attacks::{
    self, AttackConfig, AttackResult, FrozenLoss, IrConfig, Norm, Objective, PiRedistribution, RapConfig, Steps,
};
use iforge_core::data::{gen_dataset, DatasetSpec, Generator, SyntheticDataset};
use iforge_core::densela;
use iforge_core::gametheory::{
    self, CoalitionGame, ContextSampling, FastSum, InteractionReport, Model, PairSampling, UnitPartition, ValueKind,
    MAX_EXACT_UNITS,
};
use iforge_core::netcore::{self, linearize, Arch, LossKind, ReluNet};
use iforge_core::seed::derive;
use iforge_core::theoremlab::{self, CheckId, CheckReport, CheckSpec, CorrelationConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::*;
use crate::io::{self, fmt_f64, out_file};
use crate::{Outcome, WbError};

pub fn run(cmd: &Command) -> Result<Outcome, WbError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => verify(a),
        Command::Correlate(a) => correlate(a),
        Command::Report(a) => report(a),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, WbError> {
    p.as_deref().ok_or_else(|| WbError::Usage(format!("missing --{flag}")))
}

fn usage(msg: impl Into<String>) -> WbError {
    WbError::Usage(msg.into())
}

/// Parses a kebab-case enum name through its serde spelling.
fn parse_name<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, WbError> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| usage(format!("unknown {what} `{s}`")))
}

fn sample(data: &SyntheticDataset, index: usize) -> Result<(&[f64], usize), WbError> {
    if index >= data.len() {
        return Err(usage(format!("--index {index} out of range (dataset has {} samples)", data.len())));
    }
    Ok((&data.inputs[index], data.labels[index]))
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome, WbError> {
    let generator = match a.generator.as_str() {
        "gaussian-blobs" => {
            Generator::GaussianBlobs { classes: a.classes, dim: a.dim, spread: a.spread, noise: a.noise }
        }
        "ring" => Generator::Ring { classes: a.classes, noise: a.noise },
        "grid-texture" => {
            Generator::GridTexture { classes: a.classes, height: a.height, width: a.width, noise: a.noise }
        }
        other => return Err(usage(format!("unknown generator `{other}` (gaussian-blobs | ring | grid-texture)"))),
    };
    let data = gen_dataset(&DatasetSpec { generator, samples: a.samples, seed: a.seed })?;
    io::write_json(&a.out, &data)?;
    if data.dim() == 2 {
        // one plot series per class next to the JSON
        let stem = a.out.with_extension("");
        for k in 0..data.classes {
            let pts: Vec<(f64, f64)> =
                data.inputs.iter().zip(&data.labels).filter(|(_, &y)| y == k).map(|(x, _)| (x[0], x[1])).collect();
            io::write_dat(&PathBuf::from(format!("{}.class{k}.dat", stem.display())), ("x0", "x1"), &pts)?;
        }
    }
    println!("wrote {} samples ({} classes, dim {}) to {}", data.len(), data.classes, data.dim(), a.out.display());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct TrainSummary {
    arch: Arch,
    dims: Vec<usize>,
    train_samples: usize,
    train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
    adv_epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ia: Option<attacks::IaReport>,
}

fn train(a: &TrainArgs) -> Result<Outcome, WbError> {
    let data: SyntheticDataset = io::read_json(required(&a.data, "data")?)?;
    let arch: Arch = parse_name("arch", &a.arch)?;
    let (train, test) =
        if a.train_split > 0 { data.split(a.train_split) } else { (data.clone(), data.split(data.len()).1) };
    if a.sigmoid && data.classes != 2 {
        return Err(usage("--sigmoid needs two-class data"));
    }
    let mut dims = vec![data.dim()];
    dims.extend(&a.hidden);
    dims.push(if a.sigmoid { 1 } else { data.classes });
    let init = ReluNet::random(arch, &dims, derive(a.seed, 0))?;
    // the same shuffle seed for both paths: epsilon 0 is ordinary training
    let net = if a.adv_epsilon > 0.0 {
        let mut inner = AttackConfig::new(a.adv_epsilon / 4.0, a.adv_steps);
        inner.norm = Norm::L2;
        inner.epsilon = a.adv_epsilon;
        attacks::adversarial_train(&init, &train.inputs, &train.labels, &inner, a.lr, a.epochs, derive(a.seed, 1))?
    } else {
        let mut n = init;
        netcore::train_sgd(&mut n, &train.inputs, &train.labels, a.lr, a.epochs, derive(a.seed, 1), &mut |_, x, _| {
            Ok(vec![0.0; x.len()])
        })?;
        n
    };
    let (net, ia) = if a.ia_steps > 0 {
        let (n, rep) =
            attacks::ia_finetune(&net, &train.inputs, &train.labels, a.ia_lr, a.ia_steps, derive(a.seed, 2))?;
        (n, Some(rep))
    } else {
        (net, None)
    };
    io::save_net(&a.out, &net)?;
    let summary = TrainSummary {
        arch,
        dims,
        train_samples: train.len(),
        train_accuracy: netcore::accuracy(&net, &train.inputs, &train.labels)?,
        test_accuracy: if test.is_empty() { None } else { Some(netcore::accuracy(&net, &test.inputs, &test.labels)?) },
        adv_epsilon: a.adv_epsilon,
        ia,
    };
    io::write_json(&PathBuf::from(format!("{}.train.json", a.out.with_extension("").display())), &summary)?;
    print!("wrote {}: train accuracy {:.4}", a.out.display(), summary.train_accuracy);
    match summary.test_accuracy {
        Some(t) => println!(", test accuracy {t:.4}"),
        None => println!(),
    }
    Ok(Outcome::Ok)
}

fn attack(a: &AttackArgs) -> Result<Outcome, WbError> {
    let net = io::load_net(required(&a.net, "net")?)?;
    let data: SyntheticDataset = io::read_json(required(&a.data, "data")?)?;
    let (x, y) = sample(&data, a.index)?;
    let method: attacks::Method = parse_name("method", &a.method)?;
    let mut cfg = AttackConfig::new(a.alpha.unwrap_or(a.beta / a.m.max(1) as f64), a.m);
    cfg.norm = parse_name("norm", &a.norm)?;
    cfg.epsilon = a.epsilon;
    cfg.sign = a.sign;
    cfg.seed = a.seed;
    cfg.record = a.record;
    let loss = LossKind::for_net(&net, y);
    let lin = linearize(&net, x)?;
    let obj = FrozenLoss::new(&lin, x, loss)?;
    let shape = || data.shape.ok_or_else(|| usage(format!("method `{}` needs image data (grid-texture)", a.method)));
    use attacks::Method as M;
    let result = match method {
        M::Single => attacks::single_step(&obj, a.beta)?,
        M::Multi => attacks::multi_step(&obj, &cfg)?,
        M::Pgd => attacks::pgd(&obj, &cfg)?,
        M::ClosedForm => {
            let eig = densela::spectral(&obj.hessian()?, &obj.gradient(&vec![0.0; x.len()])?)?;
            let steps = if a.infinite { Steps::Infinite } else { Steps::Finite(a.m) };
            attacks::closed_form_perturbation(&eig, &cfg, steps)?
        }
        M::Mi => attacks::mi_attack(&obj, &cfg)?,
        M::MiNormalized => attacks::mi_attack_normalized(&obj, &cfg, a.mu)?,
        M::Vr => attacks::vr_attack(&lin, x, loss, a.sigma, a.samples, a.seed, a.eta)?,
        M::Pi => {
            let (h, w) = shape()?;
            let m1 = a.m1.unwrap_or(a.m / 2);
            if m1 > a.m {
                return Err(usage("--m1 exceeds --m"));
            }
            let mut first = cfg.clone();
            first.m = m1.max(1);
            let d1 = if m1 == 0 { vec![0.0; x.len()] } else { attacks::multi_step(&obj, &first)?.delta };
            let g1 = obj.gradient(&d1)?;
            let taus = PiRedistribution::exceedance(&d1, &g1, cfg.alpha, a.pi_epsilon)?;
            let pi = PiRedistribution::new(h, w, taus, a.pi_k)?;
            attacks::pi_attack(&obj, &cfg, &pi, m1)?
        }
        M::Rap => attacks::rap_attack(&obj, &cfg, &RapConfig { m_r: a.m_r, epsilon_r: a.epsilon_r })?,
        M::Il => {
            let target = attacks::multi_step(&obj, &cfg)?.l2_norm;
            let base = AttackConfig { alpha: cfg.alpha / a.il_ratio, ..cfg.clone() };
            attacks::il_attack(&obj, &base, target)?
        }
        M::Linbp => attacks::linbp_attack(&net, x, loss, &cfg, a.from)?,
        M::Sgm => attacks::sgm_attack(&net, x, loss, &cfg, a.gamma)?,
        M::Ir => {
            let (h, w) = shape()?;
            cfg.sign = true;
            let ir = IrConfig { lambda: a.lambda, grid: a.grid, pair_samples: a.pair_samples, context_samples: 1 };
            attacks::ir_attack(&obj, &cfg, &ir, h, w)?
        }
    };
    let result = result.with_interactions(&obj.hessian()?)?;
    io::write_json(&out_file(&a.out, "attack.json"), &result)?;
    let pts: Vec<(f64, f64)> = result.delta.iter().enumerate().map(|(i, d)| (i as f64, *d)).collect();
    io::write_dat(&out_file(&a.out, "delta.dat"), ("index", "delta"), &pts)?;
    let before = obj.value(&vec![0.0; x.len()])?;
    let after = obj.value(&result.delta)?;
    println!(
        "{}: |delta|_2 {:.6e}, |delta|_inf {:.6e}, loss {:.6e} -> {:.6e}, interactions {:.6e}",
        a.method,
        result.l2_norm,
        result.linf_norm,
        before,
        after,
        result.interactions_sum.unwrap_or(f64::NAN)
    );
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct AnalyzeOutput<'a> {
    index: usize,
    n_units: usize,
    value: ValueKind,
    frozen: bool,
    fast_sum: FastSum,
    report: &'a InteractionReport,
}

fn analyze(a: &AnalyzeArgs) -> Result<Outcome, WbError> {
    let net = io::load_net(required(&a.net, "net")?)?;
    let data: SyntheticDataset = io::read_json(required(&a.data, "data")?)?;
    let res: AttackResult = io::read_json(required(&a.attack, "attack")?)?;
    let (x, y) = sample(&data, a.index)?;
    if res.delta.len() != x.len() {
        return Err(usage(format!("attack delta has {} entries, sample has {}", res.delta.len(), x.len())));
    }
    let partition = if a.grid > 0 {
        let (h, w) = data.shape.ok_or_else(|| usage("--grid needs image data (grid-texture)"))?;
        gametheory::make_grid_partition(h, w, a.grid)?
    } else {
        UnitPartition::singletons(x.len())
    };
    let kind: ValueKind = parse_name("value", &a.value)?;
    let lin = linearize(&net, x)?;
    let model = if a.frozen { Model::Linear(&lin) } else { Model::Net(&net) };
    let game = CoalitionGame::new(model, x.to_vec(), res.delta.clone(), partition, kind, LossKind::for_net(&net, y))?;
    let n = game.partition.n_units();
    let report = if a.pair_samples.is_none() && a.context_samples.is_none() {
        if n > MAX_EXACT_UNITS {
            return Err(usage(format!(
                "{n} units exceed the exact limit of {MAX_EXACT_UNITS}; use --grid or --pair-samples/--context-samples"
            )));
        }
        gametheory::interaction_report_exact(&game)?
    } else {
        let pairs = a.pair_samples.map_or(PairSampling::All, PairSampling::Random);
        let contexts = a.context_samples.map_or(ContextSampling::Exact, ContextSampling::Random);
        gametheory::interaction_report_sampled(&game, pairs, contexts, a.seed)?
    };
    let fast = gametheory::sum_interactions_fast(&game);
    let doc =
        AnalyzeOutput { index: a.index, n_units: n, value: kind, frozen: a.frozen, fast_sum: fast, report: &report };
    io::write_json(&out_file(&a.out, "interactions.json"), &doc)?;
    io::write_interaction_csv(&out_file(&a.out, "pairwise.csv"), &report)?;
    if let Some(profile) = &report.order_profile {
        let pts: Vec<(f64, f64)> = profile.iter().enumerate().map(|(s, v)| (s as f64, *v)).collect();
        io::write_dat(&out_file(&a.out, "order_profile.dat"), ("order", "interaction"), &pts)?;
    }
    println!(
        "{n} units: off-diagonal sum {:.6e} (fast {:.6e}), total {:.6e}",
        report.off_diagonal_sum, fast.off_diagonal, report.sum_all
    );
    Ok(Outcome::Ok)
}

fn parse_params(raw: &[String]) -> Result<BTreeMap<String, f64>, WbError> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--param `{kv}` is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| usage(format!("--param `{kv}`: value is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// Check specs in command-line order with overrides applied.
pub fn build_specs(a: &VerifyArgs) -> Result<Vec<CheckSpec>, WbError> {
    let ids: Vec<CheckId> = if a.all {
        CheckId::ALL.to_vec()
    } else {
        a.check.iter().map(|s| s.parse::<CheckId>()).collect::<Result<_, _>>()?
    };
    if ids.is_empty() {
        return Err(usage("give --check ID (repeatable) or --all"));
    }
    let params = parse_params(&a.param)?;
    ids.into_iter()
        .map(|id| {
            let same_norm = params.get("same_norm").is_some_and(|v| *v != 0.0);
            let mut spec = if id == CheckId::TMultiSingle && same_norm {
                CheckSpec::multi_single_same_norm(a.seed)
            } else {
                CheckSpec::default_for(id, a.seed)
            };
            if let Some(t) = a.trials {
                spec.trials = t;
            }
            if let Some(t) = a.tolerance {
                spec.tolerance = t;
            }
            for (k, v) in &params {
                spec = spec.with_param(k, *v);
            }
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Runs one check with trials spread over `pool`; the report does not
/// depend on the thread count.
pub fn run_check_parallel(spec: &CheckSpec, pool: &rayon::ThreadPool) -> Result<CheckReport, WbError> {
    let outcomes = pool.install(|| {
        (0..spec.trials).into_par_iter().map(|i| theoremlab::run_trial(spec, i)).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(theoremlab::reduce(spec, outcomes))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, WbError> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| usage(format!("thread pool: {e}")))
}

fn report_stem(spec: &CheckSpec) -> String {
    let mut s = spec.id.as_str().to_string();
    for (k, v) in &spec.params {
        s.push_str(&format!(".{k}={v}"));
    }
    s
}

const SUMMARY_HEADER: [&str; 9] =
    ["id", "mode", "trials", "eligible", "failures", "pass_rate", "worst_gap", "tolerance", "passed"];

fn summary_row(r: &CheckReport) -> Vec<String> {
    let mode = serde_json::to_value(r.mode).ok().and_then(|v| v.get("mode").and_then(|m| m.as_str().map(String::from)));
    vec![
        r.id.to_string(),
        mode.unwrap_or_default(),
        r.trials.to_string(),
        r.eligible.to_string(),
        r.failures.to_string(),
        fmt_f64(r.pass_rate),
        fmt_f64(r.worst_gap),
        fmt_f64(r.tolerance),
        r.passed.to_string(),
    ]
}

fn verify(a: &VerifyArgs) -> Result<Outcome, WbError> {
    let specs = build_specs(a)?;
    let pool = pool(a.rt.jobs)?;
    let mut rows = Vec::new();
    let mut all_passed = true;
    for spec in &specs {
        let start = Instant::now();
        let report = run_check_parallel(spec, &pool)?;
        let stem = report_stem(spec);
        io::write_json(&out_file(&a.out, &format!("{stem}.json")), &report)?;
        if let Some(inst) = &report.failing_instance {
            io::write_json(&out_file(&a.out, &format!("{stem}.failing.json")), inst)?;
        }
        println!("{}  [{:.2}s]", report.line(), start.elapsed().as_secs_f64());
        all_passed &= report.passed;
        rows.push(summary_row(&report));
    }
    io::write_csv(&out_file(&a.out, "summary.csv"), &SUMMARY_HEADER, &rows)?;
    Ok(if all_passed { Outcome::Ok } else { Outcome::ChecksFailed })
}

fn correlate(a: &CorrelateArgs) -> Result<Outcome, WbError> {
    // same seeds as the H1 check at this root seed
    let (setup_seed, run_seed) = theoremlab::correlation_seeds(a.seed);
    let (source, target, xs, ys) = match (&a.source, &a.target) {
        (Some(s), Some(t)) => {
            let data: SyntheticDataset = io::read_json(required(&a.data, "data")?)?;
            (io::load_net(s)?, io::load_net(t)?, data.inputs, data.labels)
        }
        (None, None) => {
            let setup = theoremlab::two_net_setup(setup_seed, a.dim, a.classes, a.hidden, a.probes, a.noise)?;
            io::save_net(&out_file(&a.out, "source.json"), &setup.source)?;
            io::save_net(&out_file(&a.out, "target.json"), &setup.target)?;
            (setup.source, setup.target, setup.xs, setup.ys)
        }
        _ => return Err(usage("--source and --target go together")),
    };
    let cfg = CorrelationConfig { cs: a.cs.clone(), ps: a.ps.clone(), tau: a.tau, lr: a.lr, max_steps: a.max_steps };
    let res = theoremlab::correlation_experiment(&source, &target, &xs, &ys, &cfg, run_seed)?;
    io::write_json(&out_file(&a.out, "correlation.json"), &res)?;
    let rows: Vec<Vec<String>> = res
        .cells
        .iter()
        .map(|c| {
            vec![
                fmt_f64(c.p),
                fmt_f64(c.c),
                fmt_f64(c.interaction),
                fmt_f64(c.transfer_utility),
                c.reached.to_string(),
                c.samples.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &out_file(&a.out, "cells.csv"),
        &["p", "c", "interaction", "transfer_utility", "reached", "samples"],
        &rows,
    )?;
    let pts: Vec<(f64, f64)> = res.cells.iter().map(|c| (c.interaction, c.transfer_utility)).collect();
    io::write_dat(&out_file(&a.out, "scatter.dat"), ("interaction", "transfer_utility"), &pts)?;
    if res.degenerate {
        println!("{} cells: correlation undefined (constant series)", res.cells.len());
    } else {
        println!("{} cells: pearson r = {:.4}", res.cells.len(), res.pearson_r);
    }
    Ok(Outcome::Ok)
}

fn report(a: &ReportArgs) -> Result<Outcome, WbError> {
    let dir = &a.input;
    let entries = std::fs::read_dir(dir).map_err(|source| WbError::Io { path: dir.clone(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".failing.json")
        })
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        // other JSON files may share the directory
        if let Ok(r) = io::read_json::<CheckReport>(p) {
            reports.push(r);
        }
    }
    if reports.is_empty() {
        return Err(usage(format!("no check reports in {}", dir.display())));
    }
    let rows: Vec<Vec<String>> = reports.iter().map(summary_row).collect();
    let out = a.out.clone().unwrap_or_else(|| out_file(dir, "summary.csv"));
    io::write_csv(&out, &SUMMARY_HEADER, &rows)?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", reports.len(), failed);
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::ChecksFailed })
}
