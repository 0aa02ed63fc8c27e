use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use grafs_core::cell::DiscreteActivation;
use grafs_core::data::Dataset;
use grafs_core::diagnostics::{gradient_suite, TOLERANCE};
use grafs_core::model::{aggregate, retrain as retrain_model, Activation, Metrics, ModelError, ModelSpec};
use grafs_core::search::{build_shrink_schedule, SearchError, SearchRun, FINAL_OPS, FULL_SPACE};

use crate::config::RunConfig;
use crate::{CliError, RunArgs, TOOL_VERSION};

/// Environment variable capping concurrent seeds.
const THREADS_ENV: &str = "GRAFS_THREADS";

/// Config, data and model shape shared by the seed-level commands.
struct Setup {
    config: RunConfig,
    digest: String,
    pool: Dataset,
    test: Dataset,
    spec: ModelSpec,
    seeds: Vec<u64>,
    out: PathBuf,
}

fn setup(args: &RunArgs) -> Result<Setup, CliError> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seeds = args.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
    let out = args.out.clone().unwrap_or_else(|| config.out.clone());
    let data = config
        .dataset()
        .map_err(|e| CliError::Usage(format!("loading data: {e}")))?;
    let (pool, test) = config
        .split(&data)
        .map_err(|e| CliError::Usage(format!("splitting data: {e}")))?;
    let spec = config.model_spec(data.dim(), data.classes());
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Setup {
        digest: config.digest(),
        config,
        pool,
        test,
        spec,
        seeds,
        out,
    })
}

/// Worker count: `--parallel`, capped by the environment and the job count.
fn workers(requested: u64, jobs: usize) -> Result<usize, CliError> {
    let mut n = usize::try_from(requested).unwrap_or(usize::MAX);
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let cap: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        n = n.min(cap);
    }
    Ok(n.min(jobs).max(1))
}

/// Runs `job` over `items` on `threads` workers; results keep input order.
fn run_parallel<T: Sync, R: Send>(items: &[T], threads: usize, job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = job(item);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item ran"))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

/// Refuses to touch existing `targets` unless `force`; with it, removes them.
fn claim(targets: &[PathBuf], force: bool) -> Result<(), CliError> {
    for t in targets.iter().filter(|t| t.exists()) {
        if !force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to replace it",
                t.display()
            )));
        }
        let removed = if t.is_dir() {
            fs::remove_dir_all(t)
        } else {
            fs::remove_file(t)
        };
        removed.map_err(|e| CliError::Runtime(format!("removing {}: {e}", t.display())))?;
    }
    Ok(())
}

fn is_divergence(e: &SearchError) -> bool {
    matches!(e, SearchError::Divergence { .. })
}

pub fn search(args: &RunArgs) -> Result<(), CliError> {
    let s = setup(args)?;
    let dirs: Vec<PathBuf> = s.seeds.iter().map(|seed| s.out.join(format!("seed-{seed}"))).collect();
    claim(&dirs, args.force)?;
    create_dir(&s.out)?;
    write(
        &s.out.join("config.txt"),
        &format!(
            "# config_digest = {}\n# tool_version = {TOOL_VERSION}\n{}",
            s.digest,
            s.config.canonical()
        ),
    )?;
    let threads = workers(args.parallel, s.seeds.len())?;
    let jobs: Vec<(u64, PathBuf)> = s.seeds.iter().copied().zip(dirs).collect();
    let results = run_parallel(&jobs, threads, |(seed, dir)| search_seed(&s, *seed, dir));
    let mut failures = Vec::new();
    for ((seed, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(formula) => println!("seed {seed}: {formula}"),
            Err(e) => {
                println!("seed {seed}: failed: {e}");
                failures.push(format!("seed {seed}"));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("search failed for {}", failures.join(", "))))
    }
}

/// One seed end to end; returns the discovered formula.
fn search_seed(s: &Setup, seed: u64, dir: &Path) -> Result<String, CliError> {
    create_dir(dir)?;
    let cfg = s.config.search_config(seed);
    let tag = if cfg.shrink { "grafs" } else { "drnas" };
    let outcome = (|| {
        let mut run = SearchRun::from_dataset(cfg.clone(), &s.spec, &s.pool)?;
        while !run.is_finished() {
            let ev = run.step_round()?;
            eprintln!(
                "seed {seed} round {}/{} {}: train {:.4} val {:.4}, {} dropped",
                ev.round,
                cfg.total_rounds,
                ev.phase,
                ev.train_loss,
                ev.val_loss,
                ev.drops.len()
            );
        }
        run.finish(&format!("{tag}-seed{seed}"))
    })();
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            write(&dir.join("error.txt"), &format!("{e}\n"))?;
            return Err(if is_divergence(&e) {
                CliError::Runtime(e.to_string())
            } else {
                CliError::Runtime(format!("search error: {e}"))
            });
        }
    };
    let mut act = outcome.activation.clone();
    act.provenance_mut().config_digest = Some(s.digest.clone());
    write(&dir.join("activation.json"), &(act.to_json() + "\n"))?;
    write(&dir.join("events.jsonl"), &outcome.events_jsonl())?;
    write(
        &dir.join("formula.txt"),
        &format!(
            "{}\n# exact: {}\n# config_digest: {}\n# tool_version: {TOOL_VERSION}\n",
            act.formula(),
            act.formula_exact(),
            s.digest
        ),
    )?;
    Ok(act.formula())
}

/// Resolves a file path or a built-in name; returns the label and function.
fn resolve_activation(arg: &str) -> Result<(String, String, Activation), CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {arg}: {e}")))?;
        let cell = DiscreteActivation::from_json(&text).map_err(|e| CliError::Usage(format!("{arg}: {e}")))?;
        let slug = path
            .with_extension("")
            .components()
            .rev()
            .take(2)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("-");
        return Ok((cell.formula(), slug, Activation::discrete(cell)));
    }
    match Activation::builtin(arg) {
        Ok(act) => Ok((act.to_string(), act.to_string(), act)),
        Err(_) if arg.contains(['/', '\\']) || arg.ends_with(".json") => {
            Err(CliError::Usage(format!("activation file {arg} not found")))
        }
        Err(e) => Err(CliError::Usage(format!(
            "{e}; expected an activation file or a built-in name"
        ))),
    }
}

fn slugify(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    out.truncate(64);
    out
}

pub fn retrain(args: &RunArgs, activation: &str) -> Result<(), CliError> {
    let (label, slug, act) = resolve_activation(activation)?;
    let s = setup(args)?;
    let report_path = s.out.join(format!("retrain-{}.txt", slugify(&slug)));
    claim(std::slice::from_ref(&report_path), args.force)?;
    let threads = workers(args.parallel, s.seeds.len())?;
    let results = run_parallel(&s.seeds, threads, |&seed| {
        let r = retrain_model(&s.spec, &act, &s.pool, &s.test, &s.config.train_config(seed));
        eprintln!(
            "seed {seed}: {}",
            r.as_ref()
                .map_or("diverged".into(), |m| format!("{:.3}%", 100.0 * m.accuracy))
        );
        r
    });
    let report = retrain_report(&s, &label, activation, &results);
    print!("{report}");
    create_dir(&s.out)?;
    write(&report_path, &report)?;
    let diverged: Vec<String> = s
        .seeds
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.is_err())
        .map(|(seed, _)| seed.to_string())
        .collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "retraining failed for seed(s) {}",
            diverged.join(", ")
        )))
    }
}

fn retrain_report(s: &Setup, label: &str, source: &str, results: &[Result<Metrics, ModelError>]) -> String {
    let mut r = String::new();
    let m = &s.config.model;
    let _ = writeln!(r, "# activation: {label}");
    let _ = writeln!(r, "# source: {source}");
    let _ = writeln!(
        r,
        "# model: {} width {} depth {}; retrain epochs {}; train {} / test {} samples",
        m.family.key(),
        m.width,
        m.depth,
        s.config.retrain.epochs,
        s.pool.len(),
        s.test.len()
    );
    let _ = writeln!(r, "# config_digest: {}", s.digest);
    let _ = writeln!(r, "# tool_version: {TOOL_VERSION}");
    let _ = writeln!(r, "seed | test accuracy (%) | test loss");
    for (seed, res) in s.seeds.iter().zip(results) {
        match res {
            Ok(m) => {
                let _ = writeln!(r, "{seed} | {:.3} | {:.6}", 100.0 * m.accuracy, m.loss);
            }
            Err(e) => {
                let _ = writeln!(r, "{seed} | diverged | {e}");
            }
        }
    }
    let acc: Vec<f64> = results.iter().flatten().map(|m| 100.0 * m.accuracy).collect();
    let _ = writeln!(
        r,
        "activation | test accuracy (%), mean ± standard error over {} seed(s)",
        acc.len()
    );
    match aggregate(&acc) {
        Some(summary) => {
            let _ = writeln!(r, "{label} | {summary}");
        }
        None => {
            let _ = writeln!(r, "{label} | diverged");
        }
    }
    r
}

pub fn plot_grid(activation: &str, lo: f64, hi: f64, n: usize, out: Option<&Path>) -> Result<(), CliError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(CliError::Usage(format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    if n < 2 {
        return Err(CliError::Usage(format!("need at least 2 points, got {n}")));
    }
    let (_, _, act) = resolve_activation(activation)?;
    let mut csv = String::from("x,f\n");
    for i in 0..n {
        // The last point is `hi` exactly, not `lo + (hi − lo)`.
        let x = if i + 1 == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        };
        let _ = writeln!(csv, "{x},{}", act.eval(x).0);
    }
    match out {
        Some(p) => write(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn schedule(start: Option<usize>, end: Option<usize>, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let start = start.unwrap_or_else(|| cfg.search.shrink_start());
    let end = end.unwrap_or(cfg.search.total_rounds);
    let sched = build_shrink_schedule(FULL_SPACE, FINAL_OPS, start, end).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{}", sched.to_csv());
    Ok(())
}

pub fn gradcheck(seed: u64, break_op: Option<&str>) -> Result<(), CliError> {
    let results = gradient_suite(seed, break_op).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("check,points,max_rel_err,status");
    for r in &results {
        println!(
            "{},{},{:.3e},{}",
            r.name,
            r.points,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        eprintln!("all {} checks below {TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {} (tolerance {TOLERANCE:e})",
            failed.join(", ")
        )))
    }
}
