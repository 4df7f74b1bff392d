use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use swarm_core::config::RunConfig;
use swarm_core::graph::GraphSpec;
use swarm_core::trainer::artifacts::{
    atomic_write, confusion_csv, write_resolved_config, SWEEP_HEADER,
};
use swarm_core::trainer::baseline::train_centralized;
use swarm_core::trainer::{
    dump_messages, evaluate, load_datasets, load_parameters, message_rows, two_stage_train,
    ActionMode, Setup, TrainError, FINAL,
};

use crate::{BaselineKind, DumpArgs, EvalArgs, PolicyKind, SweepArgs};

pub fn train(cfg: &RunConfig) -> Result<(), TrainError> {
    let (train, test) = load_datasets(cfg)?;
    let out = two_stage_train(cfg, &train, &test)?;
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    println!(
        "best test accuracy: stage 1 {}, stage 2 {}",
        show(out.best_stage1),
        show(out.best_stage2)
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), TrainError> {
    let base = Setup::new(cfg)?;
    let setup = base.with_overrides(
        args.agents,
        args.horizon,
        args.graph.clone(),
        args.consensus,
    )?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(FINAL));
    let store = load_parameters(&setup, &checkpoint)?;
    let (_, test) = load_datasets(cfg)?;
    let policy = args
        .policy
        .unwrap_or(if cfg.epochs_stage2 == 0 && cfg.epochs_stage1 > 0 {
            PolicyKind::Uniform
        } else {
            PolicyKind::Learned
        });
    let mode = match policy {
        PolicyKind::Learned => ActionMode::Policy,
        PolicyKind::Uniform => ActionMode::Uniform,
    };
    let dir = cfg.out_dir.join("eval");
    write_resolved_config(&dir, &setup.config)?;
    let report = rayon_pool(cfg.threads)?.install(|| evaluate(&store, &setup, &test, &mode))?;
    atomic_write(
        &dir.join("confusion.csv"),
        confusion_csv(&report.confusion).as_bytes(),
    )?;
    println!("accuracy {:.4}", report.accuracy);
    println!("mean_reward {:.6}", report.mean_reward);
    Ok(())
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))
}

struct Cell {
    f: usize,
    horizon: usize,
    seed: u64,
}

type CellResult = Result<(Option<f64>, Option<f64>), String>;

fn cell_config(cfg: &RunConfig, cell: &Cell) -> RunConfig {
    let mut c = cfg.clone();
    c.f = cell.f;
    c.f_m = None;
    c.horizon = cell.horizon;
    c.seed = cell.seed;
    c.out_dir = cfg
        .out_dir
        .join(format!("f{}_T{}", cell.f, cell.horizon))
        .join(format!("seed{}", cell.seed));
    c
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(String::new, |a| format!("{a:.6}"))
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<(), TrainError> {
    write_resolved_config(&cfg.out_dir, cfg)?;
    let seeds = if args.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        args.seeds.clone()
    };
    let cells: Vec<Cell> = args
        .frames
        .iter()
        .flat_map(|&f| args.horizons.iter().map(move |&horizon| (f, horizon)))
        .flat_map(|(f, horizon)| seeds.iter().map(move |&seed| Cell { f, horizon, seed }))
        .collect();
    let (train, test) = load_datasets(cfg)?;
    let results: Mutex<Vec<Option<CellResult>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = args.parallel_cells.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(k) else { break };
                let c = cell_config(cfg, cell);
                log::info!(
                    "sweep cell f={} T={} seed={}",
                    cell.f,
                    cell.horizon,
                    cell.seed
                );
                let result = two_stage_train(&c, &train, &test)
                    .map(|o| (o.best_stage1, o.best_stage2))
                    .map_err(|e| e.to_string());
                if let Err(e) = &result {
                    log::error!(
                        "cell f={} T={} seed={} failed: {e}",
                        cell.f,
                        cell.horizon,
                        cell.seed
                    );
                }
                results.lock().expect("results lock")[k] = Some(result);
            });
        }
    });
    let results: Vec<CellResult> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err("not run".into())))
        .collect();

    let mut per_seed = format!("seed,{SWEEP_HEADER},error\n");
    for (cell, r) in cells.iter().zip(&results) {
        let (a, b, err) = match r {
            Ok((a, b)) => (*a, *b, String::new()),
            Err(e) => (None, None, e.replace([',', '\n'], ";")),
        };
        let _ = writeln!(
            per_seed,
            "{},{},{},{},{},{err}",
            cell.seed,
            cell.f,
            cell.horizon,
            fmt_acc(a),
            fmt_acc(b)
        );
    }
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut failures = 0;
    for &f in &args.frames {
        for &horizon in &args.horizons {
            let rows: Vec<&CellResult> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.f == f && c.horizon == horizon)
                .map(|(_, r)| r)
                .collect();
            failures += rows.iter().filter(|r| r.is_err()).count();
            let ok: Vec<&(Option<f64>, Option<f64>)> =
                rows.iter().filter_map(|r| r.as_ref().ok()).collect();
            let s1 = mean(ok.iter().map(|r| r.0));
            let s2 = mean(ok.iter().map(|r| r.1));
            let _ = writeln!(table, "{f},{horizon},{},{}", fmt_acc(s1), fmt_acc(s2));
        }
    }
    atomic_write(&cfg.out_dir.join("sweep_seeds.csv"), per_seed.as_bytes())?;
    atomic_write(&cfg.out_dir.join("sweep.csv"), table.as_bytes())?;
    print!("{table}");
    if failures > 0 {
        eprintln!(
            "{failures} of {} sweep runs failed; see sweep_seeds.csv",
            cells.len()
        );
    }
    Ok(())
}

pub fn baseline(cfg: &RunConfig, kind: BaselineKind) -> Result<(), TrainError> {
    let (train, test) = load_datasets(cfg)?;
    match kind {
        BaselineKind::Centralized => {
            let out = train_centralized(cfg, &train, &test)?;
            println!("best test accuracy: centralized {:.4}", out.best_accuracy);
        }
        BaselineKind::RandomWalkDistributed => {
            let mut c = cfg.clone();
            c.epochs_stage2 = 0;
            let out = two_stage_train(&c, &train, &test)?;
            println!(
                "best test accuracy: random walk {:.4}",
                out.best_stage1.unwrap_or(f64::NAN)
            );
        }
        BaselineKind::NoComm => {
            let mut c = cfg.clone();
            c.consensus_graph = Some(c.consensus_graph.take().unwrap_or_else(|| c.graph.clone()));
            c.graph = GraphSpec::Arcs(Vec::new());
            let out = two_stage_train(&c, &train, &test)?;
            let best = out.best_stage2.or(out.best_stage1).unwrap_or(f64::NAN);
            println!("best test accuracy: no communication {best:.4}");
        }
    }
    Ok(())
}

pub fn dump(cfg: &RunConfig, args: &DumpArgs) -> Result<(), TrainError> {
    let base = Setup::new(cfg)?;
    let setup = base.with_overrides(None, Some(args.horizon), None, None)?;
    let checkpoint: PathBuf = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(FINAL));
    let store = load_parameters(&setup, &checkpoint)?;
    let (_, test) = load_datasets(cfg)?;
    let dir = cfg.out_dir.join("messages");
    write_resolved_config(&dir, &setup.config)?;
    let records =
        rayon_pool(cfg.threads)?.install(|| dump_messages(&store, &setup, &test, args.count))?;
    let path = dir.join("messages.csv");
    atomic_write(
        &path,
        message_rows(&records, setup.arch.message_dim).as_bytes(),
    )?;
    println!("wrote {} trajectories to {}", records.len(), path.display());
    Ok(())
}
