//! Command implementations behind the `hne` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use hne_core::cost::{complexity_ratio, flop_report, verify_cost_model, CostModel};
use hne_core::eval::{extend_budget, forward_packed, predict, EvalOptions, NormMode};
use hne_core::losses::{LossConfig, Objective};
use hne_core::tensor::Tensor;
use hne_core::tree::{InputSpec, TreeSpec};

use crate::checkpoint::load_checkpoint;
use crate::config::{resolve_output_dir, ExperimentConfig};
use crate::train::{evaluate, train, write_metrics};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hne",
    about = "Tree-structured parameter-shared ensembles with anytime inference",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model from a JSON experiment config; writes metrics.csv,
    /// checkpoints, and the resolved config into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's test split: per-budget
    /// accuracy, FLOPs, and logit diversity as CSV on stdout.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Budgeted prediction on a CSV batch of inputs. Pick the budget
    /// directly or let a FLOP limit choose the largest feasible one.
    Anytime {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV file, one sample per row (row-major channel, height, width
        /// order for image models).
        #[arg(long)]
        input: PathBuf,
        /// Budget exponent b: evaluate 2^b members.
        #[arg(long, conflicts_with = "flop_limit")]
        budget: Option<usize>,
        /// Largest budget whose cumulative FLOPs stay within this limit.
        #[arg(long)]
        flop_limit: Option<u64>,
        /// After answering, continue one budget step and print the refined
        /// predictions as well.
        #[arg(long)]
        extend: bool,
    },
    /// Per-budget FLOP table and the sharing speed-up ratio as CSV.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Abstract per-block cost for the uniform-cost ratio check.
        #[arg(long, default_value_t = 1)]
        uniform_cost: u64,
    },
    /// Train the objective family (no distillation, co-distillation at two
    /// mixing weights, hierarchical distillation, structured) across seeds
    /// and emit per-budget medians as CSV.
    CompareDistillation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, output } => cmd_train(&config, seed, output.as_deref()),
        Command::Evaluate { checkpoint, config } => cmd_evaluate(&checkpoint, &config),
        Command::Anytime { checkpoint, input, budget, flop_limit, extend } => {
            cmd_anytime(&checkpoint, &input, budget, flop_limit, extend)
        }
        Command::Flops { config, uniform_cost } => cmd_flops(&config, uniform_cost),
        Command::CompareDistillation { config, seeds, output } => {
            cmd_compare_distillation(&config, seeds, output.as_deref())
        }
    }
}

fn cmd_train(config_path: &Path, seed: Option<u64>, output: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(s) = seed {
        cfg.train.master_seed = s;
    }
    let out_dir = resolve_output_dir(output, &cfg);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    cfg.output_dir = Some(out_dir.clone());
    fs::write(out_dir.join("config.json"), cfg.resolved_json())
        .map_err(|e| Error::io(out_dir.join("config.json"), e))?;

    let (train_set, test_set, augment) = cfg.data.load()?;
    let outcome = train(
        &train_set,
        &test_set,
        &cfg.tree,
        &cfg.train,
        &cfg.loss,
        augment.as_ref(),
        Some(&out_dir),
    )?;
    write_metrics(&outcome.log, &out_dir.join("metrics.csv"))?;

    println!("run directory: {}", out_dir.display());
    for (b, acc) in outcome.log.final_accuracies().iter().enumerate() {
        println!("budget {b} ({} models): accuracy {acc:.4}", 1usize << b);
    }
    if let Some(d) = outcome.log.final_diversity() {
        println!("logit diversity: {d:.6}");
    }
    Ok(())
}

fn cmd_evaluate(checkpoint_path: &Path, config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let (_, test_set, _) = cfg.data.load()?;
    let report = flop_report(ckpt.store.spec())?;
    let summary = evaluate(&ckpt.store, &test_set, &EvalOptions { norm_mode: NormMode::Running })?;
    println!("budget,models,flops,accuracy");
    for (b, acc) in summary.per_budget_accuracy.iter().enumerate() {
        println!("{b},{},{},{acc}", 1usize << b, report.per_budget[b]);
    }
    println!("diversity,{}", summary.diversity);
    Ok(())
}

fn read_input_csv(path: &Path, spec: &TreeSpec) -> Result<Tensor<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f32>, _> =
            line.split(',').map(|v| v.trim().parse::<f32>()).collect();
        let row = row.map_err(|e| Error::Parse {
            offset: lineno as u64,
            message: format!("line {}: {e}", lineno + 1),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no samples", path.display())));
    }
    let expected: usize = match spec.input {
        InputSpec::Features { dim } => dim,
        InputSpec::Image { channels, height, width } => channels * height * width,
    };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != expected {
            return Err(Error::Config(format!(
                "{}: row {i} has {} values, the model expects {expected}",
                path.display(),
                r.len()
            )));
        }
    }
    let n = rows.len();
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    let shape: Vec<usize> = match spec.input {
        InputSpec::Features { dim } => vec![n, dim],
        InputSpec::Image { channels, height, width } => vec![n, channels, height, width],
    };
    Ok(Tensor::new(&shape, data).expect("row arithmetic"))
}

fn print_predictions(header_budget: usize, flops: u64, preds: &[usize]) {
    println!("budget,{header_budget}");
    println!("flops,{flops}");
    println!("sample,prediction");
    for (i, p) in preds.iter().enumerate() {
        println!("{i},{p}");
    }
}

fn cmd_anytime(
    checkpoint_path: &Path,
    input_path: &Path,
    budget: Option<usize>,
    flop_limit: Option<u64>,
    extend: bool,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let spec = ckpt.store.spec().clone();
    let x = read_input_csv(input_path, &spec)?;
    let report = flop_report(&spec)?;
    let chosen = match (budget, flop_limit) {
        (Some(b), None) => {
            if b > spec.depth {
                return Err(Error::Config(format!(
                    "budget {b} out of range 0..={}",
                    spec.depth
                )));
            }
            b
        }
        (None, Some(limit)) => {
            // largest b whose cumulative cost fits
            match (0..=spec.depth).rev().find(|&b| report.per_budget[b] <= limit) {
                Some(b) => b,
                None => {
                    return Err(Error::Config(format!(
                        "FLOP limit {limit} is below the minimum feasible {} (one full pass over a single member)",
                        report.per_budget[0]
                    )))
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --budget or --flop-limit is required".into(),
            ))
        }
    };
    let opts = EvalOptions { norm_mode: NormMode::Running };
    let res = forward_packed(&ckpt.store, chosen, &x, &opts)?;
    print_predictions(chosen, report.per_budget[chosen], &predict(res.ensemble_output()));
    if extend {
        if chosen >= spec.depth {
            return Err(Error::Config(format!(
                "cannot extend past the full budget {}",
                spec.depth
            )));
        }
        let wider = extend_budget(&res, &ckpt.store, &x)?;
        println!("extended");
        print_predictions(
            chosen + 1,
            report.per_budget[chosen + 1],
            &predict(wider.ensemble_output()),
        );
    }
    Ok(())
}

fn cmd_flops(config_path: &Path, uniform_cost: u64) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let report = flop_report(&cfg.tree)?;
    println!("budget_b,models,flops,cumulative_fraction");
    for (b, &flops) in report.per_budget.iter().enumerate() {
        println!(
            "{b},{},{flops},{:.6}",
            1usize << b,
            flops as f64 / report.t_hne as f64
        );
    }
    let analytic = complexity_ratio(cfg.tree.depth);
    println!("ratio,analytic,{analytic},{}", analytic.to_f64());
    let uniform = verify_cost_model(&cfg.tree, CostModel::Uniform(uniform_cost))?;
    println!(
        "ratio,measured_uniform_cost,{},{}",
        uniform.measured,
        uniform.measured.to_f64()
    );
    let counted = verify_cost_model(&cfg.tree, CostModel::PerNodeFlops)?;
    let annotation = if counted.uniform { "" } else { ",model-assumption: non-uniform" };
    println!(
        "ratio,measured_flops,{},{}{annotation}",
        counted.measured,
        counted.measured.to_f64()
    );
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_compare_distillation(config_path: &Path, seeds: usize, output: Option<&Path>) -> Result<()> {
    if seeds < 1 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let cfg = ExperimentConfig::from_path(config_path)?;
    let (train_set, test_set, augment) = cfg.data.load()?;
    let variants: Vec<(&'static str, LossConfig)> = vec![
        ("independent", LossConfig { objective: Objective::Independent, ..cfg.loss }),
        ("structured", LossConfig { objective: Objective::Structured, ..cfg.loss }),
        ("hierarchical", LossConfig { objective: Objective::Hierarchical, ..cfg.loss }),
        ("codistill", LossConfig { objective: Objective::Codistill, alpha: 0.1, ..cfg.loss }),
        ("codistill", LossConfig { objective: Objective::Codistill, alpha: 0.5, ..cfg.loss }),
    ];
    let report = flop_report(&cfg.tree)?;
    let mut lines = String::from("objective,alpha,budget,models,flops,median_accuracy,median_diversity\n");
    for (name, loss_cfg) in &variants {
        let mut per_budget: Vec<Vec<f64>> = vec![Vec::new(); cfg.tree.depth + 1];
        let mut diversities: Vec<f64> = Vec::new();
        for s in 0..seeds {
            let mut tc = cfg.train.clone();
            tc.master_seed = cfg.train.master_seed.wrapping_add(s as u64);
            let outcome =
                train(&train_set, &test_set, &cfg.tree, &tc, loss_cfg, augment.as_ref(), None)?;
            for (b, acc) in outcome.log.final_accuracies().iter().enumerate() {
                per_budget[b].push(*acc);
            }
            diversities.push(outcome.log.final_diversity().unwrap_or(0.0));
        }
        let med_div = median(&mut diversities);
        for b in 0..=cfg.tree.depth {
            let med_acc = median(&mut per_budget[b]);
            lines.push_str(&format!(
                "{name},{},{b},{},{},{med_acc},{med_div}\n",
                loss_cfg.alpha,
                1usize << b,
                report.per_budget[b],
            ));
        }
    }
    print!("{lines}");
    if let Some(dir) = output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("compare_distillation.csv");
        fs::write(&path, lines).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
