//! `sagcs`: generate datasets, score difficulty, train under a sampler,
//! evaluate a trained policy and aggregate runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use sagcs_core::attention::{dump_debug, instance_heatmap, PatchGrid};
use sagcs_core::difficulty::{histogram, score_dataset, write_histogram_csv, MaskSource};
use sagcs_core::evalnav::{metric_report, write_episode_logs};
use sagcs_core::harness::{
    evaluate_episodes, featurize_all, load_dataset, run_experiment, save_dataset, summarize, write_summary,
    RunConfig, RunReport,
};
use sagcs_core::navsim::generate_dataset;
use sagcs_core::scheduler::SamplerKind;
use sagcs_core::trainer::PolicyParams;

#[derive(Parser)]
#[command(name = "sagcs", version, about = "Difficulty-aware curriculum training for goal-inference navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    Target,
    Landmark,
}

/// Same spelling as the config file and run.json.
#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Sampler {
    Random,
    NaiveCl,
    SaGcs,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Random => SamplerKind::Random,
            Sampler::NaiveCl => SamplerKind::NaiveCl,
            Sampler::SaGcs => SamplerKind::SaGcs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-lines dataset.
    Gen {
        /// Flat JSON run config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which split of the config to generate.
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Score per-instance difficulty as 1 - Soft-IoU.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write a difficulty histogram CSV.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum, default_value = "target")]
        mask: Mask,
        /// Dump heatmaps (PGM plus JSON sidecar) for the first N instances here.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        debug_count: usize,
    },
    /// Train a policy and write run.json, curves.csv, audit.csv, train_log.csv, params.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's sampler.
        #[arg(long, value_enum)]
        sampler: Option<Sampler>,
    },
    /// Evaluate saved parameters and write a metrics JSON.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on this dataset instead of the config's held-out split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write per-episode logs as JSON lines.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Aggregate run directories into a per-sampler summary CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { config, out, split } => {
            let cfg = load_config(config.as_deref())?;
            let gen = match split {
                Split::Train => cfg.train_gen(),
                Split::Eval => cfg.eval_gen(),
            };
            let data = generate_dataset(&gen)?;
            save_dataset(&data, &out)?;
            info!("wrote {} instances to {}", data.len(), out.display());
        }
        Command::Score { dataset, out, config, hist, bins, mask, debug_dir, debug_count } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&dataset)?;
            let mut scoring = cfg.scoring();
            scoring.mask = match mask {
                Mask::Target => MaskSource::Target,
                Mask::Landmark => MaskSource::Landmark,
            };
            let table = score_dataset(&data, &scoring)?;
            table.write_csv(&out)?;
            info!("scored {} instances into {}", table.len(), out.display());
            if let Some(h) = hist {
                write_histogram_csv(&histogram(&table, bins)?, &h)?;
            }
            if let Some(dir) = debug_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for inst in data.iter().take(debug_count) {
                    let grid = PatchGrid::covering(&inst.environment, scoring.patch_px)?;
                    let (fused, heat) = instance_heatmap(inst, &grid, &scoring.attention)?;
                    dump_debug(&heat, &fused, &grid, &dir, &format!("instance_{}", inst.id))?;
                }
            }
        }
        Command::Train { config, out_dir, sampler } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = sampler {
                cfg.sampler = s.into();
            }
            let mut output = run_experiment(&cfg)?;
            output.write_to(&out_dir)?;
            let m = output.report.final_metrics;
            println!(
                "{} seed {}: sr {:.2} osr {:.2} spl {:.2} ne {:.2} ({:.1}s)",
                cfg.sampler, cfg.seed, m.sr, m.osr, m.spl, m.ne, output.report.wall_clock_seconds
            );
        }
        Command::Eval { config, params, out, dataset, episodes } => {
            let cfg = load_config(config.as_deref())?;
            let text = fs::read_to_string(&params).with_context(|| format!("reading {}", params.display()))?;
            let params: PolicyParams = serde_json::from_str(&text)?;
            let data = match dataset {
                Some(p) => load_dataset(&p)?,
                None => generate_dataset(&cfg.eval_gen())?,
            };
            if data.is_empty() {
                bail!("evaluation dataset is empty");
            }
            let features = featurize_all(&data)?;
            let eval_cfg = cfg.eval();
            let logs = evaluate_episodes(&params, &data, &features, &eval_cfg, cfg.seed)?;
            let report = metric_report(&logs, eval_cfg.success_threshold)?;
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = episodes {
                write_episode_logs(&logs, &p)?;
            }
            println!("sr {:.2} osr {:.2} spl {:.2} ne {:.2} n {}", report.sr, report.osr, report.spl, report.ne, report.n);
        }
        Command::Report { runs, out } => {
            let reports = runs
                .iter()
                .map(|dir| RunReport::read_json(&dir.join("run.json")))
                .collect::<sagcs_core::Result<Vec<_>>>()?;
            let summary = summarize(&reports);
            write_summary(&summary, &out)?;
            for s in &summary {
                println!(
                    "{:9} runs {} auc_sr {:.2} final_sr {:.2} steps_to_90 {:.0}",
                    s.sampler.as_str(), s.runs, s.auc_sr, s.final_sr, s.steps_to_90
                );
            }
        }
    }
    Ok(())
}
