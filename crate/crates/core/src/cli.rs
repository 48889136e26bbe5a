//! Command-line front end: `train`, `eval`, `credit` and `plot`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::credit::{credit_decompose, CreditTrace};
use crate::ensemble::{mean_q, AgentRole, EnsembleQNetwork};
use crate::env::{Observation, Speedway, TrackConfig};
use crate::error::{Error, Result};
use crate::eval::{compare_models, evaluate, rollout, CompareEntry, GreedyPolicy, Regime, DEFAULT_EPISODES};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::io::config::RunConfig;
use crate::plot::{line_plot_svg, Series};
use crate::train::{Trainer, Variant};

#[derive(Debug, Parser)]
#[command(name = "rararl", version, about = "Risk-averse robust adversarial RL on a toy speedway")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant and write checkpoints plus metrics.
    Train(TrainArgs),
    /// Evaluate checkpoints under perturbation regimes.
    Eval(EvalArgs),
    /// Per-episode credit assignment between protagonist and adversary.
    Credit(CreditArgs),
    /// Plot per-episode sums of a metrics column as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = "RARARL_SEED")]
    pub seed: Option<u64>,
    /// Output directory; defaults to `run.out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate, as `PATH` or `NAME=PATH`. Repeat to compare
    /// models; checkpoints sharing a name count as one model.
    #[arg(long, required = true)]
    pub checkpoint: Vec<String>,
    /// Checkpoint whose adversary network drives the adversarial regime.
    #[arg(long)]
    pub adversary: Option<PathBuf>,
    /// Repeat for several columns.
    #[arg(long, required = true)]
    pub regime: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long)]
    pub csv: PathBuf,
    /// Config supplying the track; the built-in track otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "RARARL_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct CreditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    /// Totals go here; per-step rows go next to it as `<stem>.steps.csv`.
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "RARARL_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct PlotArgs {
    /// A `metrics.csv` written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Column(s) to sum per episode.
    #[arg(long, required = true)]
    pub column: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Credit(a) => cmd_credit(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg = RunConfig::parse(&text, &a.config.display().to_string())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = &a.variant {
        cfg.train.variant = v.parse::<Variant>()?;
    }
    cfg.validate()?;
    let out = a
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set run.out_dir".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("config.toml"), &text).map_err(|e| Error::io(out.join("config.toml"), e))?;

    let digest = cfg.digest();
    let total = cfg.train.total_steps;
    let every = if cfg.checkpoint_every == 0 { total.max(1) } else { cfg.checkpoint_every };
    log::info!(
        "training {} for {total} steps, seed {}, digest {digest}",
        cfg.train.variant,
        cfg.train.seed
    );
    let mut trainer = Trainer::new(cfg.train.clone(), Speedway::new(cfg.track.clone())?)?;
    let last = loop {
        trainer.advance(every)?;
        let ckpt = Checkpoint::from_trainer(&trainer, digest.clone());
        let path = out.join(format!("ckpt_{:08}.json", trainer.t()));
        save_checkpoint(&ckpt, &path)?;
        log::info!("t = {}: wrote {}", trainer.t(), path.display());
        if trainer.t() >= total {
            break ckpt;
        }
    };
    save_checkpoint(&last, &out.join("final.json"))?;
    trainer.metrics().write_csv(&out.join("metrics.csv"))?;
    write_episodes(&trainer, &out.join("episodes.csv"))?;
    Ok(())
}

fn write_episodes(trainer: &Trainer, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wr = csv::Writer::from_writer(f);
    wr.write_record(["episode", "steps", "reward_total", "progress_total", "progress_pure", "catastrophes"])?;
    for e in trainer.metrics().episodes() {
        wr.write_record([
            e.episode.to_string(),
            e.steps.to_string(),
            e.reward_total.to_string(),
            e.progress_total.to_string(),
            e.progress_pure.to_string(),
            e.catastrophes.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

/// Track for evaluation, and the digest to compare checkpoints against.
fn eval_track(config: Option<&Path>) -> Result<(TrackConfig, Option<String>)> {
    match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            Ok((cfg.track.clone(), Some(cfg.digest())))
        }
        None => Ok((TrackConfig::default(), None)),
    }
}

fn load_checked(path: &Path, digest: Option<&str>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(w) = digest.and_then(|d| ckpt.digest_warning(d)) {
        log::warn!("{}: {w}", path.display());
    }
    Ok(ckpt)
}

fn protagonist_policy(c: &Checkpoint) -> GreedyPolicy<'_> {
    GreedyPolicy {
        net: &c.protagonist,
        role: AgentRole::Protagonist,
        risk: c.risk,
    }
}

fn adversary_policy<'a>(c: &'a Checkpoint, path: &Path) -> Result<GreedyPolicy<'a>> {
    let (net, _) = c.adversary.as_ref().ok_or_else(|| {
        Error::Usage(format!(
            "checkpoint {} has no adversary network (variant {})",
            path.display(),
            c.variant
        ))
    })?;
    Ok(GreedyPolicy {
        net,
        role: AgentRole::Adversary,
        risk: c.risk,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let regimes = a
        .regime
        .iter()
        .map(|r| r.parse::<Regime>())
        .collect::<Result<Vec<_>>>()?;
    if regimes.contains(&Regime::AdversarialPerturb) && a.adversary.is_none() {
        return Err(Error::Usage("--regime adversarial needs --adversary PATH".into()));
    }
    let (track, digest) = eval_track(a.config.as_deref())?;
    let env = Speedway::new(track)?;
    let mut models = Vec::new();
    for spec in &a.checkpoint {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        let ckpt = load_checked(&path, digest.as_deref())?;
        let name = name.unwrap_or_else(|| ckpt.variant.to_string());
        models.push((name, ckpt));
    }
    let adv_ckpt = a
        .adversary
        .as_ref()
        .map(|p| load_checked(p, digest.as_deref()).map(|c| (p.clone(), c)))
        .transpose()?;
    let adversary = adv_ckpt
        .as_ref()
        .map(|(p, c)| adversary_policy(c, p))
        .transpose()?;

    let policies: Vec<_> = models.iter().map(|(_, c)| protagonist_policy(c)).collect();
    let f = fs::File::create(&a.csv).map_err(|e| Error::io(&a.csv, e))?;
    let w = std::io::BufWriter::new(f);
    if policies.len() == 1 && regimes.len() == 1 {
        let regime = regimes[0];
        let adv = adversary
            .as_ref()
            .filter(|_| regime == Regime::AdversarialPerturb)
            .map(|p| p as &dyn crate::eval::Controller);
        let report = evaluate(&policies[0], adv, regime, a.episodes, &env, a.seed)?;
        report.write_csv(w)?;
        let cat = report.catastrophe_reward();
        log::info!(
            "{} / {regime}: catastrophe reward {:.3} +- {:.3}, progress {:.3}",
            models[0].0,
            cat.mean,
            cat.std,
            report.progress_total().mean
        );
    } else {
        let entries: Vec<CompareEntry<'_>> = models
            .iter()
            .zip(&policies)
            .map(|((name, _), p)| CompareEntry {
                name: name.clone(),
                protagonist: p,
                adversary: adversary.as_ref().map(|a| a as &dyn crate::eval::Controller),
            })
            .collect();
        compare_models(&entries, &regimes, a.episodes, &env, a.seed)?.write_csv(w)?;
    }
    Ok(())
}

/// `max_a` of the ensemble-mean action value.
fn state_value(net: &EnsembleQNetwork, obs: &Observation) -> Result<f64> {
    let q = mean_q(&net.q_all_heads(obs.as_slice())?);
    Ok(q.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn steps_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.steps.csv"))
}

fn cmd_credit(a: CreditArgs) -> Result<()> {
    let (track, digest) = eval_track(a.config.as_deref())?;
    let env = Speedway::new(track)?;
    let ckpt = load_checked(&a.checkpoint, digest.as_deref())?;
    let adversary = adversary_policy(&ckpt, &a.checkpoint)?;
    let protagonist = protagonist_policy(&ckpt);
    let (_, adv_target) = ckpt.adversary.as_ref().expect("checked by adversary_policy");

    let mut totals = csv::Writer::from_writer(Vec::new());
    totals.write_record(["episode", "steps", "td_p", "td_a", "td_sum", "delta_signed_value"])?;
    let mut steps = csv::Writer::from_writer(Vec::new());
    steps.write_record(CreditTrace::STEPS_HEADER)?;
    for ep in 0..a.episodes {
        let traj = rollout(ep, &protagonist, Some(&adversary), &env, a.seed, true)?;
        // each agent's value comes from its own target network
        let trace = credit_decompose(&traj.states, |obs, role| match role {
            AgentRole::Protagonist => state_value(&ckpt.protagonist_target, obs),
            AgentRole::Adversary => state_value(adv_target, obs),
        })?;
        totals.write_record([
            ep.to_string(),
            traj.result.steps.to_string(),
            trace.td_p.to_string(),
            trace.td_a.to_string(),
            (trace.td_p + trace.td_a).to_string(),
            trace.signed_value_change().to_string(),
        ])?;
        trace.write_steps(ep, &mut steps)?;
    }
    let write = |path: &Path, wr: csv::Writer<Vec<u8>>| -> Result<()> {
        let bytes = wr.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    };
    write(&a.csv, totals)?;
    write(&steps_path(&a.csv), steps)?;
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let mut rd = csv::Reader::from_path(&a.metrics)?;
    let header = rd.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Usage(format!("{} has no column {name:?}", a.metrics.display())))
    };
    let ep_col = col("episode")?;
    let cols = a.column.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let mut sums: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cols.len()];
    for rec in rd.records() {
        let rec = rec?;
        let ep: f64 = rec[ep_col]
            .parse()
            .map_err(|_| Error::Usage(format!("bad episode value {:?}", &rec[ep_col])))?;
        for (series, &c) in sums.iter_mut().zip(&cols) {
            let v: f64 = rec[c].parse().unwrap_or(0.0);
            match series.last_mut() {
                Some((e, s)) if *e == ep => *s += v,
                _ => series.push((ep, v)),
            }
        }
    }
    let series: Vec<Series> = a
        .column
        .iter()
        .zip(sums)
        .map(|(name, points)| Series {
            name: name.clone(),
            points,
        })
        .collect();
    let title = format!("per-episode sums from {}", a.metrics.display());
    fs::write(&a.out, line_plot_svg(&title, "episode", &series)).map_err(|e| Error::io(&a.out, e))
}
