use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use auxnav::analyze::{
    self, auc, episode_set, episodes_from_specs, export_attention_map, paired_t_test, spl, EvalConfig,
    EvalSummary, LearningCurve, Policy,
};
use auxnav::nn::gradcheck::{self, DEFAULT_REL_TOL};
use auxnav::parallel::ExecMode;
use auxnav::sim::{EpisodeSpec, GridWorld};
use auxnav::trainer::{random_policy_success, run_variant, Checkpoint, DeskScale, ExperimentConfig, Trainer, Variant};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "auxnav", about = "Train and analyze grid PointGoal navigation agents")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a held-out episode set for a checkpoint's map suite.
    GenEpisodes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an episode set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// Comma-separated module indices to mask out of fusion.
        #[arg(long, value_delimiter = ',')]
        mask: Option<Vec<usize>>,
        #[arg(long)]
        greedy: bool,
        /// Report SPL grouped into geodesic-distance bins of this width (m).
        #[arg(long)]
        distance_bins: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Area under a `frames,value` learning curve.
    Auc {
        #[arg(long)]
        curve: PathBuf,
    },
    /// Label each visited cell with the most-attended belief module.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A map id from the checkpoint's suite or a text map file.
        #[arg(long)]
        map: String,
        #[arg(long, default_value_t = 200)]
        spawns: usize,
        /// Goal cell as `x,y`; defaults to the first free cell.
        #[arg(long, value_delimiter = ',')]
        goal: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired t-test between two evaluation results on the same episodes.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train every requested variant over several seeds on the shared map
    /// suite and report learning-curve AuCs.
    Suite {
        /// JSON or TOML file with a desk-scale override; defaults otherwise.
        #[arg(long)]
        scale: Option<PathBuf>,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<Variant>>,
        /// Directory for one JSON file per run plus summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn train(config: Option<PathBuf>, resume: Option<PathBuf>, mode: ExecMode) -> Result<()> {
    let mut trainer = match (config, resume) {
        (_, Some(ck)) => Trainer::from_checkpoint(Checkpoint::load(&ck)?)?,
        (Some(cfg), None) => {
            let mut exp = ExperimentConfig::load(&cfg)?;
            if mode == ExecMode::Sequential {
                exp.exec = mode;
            }
            Trainer::new(exp)?
        }
        (None, None) => bail!("train needs --config or --resume"),
    };
    if let Some(dir) = trainer.experiment.output_dir.clone() {
        trainer.attach_metrics(&dir.join("metrics.csv"))?;
    }
    trainer.run()?;
    let last = trainer.validation.last();
    println!(
        "{}: {} frames, {} updates{}",
        trainer.experiment.name,
        trainer.frames,
        trainer.updates,
        last.map(|v| format!(", validation success {:.3} spl {:.3}", v.success, v.spl))
            .unwrap_or_default()
    );
    Ok(())
}

fn parse_mask(mask: Option<Vec<usize>>, modules: usize) -> Result<Option<Vec<bool>>> {
    let Some(off) = mask else { return Ok(None) };
    if let Some(&bad) = off.iter().find(|&&m| m >= modules) {
        bail!("mask refers to module {bad} but the agent has {modules}");
    }
    Ok(Some((0..modules).map(|m| !off.contains(&m)).collect()))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    episodes: &Path,
    mask: Option<Vec<usize>>,
    greedy: bool,
    bins: Option<f64>,
    out: Option<&Path>,
    mode: ExecMode,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let suite = ck.experiment.maps.build()?;
    let specs: Vec<EpisodeSpec> = read_json(episodes)?;
    let mut all = suite.train.clone();
    all.ids.extend(suite.heldout.ids.iter().copied());
    all.worlds.extend(suite.heldout.worlds.iter().cloned());
    let eps = episodes_from_specs(&all, &specs)?;
    let mask = parse_mask(mask, ck.agent.module_count())?;
    let cfg = EvalConfig {
        greedy,
        ..EvalConfig::default()
    };
    let s = analyze::evaluate(Policy::Agent(&ck.agent), &eps, mask.as_deref(), &ck.experiment.sim, &cfg, mode)?;
    let mut record = json!({
        "checkpoint": checkpoint.display().to_string(),
        "episodes": s.episodes,
        "mask": s.mask,
        "success": s.success,
        "spl": s.spl,
        "ci": {"success": s.success_ci, "spl": s.spl_ci},
        "runs": s.runs,
        "per_episode_spl": s.per_episode_spl(),
        "per_episode_success": s.per_episode_success(),
    });
    if let Some(w) = bins.filter(|w| *w > 0.0) {
        record["distance_bins"] = distance_bins(&s, w);
    }
    write_or_print(out, &serde_json::to_string_pretty(&record)?)
}

fn distance_bins(s: &EvalSummary, width: f64) -> serde_json::Value {
    let mut bins: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
    for run in &s.results {
        for r in run {
            let e = bins.entry((r.shortest_geodesic / width) as u64).or_default();
            e.0 += spl(r).unwrap_or(0.0);
            e.1 += 1;
        }
    }
    bins.into_iter()
        .map(|(b, (sum, n))| json!({"from": b as f64 * width, "to": (b + 1) as f64 * width, "spl": sum / n as f64, "n": n}))
        .collect()
}

fn attnmap(
    checkpoint: &Path,
    map: &str,
    spawns: usize,
    goal: Option<Vec<usize>>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let world: GridWorld = match map.parse::<usize>() {
        Ok(id) => {
            let suite = ck.experiment.maps.build()?;
            let w = suite
                .train
                .world(id)
                .or_else(|| suite.heldout.world(id))
                .with_context(|| format!("map {id} is not in the suite"))?;
            (**w).clone()
        }
        Err(_) => GridWorld::from_text(&std::fs::read_to_string(map).with_context(|| format!("reading {map}"))?)?,
    };
    let goal = match goal.as_deref() {
        Some([x, y]) => (*x, *y),
        Some(_) => bail!("--goal takes x,y"),
        None => *world.free_cells().first().context("map has no free cell")?,
    };
    let grid = export_attention_map(&ck.agent, &world, spawns, goal, &ck.experiment.sim, seed, false)?;
    eprintln!("{} spawns skipped", grid.skipped);
    write_or_print(out, grid.to_text().trim_end())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant {s}; expected one of baseline, cpc4, add, attn_e"))
}

fn suite(
    scale: Option<PathBuf>,
    frames: Option<u64>,
    seeds: &[u64],
    variants: Option<Vec<Variant>>,
    out: Option<&Path>,
    mode: ExecMode,
) -> Result<()> {
    let mut scale: DeskScale = match scale {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            } else {
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
        }
        None => DeskScale::default(),
    };
    if let Some(f) = frames {
        scale.total_frames = f;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let random = random_policy_success(&scale, mode)?;
    println!("random policy: success {:.3} spl {:.3}", random.success, random.spl);
    let mut summary = Vec::new();
    for v in variants.unwrap_or_else(|| Variant::ALL.to_vec()) {
        let mut aucs = Vec::new();
        for &seed in seeds {
            let run = run_variant(&scale, v, seed, mode)?;
            println!(
                "{:<9} seed {seed}: auc {:.4} final success {:.3} spl {:.3} ({:.0}s)",
                v.name(),
                run.success_auc,
                run.final_success,
                run.final_spl,
                run.seconds
            );
            if let Some(dir) = out {
                let p = dir.join(format!("{}_seed{seed}.json", v.name()));
                std::fs::write(&p, serde_json::to_string_pretty(&run)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            aucs.push(run.success_auc);
        }
        let ci = analyze::mean_ci(&aucs);
        println!("{:<9} mean auc {:.4} +- {:.4}", v.name(), ci.mean, ci.half_width);
        summary.push(json!({"variant": v.name(), "aucs": aucs, "mean": ci.mean, "ci": ci.half_width}));
    }
    if let Some(dir) = out {
        let record = json!({"scale": scale, "seeds": seeds, "random_success": random.success, "variants": summary});
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(())
}

fn compare(a: &Path, b: &Path) -> Result<()> {
    let ra: serde_json::Value = read_json(a)?;
    let rb: serde_json::Value = read_json(b)?;
    let get = |v: &serde_json::Value, key: &str| -> Result<Vec<f64>> {
        v[key]
            .as_array()
            .with_context(|| format!("result file lacks {key}"))?
            .iter()
            .map(|x| x.as_f64().context("non-numeric entry"))
            .collect()
    };
    for key in ["per_episode_spl", "per_episode_success"] {
        let (xa, xb) = (get(&ra, key)?, get(&rb, key)?);
        let t = paired_t_test(&xa, &xb).context("need two equal-length episode sets with at least 2 episodes")?;
        println!(
            "{key}: mean(b - a) = {:.4}, t = {:.3}, df = {}, p = {:.4}{}",
            t.mean_delta,
            t.t,
            t.df,
            t.p_value,
            if t.significant(0.05) { " (significant at 0.05)" } else { "" }
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::Train { config, resume } => train(config, resume, mode),
        Command::GenEpisodes {
            checkpoint,
            count,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let suite = ck.experiment.maps.build()?;
            let eps = episode_set(&suite.heldout, count, seed, &ck.experiment.sim)?;
            let specs: Vec<&EpisodeSpec> = eps.iter().map(|e| &e.spec).collect();
            write_or_print(Some(&out), &serde_json::to_string_pretty(&specs)?)
        }
        Command::Eval {
            checkpoint,
            episodes,
            mask,
            greedy,
            distance_bins,
            out,
        } => eval(&checkpoint, &episodes, mask, greedy, distance_bins, out.as_deref(), mode),
        Command::Auc { curve } => {
            let text = std::fs::read_to_string(&curve).with_context(|| format!("reading {}", curve.display()))?;
            println!("{:.6}", auc(&LearningCurve::from_csv(&text)?)?);
            Ok(())
        }
        Command::Attnmap {
            checkpoint,
            map,
            spawns,
            goal,
            seed,
            out,
        } => attnmap(&checkpoint, &map, spawns, goal, seed, out.as_deref()),
        Command::Compare { a, b } => compare(&a, &b),
        Command::Suite {
            scale,
            frames,
            seeds,
            variants,
            out,
        } => suite(scale, frames, &seeds, variants, out.as_deref(), mode),
        Command::Gradcheck { seeds, base_seed } => {
            let results = gradcheck::run_suite(base_seed, seeds, mode)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.check.passes(DEFAULT_REL_TOL);
                failed += usize::from(!ok);
                println!(
                    "{:<24} seed {:<4} {:<18} max rel err {:.2e} {}",
                    format!("{:?}", r.op),
                    r.seed,
                    r.shape,
                    r.check.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            println!("{} cases, {failed} failed", results.len());
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
            Ok(())
        }
    }
}
