//! Small end-to-end training configurations that finish in seconds.

use auxnav::parallel::ExecMode;
use std::path::Path;

use auxnav::trainer::{Checkpoint, DeskScale, ExperimentConfig, Trainer, Variant};

/// Attention-fused three-task agent on the desk map suite, shrunk to
/// `updates` PPO updates of 32 frames with validation every other update.
pub fn tiny_experiment(seed: u64, updates: u64, exec: ExecMode) -> ExperimentConfig {
    let scale = DeskScale {
        validation_episodes: 4,
        max_steps: 40,
        ..DeskScale::default()
    };
    let mut exp = scale.experiment(Variant::AttnE, seed, exec);
    exp.agent.embedding_size = 16;
    exp.agent.belief.hidden = 12;
    exp.ppo.workers = 2;
    exp.ppo.rollout_len = 16;
    exp.ppo.epochs = 2;
    exp.total_frames = updates * exp.ppo.frames_per_update() as u64;
    exp.validation.every_frames = 2 * exp.ppo.frames_per_update() as u64;
    exp.validation.eval.seeds = vec![0];
    exp
}

fn train(exp: ExperimentConfig) -> Result<Trainer, String> {
    let mut t = Trainer::new(exp).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    Ok(t)
}

fn same_run(a: &Trainer, b: &Trainer, what: &str) -> Result<(), String> {
    if a.agent.tape != b.agent.tape {
        return Err(format!("{what}: parameters differ"));
    }
    if a.metrics != b.metrics {
        return Err(format!("{what}: metric streams differ"));
    }
    if a.checkpoint().state != b.checkpoint().state {
        return Err(format!("{what}: trainer state differs"));
    }
    Ok(())
}

/// Same seed twice sequentially, then on the rayon pool: all three runs
/// must agree bit for bit, and a different seed must not.
pub fn determinism(seed: u64, updates: u64) -> Result<(), String> {
    let a = train(tiny_experiment(seed, updates, ExecMode::Sequential))?;
    let b = train(tiny_experiment(seed, updates, ExecMode::Sequential))?;
    same_run(&a, &b, "repeat")?;
    let p = train(tiny_experiment(seed, updates, ExecMode::Parallel))?;
    same_run(&a, &p, "parallel")?;
    let other = train(tiny_experiment(seed + 1, updates, ExecMode::Sequential))?;
    if other.agent.tape == a.agent.tape {
        return Err("a different seed produced identical parameters".into());
    }
    Ok(())
}

/// Saves mid-run, loads, and checks nothing was lost in between.
pub fn checkpoint_round_trip(dir: &Path) -> Result<(), String> {
    let mut t = Trainer::new(tiny_experiment(5, 3, ExecMode::Sequential)).map_err(|e| e.to_string())?;
    t.validate().map_err(|e| e.to_string())?;
    for _ in 0..3 {
        t.step().map_err(|e| e.to_string())?;
    }
    let path = dir.join("round_trip.json");
    let ck = t.checkpoint();
    ck.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    if back.experiment != ck.experiment {
        return Err("experiment config changed".into());
    }
    if back.agent.config != ck.agent.config || back.agent.tape != ck.agent.tape {
        return Err("agent changed".into());
    }
    if back.state != ck.state {
        return Err("trainer state changed".into());
    }
    Ok(())
}

/// Interrupts a run at a checkpoint, resumes from disk, and compares the
/// remaining metric rows, CSV file and final parameters with an
/// uninterrupted run.
pub fn resume_matches(dir: &Path) -> Result<(), String> {
    let updates = 6;
    let mut exp = tiny_experiment(9, updates, ExecMode::Sequential);
    let per = exp.ppo.frames_per_update() as u64;
    let full_csv = dir.join("full.csv");
    let mut full = Trainer::new(exp.clone()).map_err(|e| e.to_string())?;
    full.attach_metrics(&full_csv).map_err(|e| e.to_string())?;
    full.run().map_err(|e| e.to_string())?;

    exp.output_dir = Some(dir.join("interrupted"));
    exp.checkpoint_every = 3 * per;
    let part_csv = dir.join("interrupted.csv");
    let mut first = Trainer::new(exp.clone()).map_err(|e| e.to_string())?;
    first.attach_metrics(&part_csv).map_err(|e| e.to_string())?;
    first.run().map_err(|e| e.to_string())?;
    let ck_path = first.checkpoint_path(3 * per).ok_or("no checkpoint path")?;
    drop(first);

    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(ck).map_err(|e| e.to_string())?;
    resumed.attach_metrics(&part_csv).map_err(|e| e.to_string())?;
    resumed.run().map_err(|e| e.to_string())?;

    if resumed.agent.tape != full.agent.tape {
        return Err("final parameters differ after resuming".into());
    }
    let tail: Vec<_> = full.metrics.iter().filter(|r| r.frames() > 3 * per).cloned().collect();
    if resumed.metrics != tail {
        return Err(format!("resumed stream has {} rows, expected {}", resumed.metrics.len(), tail.len()));
    }
    if resumed.validation != full.validation {
        return Err("validation history differs".into());
    }
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| e.to_string());
    if read(&full_csv)? != read(&part_csv)? {
        return Err("metrics CSV differs from the uninterrupted run".into());
    }
    Ok(())
}
