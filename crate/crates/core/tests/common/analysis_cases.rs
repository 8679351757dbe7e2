//! Analysis tooling: masked fusion replays, attention-map export and AuC.

use auxnav::agent::{Agent, AgentConfig, BeliefSet, FusionMethod};
use auxnav::analyze::{auc, episode_set, evaluate, export_attention_map, EvalConfig, LearningCurve, Policy};
use auxnav::auxiliary::{AuxTaskConfig, AuxTaskKind};
use auxnav::parallel::ExecMode;
use auxnav::sim::{render_observation, step, Action, SimConfig};
use auxnav::trainer::MapSuiteConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion_props::check_renormalized;

fn three_task_agent(method: FusionMethod, seed: u64) -> Agent {
    let tasks = [AuxTaskKind::Cpc { k: 4 }, AuxTaskKind::InverseDynamics, AuxTaskKind::TemporalDistance]
        .into_iter()
        .map(AuxTaskConfig::new)
        .collect();
    let cfg = match method {
        FusionMethod::Average => AgentConfig::single(tasks, seed),
        m => AgentConfig::multi(tasks, m, 0.01, seed),
    };
    let mut cfg = cfg;
    cfg.belief.count = 3;
    cfg.fusion.method = method;
    Agent::new(cfg).unwrap()
}

/// Every non-empty subset of three modules, as flags.
fn masks() -> Vec<Vec<bool>> {
    (1..8u32).map(|bits| (0..3).map(|i| bits & (1 << i) != 0).collect()).collect()
}

/// Steps through a few held-out episodes and, at every step, recomputes
/// the fusion under each mask from the stored beliefs. Returns the number
/// of (step, mask) cases checked.
pub fn masking_reproduces_renormalization() -> usize {
    let sim = SimConfig::default();
    let suite = MapSuiteConfig::default().build().unwrap();
    let episodes = episode_set(&suite.heldout, 6, 3, &sim).unwrap();
    let mut checked = 0;
    for method in [FusionMethod::DotAttention, FusionMethod::SoftmaxGate, FusionMethod::Average, FusionMethod::Fixed(1)] {
        let agent = three_task_agent(method, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for ep in &episodes {
            let mut state = ep.initial_state();
            let mut beliefs: BeliefSet = agent.initial_beliefs();
            let mut first = true;
            loop {
                let obs = render_observation(&state, &ep.world, sim.view_size);
                let out = agent.act(&obs, &beliefs, first, None, Some(&mut rng)).unwrap();
                first = false;
                for mask in masks() {
                    if let FusionMethod::Fixed(i) = method {
                        if !mask[i] {
                            continue;
                        }
                    }
                    let m = agent.mask_beliefs(&out.beliefs, &out.embedding, &mask).unwrap();
                    check_renormalized(&out.beliefs.weights, &m.weights, &mask).unwrap();
                    for k in 0..m.fused.len() {
                        let want: f64 = (0..3).map(|i| m.weights[i] * m.hidden[i][k]).sum();
                        assert!((m.fused[k] - want).abs() < 1e-12);
                    }
                    checked += 1;
                }
                beliefs = out.beliefs;
                let next = step(&state, ep, out.action, &sim).unwrap();
                state = next.state;
                if next.done {
                    break;
                }
            }
        }
    }
    checked
}

/// Masked evaluation puts zero weight on excluded modules at every step.
pub fn masked_evaluation_traces_respect_the_mask() {
    let sim = SimConfig::default();
    let suite = MapSuiteConfig::default().build().unwrap();
    let episodes = episode_set(&suite.heldout, 4, 5, &sim).unwrap();
    let agent = three_task_agent(FusionMethod::DotAttention, 2);
    let cfg = EvalConfig {
        greedy: false,
        seeds: vec![0],
        record_traces: true,
    };
    for mask in masks() {
        let s = evaluate(Policy::Agent(&agent), &episodes, Some(&mask), &sim, &cfg, ExecMode::Sequential).unwrap();
        let mut steps = 0;
        for r in s.results.iter().flatten() {
            for w in &r.attention {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for i in 0..3 {
                    if !mask[i] {
                        assert_eq!(w[i], 0.0);
                    }
                }
                steps += 1;
            }
        }
        assert!(steps > 0);
        assert_eq!(s.mask.as_deref(), Some(mask.as_slice()));
    }
}

/// A fixed(i) agent labels every visited cell with `i`.
pub fn fixed_agent_attention_map_is_uniform() -> usize {
    let sim = SimConfig::default();
    let suite = MapSuiteConfig::default().build().unwrap();
    let world = &suite.heldout.worlds[0];
    let goal = world.free_cells()[world.free_cells().len() / 2];
    let mut labelled = 0;
    for i in 0..3 {
        let agent = three_task_agent(FusionMethod::Fixed(i), 6);
        let grid = export_attention_map(&agent, world, 20, goal, &sim, 11, false).unwrap();
        assert!(!grid.is_empty());
        for &l in &grid.labels {
            assert!(l == -1 || l == i as i64, "fixed({i}) map holds label {l}");
        }
        labelled += grid.labels.iter().filter(|&&l| l >= 0).count();
        // blocked cells are never labelled
        for y in 0..grid.height {
            for x in 0..grid.width {
                if world.is_blocked(x, y) {
                    assert_eq!(grid.get(x, y), -1);
                }
            }
        }
    }
    labelled
}

/// Analytic curves sampled on a frame axis; `(name, measured, exact)`.
pub fn analytic_auc_cases() -> Vec<(&'static str, f64, f64)> {
    let sample = |f: &dyn Fn(f64) -> f64, n: usize| {
        let frames = 2_000_000.0;
        LearningCurve::new((0..=n).map(|i| {
            let x = i as f64 / n as f64;
            (1_000.0 + x * frames, f(x))
        }).collect())
    };
    let e5 = (-5.0f64).exp();
    let cases: Vec<(&str, Box<dyn Fn(f64) -> f64>, f64)> = vec![
        ("constant", Box::new(|_| 0.7), 0.7),
        ("linear", Box::new(|x| x), 0.5),
        ("quadratic", Box::new(|x| x * x), 1.0 / 3.0),
        ("saturating", Box::new(|x| 1.0 - (-5.0 * x).exp()), 1.0 - (1.0 - e5) / 5.0),
        ("sine", Box::new(|x| (std::f64::consts::FRAC_PI_2 * x).sin()), 2.0 / std::f64::consts::PI),
        ("ramp", Box::new(|x| ((x - 0.25) / 0.5).clamp(0.0, 1.0)), 0.5),
    ];
    cases
        .into_iter()
        .map(|(name, f, exact)| (name, auc(&sample(f.as_ref(), 200)).unwrap(), exact))
        .collect()
}

pub fn auc_matches_closed_forms() {
    for (name, got, want) in analytic_auc_cases() {
        assert!((got - want).abs() < 1e-3, "{name}: {got} vs {want}");
    }
}

/// The action counts of the table add up to the recorded steps.
pub fn attention_action_table_counts_every_step() {
    let sim = SimConfig::default();
    let suite = MapSuiteConfig::default().build().unwrap();
    let episodes = episode_set(&suite.heldout, 4, 9, &sim).unwrap();
    let agent = three_task_agent(FusionMethod::DotAttention, 3);
    let cfg = EvalConfig {
        greedy: false,
        seeds: vec![1],
        record_traces: true,
    };
    let s = evaluate(Policy::Agent(&agent), &episodes, None, &sim, &cfg, ExecMode::Sequential).unwrap();
    let results: Vec<_> = s.results.iter().flatten().cloned().collect();
    let t = auxnav::analyze::attention_action_table(&results, 3).unwrap();
    let steps: usize = results.iter().map(|r| r.actions.len()).sum();
    let total: u64 = t.by_module.iter().flatten().sum();
    assert_eq!(total as usize, steps);
    for a in 0..Action::COUNT {
        let taken = results.iter().flat_map(|r| &r.actions).filter(|&&x| x == a).count() as u64;
        assert_eq!((0..3).map(|m| t.by_module[m][a]).sum::<u64>(), taken);
        // with three modules at most three can exceed the threshold per step
        assert!(t.by_action[a].iter().sum::<u64>() <= 3 * taken);
    }
}
