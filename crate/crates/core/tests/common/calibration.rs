//! Loss magnitudes of a freshly initialized agent on real rollouts.

use auxnav::agent::{Agent, AgentConfig};
use auxnav::auxiliary::{AuxTaskConfig, AuxTaskKind};
use auxnav::parallel::ExecMode;
use auxnav::sim::{NavEnv, SimConfig};
use auxnav::trainer::{collect_rollouts, minibatch_loss, MapSuiteConfig, Minibatch, PpoConfig, Worker};
use auxnav::nn::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub id_loss: f64,
    pub cpc_pair_loss: f64,
    pub action_entropy: f64,
}

/// Default-sized agent with ID and CPC|A-4 heads, scored on one rollout of
/// the training maps before any update.
pub fn fresh_agent(seed: u64) -> Calibration {
    let tasks = vec![
        AuxTaskConfig::new(AuxTaskKind::InverseDynamics),
        AuxTaskConfig::new(AuxTaskKind::Cpc { k: 4 }),
    ];
    let agent = Agent::new(AgentConfig::single(tasks, seed)).unwrap();
    let sim = SimConfig::default();
    let suite = MapSuiteConfig::default().build().unwrap();
    let mut workers: Vec<Worker> = (0..4)
        .map(|b| Worker::new(NavEnv::new(suite.train.clone(), sim, seed * 8 + b).unwrap(), &agent, seed * 8 + b + 100))
        .collect();
    let r = collect_rollouts(&agent, &mut workers, 64, ExecMode::Sequential).unwrap();
    let zeros = vec![0.0; r.frames()];
    let mb = Minibatch {
        data: &r,
        advantages: &zeros,
        returns: &zeros,
    };
    let mut g = Graph::new(&agent.tape);
    let (_, br) = minibatch_loss(&mut g, &agent, &mb, &PpoConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let report = |name: &str| br.aux.iter().find(|a| a.task == name).unwrap().clone();
    Calibration {
        id_loss: report("id").raw_loss,
        cpc_pair_loss: report("cpc4").per_pair_loss.unwrap(),
        action_entropy: br.action_entropy,
    }
}

/// Checks the three zero-information targets over `seeds` agents.
pub fn check(seeds: u64) -> Result<String, String> {
    let (ln2, ln4) = (2f64.ln(), 4f64.ln());
    let mut worst = [0.0f64; 3];
    for seed in 0..seeds {
        let c = fresh_agent(seed);
        let dev = [
            (c.id_loss - ln4).abs(),
            (c.cpc_pair_loss - ln2).abs(),
            (c.action_entropy - ln4).abs(),
        ];
        if dev[0] > 0.05 || dev[1] > 0.05 || dev[2] > 0.01 {
            return Err(format!("seed {seed}: {c:?}"));
        }
        for (w, d) in worst.iter_mut().zip(dev) {
            *w = w.max(d);
        }
    }
    Ok(format!(
        "{seeds} agents; max deviation id {:.4}, cpc pair {:.4}, entropy {:.5}",
        worst[0], worst[1], worst[2]
    ))
}
