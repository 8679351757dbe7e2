//! Loss and return oracles: library values against the scalar references.

use auxnav::agent::{Agent, AgentConfig, FusionMethod};
use auxnav::auxiliary::{
    cpc_loss, cpc_offset_weights, horizon_weights, inverse_dynamics_loss, plan_cpc, plan_id, plan_td,
    temporal_distance_loss, weighted_cpc16_loss, AuxTaskConfig, AuxTaskKind, TaskHead, TrajectoryBatch,
    CPC_HORIZONS, CPC_MAX_HORIZON,
};
use auxnav::nn::{Graph, ParamTape, Tensor};
use auxnav::parallel::ExecMode;
use auxnav::sim::{GridWorld, MapSet, NavEnv, Observation, SimConfig};
use auxnav::trainer::{collect_rollouts, compute_gae, minibatch_loss, Minibatch, PpoConfig, Worker};
use super::{close, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SLICES: u64 = 20;
const E: usize = 5;
const H: usize = 7;

/// A head with its parameters scrambled away from the calibrated init so
/// the comparison exercises every weight.
fn head(kind: AuxTaskKind, seed: u64) -> (ParamTape, TaskHead) {
    let mut tape = ParamTape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = TaskHead::new(&mut tape, &mut rng, "t", kind, E, H);
    for v in tape.flat_values_mut() {
        *v = rng.random_range(-0.6..0.6);
    }
    (tape, h)
}

fn slice(seed: u64) -> Slice {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let steps = rng.random_range(4..=20);
    let batch = rng.random_range(1..=3);
    Slice::random(&mut rng, steps, batch, E, H, 0.15)
}

fn with_batch<T>(tape: &ParamTape, s: &Slice, f: impl FnOnce(&mut Graph<'_>, &TrajectoryBatch<'_>) -> T) -> T {
    let mut g = Graph::new(tape);
    let phi = g.constant(Tensor::from_vec(s.rows(), E, s.phi.clone())).unwrap();
    let belief = g.constant(Tensor::from_vec(s.rows(), H, s.belief.clone())).unwrap();
    let batch = TrajectoryBatch {
        phi,
        belief,
        actions: &s.actions,
        starts: &s.starts,
        steps: s.steps,
        batch: s.batch,
    };
    f(&mut g, &batch)
}

pub fn inverse_dynamics_matches_scalar_reference() {
    for seed in 0..SLICES {
        let s = slice(seed);
        let (tape, h) = head(AuxTaskKind::InverseDynamics, seed);
        let TaskHead::InverseDynamics(lin) = &h else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_id(&s.starts, &s.actions, s.steps, s.batch, 1.0, &mut rng);
        let (want, n) = super::inverse_dynamics(&tape, lin, &s);
        assert_eq!(plan.pairs.len(), n, "slice {seed}");
        if n == 0 {
            continue;
        }
        let got = with_batch(&tape, &s, |g, b| inverse_dynamics_loss(g, lin, b, &plan, 0.1).unwrap().report);
        assert!(close(got.raw_loss, want, 1e-6), "slice {seed}: {} vs {want}", got.raw_loss);
        assert!(close(got.weighted_loss, 0.1 * want, 1e-6));
    }
}

pub fn eight_step_slice_scores_all_seven_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = Slice::random(&mut rng, 8, 1, E, H, 0.0);
    s.starts = vec![false; 8];
    let (tape, h) = head(AuxTaskKind::InverseDynamics, 5);
    let TaskHead::InverseDynamics(lin) = &h else { unreachable!() };
    let plan = plan_id(&s.starts, &s.actions, 8, 1, 1.0, &mut rng);
    assert_eq!(plan.pairs.len(), 7);
    let (want, n) = super::inverse_dynamics(&tape, lin, &s);
    assert_eq!(n, 7);
    let got = with_batch(&tape, &s, |g, b| inverse_dynamics_loss(g, lin, b, &plan, 1.0).unwrap().report);
    assert!(close(got.raw_loss, want, 1e-9));
}

pub fn temporal_distance_matches_scalar_reference() {
    for seed in 0..SLICES {
        for normalize in [true, false] {
            let s = slice(seed);
            let (tape, h) = head(AuxTaskKind::TemporalDistance, seed);
            let TaskHead::TemporalDistance(lin) = &h else { unreachable!() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = plan_td(&s.starts, s.steps, s.batch, 8, normalize, &mut rng);
            if plan.pairs.is_empty() {
                continue;
            }
            let want = super::temporal_distance(&tape, lin, &s, &plan, normalize);
            let got = with_batch(&tape, &s, |g, b| temporal_distance_loss(g, lin, b, &plan, 0.4).unwrap().report);
            assert!(close(got.raw_loss, want, 1e-6), "slice {seed}: {} vs {want}", got.raw_loss);
        }
    }
}

pub fn td_pair_three_seven_in_ten_steps() {
    // prediction 0 against |7 - 3| / 10
    let s = Slice {
        steps: 10,
        batch: 1,
        e: E,
        h: H,
        phi: vec![0.0; 10 * E],
        belief: vec![0.0; 10 * H],
        actions: vec![0; 10],
        starts: vec![false; 10],
    };
    let (mut tape, h) = head(AuxTaskKind::TemporalDistance, 0);
    for v in tape.flat_values_mut() {
        *v = 0.0;
    }
    let TaskHead::TemporalDistance(lin) = &h else { unreachable!() };
    let plan = auxnav::auxiliary::TdPlan {
        pairs: vec![auxnav::auxiliary::TdPair {
            row_i: 3,
            row_j: 7,
            end_row: 9,
            target: 0.4,
        }],
    };
    let got = with_batch(&tape, &s, |g, b| temporal_distance_loss(g, lin, b, &plan, 0.4).unwrap().report);
    assert!((got.raw_loss - 0.08).abs() < 1e-12);
    assert!((super::temporal_distance(&tape, lin, &s, &plan, true) - 0.08).abs() < 1e-12);
}

fn cpc_head(seed: u64) -> (ParamTape, auxnav::auxiliary::CpcHead) {
    let (tape, h) = head(AuxTaskKind::Cpc { k: 1 }, seed);
    let TaskHead::Cpc(c) = h else { unreachable!() };
    (tape, c)
}

pub fn cpc_matches_hand_unrolled_reference_for_every_horizon() {
    for seed in 0..SLICES {
        let s = slice(seed);
        let (tape, head) = cpc_head(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_cpc(&s.starts, s.steps, s.batch, 1.0, &mut rng);
        let mut anchors: Vec<(usize, usize)> = plan.anchors.iter().map(|a| (a.row, a.valid)).collect();
        anchors.sort_unstable();
        assert_eq!(anchors, super::cpc_anchors(&s, CPC_MAX_HORIZON), "slice {seed}");
        if plan.anchors.is_empty() {
            continue;
        }
        for k in CPC_HORIZONS {
            let (want, per_pair) = super::cpc(&tape, &head, &s, &plan, &horizon_weights(k));
            let got = with_batch(&tape, &s, |g, b| cpc_loss(g, &head, b, &plan, k, 0.1).unwrap().report);
            assert!(close(got.raw_loss, want, 1e-6), "slice {seed} k {k}: {} vs {want}", got.raw_loss);
            assert!(close(got.per_pair_loss.unwrap(), per_pair, 1e-6));
        }
    }
}

pub fn cpc_six_steps_horizon_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut s = Slice::random(&mut rng, 6, 1, E, H, 0.0);
    s.starts = vec![false; 6];
    let (tape, head) = cpc_head(77);
    let plan = plan_cpc(&s.starts, 6, 1, 1.0, &mut rng);
    assert_eq!(plan.anchors.len(), 5);
    let (want, _) = super::cpc(&tape, &head, &s, &plan, &[1.0, 1.0]);
    let got = with_batch(&tape, &s, |g, b| cpc_loss(g, &head, b, &plan, 2, 1.0).unwrap().report);
    assert!(close(got.raw_loss, want, 1e-9));
}

pub fn weighted_cpc16_matches_reference_and_horizon_sum() {
    for seed in 0..SLICES {
        let s = slice(seed);
        let (tape, head) = cpc_head(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_cpc(&s.starts, s.steps, s.batch, 0.5, &mut rng);
        if plan.anchors.is_empty() {
            continue;
        }
        let (want, _) = super::cpc(&tape, &head, &s, &plan, &cpc_offset_weights());
        let (got, sum) = with_batch(&tape, &s, |g, b| {
            let w = weighted_cpc16_loss(g, &head, b, &plan, 0.1).unwrap().report.raw_loss;
            let sum: f64 = CPC_HORIZONS
                .iter()
                .map(|&k| cpc_loss(g, &head, b, &plan, k, 0.1).unwrap().report.raw_loss)
                .sum();
            (w, sum)
        });
        assert!(close(got, want, 1e-6), "slice {seed}: {got} vs {want}");
        assert!((got - sum).abs() < 1e-10, "slice {seed}: {got} vs {sum}");
    }
}

pub fn gae_matches_brute_force_discounted_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..SLICES {
        let steps = rng.random_range(1..=12);
        let b_len = rng.random_range(1..=4);
        let rows = steps * b_len;
        let rewards: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..2.5)).collect();
        let values: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dones: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.2)).collect();
        let bootstrap: Vec<f64> = (0..b_len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (gamma, tau) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
        let (adv, ret) = compute_gae(&rewards, &values, &dones, &bootstrap, gamma, tau);
        let want = super::gae(&rewards, &values, &dones, &bootstrap, gamma, tau);
        for r in 0..rows {
            assert!((adv[r] - want[r]).abs() < 1e-10, "case {case} row {r}: {} vs {}", adv[r], want[r]);
            assert!((ret[r] - (want[r] + values[r])).abs() < 1e-10);
        }
    }
}

struct Stepwise {
    slice_per_module: Vec<Slice>,
    logits: Vec<[f64; 4]>,
    values: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

/// Replays a rollout step by step through `act`, collecting everything the
/// references need.
fn replay(agent: &Agent, r: &auxnav::trainer::Rollout) -> Stepwise {
    let n = agent.module_count();
    let e = agent.config.embedding_size;
    let h = agent.hidden_size();
    let rows = r.frames();
    let mut phi = vec![0.0; rows * e];
    let mut belief = vec![vec![0.0; rows * h]; n];
    let mut logits = vec![[0.0; 4]; rows];
    let mut values = vec![0.0; rows];
    let mut weights = vec![Vec::new(); rows];
    for b in 0..r.workers {
        let mut prev = agent.initial_beliefs();
        for (m, h0) in r.h0.iter().enumerate() {
            prev.hidden[m] = h0.row(b).to_vec();
        }
        for t in 0..r.steps {
            let row = t * r.workers + b;
            let obs = Observation {
                ego_view: r.ego[row * r.view_len..(row + 1) * r.view_len].to_vec(),
                gps_compass: [r.gps[2 * row], r.gps[2 * row + 1]],
            };
            let out = agent.act::<ChaCha8Rng>(&obs, &prev, r.starts[row], None, None).unwrap();
            phi[row * e..(row + 1) * e].copy_from_slice(&out.embedding);
            for m in 0..n {
                belief[m][row * h..(row + 1) * h].copy_from_slice(&out.beliefs.hidden[m]);
            }
            logits[row] = out.policy.logits;
            values[row] = out.policy.value;
            weights[row] = out.beliefs.weights.clone();
            prev = out.beliefs;
        }
    }
    let slice_per_module = belief
        .into_iter()
        .map(|bel| Slice {
            steps: r.steps,
            batch: r.workers,
            e,
            h,
            phi: phi.clone(),
            belief: bel,
            actions: r.actions.clone(),
            starts: r.starts.clone(),
        })
        .collect();
    Stepwise {
        slice_per_module,
        logits,
        values,
        weights,
    }
}

fn assembly_case(cfg: AgentConfig, seed: u64) {
    let mut agent = Agent::new(cfg).unwrap();
    // move the policy head off its near-uniform init
    let mut prng = ChaCha8Rng::seed_from_u64(seed);
    for v in agent.tape.value_mut(agent.policy.weight) {
        *v = prng.random_range(-0.2..0.2);
    }
    let sim = SimConfig {
        max_steps: 5,
        ..SimConfig::default()
    };
    let maps = MapSet::new(vec![0], vec![GridWorld::open(8, 8, 0.25).unwrap()]);
    let mut workers: Vec<Worker> = (0..2)
        .map(|b| Worker::new(NavEnv::new(maps.clone(), sim, seed * 10 + b).unwrap(), &agent, seed * 10 + b))
        .collect();
    collect_rollouts(&agent, &mut workers, 3, ExecMode::Sequential).unwrap();
    let r = collect_rollouts(&agent, &mut workers, 9, ExecMode::Sequential).unwrap();
    let rows = r.frames();
    let adv: Vec<f64> = (0..rows).map(|_| prng.random_range(-1.5..1.5)).collect();
    let ret: Vec<f64> = (0..rows).map(|_| prng.random_range(-1.5..1.5)).collect();
    // old log-probs shifted so some ratios fall outside the clip range
    let mut data = r.clone();
    for lp in &mut data.log_probs {
        *lp += prng.random_range(-0.3..0.3);
    }
    let ppo = PpoConfig::default();
    let mb = Minibatch {
        data: &data,
        advantages: &adv,
        returns: &ret,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let mut plan_rng = rng.clone();
    let (_, got) = {
        let mut g = Graph::new(&agent.tape);
        let (node, br) = minibatch_loss(&mut g, &agent, &mb, &ppo, &mut rng).unwrap();
        (g.scalar(node), br)
    };

    let sw = replay(&agent, &data);
    let mut policy = 0.0;
    let mut value = 0.0;
    let mut ent = 0.0;
    let mut h_attn = 0.0;
    for row in 0..rows {
        let p = super::softmax(&sw.logits[row]);
        let logp = p[data.actions[row]].ln();
        let ratio = (logp - data.log_probs[row]).exp();
        let clipped = ratio.clamp(1.0 - ppo.clip, 1.0 + ppo.clip);
        policy -= (ratio * adv[row]).min(clipped * adv[row]);
        value += 0.5 * (sw.values[row] - ret[row]).powi(2);
        ent += super::entropy(&p);
        h_attn += super::entropy(&sw.weights[row]);
    }
    let rows_f = rows as f64;
    let (policy, value, ent) = (policy / rows_f, value / rows_f, ent / rows_f);
    let h_attn = if agent.module_count() > 1 { h_attn / rows_f } else { 0.0 };
    let mut total = policy + ppo.value_coef * value - ppo.entropy_coef * ent
        - agent.config.fusion.entropy_coef * h_attn;
    let modules = agent.config.task_modules();
    for ((task, head), &m) in agent.config.belief.tasks.iter().zip(&agent.heads).zip(&modules) {
        let s = &sw.slice_per_module[m];
        let raw = match (task.kind, head) {
            (AuxTaskKind::InverseDynamics, TaskHead::InverseDynamics(lin)) => {
                let plan = plan_id(&s.starts, &s.actions, s.steps, s.batch, task.subsample(), &mut plan_rng);
                assert!(!plan.pairs.is_empty());
                // the reference scores all pairs; restrict it to the plan by
                // rebuilding a slice-level mean over the sampled ones
                let tape = &agent.tape;
                plan.pairs
                    .iter()
                    .map(|p| {
                        let mut x = s.phi(p.row).to_vec();
                        x.extend_from_slice(s.phi(p.next_row));
                        let end = s.run_bounds(p.row).1 - 1;
                        x.extend_from_slice(s.belief(end * s.batch + p.row % s.batch));
                        let l = super::linear(tape, lin, &x);
                        super::log_sum_exp(&l) - l[s.actions[p.row]]
                    })
                    .sum::<f64>()
                    / plan.pairs.len() as f64
            }
            (AuxTaskKind::TemporalDistance, TaskHead::TemporalDistance(lin)) => {
                let plan = plan_td(&s.starts, s.steps, s.batch, task.pairs(), task.td_normalize, &mut plan_rng);
                super::temporal_distance(&agent.tape, lin, s, &plan, task.td_normalize)
            }
            (AuxTaskKind::Cpc { k }, TaskHead::Cpc(h)) => {
                let plan = plan_cpc(&s.starts, s.steps, s.batch, task.subsample(), &mut plan_rng);
                super::cpc(&agent.tape, h, s, &plan, &horizon_weights(k)).0
            }
            (AuxTaskKind::WeightedCpc16, TaskHead::Cpc(h)) => {
                let plan = plan_cpc(&s.starts, s.steps, s.batch, task.subsample(), &mut plan_rng);
                super::cpc(&agent.tape, h, s, &plan, &cpc_offset_weights()).0
            }
            _ => unreachable!(),
        };
        total += task.beta() * raw;
    }
    assert!(close(got.policy, policy, 1e-6), "policy {} vs {policy}", got.policy);
    assert!(close(got.value, value, 1e-6), "value {} vs {value}", got.value);
    assert!(close(got.action_entropy, ent, 1e-6));
    assert!(close(got.attention_entropy, h_attn, 1e-6));
    assert!(close(got.total, total, 1e-6), "total {} vs {total}", got.total);
    assert!(close(got.assembled(&ppo, agent.config.fusion.entropy_coef), got.total, 1e-12));
}

fn all_tasks() -> Vec<AuxTaskConfig> {
    [
        AuxTaskKind::Cpc { k: 2 },
        AuxTaskKind::InverseDynamics,
        AuxTaskKind::TemporalDistance,
        AuxTaskKind::WeightedCpc16,
    ]
    .into_iter()
    .map(AuxTaskConfig::new)
    .collect()
}

pub fn total_loss_matches_independent_recomputation() {
    for seed in 0..4 {
        assembly_case(AgentConfig::single(all_tasks(), seed), seed);
        assembly_case(AgentConfig::multi(all_tasks(), FusionMethod::DotAttention, 0.01, seed), seed);
        assembly_case(AgentConfig::multi(all_tasks(), FusionMethod::SoftmaxGate, 0.05, seed), seed);
    }
}
