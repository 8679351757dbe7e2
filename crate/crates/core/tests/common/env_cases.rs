//! Simulator ground truth: geodesics, reward telescoping, sampling and
//! view rotation.

use std::sync::Arc;

use auxnav::sim::{
    generate_episode, render_observation, Action, Episode, GridWorld, MapSet, NavEnv, SimConfig, TWO_PI,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_world(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> GridWorld {
    let blocked = (0..w * h).map(|_| rng.random_bool(density)).collect();
    GridWorld::new(w, h, 0.25, blocked).unwrap()
}

/// Shortest paths by repeated relaxation over every free cell until nothing
/// changes. Costs are kept as (axial, diagonal) move counts so the
/// comparison is exact up to the final multiply.
fn brute_force(world: &GridWorld, goal: (usize, usize)) -> Vec<Option<(u32, u32)>> {
    let (w, h) = (world.width(), world.height());
    let cost = |c: (u32, u32)| c.0 as f64 + c.1 as f64 * std::f64::consts::SQRT_2;
    let free = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && !world.is_blocked(x as usize, y as usize);
    let mut best: Vec<Option<(u32, u32)>> = vec![None; w * h];
    best[goal.1 * w + goal.0] = Some((0, 0));
    loop {
        let mut changed = false;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !free(x, y) {
                    continue;
                }
                for dx in -1..=1i64 {
                    for dy in -1..=1i64 {
                        if (dx, dy) == (0, 0) || !free(x + dx, y + dy) {
                            continue;
                        }
                        let diagonal = dx != 0 && dy != 0;
                        if diagonal && !(free(x + dx, y) && free(x, y + dy)) {
                            continue;
                        }
                        let Some(nb) = best[((y + dy) as usize) * w + (x + dx) as usize] else { continue };
                        let cand = if diagonal { (nb.0, nb.1 + 1) } else { (nb.0 + 1, nb.1) };
                        let here = &mut best[y as usize * w + x as usize];
                        if here.is_none_or(|c| cost(cand) < cost(c) - 1e-12) {
                            *here = Some(cand);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

pub fn geodesic_field_matches_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for m in 0..50 {
        let world = random_world(&mut rng, 20, 20, 0.3);
        let free = world.free_cells();
        let goal = free[rng.random_range(0..free.len())];
        let field = world.geodesic_field(goal).unwrap();
        let truth = brute_force(&world, goal);
        for y in 0..20 {
            for x in 0..20 {
                let got = field.at_cell(x, y);
                match truth[y * 20 + x] {
                    None => assert!(got.is_infinite(), "map {m} cell ({x},{y}) should be unreachable"),
                    Some((a, d)) => {
                        let want = 0.25 * (a as f64 + d as f64 * std::f64::consts::SQRT_2);
                        assert!((got - want).abs() < 1e-12, "map {m} cell ({x},{y}): {got} vs {want}");
                    }
                }
            }
        }
    }
}

pub fn l_shaped_detour_around_a_wall() {
    let text = "5 5 1.0\n#####\n#...#\n###.#\n#...#\n#####\n";
    let world = GridWorld::from_text(text).unwrap();
    let field = world.geodesic_field((1, 3)).unwrap();
    let truth = brute_force(&world, (1, 3));
    let (a, d) = truth[5 + 1].unwrap();
    // around the end of the wall; the diagonals past its corner are not allowed
    assert_eq!((a, d), (6, 0));
    assert_eq!(field.at_cell(1, 1), 6.0);
}

pub fn rewards_telescope_over_random_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SimConfig {
        max_steps: 60,
        ..SimConfig::default()
    };
    let worlds: Vec<GridWorld> = (0..10).map(|_| random_world(&mut rng, 14, 12, 0.15)).collect();
    let maps = MapSet::new((0..10).collect(), worlds);
    let mut env = NavEnv::new(maps, cfg, 99).unwrap();
    for traj in 0..1000 {
        env.reset().unwrap();
        let ep = env.episode().clone();
        let d0 = ep.geodesic(env.state().position).unwrap();
        assert!((d0 - ep.spec.shortest_geodesic).abs() < 1e-12);
        let mut sum = 0.0;
        let mut moves = 0usize;
        // bias towards movement so trajectories are long enough to matter
        let success = loop {
            let a = match rng.random_range(0..20) {
                0 => Action::Stop,
                1..=12 => Action::Forward,
                13..=16 => Action::TurnLeft,
                _ => Action::TurnRight,
            };
            let out = env.step(a).unwrap();
            sum += out.reward;
            if a != Action::Stop {
                moves += 1;
            }
            if out.done {
                break out.success;
            }
        };
        let d_end = ep.geodesic(env.state().position).unwrap();
        let bonus = if success { cfg.success_reward } else { 0.0 };
        let want = d0 - d_end - cfg.slack_penalty * moves as f64 + bonus;
        assert!((sum - want).abs() < 1e-9, "trajectory {traj}: {sum} vs {want}");
    }
}

pub fn episode_pairs_are_uniform_on_an_open_map() {
    let world = GridWorld::open(20, 20, 0.25).unwrap();
    let cfg = SimConfig::default();
    let free = world.free_cells();
    // region of a cell: 3x3 blocks of the 18x18 interior
    let region = |c: (usize, usize)| ((c.0 - 1) / 6) * 3 + (c.1 - 1) / 6;
    let mut expect_start = [0.0; 9];
    let mut expect_goal = [0.0; 9];
    let mut valid = 0.0;
    for &g in &free {
        let field = world.geodesic_field(g).unwrap();
        for &s in &free {
            if s != g && field.at_cell(s.0, s.1) >= cfg.min_separation {
                expect_start[region(s)] += 1.0;
                expect_goal[region(g)] += 1.0;
                valid += 1.0;
            }
        }
    }
    let n = 1000;
    let mut seen_start = [0.0; 9];
    let mut seen_goal = [0.0; 9];
    for seed in 0..n {
        let spec = generate_episode(&world, 0, seed, &cfg).unwrap();
        let cs = world.cell_of(spec.start.x, spec.start.y);
        let cg = world.cell_of(spec.goal.0, spec.goal.1);
        seen_start[region((cs.0 as usize, cs.1 as usize))] += 1.0;
        seen_goal[region((cg.0 as usize, cg.1 as usize))] += 1.0;
        assert!(spec.shortest_geodesic >= cfg.min_separation);
    }
    let chi = ChiSquared::new(8.0).unwrap();
    for (seen, expect) in [(seen_start, expect_start), (seen_goal, expect_goal)] {
        let stat: f64 = (0..9)
            .map(|i| {
                let e = expect[i] / valid * n as f64;
                (seen[i] - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}");
    }
}

pub fn quarter_turn_rotates_the_egocentric_view() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = 11;
    for _ in 0..50 {
        let world = Arc::new(random_world(&mut rng, 16, 16, 0.25));
        let free = world.free_cells();
        let cell = free[rng.random_range(0..free.len())];
        let goal = free[rng.random_range(0..free.len())];
        let spec = generate_episode(&world, 0, 1, &SimConfig::default());
        let Ok(mut spec) = spec else { continue };
        spec.goal = world.cell_center(goal.0, goal.1);
        let ep = Episode::new(world.clone(), spec).unwrap();
        let mut state = ep.initial_state();
        state.position = world.cell_center(cell.0, cell.1);
        let quarter = rng.random_range(0..4) as f64;
        state.heading = quarter * TWO_PI / 4.0;
        let a = render_observation(&state, &world, k);
        state.heading = (quarter + 1.0) % 4.0 * TWO_PI / 4.0;
        let b = render_observation(&state, &world, k);
        for r in 0..k {
            for c in 0..k {
                assert_eq!(b.ego_view[r * k + c], a.ego_view[(k - 1 - c) * k + r]);
            }
        }
        // the goal marker is clamped to the window border, which does not
        // commute with rotation, so it is only compared strictly inside
        let marker = |v: &[f64]| (0..k * k).find(|&i| v[k * k + i] == 1.0).unwrap();
        let (ma, mb) = (marker(&a.ego_view), marker(&b.ego_view));
        let (ra, ca) = (ma / k, ma % k);
        let inside = |r: usize, c: usize| r > 0 && c > 0 && r < k - 1 && c < k - 1;
        if inside(ra, ca) {
            assert_eq!(mb, ca * k + (k - 1 - ra));
        }
    }
}
