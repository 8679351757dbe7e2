//! Procedural map generators: open rooms, divided rooms, corridors, mazes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{GridWorld, DEFAULT_CELL_SIZE};
use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapGenerator {
    /// Empty room.
    Open { width: usize, height: usize },
    /// Room split by random walls, each with a door.
    Rooms {
        width: usize,
        height: usize,
        walls: usize,
    },
    /// Straight one-cell corridor.
    Corridor { length: usize },
    /// Perfect maze on a lattice of `cells_x x cells_y` rooms with
    /// corridors `corridor` cells wide.
    Maze {
        cells_x: usize,
        cells_y: usize,
        corridor: usize,
    },
    /// Open room with random pillars.
    Clutter {
        width: usize,
        height: usize,
        density: f64,
    },
}

impl MapGenerator {
    pub fn generate(&self, seed: u64) -> Result<GridWorld, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            MapGenerator::Open { width, height } => {
                GridWorld::open(width, height, DEFAULT_CELL_SIZE)
            }
            MapGenerator::Corridor { length } => {
                GridWorld::open(length + 2, 3, DEFAULT_CELL_SIZE)
            }
            MapGenerator::Rooms {
                width,
                height,
                walls,
            } => rooms(&mut rng, width, height, walls),
            MapGenerator::Maze {
                cells_x,
                cells_y,
                corridor,
            } => maze(&mut rng, cells_x, cells_y, corridor.max(1)),
            MapGenerator::Clutter {
                width,
                height,
                density,
            } => clutter(&mut rng, width, height, density),
        }
    }
}

fn rooms(rng: &mut ChaCha8Rng, width: usize, height: usize, walls: usize) -> Result<GridWorld, SimError> {
    let mut blocked = vec![false; width * height];
    for _ in 0..walls {
        let vertical = rng.random::<bool>();
        let (span, across) = if vertical { (height, width) } else { (width, height) };
        if across < 5 || span < 4 {
            continue;
        }
        let pos = rng.random_range(2..across - 2);
        let door = rng.random_range(1..span - 2);
        let mut next = blocked.clone();
        for i in 1..span - 1 {
            if i == door || i == door + 1 {
                continue;
            }
            let idx = if vertical { i * width + pos } else { pos * width + i };
            next[idx] = true;
        }
        // a wall crossing an earlier door is dropped
        if is_connected(&GridWorld::new(width, height, DEFAULT_CELL_SIZE, next.clone())?) {
            blocked = next;
        }
    }
    GridWorld::new(width, height, DEFAULT_CELL_SIZE, blocked)
}

fn maze(
    rng: &mut ChaCha8Rng,
    cells_x: usize,
    cells_y: usize,
    corridor: usize,
) -> Result<GridWorld, SimError> {
    let pitch = corridor + 1;
    let width = cells_x * pitch + 1;
    let height = cells_y * pitch + 1;
    let mut blocked = vec![true; width * height];
    let carve = |x0: usize, y0: usize, w: usize, h: usize, blocked: &mut Vec<bool>| {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                blocked[y * width + x] = false;
            }
        }
    };
    let mut visited = vec![false; cells_x * cells_y];
    let mut stack = vec![(0usize, 0usize)];
    visited[0] = true;
    carve(1, 1, corridor, corridor, &mut blocked);
    while let Some(&(cx, cy)) = stack.last() {
        let mut options = Vec::new();
        if cx > 0 && !visited[cy * cells_x + cx - 1] {
            options.push((cx - 1, cy));
        }
        if cx + 1 < cells_x && !visited[cy * cells_x + cx + 1] {
            options.push((cx + 1, cy));
        }
        if cy > 0 && !visited[(cy - 1) * cells_x + cx] {
            options.push((cx, cy - 1));
        }
        if cy + 1 < cells_y && !visited[(cy + 1) * cells_x + cx] {
            options.push((cx, cy + 1));
        }
        let Some(&(nx, ny)) = options.choose(rng) else {
            stack.pop();
            continue;
        };
        visited[ny * cells_x + nx] = true;
        let (ax, ay) = (cx.min(nx), cy.min(ny));
        if nx != cx {
            carve(ax * pitch + 1, ay * pitch + 1, 2 * corridor + 1, corridor, &mut blocked);
        } else {
            carve(ax * pitch + 1, ay * pitch + 1, corridor, 2 * corridor + 1, &mut blocked);
        }
        stack.push((nx, ny));
    }
    GridWorld::new(width, height, DEFAULT_CELL_SIZE, blocked)
}

fn clutter(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    density: f64,
) -> Result<GridWorld, SimError> {
    // Pillars are placed only where they keep the free space connected.
    let mut world = GridWorld::open(width, height, DEFAULT_CELL_SIZE)?;
    let target = ((width - 2) * (height - 2)) as f64 * density.clamp(0.0, 0.5);
    let mut placed = 0usize;
    let mut attempts = 0;
    while (placed as f64) < target && attempts < 10 * width * height {
        attempts += 1;
        let cx = rng.random_range(1..width - 1);
        let cy = rng.random_range(1..height - 1);
        if world.is_blocked(cx, cy) {
            continue;
        }
        let mut cells: Vec<bool> = (0..width * height)
            .map(|i| world.is_blocked(i % width, i / width))
            .collect();
        cells[cy * width + cx] = true;
        let candidate = GridWorld::new(width, height, DEFAULT_CELL_SIZE, cells)?;
        if is_connected(&candidate) {
            world = candidate;
            placed += 1;
        }
    }
    Ok(world)
}

/// True if every free cell is reachable from every other.
pub fn is_connected(world: &GridWorld) -> bool {
    let free = world.free_cells();
    let Some(&first) = free.first() else {
        return true;
    };
    match world.geodesic_field(first) {
        Ok(field) => free.iter().all(|&(x, y)| field.at_cell(x, y).is_finite()),
        Err(_) => false,
    }
}
