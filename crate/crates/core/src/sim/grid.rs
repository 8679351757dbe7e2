use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SimError;

/// Occupancy grid. Cell `(cx, cy)` covers
/// `[cx*cell_size, (cx+1)*cell_size) x [cy*cell_size, (cy+1)*cell_size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    width: usize,
    height: usize,
    cell_size: f64,
    blocked: Vec<bool>,
}

pub const DEFAULT_CELL_SIZE: f64 = 0.25;

impl GridWorld {
    /// Builds a world from a row-major occupancy grid (`true` = blocked).
    /// Border cells are forced to blocked.
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f64,
        mut blocked: Vec<bool>,
    ) -> Result<Self, SimError> {
        if width < 3 || height < 3 {
            return Err(SimError::MapFormat(format!(
                "map {width}x{height} is smaller than 3x3"
            )));
        }
        if blocked.len() != width * height {
            return Err(SimError::MapFormat(format!(
                "{} cells for a {width}x{height} map",
                blocked.len()
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(SimError::MapFormat(format!("cell size {cell_size}")));
        }
        for cx in 0..width {
            blocked[cx] = true;
            blocked[(height - 1) * width + cx] = true;
        }
        for cy in 0..height {
            blocked[cy * width] = true;
            blocked[cy * width + width - 1] = true;
        }
        Ok(Self {
            width,
            height,
            cell_size,
            blocked,
        })
    }

    /// An empty room: free interior, blocked border.
    pub fn open(width: usize, height: usize, cell_size: f64) -> Result<Self, SimError> {
        Self::new(width, height, cell_size, vec![false; width * height])
    }

    /// Parses the text format: first line `W H cell_size`, then `H` lines of
    /// `W` characters where `#` is blocked and `.` is free.
    pub fn from_text(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| SimError::MapFormat("empty map file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(SimError::MapFormat(format!("bad header `{header}`")));
        }
        let parse_err = |what: &str| SimError::MapFormat(format!("bad {what} in `{header}`"));
        let width: usize = parts[0].parse().map_err(|_| parse_err("width"))?;
        let height: usize = parts[1].parse().map_err(|_| parse_err("height"))?;
        let cell_size: f64 = parts[2].parse().map_err(|_| parse_err("cell size"))?;
        let mut blocked = Vec::with_capacity(width * height);
        let mut rows = 0;
        for line in lines {
            let line = line.trim_end();
            if line.chars().count() != width {
                return Err(SimError::MapFormat(format!(
                    "row {rows} has {} cells, expected {width}",
                    line.chars().count()
                )));
            }
            for ch in line.chars() {
                match ch {
                    '#' => blocked.push(true),
                    '.' => blocked.push(false),
                    other => {
                        return Err(SimError::MapFormat(format!(
                            "unexpected character `{other}` in row {rows}"
                        )))
                    }
                }
            }
            rows += 1;
        }
        if rows != height {
            return Err(SimError::MapFormat(format!(
                "{rows} rows, expected {height}"
            )));
        }
        Self::new(width, height, cell_size, blocked)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.width, self.height, self.cell_size);
        for cy in 0..self.height {
            for cx in 0..self.width {
                s.push(if self.is_blocked(cx, cy) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    #[inline]
    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.width + cx
    }

    #[inline]
    pub fn is_blocked(&self, cx: usize, cy: usize) -> bool {
        self.blocked[self.index(cx, cy)]
    }

    /// Signed-coordinate lookup; anything outside the map reads as blocked.
    pub fn is_blocked_signed(&self, cx: i64, cy: i64) -> bool {
        if cx < 0 || cy < 0 || cx as usize >= self.width || cy as usize >= self.height {
            return true;
        }
        self.is_blocked(cx as usize, cy as usize)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.cell_size).floor() as i64,
            (y / self.cell_size).floor() as i64,
        )
    }

    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.cell_of(x, y);
        !self.is_blocked_signed(cx, cy)
    }

    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        (
            (cx as f64 + 0.5) * self.cell_size,
            (cy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for cy in 0..self.height {
            for cx in 0..self.width {
                if !self.is_blocked(cx, cy) {
                    out.push((cx, cy));
                }
            }
        }
        out
    }

    /// Neighbours on the 8-connected free-cell graph with their step cost.
    /// Diagonal moves require both adjacent axial cells to be free.
    pub fn neighbors(&self, cx: usize, cy: usize) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        const DIRS: [(i64, i64); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        let (x, y) = (cx as i64, cy as i64);
        let axial = self.cell_size;
        let diag = self.cell_size * std::f64::consts::SQRT_2;
        DIRS.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            if self.is_blocked_signed(nx, ny) {
                return None;
            }
            if dx != 0 && dy != 0 {
                if self.is_blocked_signed(x + dx, y) || self.is_blocked_signed(x, y + dy) {
                    return None;
                }
                Some(((nx as usize, ny as usize), diag))
            } else {
                Some(((nx as usize, ny as usize), axial))
            }
        })
    }

    /// Shortest-path distances from every cell to `goal` (Dijkstra).
    pub fn geodesic_field(&self, goal: (usize, usize)) -> Result<GeodesicField, SimError> {
        if goal.0 >= self.width || goal.1 >= self.height || self.is_blocked(goal.0, goal.1) {
            return Err(SimError::BlockedQuery {
                x: self.cell_center(goal.0, goal.1).0,
                y: self.cell_center(goal.0, goal.1).1,
            });
        }
        let mut dist = vec![f64::INFINITY; self.width * self.height];
        let mut heap = BinaryHeap::new();
        dist[self.index(goal.0, goal.1)] = 0.0;
        heap.push(HeapItem {
            dist: 0.0,
            cell: goal,
        });
        while let Some(HeapItem { dist: d, cell }) = heap.pop() {
            if d > dist[self.index(cell.0, cell.1)] {
                continue;
            }
            for (nb, cost) in self.neighbors(cell.0, cell.1) {
                let nd = d + cost;
                let ni = self.index(nb.0, nb.1);
                if nd < dist[ni] {
                    dist[ni] = nd;
                    heap.push(HeapItem { dist: nd, cell: nb });
                }
            }
        }
        Ok(GeodesicField {
            goal,
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            dist,
        })
    }

    pub fn render_ascii(&self, marks: &[((usize, usize), char)]) -> String {
        let mut s = String::new();
        for cy in 0..self.height {
            for cx in 0..self.width {
                let ch = marks
                    .iter()
                    .find(|(c, _)| *c == (cx, cy))
                    .map(|(_, m)| *m)
                    .unwrap_or(if self.is_blocked(cx, cy) { '#' } else { '.' });
                let _ = write!(s, "{ch}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    cell: (usize, usize),
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-goal geodesic distance field in meters; infinite where unreachable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicField {
    goal: (usize, usize),
    width: usize,
    height: usize,
    cell_size: f64,
    #[serde(with = "inf_vec")]
    dist: Vec<f64>,
}

// JSON has no infinity; unreachable cells are stored as null.
mod inf_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|d| d.is_finite().then_some(*d))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl GeodesicField {
    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn at_cell(&self, cx: usize, cy: usize) -> f64 {
        self.dist[cy * self.width + cx]
    }

    pub fn cells(&self) -> &[f64] {
        &self.dist
    }

    /// Bilinear interpolation between the surrounding cell centres, over
    /// those with a finite distance. At a cell centre this is exactly the
    /// cell value.
    pub fn query(&self, world: &GridWorld, x: f64, y: f64) -> Result<f64, SimError> {
        if !world.is_free_point(x, y) {
            return Err(SimError::BlockedQuery { x, y });
        }
        let gx = x / self.cell_size - 0.5;
        let gy = y / self.cell_size - 0.5;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let corners = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        let mut acc = 0.0;
        let mut weight = 0.0;
        for (cx, cy, w) in corners {
            if w == 0.0
                || cx < 0
                || cy < 0
                || cx as usize >= self.width
                || cy as usize >= self.height
            {
                continue;
            }
            let d = self.at_cell(cx as usize, cy as usize);
            if d.is_finite() {
                acc += w * d;
                weight += w;
            }
        }
        if weight == 0.0 {
            Ok(f64::INFINITY)
        } else {
            Ok(acc / weight)
        }
    }
}

/// Geodesic distance between two free positions.
pub fn geodesic_distance(
    world: &GridWorld,
    from: (f64, f64),
    goal: (f64, f64),
) -> Result<f64, SimError> {
    let (gx, gy) = world.cell_of(goal.0, goal.1);
    if world.is_blocked_signed(gx, gy) {
        return Err(SimError::BlockedQuery {
            x: goal.0,
            y: goal.1,
        });
    }
    let field = world.geodesic_field((gx as usize, gy as usize))?;
    field.query(world, from.0, from.1)
}
