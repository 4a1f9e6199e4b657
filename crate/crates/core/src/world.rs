//! Occupancy-grid scenes, discrete pose kinematics and the geometric oracles
//! (geodesic distance, minimal action count, occlusion) that supervise and
//! score the agent.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on start/goal draws before a map is declared degenerate.
pub const MAX_EPISODE_DRAWS: usize = 10_000;

/// Minimum start-to-goal geodesic, in cells.
pub const MIN_EPISODE_GEODESIC: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tile {
    Wall,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        (self.x.abs_diff(other.x) + self.y.abs_diff(other.y)) as u32
    }
}

/// Compass heading. Row 0 of a map is the top, so North points toward
/// decreasing `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn turn_left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn turn_right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    /// Unit step in map coordinates (x right, y down).
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    /// Counter-clockwise angle from East with North up.
    pub fn angle(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Heading::North => FRAC_PI_2,
            Heading::East => 0.0,
            Heading::South => -FRAC_PI_2,
            Heading::West => PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

impl Pose {
    pub const fn new(x: usize, y: usize, heading: Heading) -> Self {
        Pose { x, y, heading }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    tiles: Vec<Tile>,
}

impl GridMap {
    /// Builds a map from tiles in row-major order.
    pub fn from_tiles(width: usize, height: usize, tiles: Vec<Tile>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format("map has no cells".into()));
        }
        if tiles.len() != width * height {
            return Err(Error::Format(format!(
                "expected {} tiles, got {}",
                width * height,
                tiles.len()
            )));
        }
        let free = tiles.iter().filter(|t| **t == Tile::Free).count();
        if free < 2 {
            return Err(Error::DegenerateMap(format!(
                "{free} free cell(s); at least two are required"
            )));
        }
        Ok(GridMap {
            width,
            height,
            tiles,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn tile(&self, cell: Cell) -> Tile {
        self.tile_at(cell.x as i64, cell.y as i64)
    }

    /// Tile lookup that treats everything outside the grid as wall.
    pub fn tile_at(&self, x: i64, y: i64) -> Tile {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            Tile::Wall
        } else {
            self.tiles[y as usize * self.width + x as usize]
        }
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.tile(cell) == Tile::Free
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Cell::new(x, y)))
            .filter(|c| self.is_free(*c))
            .collect()
    }

    fn index(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        Heading::ALL.into_iter().filter_map(move |h| self.step(cell, h))
    }

    /// Free neighbor of `cell` along `heading`, if any.
    pub fn step(&self, cell: Cell, heading: Heading) -> Option<Cell> {
        let (dx, dy) = heading.delta();
        let (nx, ny) = (cell.x as i64 + dx, cell.y as i64 + dy);
        (self.tile_at(nx, ny) == Tile::Free).then(|| Cell::new(nx as usize, ny as usize))
    }

    /// Renders the map back to its text form (no trailing newline).
    pub fn to_text(&self) -> String {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| match self.tiles[y * self.width + x] {
                        Tile::Wall => '#',
                        Tile::Free => '.',
                    })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Parses `#`/`.` map text. Row 0 is the top of the map.
pub fn load_map(text: &str) -> Result<GridMap> {
    let rows: Vec<&str> = text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    let rows: &[&str] = match rows.iter().rposition(|r| !r.is_empty()) {
        Some(last) => &rows[..=last],
        None => return Err(Error::Format("empty map".into())),
    };
    let width = rows[0].chars().count();
    let mut tiles = Vec::with_capacity(width * rows.len());
    for (y, row) in rows.iter().enumerate() {
        if row.chars().count() != width {
            return Err(Error::Format(format!(
                "row {y} has length {}, expected {width}",
                row.chars().count()
            )));
        }
        for (x, ch) in row.chars().enumerate() {
            tiles.push(match ch {
                '#' => Tile::Wall,
                '.' => Tile::Free,
                other => {
                    return Err(Error::Format(format!(
                        "illegal character {other:?} at row {y}, column {x}"
                    )))
                }
            });
        }
    }
    GridMap::from_tiles(width, rows.len(), tiles)
}

/// Loads every `*.map` file in `dir`, sorted by file name.
pub fn load_map_dir(dir: &Path) -> Result<Vec<(String, GridMap)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "map") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!(
            "no *.map files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let map = load_map(&text).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })?;
            Ok((name, map))
        })
        .collect()
}

/// Breadth-first distances from `origin` to every cell (`None` = unreachable
/// or wall).
#[derive(Debug, Clone)]
pub struct DistanceField {
    width: usize,
    dist: Vec<Option<u32>>,
}

impl DistanceField {
    pub fn new(map: &GridMap, origin: Cell) -> Result<Self> {
        if !map.is_free(origin) {
            return Err(Error::Argument(format!("{origin:?} is not a free cell")));
        }
        let mut dist = vec![None; map.width * map.height];
        let mut queue = VecDeque::new();
        dist[map.index(origin)] = Some(0);
        queue.push_back(origin);
        while let Some(c) = queue.pop_front() {
            let d = dist[map.index(c)].unwrap_or(0);
            for n in map.neighbors(c) {
                let slot = &mut dist[map.index(n)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        Ok(DistanceField {
            width: map.width,
            dist,
        })
    }

    pub fn get(&self, cell: Cell) -> Option<u32> {
        if cell.x >= self.width {
            return None;
        }
        self.dist.get(cell.y * self.width + cell.x).copied().flatten()
    }
}

/// Shortest 4-connected path length through free cells, or `None` when
/// `to` cannot be reached.
pub fn geodesic_distance(map: &GridMap, from: Cell, to: Cell) -> Result<Option<u32>> {
    if !map.is_free(to) {
        return Err(Error::Argument(format!("{to:?} is not a free cell")));
    }
    if !map.is_free(from) {
        return Err(Error::Argument(format!("{from:?} is not a free cell")));
    }
    Ok(DistanceField::new(map, to)?.get(from))
}

/// Number of moves (Forward/TurnLeft/TurnRight) from every pose to the goal
/// cell, computed by reverse breadth-first search over the pose graph.
#[derive(Debug, Clone)]
pub struct PoseField {
    width: usize,
    moves: Vec<Option<u32>>,
}

impl PoseField {
    pub fn new(map: &GridMap, goal: Cell) -> Result<Self> {
        if !map.is_free(goal) {
            return Err(Error::Argument(format!("{goal:?} is not a free cell")));
        }
        let width = map.width;
        let idx = |x: usize, y: usize, h: Heading| (y * width + x) * 4 + h.index();
        let mut moves = vec![None; map.width * map.height * 4];
        let mut queue = VecDeque::new();
        for h in Heading::ALL {
            moves[idx(goal.x, goal.y, h)] = Some(0);
            queue.push_back(Pose::new(goal.x, goal.y, h));
        }
        while let Some(p) = queue.pop_front() {
            let d = moves[idx(p.x, p.y, p.heading)].unwrap_or(0);
            // Predecessors: the two poses that turn into this heading, and the
            // cell behind that moves forward into this one.
            let mut preds = vec![
                Pose::new(p.x, p.y, p.heading.turn_left()),
                Pose::new(p.x, p.y, p.heading.turn_right()),
            ];
            let (dx, dy) = p.heading.delta();
            let (bx, by) = (p.x as i64 - dx, p.y as i64 - dy);
            if map.tile_at(bx, by) == Tile::Free {
                preds.push(Pose::new(bx as usize, by as usize, p.heading));
            }
            for q in preds {
                let slot = &mut moves[idx(q.x, q.y, q.heading)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        Ok(PoseField { width, moves })
    }

    /// Moves needed to stand on the goal cell from `pose`.
    pub fn moves(&self, pose: Pose) -> Option<u32> {
        if pose.x >= self.width {
            return None;
        }
        self.moves
            .get((pose.y * self.width + pose.x) * 4 + pose.heading.index())
            .copied()
            .flatten()
    }
}

/// Minimum number of actions, including the final Stop, that ends an episode
/// successfully from `start`.
pub fn min_action_count(map: &GridMap, start: Pose, goal: Cell) -> Result<u32> {
    if !map.is_free(start.cell()) {
        return Err(Error::Argument(format!("{start:?} is not on a free cell")));
    }
    PoseField::new(map, goal)?
        .moves(start)
        .map(|m| m + 1)
        .ok_or(Error::Unreachable {
            from: (start.x, start.y),
        })
}

/// Cells touched by the segment between the centers of `a` and `b`,
/// including both endpoints. Corner crossings include both side cells.
pub fn supercover(a: Cell, b: Cell) -> Vec<Cell> {
    let (x0, y0) = (a.x as i64, a.y as i64);
    let dx = b.x as i64 - x0;
    let dy = b.y as i64 - y0;
    let (nx, ny) = (dx.abs(), dy.abs());
    let (sx, sy) = (dx.signum(), dy.signum());
    let (mut x, mut y) = (x0, y0);
    let mut cells = vec![a];
    let (mut ix, mut iy) = (0, 0);
    while ix < nx || iy < ny {
        // Compare the parametric crossing points of the next vertical and
        // horizontal grid lines: (1 + 2ix) / nx vs (1 + 2iy) / ny.
        let lhs = (1 + 2 * ix) * ny;
        let rhs = (1 + 2 * iy) * nx;
        if lhs == rhs {
            cells.push(Cell::new((x + sx) as usize, y as usize));
            cells.push(Cell::new(x as usize, (y + sy) as usize));
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        } else if lhs < rhs {
            x += sx;
            ix += 1;
        } else {
            y += sy;
            iy += 1;
        }
        cells.push(Cell::new(x as usize, y as usize));
    }
    cells
}

/// Number of wall cells crossed by the straight segment between two cell
/// centers.
pub fn occlusion_count(map: &GridMap, a: Cell, b: Cell) -> u32 {
    supercover(a, b)
        .into_iter()
        .filter(|c| !map.is_free(*c))
        .count() as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub map_id: usize,
    pub start: Pose,
    pub goal: Cell,
    pub sound_class: u32,
    pub max_steps: u32,
}

impl Episode {
    /// Checks the episode invariants against `map`, returning the start-goal
    /// geodesic.
    pub fn validate(&self, map: &GridMap) -> Result<u32> {
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be positive".into()));
        }
        if !map.is_free(self.start.cell()) || !map.is_free(self.goal) {
            return Err(Error::Argument("start and goal must be free cells".into()));
        }
        match geodesic_distance(map, self.start.cell(), self.goal)? {
            Some(d) if d >= MIN_EPISODE_GEODESIC => Ok(d),
            Some(d) => Err(Error::Argument(format!(
                "start-goal geodesic {d} is below {MIN_EPISODE_GEODESIC}"
            ))),
            None => Err(Error::Argument("goal unreachable from start".into())),
        }
    }
}

/// Draws a valid episode: uniform free start cell and heading, uniform free
/// goal cell, uniform sound class.
pub fn sample_episode<R: Rng + ?Sized>(
    map: &GridMap,
    map_id: usize,
    rng: &mut R,
    classes: &[u32],
    max_steps: u32,
) -> Result<Episode> {
    if classes.is_empty() {
        return Err(Error::Argument("no candidate sound classes".into()));
    }
    if max_steps == 0 {
        return Err(Error::Argument("max_steps must be positive".into()));
    }
    let free = map.free_cells();
    for _ in 0..MAX_EPISODE_DRAWS {
        let start = free[rng.random_range(0..free.len())];
        let heading = Heading::from_index(rng.random_range(0..4));
        let goal = free[rng.random_range(0..free.len())];
        if start == goal {
            continue;
        }
        if let Some(d) = geodesic_distance(map, start, goal)? {
            if d >= MIN_EPISODE_GEODESIC {
                let sound_class = classes[rng.random_range(0..classes.len())];
                return Ok(Episode {
                    map_id,
                    start: Pose::new(start.x, start.y, heading),
                    goal,
                    sound_class,
                    max_steps,
                });
            }
        }
    }
    Err(Error::DegenerateMap(format!(
        "no start/goal pair with geodesic >= {MIN_EPISODE_GEODESIC} after {MAX_EPISODE_DRAWS} draws"
    )))
}

/// The fixed ten-map benchmark shipped with the repository.
pub fn benchmark_maps() -> Vec<(String, GridMap)> {
    BENCHMARK_MAPS
        .iter()
        .map(|(name, text)| {
            (
                name.to_string(),
                load_map(text).expect("bundled benchmark map is valid"),
            )
        })
        .collect()
}

const BENCHMARK_MAPS: [(&str, &str); 10] = [
    ("00_open", include_str!("../../../maps/00_open.map")),
    ("01_two_rooms", include_str!("../../../maps/01_two_rooms.map")),
    ("02_corridor", include_str!("../../../maps/02_corridor.map")),
    ("03_pillars", include_str!("../../../maps/03_pillars.map")),
    ("04_three_rooms", include_str!("../../../maps/04_three_rooms.map")),
    ("05_spiral", include_str!("../../../maps/05_spiral.map")),
    ("06_offices", include_str!("../../../maps/06_offices.map")),
    ("07_l_shape", include_str!("../../../maps/07_l_shape.map")),
    ("08_cross", include_str!("../../../maps/08_cross.map")),
    ("09_apartment", include_str!("../../../maps/09_apartment.map")),
];
