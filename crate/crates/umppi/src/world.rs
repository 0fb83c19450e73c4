//! Cluttered-environment generation, ground-truth collision checks, and
//! robot-centered occupancy costmaps with inflation.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::RobotState;
use crate::{real, Real};

/// Collision predicate rollouts evaluate at candidate positions. Implemented
/// by [`Costmap`] (footprint folded into inflation) and by [`GroundTruth`]
/// (exact disc checks).
pub trait CollisionQuery<T> {
    fn is_collision_point(&self, x: T, y: T) -> bool;
}

#[derive(Debug)]
pub enum WorldError {
    /// Dart throwing could not place a single obstacle.
    PlacementFailed,
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for WorldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldError::PlacementFailed => write!(f, "no obstacle placement satisfies the spacing"),
            WorldError::Parse(msg) => write!(f, "obstacle map parse error: {msg}"),
            WorldError::Io(e) => write!(f, "obstacle map io error: {e}"),
        }
    }
}

impl std::error::Error for WorldError {}

impl From<std::io::Error> for WorldError {
    fn from(e: std::io::Error) -> Self {
        WorldError::Io(e)
    }
}

/// One circular obstacle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle<T> {
    pub x: T,
    pub y: T,
    pub radius: T,
}

/// Ground-truth world: disc obstacles scattered over a rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleMap<T> {
    pub width: T,
    pub height: T,
    pub d_min: T,
    pub seed: u64,
    pub obstacles: Vec<Obstacle<T>>,
}

impl<T: Real> ObstacleMap<T> {
    /// Exact collision: some obstacle closer than the summed radii.
    /// Boundary contact (exact equality) does not count.
    pub fn is_collision(&self, x: T, y: T, robot_radius: T) -> bool {
        self.obstacles.iter().any(|o| {
            let dx = x - o.x;
            let dy = y - o.y;
            let reach = robot_radius + o.radius;
            dx * dx + dy * dy < reach * reach
        })
    }

    /// Smallest center distance between any obstacle pair.
    pub fn min_pairwise_distance(&self) -> Option<T> {
        let mut best: Option<T> = None;
        for (i, a) in self.obstacles.iter().enumerate() {
            for b in &self.obstacles[i + 1..] {
                let dx = a.x - b.x;
                let dy = a.y - b.y;
                let d = (dx * dx + dy * dy).sqrt();
                if best.map_or(true, |m| d < m) {
                    best = Some(d);
                }
            }
        }
        best
    }

    /// Line-oriented text form: `width height d_min seed` header, then one
    /// `x y radius` line per obstacle.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.width, self.height, self.d_min, self.seed);
        for o in &self.obstacles {
            out.push_str(&format!("{} {} {}\n", o.x, o.y, o.radius));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, WorldError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| WorldError::Parse("empty map".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(WorldError::Parse(format!(
                "header needs 'width height d_min seed', got {header:?}"
            )));
        }
        let num = |s: &str| -> Result<T, WorldError> {
            s.parse::<f64>()
                .map_err(|e| WorldError::Parse(format!("bad number {s:?}: {e}")))
                .map(real::<T>)
        };
        let seed = fields[3]
            .parse::<u64>()
            .map_err(|e| WorldError::Parse(format!("bad seed {:?}: {e}", fields[3])))?;
        let mut map = ObstacleMap {
            width: num(fields[0])?,
            height: num(fields[1])?,
            d_min: num(fields[2])?,
            seed,
            obstacles: Vec::new(),
        };
        for (idx, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(WorldError::Parse(format!("line {}: need 'x y radius'", idx + 1)));
            }
            map.obstacles.push(Obstacle { x: num(f[0])?, y: num(f[1])?, radius: num(f[2])? });
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Free function mirror of [`ObstacleMap::is_collision`] for pose types.
pub fn is_collision<T: Real>(map: &ObstacleMap<T>, state: &RobotState<T>, robot_radius: T) -> bool {
    map.is_collision(state.x, state.y, robot_radius)
}

/// Exact-geometry collision checker with a fixed footprint radius.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a, T> {
    pub map: &'a ObstacleMap<T>,
    pub robot_radius: T,
}

impl<'a, T: Real> CollisionQuery<T> for GroundTruth<'a, T> {
    fn is_collision_point(&self, x: T, y: T) -> bool {
        self.map.is_collision(x, y, self.robot_radius)
    }
}

/// Forest layout knobs for [`generate_forest`].
#[derive(Clone, Debug)]
pub struct ForestParams<T> {
    pub width: T,
    pub height: T,
    /// Minimum center spacing between obstacles.
    pub d_min: T,
    pub obstacle_radius: T,
    /// Discs kept free of obstacles (mission start and goal regions).
    pub keep_out: Vec<(T, T)>,
    pub keep_out_radius: T,
}

impl<T: Real> ForestParams<T> {
    /// Keep-outs default to the two mission corners with a 2 m radius.
    pub fn new(width: T, height: T, d_min: T, obstacle_radius: T) -> Self {
        Self {
            width,
            height,
            d_min,
            obstacle_radius,
            keep_out: vec![(T::zero(), T::zero()), (width, height)],
            keep_out_radius: real(2.0),
        }
    }
}

/// Candidate draws per `d_min^2` of area before the dart throwing stops.
const DART_ATTEMPTS_PER_SLOT: f64 = 60.0;

/// Scatters obstacles by dart throwing: uniform candidates are kept when
/// they respect `d_min` spacing to everything already placed and stay clear
/// of the keep-out discs. A fixed seed gives a fixed layout.
pub fn generate_forest<T: Real>(
    p: &ForestParams<T>,
    seed: u64,
) -> Result<ObstacleMap<T>, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = (p.width * p.height).to_f64().unwrap_or(0.0);
    let slot = p.d_min.to_f64().unwrap_or(1.0).max(1e-6);
    let attempts = ((area / (slot * slot)) * DART_ATTEMPTS_PER_SLOT).ceil() as usize;
    let mut obstacles: Vec<Obstacle<T>> = Vec::new();
    let d_min_sq = p.d_min * p.d_min;
    let clear = p.keep_out_radius + p.obstacle_radius;
    let clear_sq = clear * clear;
    for _ in 0..attempts.max(1) {
        let x = rng.gen_range(T::zero()..=p.width);
        let y = rng.gen_range(T::zero()..=p.height);
        let blocked_by_keep_out = p
            .keep_out
            .iter()
            .any(|&(kx, ky)| (x - kx) * (x - kx) + (y - ky) * (y - ky) < clear_sq);
        if blocked_by_keep_out {
            continue;
        }
        let too_close = obstacles
            .iter()
            .any(|o| (x - o.x) * (x - o.x) + (y - o.y) * (y - o.y) < d_min_sq);
        if too_close {
            continue;
        }
        obstacles.push(Obstacle { x, y, radius: p.obstacle_radius });
    }
    if obstacles.is_empty() {
        return Err(WorldError::PlacementFailed);
    }
    Ok(ObstacleMap { width: p.width, height: p.height, d_min: p.d_min, seed, obstacles })
}

/// Occupancy of one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellState {
    Free,
    /// Within the inflation radius of an occupied cell.
    Inflated,
    Occupied,
}

/// Axis-aligned occupancy grid. Queries outside the extent are optimistic
/// (treated as free) so receding-horizon rollouts can leave the window.
#[derive(Clone, Debug, PartialEq)]
pub struct Costmap<T> {
    pub origin_x: T,
    pub origin_y: T,
    pub resolution: T,
    pub cells_x: usize,
    pub cells_y: usize,
    cells: Vec<CellState>,
}

impl<T: Real> Costmap<T> {
    pub fn filled(
        origin_x: T,
        origin_y: T,
        resolution: T,
        cells_x: usize,
        cells_y: usize,
    ) -> Self {
        Self {
            origin_x,
            origin_y,
            resolution,
            cells_x,
            cells_y,
            cells: vec![CellState::Free; cells_x * cells_y],
        }
    }

    #[inline]
    pub fn cell(&self, ix: usize, iy: usize) -> CellState {
        self.cells[iy * self.cells_x + ix]
    }

    #[inline]
    fn set(&mut self, ix: usize, iy: usize, s: CellState) {
        self.cells[iy * self.cells_x + ix] = s;
    }

    /// Cell center in world coordinates.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (T, T) {
        let half = real::<T>(0.5);
        (
            self.origin_x + (real::<T>(ix as f64) + half) * self.resolution,
            self.origin_y + (real::<T>(iy as f64) + half) * self.resolution,
        )
    }

    /// Grid index containing a world point, if inside the extent.
    pub fn world_to_cell(&self, x: T, y: T) -> Option<(usize, usize)> {
        let fx = ((x - self.origin_x) / self.resolution).floor().to_f64()?;
        let fy = ((y - self.origin_y) / self.resolution).floor().to_f64()?;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.cells_x || iy >= self.cells_y {
            return None;
        }
        Some((ix, iy))
    }

    pub fn state_at(&self, x: T, y: T) -> Option<CellState> {
        self.world_to_cell(x, y).map(|(ix, iy)| self.cell(ix, iy))
    }

    /// Occupied and inflated both count as collision; outside the extent is
    /// free.
    pub fn is_collision(&self, x: T, y: T) -> bool {
        matches!(self.state_at(x, y), Some(CellState::Occupied) | Some(CellState::Inflated))
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut free = 0;
        let mut inflated = 0;
        let mut occupied = 0;
        for c in &self.cells {
            match c {
                CellState::Free => free += 1,
                CellState::Inflated => inflated += 1,
                CellState::Occupied => occupied += 1,
            }
        }
        (free, inflated, occupied)
    }

    /// Debug dump as a plain-text portable graymap (row 0 at the top).
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.cells_x, self.cells_y);
        for iy in (0..self.cells_y).rev() {
            let mut row = String::new();
            for ix in 0..self.cells_x {
                let v = match self.cell(ix, iy) {
                    CellState::Free => "255",
                    CellState::Inflated => "128",
                    CellState::Occupied => "0",
                };
                if !row.is_empty() {
                    row.push(' ');
                }
                row.push_str(v);
            }
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

impl<T: Real> CollisionQuery<T> for Costmap<T> {
    fn is_collision_point(&self, x: T, y: T) -> bool {
        self.is_collision(x, y)
    }
}

/// Grid geometry and inflation for costmap construction.
#[derive(Clone, Copy, Debug)]
pub struct CostmapParams<T> {
    pub resolution: T,
    pub cells_x: usize,
    pub cells_y: usize,
    /// Robot footprint radius plus safety margin.
    pub inflation_radius: T,
}

impl<T: Real> CostmapParams<T> {
    pub fn new(resolution: T, cells_x: usize, cells_y: usize, inflation_radius: T) -> Self {
        Self { resolution, cells_x, cells_y, inflation_radius }
    }
}

fn rasterize_and_inflate<T: Real>(
    grid: &mut Costmap<T>,
    map: &ObstacleMap<T>,
    include: impl Fn(&Obstacle<T>) -> bool,
    inflation_radius: T,
) {
    let res = grid.resolution.to_f64().unwrap();
    // Occupy every cell whose center lies inside an obstacle disc.
    for o in map.obstacles.iter().filter(|o| include(o)) {
        let r = o.radius.to_f64().unwrap();
        let ox = (o.x - grid.origin_x).to_f64().unwrap();
        let oy = (o.y - grid.origin_y).to_f64().unwrap();
        let ix_lo = ((ox - r) / res).floor().max(0.0) as usize;
        let iy_lo = ((oy - r) / res).floor().max(0.0) as usize;
        let ix_hi = (((ox + r) / res).ceil().max(0.0) as usize).min(grid.cells_x);
        let iy_hi = (((oy + r) / res).ceil().max(0.0) as usize).min(grid.cells_y);
        let rr = o.radius * o.radius;
        for iy in iy_lo..iy_hi {
            for ix in ix_lo..ix_hi {
                let (cx, cy) = grid.cell_center(ix, iy);
                let dx = cx - o.x;
                let dy = cy - o.y;
                if dx * dx + dy * dy <= rr {
                    grid.set(ix, iy, CellState::Occupied);
                }
            }
        }
    }
    // Inflate by stamping a disc of cells around every occupied cell.
    let infl_cells = (inflation_radius.to_f64().unwrap() / res).ceil() as isize;
    let infl_sq = inflation_radius * inflation_radius;
    let occupied: Vec<(usize, usize)> = (0..grid.cells_y)
        .flat_map(|iy| (0..grid.cells_x).map(move |ix| (ix, iy)))
        .filter(|&(ix, iy)| grid.cell(ix, iy) == CellState::Occupied)
        .collect();
    for (ix, iy) in occupied {
        let (cx, cy) = grid.cell_center(ix, iy);
        for dy in -infl_cells..=infl_cells {
            for dx in -infl_cells..=infl_cells {
                let jx = ix as isize + dx;
                let jy = iy as isize + dy;
                if jx < 0 || jy < 0 || jx as usize >= grid.cells_x || jy as usize >= grid.cells_y {
                    continue;
                }
                let (jx, jy) = (jx as usize, jy as usize);
                if grid.cell(jx, jy) != CellState::Free {
                    continue;
                }
                let (nx, ny) = grid.cell_center(jx, jy);
                let ddx = nx - cx;
                let ddy = ny - cy;
                if ddx * ddx + ddy * ddy <= infl_sq {
                    grid.set(jx, jy, CellState::Inflated);
                }
            }
        }
    }
}

/// Robot-centered, world-axis-aligned costmap limited to obstacles whose
/// centers lie within `sensor_range` of the pose. Everything beyond sensing
/// (or outside the window) stays free: unknown space is optimistic.
pub fn build_local_costmap<T: Real>(
    map: &ObstacleMap<T>,
    pose: &RobotState<T>,
    sensor_range: T,
    p: &CostmapParams<T>,
) -> Costmap<T> {
    let half = real::<T>(0.5);
    let ox = pose.x - real::<T>(p.cells_x as f64) * p.resolution * half;
    let oy = pose.y - real::<T>(p.cells_y as f64) * p.resolution * half;
    let mut grid = Costmap::filled(ox, oy, p.resolution, p.cells_x, p.cells_y);
    let range_sq = sensor_range * sensor_range;
    rasterize_and_inflate(
        &mut grid,
        map,
        |o| {
            let dx = o.x - pose.x;
            let dy = o.y - pose.y;
            dx * dx + dy * dy <= range_sq
        },
        p.inflation_radius,
    );
    grid
}

/// Static costmap covering the whole obstacle map (plus a border), for
/// known-map missions; built once per episode.
pub fn build_known_costmap<T: Real>(
    map: &ObstacleMap<T>,
    resolution: T,
    inflation_radius: T,
) -> Costmap<T> {
    let border = real::<T>(1.0);
    let span_x = (map.width + border + border) / resolution;
    let span_y = (map.height + border + border) / resolution;
    let cells_x = span_x.to_f64().unwrap().ceil() as usize;
    let cells_y = span_y.to_f64().unwrap().ceil() as usize;
    let mut grid = Costmap::filled(-border, -border, resolution, cells_x, cells_y);
    rasterize_and_inflate(&mut grid, map, |_| true, inflation_radius);
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forest(seed: u64) -> ObstacleMap<f64> {
        generate_forest(&ForestParams::new(25.0, 25.0, 3.0, 0.15), seed).unwrap()
    }

    #[test]
    fn forest_is_deterministic_per_seed() {
        assert_eq!(forest(5), forest(5));
        assert_ne!(forest(5), forest(6));
    }

    #[test]
    fn forest_respects_spacing_and_keep_outs() {
        for seed in 0..5 {
            let map = forest(seed);
            assert!(map.min_pairwise_distance().unwrap() >= 3.0);
            for o in &map.obstacles {
                let start = (o.x * o.x + o.y * o.y).sqrt();
                let goal = ((o.x - 25.0) * (o.x - 25.0) + (o.y - 25.0) * (o.y - 25.0)).sqrt();
                assert!(start >= 2.0 + 0.15, "obstacle in start disc");
                assert!(goal >= 2.0 + 0.15, "obstacle in goal disc");
                assert!(o.x >= 0.0 && o.x <= 25.0 && o.y >= 0.0 && o.y <= 25.0);
            }
            assert!(map.obstacles.len() > 10, "unexpectedly sparse: {}", map.obstacles.len());
        }
    }

    #[test]
    fn impossible_layout_errors() {
        let mut p = ForestParams::new(3.0, 3.0, 1.0, 0.15);
        p.keep_out = vec![(1.5, 1.5)];
        p.keep_out_radius = 10.0;
        assert!(matches!(generate_forest(&p, 0), Err(WorldError::PlacementFailed)));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let map = forest(11);
        let text = map.to_text();
        let parsed = ObstacleMap::<f64>::from_text(&text).unwrap();
        assert_eq!(map, parsed);
        assert_eq!(text, parsed.to_text());
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(ObstacleMap::<f64>::from_text("").is_err());
        assert!(ObstacleMap::<f64>::from_text("1 2 3\n").is_err());
        assert!(ObstacleMap::<f64>::from_text("10 10 1 0\n1 2\n").is_err());
        assert!(ObstacleMap::<f64>::from_text("10 10 1 0\n1 2 x\n").is_err());
    }

    #[test]
    fn ground_truth_collision_uses_strict_boundary() {
        let map = ObstacleMap {
            width: 10.0,
            height: 10.0,
            d_min: 1.0,
            seed: 0,
            obstacles: vec![Obstacle { x: 5.0, y: 5.0, radius: 0.25 }],
        };
        assert!(map.is_collision(5.25, 5.0, 0.25));
        // Exactly on the combined radius (all values binary-exact): outside.
        assert!(!map.is_collision(5.5, 5.0, 0.25));
        assert!(!map.is_collision(5.625, 5.0, 0.25));
    }

    fn one_obstacle_grid() -> Costmap<f64> {
        let map = ObstacleMap {
            width: 12.0,
            height: 12.0,
            d_min: 1.0,
            seed: 0,
            obstacles: vec![Obstacle { x: 6.0, y: 6.0, radius: 0.15 }],
        };
        build_local_costmap(
            &map,
            &RobotState::new(6.0, 6.0, 0.0),
            7.0,
            &CostmapParams::new(0.05, 240, 240, 0.267),
        )
    }

    #[test]
    fn costmap_marks_obstacle_and_inflation() {
        let grid = one_obstacle_grid();
        assert_eq!(grid.state_at(6.0, 6.0), Some(CellState::Occupied));
        assert_eq!(grid.state_at(6.0 + 0.3, 6.0), Some(CellState::Inflated));
        assert_eq!(grid.state_at(6.0 + 1.0, 6.0), Some(CellState::Free));
        assert!(grid.is_collision(6.0, 6.0));
        assert!(grid.is_collision(6.3, 6.0));
        assert!(!grid.is_collision(7.0, 6.0));
    }

    #[test]
    fn outside_extent_is_optimistic() {
        let grid = one_obstacle_grid();
        assert_eq!(grid.state_at(100.0, 100.0), None);
        assert!(!grid.is_collision(100.0, 100.0));
        assert!(!grid.is_collision(-100.0, -3.0));
    }

    #[test]
    fn sensor_range_filters_obstacles() {
        let map = ObstacleMap {
            width: 30.0,
            height: 30.0,
            d_min: 1.0,
            seed: 0,
            obstacles: vec![
                Obstacle { x: 16.0, y: 15.0, radius: 0.15 },
                Obstacle { x: 26.0, y: 15.0, radius: 0.15 },
            ],
        };
        let p = CostmapParams::new(0.05, 480, 480, 0.267);
        let grid = build_local_costmap(&map, &RobotState::new(15.0, 15.0, 0.0), 7.0, &p);
        assert_eq!(grid.state_at(16.0, 15.0), Some(CellState::Occupied));
        // The far obstacle sits inside the window but beyond the sensor.
        assert_eq!(grid.state_at(26.0, 15.0), Some(CellState::Free));
    }

    #[test]
    fn known_costmap_agrees_with_ground_truth_away_from_boundaries() {
        let map = forest(3);
        let robot_radius = 0.267;
        let grid = build_known_costmap(&map, 0.05, robot_radius);
        let diag = 0.05 * std::f64::consts::SQRT_2;
        let mut checked = 0;
        for iy in 0..100 {
            for ix in 0..100 {
                let x = 0.25 * ix as f64;
                let y = 0.25 * iy as f64;
                // Signed clearance to the nearest footprint boundary.
                let clearance = map
                    .obstacles
                    .iter()
                    .map(|o| {
                        let d = ((x - o.x).powi(2) + (y - o.y).powi(2)).sqrt();
                        d - (o.radius + robot_radius)
                    })
                    .fold(f64::INFINITY, f64::min);
                if clearance.abs() <= diag {
                    continue; // discretization band
                }
                checked += 1;
                assert_eq!(
                    grid.is_collision(x, y),
                    map.is_collision(x, y, robot_radius),
                    "disagreement at ({x}, {y}), clearance {clearance}"
                );
            }
        }
        assert!(checked > 5000);
    }

    #[test]
    fn pgm_dump_has_expected_shape() {
        let grid = one_obstacle_grid();
        let pgm = grid.to_pgm();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("240 240"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.count(), 240);
        assert!(pgm.contains('0'));
    }
}
