//! Synthetic lattice maps, random routes and noisy low-rate GPS traces.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geo::{grid_cell_of, GridCellId, GridSpec, Node, Point, RoadGraph, Segment};
use crate::rng::{rng_for, Rng};

const MAP_RETRIES: usize = 100;
const ROUTE_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPoint {
    pub pos: Point,
    pub t: f64,
}

pub type Trajectory = Vec<GpsPoint>;

#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub cols: usize,
    pub rows: usize,
    pub block_m: f64,
    pub removal_prob: f64,
    pub oneway_prob: f64,
    pub seed: u64,
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec { cols: 8, rows: 8, block_m: 80.0, removal_prob: 0.0, oneway_prob: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub base_sigma_m: f64,
    pub hotspots: Vec<(GridCellId, f64)>,
    /// Grid the hotspot cells are expressed in.
    pub grid: GridSpec,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { base_sigma_m: 15.0, hotspots: Vec::new(), grid: GridSpec::default() }
    }
}

impl NoiseModel {
    /// Per-axis sigma whose Rayleigh mean radial error equals the 15.73 m
    /// field average.
    pub fn field_calibrated() -> Self {
        NoiseModel {
            base_sigma_m: 15.73 / (std::f64::consts::PI / 2.0).sqrt(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_sigma_m >= 0.0) || !self.base_sigma_m.is_finite() {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", self.base_sigma_m)));
        }
        if let Some((c, m)) = self.hotspots.iter().find(|(_, m)| !(*m >= 1.0) || !m.is_finite()) {
            return Err(Error::invalid(format!(
                "hotspot multiplier must be >= 1, got {m} at ({}, {})",
                c.col, c.row
            )));
        }
        Ok(())
    }

    pub fn sigma_at(&self, p: Point) -> f64 {
        let mult = match grid_cell_of(p, &self.grid) {
            Ok(cell) => self
                .hotspots
                .iter()
                .find(|(c, _)| *c == cell)
                .map_or(1.0, |(_, m)| *m),
            Err(_) => 1.0,
        };
        self.base_sigma_m * mult
    }

    /// Mean 2-D error radius for isotropic per-axis sigma (Rayleigh mean).
    pub fn rayleigh_mean(sigma: f64) -> f64 {
        sigma * (std::f64::consts::PI / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub sample_interval_s: f64,
    pub speed_mps: f64,
    pub trajectories: usize,
    pub min_route_segments: usize,
    pub max_route_segments: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sample_interval_s: 30.0,
            speed_mps: 8.0,
            trajectories: 100,
            min_route_segments: 8,
            max_route_segments: 30,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_interval_s > 0.0) || !(self.speed_mps > 0.0) {
            return Err(Error::invalid("sample interval and speed must be positive"));
        }
        if self.trajectories == 0 || self.min_route_segments == 0 {
            return Err(Error::invalid("trajectory and route-length counts must be positive"));
        }
        if self.min_route_segments > self.max_route_segments {
            return Err(Error::invalid(format!(
                "min route segments {} exceeds max {}",
                self.min_route_segments, self.max_route_segments
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSample {
    pub traj_id: u64,
    pub route: Vec<usize>,
    pub points: Trajectory,
    /// Index into `route` of the segment each point was sampled on.
    pub alignment: Vec<usize>,
}

/// Lattice map with random street removal and one-way conversion, retried
/// until strongly connected.
pub fn gen_map(spec: &MapSpec) -> Result<RoadGraph> {
    if spec.cols < 2 || spec.rows < 2 {
        return Err(Error::invalid(format!("lattice must be at least 2x2, got {}x{}", spec.cols, spec.rows)));
    }
    if !(spec.block_m > 0.0) {
        return Err(Error::invalid("block length must be positive"));
    }
    for (name, p) in [("removal", spec.removal_prob), ("oneway", spec.oneway_prob)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} probability {p} outside [0, 1]")));
        }
    }
    let nodes: Vec<Node> = (0..spec.rows)
        .flat_map(|r| (0..spec.cols).map(move |c| (r, c)))
        .enumerate()
        .map(|(id, (r, c))| Node { id, pos: Point::new(c as f64 * spec.block_m, r as f64 * spec.block_m) })
        .collect();
    let mut streets = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let id = r * spec.cols + c;
            if c + 1 < spec.cols {
                streets.push((id, id + 1));
            }
            if r + 1 < spec.rows {
                streets.push((id, id + spec.cols));
            }
        }
    }
    let mut rng = rng_for(spec.seed, "gen-map", 0);
    for _ in 0..MAP_RETRIES {
        let mut segments = Vec::new();
        for &(a, b) in &streets {
            let removed = rng.random::<f64>() < spec.removal_prob;
            let oneway = rng.random::<f64>() < spec.oneway_prob;
            let flip = rng.random::<bool>();
            if removed {
                continue;
            }
            let dirs: &[(usize, usize)] = if oneway {
                if flip { &[(b, a)] } else { &[(a, b)] }
            } else {
                &[(a, b), (b, a)]
            };
            for &(from, to) in dirs {
                segments.push(Segment {
                    id: segments.len(),
                    from,
                    to,
                    length: nodes[from].pos.dist(&nodes[to].pos),
                });
            }
        }
        let graph = RoadGraph::build(nodes.clone(), segments)?;
        if graph.is_strongly_connected() {
            return Ok(graph);
        }
    }
    Err(Error::invalid(format!(
        "no strongly connected map after {MAP_RETRIES} attempts (removal {}, oneway {})",
        spec.removal_prob, spec.oneway_prob
    )))
}

/// Random contiguous route that never repeats a segment and avoids
/// immediate U-turns unless the walk is at a dead end.
pub fn gen_route(graph: &RoadGraph, min_seg: usize, max_seg: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if min_seg == 0 || min_seg > max_seg {
        return Err(Error::invalid(format!("invalid route bounds [{min_seg}, {max_seg}]")));
    }
    let n_seg = graph.segments().len();
    if min_seg > n_seg {
        return Err(Error::invalid(format!("graph has {n_seg} segments, route needs at least {min_seg}")));
    }
    let target = rng.random_range(min_seg..=max_seg);
    let mut used = vec![false; n_seg];
    for _ in 0..ROUTE_RETRIES {
        used.iter_mut().for_each(|u| *u = false);
        let start = rng.random_range(0..n_seg);
        let mut route = vec![start];
        used[start] = true;
        while route.len() < target {
            let cur = *route.last().unwrap();
            let twin = graph.reverse_twin(cur);
            let open: Vec<usize> = graph
                .out_segments(graph.segments()[cur].to)
                .iter()
                .copied()
                .filter(|&s| !used[s])
                .collect();
            let forward: Vec<usize> = open.iter().copied().filter(|&s| Some(s) != twin).collect();
            let pool = if forward.is_empty() { &open } else { &forward };
            match pool.choose(rng) {
                Some(&next) => {
                    used[next] = true;
                    route.push(next);
                }
                None => break,
            }
        }
        if route.len() >= min_seg {
            return Ok(route);
        }
    }
    Err(Error::invalid(format!("could not grow a route of {min_seg} segments in {ROUTE_RETRIES} attempts")))
}

/// Noiseless fixes every `speed * interval` meters of travel from the route
/// start, plus a final fix at the route end.
pub fn sample_gps(route: &[usize], graph: &RoadGraph, cfg: &SimConfig) -> Result<(Vec<GpsPoint>, Vec<usize>)> {
    if route.is_empty() {
        return Err(Error::invalid("cannot sample an empty route"));
    }
    let mut starts = Vec::with_capacity(route.len());
    let mut total = 0.0;
    for &s in route {
        starts.push(total);
        total += graph.segment(s)?.length;
    }
    let step = cfg.speed_mps * cfg.sample_interval_s;
    let locate = |s: f64| -> usize {
        // Last segment starting at or before s; a fix exactly on a junction
        // belongs to the segment it enters.
        starts.partition_point(|&st| st <= s).saturating_sub(1)
    };
    let mut points = Vec::new();
    let mut alignment = Vec::new();
    let mut k = 0usize;
    loop {
        let s = k as f64 * step;
        if s >= total - 1e-9 {
            break;
        }
        let i = locate(s);
        points.push(GpsPoint { pos: graph.point_along(route[i], s - starts[i]), t: s / cfg.speed_mps });
        alignment.push(i);
        k += 1;
    }
    let last = route.len() - 1;
    points.push(GpsPoint {
        pos: graph.point_along(route[last], total - starts[last]),
        t: total / cfg.speed_mps,
    });
    alignment.push(last);
    Ok((points, alignment))
}

/// Adds independent per-axis Gaussian error; sigma depends on the cell of
/// the noiseless position.
pub fn apply_noise(points: &[GpsPoint], noise: &NoiseModel, rng: &mut Rng) -> Trajectory {
    points
        .iter()
        .map(|p| {
            let sigma = noise.sigma_at(p.pos);
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            GpsPoint { pos: Point::new(p.pos.x + sigma * dx, p.pos.y + sigma * dy), t: p.t }
        })
        .collect()
}

/// One trajectory; all of its randomness comes from the (seed, id) stream.
pub fn simulate_one(
    graph: &RoadGraph,
    cfg: &SimConfig,
    noise: &NoiseModel,
    traj_id: u64,
) -> Result<GroundTruthSample> {
    let mut rng = rng_for(cfg.seed, "simulate", traj_id);
    let route = gen_route(graph, cfg.min_route_segments, cfg.max_route_segments, &mut rng)?;
    let (clean, alignment) = sample_gps(&route, graph, cfg)?;
    let points = apply_noise(&clean, noise, &mut rng);
    Ok(GroundTruthSample { traj_id, route, points, alignment })
}

pub fn simulate_dataset(graph: &RoadGraph, cfg: &SimConfig, noise: &NoiseModel) -> Result<Vec<GroundTruthSample>> {
    cfg.validate()?;
    noise.validate()?;
    (0..cfg.trajectories as u64)
        .map(|id| simulate_one(graph, cfg, noise, id))
        .collect()
}
