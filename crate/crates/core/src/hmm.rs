//! Classical HMM map matching: Gaussian emission on the point-to-segment
//! distance, exponential transition on the difference between driving and
//! straight-line distance, decoded with a Viterbi trellis.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geo::{candidate_segments, shortest_path, Candidate, DistanceCache, Point, RoadGraph, SpatialIndex};
use crate::simulate::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmmParams {
    pub sigma_z: f64,
    pub beta: f64,
    pub candidate_radius: f64,
    pub max_candidates: usize,
}

impl Default for HmmParams {
    fn default() -> Self {
        HmmParams { sigma_z: 15.0, beta: 50.0, candidate_radius: 60.0, max_candidates: 8 }
    }
}

impl HmmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_z > 0.0 && self.beta > 0.0 && self.candidate_radius > 0.0 && self.max_candidates > 0;
        if !ok {
            return Err(Error::invalid(format!("hmm parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Log of the zero-mean Gaussian density at `dist`.
pub fn emission_logp(dist: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("emission sigma must be positive, got {sigma}")));
    }
    Ok(emission_unchecked(dist, sigma))
}

fn emission_unchecked(dist: f64, sigma: f64) -> f64 {
    let z = dist / sigma;
    -0.5 * z * z - (sigma * (2.0 * PI).sqrt()).ln()
}

/// Log of the exponential density of |route - euclid|. An infinite route
/// gap (unreachable) gives negative infinity.
pub fn transition_logp(euclid_gap: f64, route_gap: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("transition beta must be positive, got {beta}")));
    }
    Ok(transition_unchecked(euclid_gap, route_gap, beta))
}

fn transition_unchecked(euclid_gap: f64, route_gap: f64, beta: f64) -> f64 {
    if !route_gap.is_finite() {
        return f64::NEG_INFINITY;
    }
    -(route_gap - euclid_gap).abs() / beta - beta.ln()
}

/// Best state path through a generic trellis.
#[derive(Debug, Clone, PartialEq)]
pub struct TrellisPath {
    /// Chosen candidate index per layer.
    pub states: Vec<usize>,
    pub log_prob: f64,
    /// Layers where every state was unreachable and decoding restarted.
    pub breaks: Vec<usize>,
}

/// Max-sum dynamic program over layers of scored states.
///
/// `keys[t][i]` orders equal-scoring states: the smaller key wins, both for
/// backpointers and for the final state. `transition(t, i, j)` scores moving
/// from state `i` of layer `t - 1` to state `j` of layer `t`.
pub fn viterbi_trellis(
    emissions: &[Vec<f64>],
    keys: &[Vec<usize>],
    mut transition: impl FnMut(usize, usize, usize) -> f64,
) -> Result<TrellisPath> {
    if emissions.is_empty() {
        return Err(Error::invalid("viterbi needs at least one layer"));
    }
    if emissions.iter().any(Vec::is_empty) || emissions.len() != keys.len() {
        return Err(Error::invalid("every trellis layer needs at least one state"));
    }
    let mut scores: Vec<f64> = emissions[0].clone();
    let mut back: Vec<Vec<Option<usize>>> = vec![vec![None; scores.len()]];
    let mut breaks = Vec::new();
    // Best final state of the piece that closed just before each break.
    let mut piece_end = vec![0usize; emissions.len()];
    let mut piece_offset = 0.0;
    for t in 1..emissions.len() {
        let mut next = Vec::with_capacity(emissions[t].len());
        let mut ptr = Vec::with_capacity(emissions[t].len());
        for j in 0..emissions[t].len() {
            let mut best = f64::NEG_INFINITY;
            let mut arg: Option<usize> = None;
            for (i, &prev) in scores.iter().enumerate() {
                let s = prev + transition(t, i, j);
                let better = match arg {
                    None => s > f64::NEG_INFINITY,
                    Some(a) => s > best || (s == best && keys[t - 1][i] < keys[t - 1][a]),
                };
                if better {
                    best = s;
                    arg = Some(i);
                }
            }
            next.push(best + emissions[t][j]);
            ptr.push(arg);
        }
        if next.iter().all(|s| *s == f64::NEG_INFINITY) {
            // Nothing reachable: close the current piece and restart.
            let (a, s) = argmax(&scores, &keys[t - 1]);
            piece_offset += s;
            piece_end[t] = a;
            breaks.push(t);
            next = emissions[t].clone();
            ptr = vec![None; next.len()];
        }
        scores = next;
        back.push(ptr);
    }
    let (mut state, best) = argmax(&scores, &keys[emissions.len() - 1]);
    let mut states = vec![0; emissions.len()];
    for t in (0..emissions.len()).rev() {
        states[t] = state;
        if t > 0 {
            state = back[t][state].unwrap_or(piece_end[t]);
        }
    }
    Ok(TrellisPath { states, log_prob: piece_offset + best, breaks })
}

fn argmax(scores: &[f64], keys: &[usize]) -> (usize, f64) {
    let mut arg = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[arg] || (scores[i] == scores[arg] && keys[i] < keys[arg]) {
            arg = i;
        }
    }
    (arg, scores[arg])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPoint {
    /// Index of the observation in the input trajectory.
    pub obs: usize,
    pub segment: usize,
    pub offset: f64,
    pub foot: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiMatch {
    pub points: Vec<MatchedPoint>,
    /// Observations with no candidate inside the search radius.
    pub dropped: Vec<usize>,
    pub log_prob: f64,
    /// Positions in `points` where the chain restarted.
    pub breaks: Vec<usize>,
}

/// Read-only matcher state: the graph, its spatial index and parameters.
pub struct Matcher<'a> {
    pub graph: &'a RoadGraph,
    pub index: &'a SpatialIndex,
    pub params: HmmParams,
}

impl<'a> Matcher<'a> {
    pub fn new(graph: &'a RoadGraph, index: &'a SpatialIndex, params: HmmParams) -> Result<Self> {
        params.validate()?;
        Ok(Matcher { graph, index, params })
    }

    pub fn candidates(&self, p: Point) -> Result<Vec<Candidate>> {
        let mut c = candidate_segments(p, self.params.candidate_radius, self.graph, self.index)?;
        c.truncate(self.params.max_candidates);
        Ok(c)
    }

    /// Decodes the most likely segment per observation. Observations without
    /// candidates are dropped and reported.
    pub fn viterbi(&self, traj: &Trajectory, cache: &mut DistanceCache) -> Result<ViterbiMatch> {
        if traj.is_empty() {
            return Err(Error::invalid("cannot match an empty trajectory"));
        }
        let mut layers = Vec::new();
        let mut obs = Vec::new();
        let mut dropped = Vec::new();
        for (i, p) in traj.iter().enumerate() {
            let c = self.candidates(p.pos)?;
            if c.is_empty() {
                log::warn!("observation {i} has no candidate within {} m; dropped", self.params.candidate_radius);
                dropped.push(i);
            } else {
                layers.push(c);
                obs.push(i);
            }
        }
        if layers.is_empty() {
            return Err(Error::invalid("no observation has a candidate segment"));
        }
        let path = self.decode_layers(traj, &obs, &layers, cache);
        let points = path
            .states
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                let c = &layers[t][k];
                MatchedPoint { obs: obs[t], segment: c.segment, offset: c.offset, foot: c.foot }
            })
            .collect();
        Ok(ViterbiMatch { points, dropped, log_prob: path.log_prob, breaks: path.breaks })
    }

    fn decode_layers(
        &self,
        traj: &Trajectory,
        obs: &[usize],
        layers: &[Vec<Candidate>],
        cache: &mut DistanceCache,
    ) -> TrellisPath {
        let p = self.params;
        let emissions: Vec<Vec<f64>> = layers
            .iter()
            .map(|l| l.iter().map(|c| emission_unchecked(c.distance, p.sigma_z)).collect())
            .collect();
        let keys: Vec<Vec<usize>> = layers.iter().map(|l| l.iter().map(|c| c.segment).collect()).collect();
        let graph = self.graph;
        let transition = |t: usize, i: usize, j: usize| {
            let a = &layers[t - 1][i];
            let b = &layers[t][j];
            let euclid = traj[obs[t - 1]].pos.dist(&traj[obs[t]].pos);
            let route = cache.route_distance(graph, (a.segment, a.offset), (b.segment, b.offset));
            transition_unchecked(euclid, route, p.beta)
        };
        viterbi_trellis(&emissions, &keys, transition).expect("layers are non-empty")
    }

    /// Viterbi followed by shortest-path gap filling.
    pub fn match_trajectory(&self, traj: &Trajectory, cache: &mut DistanceCache) -> Result<MatchedRoute> {
        let v = self.viterbi(traj, cache)?;
        match_route(&v, traj.len(), self.graph)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchedRoute {
    pub route: Vec<usize>,
    /// Index into `route` for every observation, dropped ones included.
    pub alignment: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Route positions that start a new piece after an unreachable gap.
    pub splits: Vec<usize>,
}

/// Connects consecutive matched states with shortest paths.
pub fn match_route(v: &ViterbiMatch, n_obs: usize, graph: &RoadGraph) -> Result<MatchedRoute> {
    if v.points.is_empty() {
        return Err(Error::invalid("viterbi produced no matched points"));
    }
    let mut route: Vec<usize> = Vec::new();
    let mut splits = Vec::new();
    let mut state_pos = Vec::with_capacity(v.points.len());
    for (k, mp) in v.points.iter().enumerate() {
        if k == 0 {
            route.push(mp.segment);
        } else {
            let prev = &v.points[k - 1];
            let same_forward = prev.segment == mp.segment && mp.offset >= prev.offset;
            if !same_forward {
                let from = graph.segment(prev.segment)?.to;
                let to = graph.segment(mp.segment)?.from;
                match shortest_path(graph, from, to)? {
                    Some(path) => route.extend(path.segments),
                    None => splits.push(route.len()),
                }
                route.push(mp.segment);
            }
        }
        state_pos.push(route.len() - 1);
    }
    trim_junction_ends(&mut route, &mut state_pos, &mut splits, &v.points, graph)?;
    let mut alignment = vec![0; n_obs];
    let mut k = 0;
    for (i, a) in alignment.iter_mut().enumerate() {
        while k + 1 < v.points.len() && v.points[k + 1].obs <= i {
            k += 1;
        }
        *a = state_pos[k];
    }
    Ok(MatchedRoute { route, alignment, dropped: v.dropped.clone(), splits })
}

/// A fix sitting exactly on a junction is equally close to every segment
/// meeting there. When the first segment is only seen at its far end, or
/// the last only at its start, the vehicle never travelled along it inside
/// the observed window, so it is dropped from the route.
fn trim_junction_ends(
    route: &mut Vec<usize>,
    state_pos: &mut [usize],
    splits: &mut [usize],
    points: &[MatchedPoint],
    graph: &RoadGraph,
) -> Result<()> {
    const AT_NODE_M: f64 = 1e-9;
    if route.len() > 1 && !splits.contains(&1) {
        let len = graph.segment(route[0])?.length;
        let only_at_end = points
            .iter()
            .zip(state_pos.iter())
            .filter(|(_, &k)| k == 0)
            .all(|(mp, _)| mp.segment == route[0] && mp.offset >= len - AT_NODE_M);
        if only_at_end {
            route.remove(0);
            state_pos.iter_mut().for_each(|k| *k = k.saturating_sub(1));
            splits.iter_mut().for_each(|k| *k -= 1);
        }
    }
    let last = route.len() - 1;
    if last > 0 && !splits.contains(&last) {
        let only_at_start = points
            .iter()
            .zip(state_pos.iter())
            .filter(|(_, &k)| k == last)
            .all(|(mp, _)| mp.segment == route[last] && mp.offset <= AT_NODE_M);
        if only_at_start {
            route.pop();
            state_pos.iter_mut().for_each(|k| *k = (*k).min(last - 1));
        }
    }
    Ok(())
}

/// Nearest segment per observation, consecutive repeats collapsed. The
/// naive reference the learned models must beat.
pub fn nearest_segment_route(traj: &Trajectory, matcher: &Matcher<'_>) -> Result<Vec<usize>> {
    let mut route: Vec<usize> = Vec::new();
    for p in traj {
        if let Some(c) = matcher.candidates(p.pos)?.first() {
            if route.last() != Some(&c.segment) {
                route.push(c.segment);
            }
        }
    }
    Ok(route)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Node, Segment};
    use crate::simulate::GpsPoint;

    #[test]
    fn emission_values() {
        let e0 = emission_logp(0.0, 1.0).unwrap();
        assert!((e0 + 0.918_938_533_204_672_7).abs() < 1e-12);
        for sigma in [0.5, 3.0, 15.0] {
            let d = emission_logp(sigma, sigma).unwrap() - emission_logp(0.0, sigma).unwrap();
            assert!((d + 0.5).abs() < 1e-12);
        }
        assert!(emission_logp(1.0, 0.0).is_err());
        assert!(emission_logp(0.0, 2.0).unwrap() > emission_logp(0.1, 2.0).unwrap());
    }

    #[test]
    fn transition_values() {
        let beta = 50.0;
        let max = transition_logp(120.0, 120.0, beta).unwrap();
        assert!((max + beta.ln()).abs() < 1e-12);
        let off = transition_logp(120.0, 170.0, beta).unwrap();
        assert!((max - off - 1.0).abs() < 1e-12);
        assert_eq!(transition_logp(1.0, f64::INFINITY, beta).unwrap(), f64::NEG_INFINITY);
        assert!(transition_logp(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn trellis_prefers_smaller_key_on_ties() {
        let em = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let keys = vec![vec![5, 2], vec![9, 3]];
        let p = viterbi_trellis(&em, &keys, |_, _, _| 0.0).unwrap();
        assert_eq!(p.states, vec![1, 1]);
    }

    #[test]
    fn trellis_restarts_after_unreachable_layer() {
        let em = vec![vec![-1.0, -2.0], vec![-3.0], vec![-0.5, -0.25]];
        let keys = vec![vec![0, 1], vec![2], vec![3, 4]];
        let p = viterbi_trellis(&em, &keys, |t, _, _| if t == 1 { f64::NEG_INFINITY } else { -1.0 }).unwrap();
        assert_eq!(p.breaks, vec![1]);
        assert_eq!(p.states, vec![0, 0, 1]);
        assert!((p.log_prob - (-1.0 + -3.0 - 1.0 - 0.25)).abs() < 1e-12);
    }

    fn path_graph() -> RoadGraph {
        // 0 -> 1 -> 2 -> 3 along the x axis, 100 m apart, one way.
        let nodes: Vec<Node> = (0..4).map(|id| Node { id, pos: Point::new(id as f64 * 100.0, 0.0) }).collect();
        let segs = (0..3).map(|i| Segment { id: i, from: i, to: i + 1, length: 100.0 }).collect();
        RoadGraph::build(nodes, segs).unwrap()
    }

    fn traj(xs: &[f64]) -> Trajectory {
        xs.iter().enumerate().map(|(i, &x)| GpsPoint { pos: Point::new(x, 2.0), t: i as f64 }).collect()
    }

    #[test]
    fn single_observation_takes_nearest() {
        let g = path_graph();
        let idx = SpatialIndex::build(&g, 50.0).unwrap();
        let m = Matcher::new(&g, &idx, HmmParams::default()).unwrap();
        let v = m.viterbi(&traj(&[130.0]), &mut DistanceCache::new()).unwrap();
        assert_eq!(v.points.len(), 1);
        assert_eq!(v.points[0].segment, 1);
    }

    #[test]
    fn one_segment_and_gap_fill() {
        let g = path_graph();
        let idx = SpatialIndex::build(&g, 50.0).unwrap();
        let m = Matcher::new(&g, &idx, HmmParams::default()).unwrap();
        let mut cache = DistanceCache::new();
        let r = m.match_trajectory(&traj(&[120.0, 150.0, 180.0]), &mut cache).unwrap();
        assert_eq!(r.route, vec![1]);
        let r = m.match_trajectory(&traj(&[50.0, 250.0]), &mut cache).unwrap();
        assert_eq!(r.route, vec![0, 1, 2]);
        assert_eq!(r.alignment, vec![0, 2]);
    }

    #[test]
    fn far_points_are_dropped() {
        let g = path_graph();
        let idx = SpatialIndex::build(&g, 50.0).unwrap();
        let m = Matcher::new(&g, &idx, HmmParams::default()).unwrap();
        let mut t = traj(&[50.0, 150.0, 250.0]);
        t[1].pos.y = 500.0;
        let r = m.match_trajectory(&t, &mut DistanceCache::new()).unwrap();
        assert_eq!(r.dropped, vec![1]);
        assert_eq!(r.route, vec![0, 1, 2]);
        assert_eq!(r.alignment, vec![0, 0, 2]);
    }
}
