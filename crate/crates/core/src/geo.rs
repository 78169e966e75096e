//! Planar road-network geometry: the directed graph, grid partitioning,
//! point-to-segment projection, a bucket-grid spatial index and Dijkstra.
//!
//! All coordinates are meters in a local east/north frame.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 150 ft expressed in meters.
pub const DEFAULT_CELL_SIZE_M: f64 = 45.72;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: usize,
    pub pos: Point,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// Directed graph whose edges are road segments. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    out: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl RoadGraph {
    /// Validates ids and lengths, then builds forward and reverse adjacency.
    /// Node and segment ids must be dense from zero and listed in order.
    pub fn build(nodes: Vec<Node>, segments: Vec<Segment>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::invalid(format!(
                    "node ids must be dense from 0: position {i} holds id {}",
                    n.id
                )));
            }
            if !n.pos.x.is_finite() || !n.pos.y.is_finite() {
                return Err(Error::invalid(format!("node {i} has non-finite coordinates")));
            }
        }
        let mut out = vec![Vec::new(); nodes.len()];
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (i, s) in segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::invalid(format!(
                    "segment ids must be dense from 0: position {i} holds id {}",
                    s.id
                )));
            }
            if s.from >= nodes.len() || s.to >= nodes.len() {
                return Err(Error::invalid(format!(
                    "segment {} references missing node ({} -> {}, {} nodes)",
                    s.id,
                    s.from,
                    s.to,
                    nodes.len()
                )));
            }
            if s.from == s.to {
                return Err(Error::invalid(format!("segment {} is a self loop", s.id)));
            }
            if !(s.length > 0.0) || !s.length.is_finite() {
                return Err(Error::invalid(format!(
                    "segment {} has non-positive length {}",
                    s.id, s.length
                )));
            }
            out[s.from].push(s.id);
            incoming[s.to].push(s.id);
        }
        Ok(RoadGraph { nodes, segments, out, incoming })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn segment(&self, id: usize) -> Result<&Segment> {
        self.segments
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown segment id {id}")))
    }

    pub fn out_segments(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    pub fn in_segments(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.out[node].len()
    }

    pub fn segment_start(&self, seg: &Segment) -> Point {
        self.nodes[seg.from].pos
    }

    pub fn segment_end(&self, seg: &Segment) -> Point {
        self.nodes[seg.to].pos
    }

    /// Segment running the opposite way between the same two nodes, if any.
    pub fn reverse_twin(&self, seg_id: usize) -> Option<usize> {
        let s = &self.segments[seg_id];
        self.out[s.to]
            .iter()
            .copied()
            .find(|&o| self.segments[o].to == s.from)
    }

    /// Point at `offset` meters along the segment chord.
    pub fn point_along(&self, seg_id: usize, offset: f64) -> Point {
        let s = &self.segments[seg_id];
        let a = self.nodes[s.from].pos;
        let b = self.nodes[s.to].pos;
        let t = (offset / s.length).clamp(0.0, 1.0);
        Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    }

    /// True when every node reaches every other node along directed edges.
    pub fn is_strongly_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let reach = |adj: &Vec<Vec<usize>>, forward: bool| -> usize {
            let mut seen = vec![false; self.nodes.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(u) = stack.pop() {
                for &s in &adj[u] {
                    let seg = &self.segments[s];
                    let v = if forward { seg.to } else { seg.from };
                    if !seen[v] {
                        seen[v] = true;
                        count += 1;
                        stack.push(v);
                    }
                }
            }
            count
        };
        reach(&self.out, true) == self.nodes.len() && reach(&self.incoming, false) == self.nodes.len()
    }

    pub fn total_length(&self, route: &[usize]) -> f64 {
        route.iter().map(|&s| self.segments[s].length).sum()
    }

    /// True when consecutive segments share a junction.
    pub fn is_contiguous(&self, route: &[usize]) -> bool {
        route
            .windows(2)
            .all(|w| self.segments[w[0]].to == self.segments[w[1]].from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { origin_x: 0.0, origin_y: 0.0, cell_size: DEFAULT_CELL_SIZE_M }
    }
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(GridSpec { origin_x, origin_y, cell_size })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCellId {
    pub col: i64,
    pub row: i64,
}

impl GridCellId {
    pub const fn new(col: i64, row: i64) -> Self {
        GridCellId { col, row }
    }
}

/// Floor-division cell lookup. Points on a boundary fall in the higher cell.
pub fn grid_cell_of(p: Point, grid: &GridSpec) -> Result<GridCellId> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::invalid(format!("non-finite point ({}, {})", p.x, p.y)));
    }
    Ok(GridCellId {
        col: ((p.x - grid.origin_x) / grid.cell_size).floor() as i64,
        row: ((p.y - grid.origin_y) / grid.cell_size).floor() as i64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub foot: Point,
    /// Distance from the segment start along the chord.
    pub offset: f64,
    pub distance: f64,
}

/// Clamped orthogonal projection of `p` onto the segment chord.
pub fn project_to_segment(p: Point, seg_id: usize, graph: &RoadGraph) -> Result<Projection> {
    let s = graph.segment(seg_id)?;
    let a = graph.segment_start(s);
    let b = graph.segment_end(s);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let foot = Point::new(a.x + t * dx, a.y + t * dy);
    let offset = (t * len2.sqrt()).min(s.length);
    Ok(Projection { foot, offset, distance: p.dist(&foot) })
}

/// Uniform bucket grid over segment bounding boxes.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    grid: GridSpec,
    buckets: HashMap<GridCellId, Vec<usize>>,
}

impl SpatialIndex {
    pub fn build(graph: &RoadGraph, bucket_size: f64) -> Result<Self> {
        let grid = GridSpec::new(0.0, 0.0, bucket_size)?;
        let mut buckets: HashMap<GridCellId, Vec<usize>> = HashMap::new();
        for s in graph.segments() {
            let a = graph.segment_start(s);
            let b = graph.segment_end(s);
            let lo = grid_cell_of(Point::new(a.x.min(b.x), a.y.min(b.y)), &grid)?;
            let hi = grid_cell_of(Point::new(a.x.max(b.x), a.y.max(b.y)), &grid)?;
            for row in lo.row..=hi.row {
                for col in lo.col..=hi.col {
                    buckets.entry(GridCellId { col, row }).or_default().push(s.id);
                }
            }
        }
        Ok(SpatialIndex { grid, buckets })
    }

    /// Segment ids whose bounding boxes touch the axis-aligned box around
    /// `p` of half-width `radius`. Sorted, unique.
    fn near(&self, p: Point, radius: f64) -> Result<Vec<usize>> {
        let lo = grid_cell_of(Point::new(p.x - radius, p.y - radius), &self.grid)?;
        let hi = grid_cell_of(Point::new(p.x + radius, p.y + radius), &self.grid)?;
        let mut ids = Vec::new();
        for row in lo.row..=hi.row {
            for col in lo.col..=hi.col {
                if let Some(b) = self.buckets.get(&GridCellId { col, row }) {
                    ids.extend_from_slice(b);
                }
            }
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub segment: usize,
    pub distance: f64,
    pub offset: f64,
    pub foot: Point,
}

/// Segments within `radius` of `p`, nearest first, ties by segment id.
pub fn candidate_segments(
    p: Point,
    radius: f64,
    graph: &RoadGraph,
    index: &SpatialIndex,
) -> Result<Vec<Candidate>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("candidate radius must be positive, got {radius}")));
    }
    let mut out = Vec::new();
    for id in index.near(p, radius)? {
        let pr = project_to_segment(p, id, graph)?;
        if pr.distance <= radius {
            out.push(Candidate { segment: id, distance: pr.distance, offset: pr.offset, foot: pr.foot });
        }
    }
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.segment.cmp(&b.segment)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub segments: Vec<usize>,
    pub length: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra. `reverse` walks incoming edges, giving the
/// distance from every node *to* `source`.
pub fn distances_from(graph: &RoadGraph, source: usize, reverse: bool) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; graph.nodes().len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: source });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        let adj = if reverse { graph.in_segments(node) } else { graph.out_segments(node) };
        for &sid in adj {
            let s = &graph.segments()[sid];
            let next = if reverse { s.from } else { s.to };
            let c = cost + s.length;
            if c < dist[next] {
                dist[next] = c;
                heap.push(HeapEntry { cost: c, node: next });
            }
        }
    }
    dist
}

const TIE_EPS: f64 = 1e-9;

/// Shortest directed path between two nodes, or `None` when unreachable.
///
/// Among equal-cost paths the lexicographically smallest sequence of
/// segment ids is returned: distances to the target are computed first,
/// then the walk from the source always takes the smallest-id segment that
/// stays on some shortest path.
pub fn shortest_path(graph: &RoadGraph, from: usize, to: usize) -> Result<Option<Path>> {
    let n = graph.nodes().len();
    if from >= n || to >= n {
        return Err(Error::invalid(format!("node id out of range ({from} or {to}, {n} nodes)")));
    }
    if from == to {
        return Ok(Some(Path { segments: Vec::new(), length: 0.0 }));
    }
    let to_target = distances_from(graph, to, true);
    if !to_target[from].is_finite() {
        return Ok(None);
    }
    let mut segments = Vec::new();
    let mut length = 0.0;
    let mut node = from;
    while node != to {
        let remaining = to_target[node];
        let next = graph
            .out_segments(node)
            .iter()
            .copied()
            .filter(|&sid| {
                let s = &graph.segments()[sid];
                s.length + to_target[s.to] <= remaining + TIE_EPS * (1.0 + remaining)
                    && to_target[s.to] < remaining
            })
            .min()
            .expect("a node with finite distance has an optimal successor");
        let s = &graph.segments()[next];
        segments.push(next);
        length += s.length;
        node = s.to;
    }
    Ok(Some(Path { segments, length }))
}

/// Lazily cached node-to-node driving distances. One instance per worker.
#[derive(Debug, Default)]
pub struct DistanceCache {
    rows: BTreeMap<usize, Vec<f64>>,
}

impl DistanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_distance(&mut self, graph: &RoadGraph, from: usize, to: usize) -> f64 {
        self.rows
            .entry(from)
            .or_insert_with(|| distances_from(graph, from, false))[to]
    }

    /// Driving distance between two positions on the network, each given as
    /// (segment, offset along it).
    pub fn route_distance(
        &mut self,
        graph: &RoadGraph,
        (seg_a, off_a): (usize, f64),
        (seg_b, off_b): (usize, f64),
    ) -> f64 {
        if seg_a == seg_b && off_b >= off_a {
            return off_b - off_a;
        }
        let a = &graph.segments()[seg_a];
        let b = &graph.segments()[seg_b];
        let between = self.node_distance(graph, a.to, b.from);
        (a.length - off_a) + between + off_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize, from: usize, to: usize, nodes: &[Node]) -> Segment {
        Segment { id, from, to, length: nodes[from].pos.dist(&nodes[to].pos) }
    }

    fn square() -> RoadGraph {
        let nodes: Vec<Node> = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]
            .iter()
            .enumerate()
            .map(|(id, &(x, y))| Node { id, pos: Point::new(x, y) })
            .collect();
        let pairs = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 0), (0, 3)];
        let segments = pairs.iter().enumerate().map(|(i, &(a, b))| seg(i, a, b, &nodes)).collect();
        RoadGraph::build(nodes, segments).unwrap()
    }

    #[test]
    fn smallest_graph() {
        let nodes = vec![
            Node { id: 0, pos: Point::new(0.0, 0.0) },
            Node { id: 1, pos: Point::new(1.0, 0.0) },
        ];
        let g = RoadGraph::build(nodes.clone(), vec![seg(0, 0, 1, &nodes)]).unwrap();
        assert_eq!(g.out_degree(0), 1);
        assert_eq!(g.out_degree(1), 0);
    }

    #[test]
    fn dangling_endpoint_names_segment() {
        let nodes = vec![
            Node { id: 0, pos: Point::new(0.0, 0.0) },
            Node { id: 1, pos: Point::new(1.0, 0.0) },
        ];
        let bad = Segment { id: 0, from: 0, to: 99, length: 1.0 };
        let err = RoadGraph::build(nodes, vec![bad]).unwrap_err();
        assert!(err.to_string().contains("segment 0"), "{err}");
    }

    #[test]
    fn non_positive_length_rejected() {
        let nodes = vec![
            Node { id: 0, pos: Point::new(0.0, 0.0) },
            Node { id: 1, pos: Point::new(1.0, 0.0) },
        ];
        let bad = Segment { id: 0, from: 0, to: 1, length: 0.0 };
        assert!(RoadGraph::build(nodes, vec![bad]).is_err());
    }

    #[test]
    fn square_lattice_degrees() {
        let g = square();
        assert_eq!(g.segments().len(), 8);
        for n in 0..4 {
            assert_eq!(g.out_degree(n), 2);
        }
        assert!(g.is_strongly_connected());
        assert_eq!(g.reverse_twin(0), Some(1));
    }

    #[test]
    fn grid_cells() {
        let gs = GridSpec::default();
        assert_eq!(grid_cell_of(Point::new(0.0, 0.0), &gs).unwrap(), GridCellId::new(0, 0));
        assert_eq!(grid_cell_of(Point::new(100.0, 60.0), &gs).unwrap(), GridCellId::new(2, 1));
        assert_eq!(grid_cell_of(Point::new(-1.0, 0.0), &gs).unwrap(), GridCellId::new(-1, 0));
        assert_eq!(grid_cell_of(Point::new(45.72, 0.0), &gs).unwrap(), GridCellId::new(1, 0));
        assert!(grid_cell_of(Point::new(f64::NAN, 0.0), &gs).is_err());
        assert!(GridSpec::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn projections() {
        let nodes = vec![
            Node { id: 0, pos: Point::new(0.0, 0.0) },
            Node { id: 1, pos: Point::new(10.0, 0.0) },
            Node { id: 2, pos: Point::new(0.0, 10.0) },
        ];
        let segs = vec![seg(0, 0, 1, &nodes), seg(1, 0, 2, &nodes)];
        let g = RoadGraph::build(nodes, segs).unwrap();
        let p = project_to_segment(Point::new(5.0, 3.0), 0, &g).unwrap();
        assert_eq!((p.foot, p.offset, p.distance), (Point::new(5.0, 0.0), 5.0, 3.0));
        let p = project_to_segment(Point::new(-2.0, 0.0), 0, &g).unwrap();
        assert_eq!((p.foot, p.offset, p.distance), (Point::new(0.0, 0.0), 0.0, 2.0));
        let p = project_to_segment(Point::new(5.0, 3.0), 1, &g).unwrap();
        assert_eq!((p.foot, p.offset, p.distance), (Point::new(0.0, 3.0), 3.0, 5.0));
        assert!(project_to_segment(Point::new(0.0, 0.0), 7, &g).is_err());
    }

    #[test]
    fn candidates_on_segment() {
        let g = square();
        let idx = SpatialIndex::build(&g, 5.0).unwrap();
        let c = candidate_segments(Point::new(4.0, 0.0), 1.0, &g, &idx).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].segment, c[0].distance), (0, 0.0));
        assert_eq!(c[1].segment, 1);
        assert!(candidate_segments(Point::new(4.0, 0.0), 0.0, &g, &idx).is_err());
    }

    #[test]
    fn shortest_path_cases() {
        let g = square();
        let p = shortest_path(&g, 2, 2).unwrap().unwrap();
        assert!(p.segments.is_empty());
        assert_eq!(p.length, 0.0);
        // Two equal-cost routes 0->2: via 1 (segments 0,2) or via 3 (7,5).
        let p = shortest_path(&g, 0, 2).unwrap().unwrap();
        assert_eq!(p.segments, vec![0, 2]);
        assert_eq!(p.length, 20.0);
    }

    #[test]
    fn triangle_two_hop_beats_direct() {
        let nodes: Vec<Node> = (0..3).map(|id| Node { id, pos: Point::new(id as f64, 0.0) }).collect();
        let segs = vec![
            Segment { id: 0, from: 0, to: 2, length: 3.0 },
            Segment { id: 1, from: 0, to: 1, length: 1.0 },
            Segment { id: 2, from: 1, to: 2, length: 1.0 },
        ];
        let g = RoadGraph::build(nodes, segs).unwrap();
        let p = shortest_path(&g, 0, 2).unwrap().unwrap();
        assert_eq!(p.segments, vec![1, 2]);
        assert_eq!(p.length, 2.0);
        // One-way streets only: no way back.
        assert_eq!(shortest_path(&g, 2, 0).unwrap(), None);
    }

    #[test]
    fn route_distance_same_segment() {
        let g = square();
        let mut cache = DistanceCache::new();
        assert_eq!(cache.route_distance(&g, (0, 2.0), (0, 7.0)), 5.0);
        // Backwards on the same segment: finish it, take the twin back, re-enter.
        assert_eq!(cache.route_distance(&g, (0, 7.0), (0, 2.0)), 3.0 + 10.0 + 2.0);
        assert_eq!(cache.route_distance(&g, (0, 5.0), (2, 5.0)), 10.0);
    }
}
