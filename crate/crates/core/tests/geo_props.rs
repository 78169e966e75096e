use mmseq::geo::{
    candidate_segments, grid_cell_of, project_to_segment, shortest_path, Node, Segment, SpatialIndex,
};
use mmseq::{GridSpec, Point, RoadGraph};
use proptest::prelude::*;

/// Random directed graph on `n` nodes scattered in a 1 km square. Edge
/// lengths are the chord length times a detour factor, as on real roads.
fn graph_strategy() -> impl Strategy<Value = RoadGraph> {
    (3usize..9)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0.0..1000.0f64, 0.0..1000.0f64), n),
                prop::collection::vec((0..n, 0..n, 1.0..1.5f64), 0..3 * n),
            )
        })
        .prop_map(|(pts, edges)| {
            let nodes: Vec<Node> =
                pts.iter().enumerate().map(|(id, &(x, y))| Node { id, pos: Point::new(x, y) }).collect();
            let mut segs = Vec::new();
            for (a, b, f) in edges {
                let len = nodes[a].pos.dist(&nodes[b].pos) * f;
                if a != b && len > 0.0 {
                    segs.push(Segment { id: segs.len(), from: a, to: b, length: len });
                }
            }
            RoadGraph::build(nodes, segs).unwrap()
        })
}

fn floyd_warshall(g: &RoadGraph) -> Vec<Vec<f64>> {
    let n = g.nodes().len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for s in g.segments() {
        d[s.from][s.to] = d[s.from][s.to].min(s.length);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

proptest! {
    #[test]
    fn dijkstra_matches_floyd_warshall(g in graph_strategy()) {
        let all = floyd_warshall(&g);
        let n = g.nodes().len();
        for from in 0..n {
            for to in 0..n {
                match shortest_path(&g, from, to).unwrap() {
                    None => prop_assert!(all[from][to].is_infinite()),
                    Some(p) => {
                        prop_assert!((p.length - all[from][to]).abs() <= 1e-9 * (1.0 + p.length));
                        let mut at = from;
                        let mut total = 0.0;
                        for &s in &p.segments {
                            let seg = g.segment(s).unwrap();
                            prop_assert_eq!(seg.from, at);
                            at = seg.to;
                            total += seg.length;
                        }
                        prop_assert_eq!(at, to);
                        prop_assert!((total - p.length).abs() < 1e-9 * (1.0 + total));
                    }
                }
            }
        }
    }

    #[test]
    fn projection_is_the_nearest_point(g in graph_strategy(), x in -200.0..1200.0f64, y in -200.0..1200.0f64) {
        let p = Point::new(x, y);
        for s in g.segments() {
            let pr = project_to_segment(p, s.id, &g).unwrap();
            let a = g.segment_start(s);
            let b = g.segment_end(s);
            prop_assert!(pr.distance <= p.dist(&a) + 1e-9);
            prop_assert!(pr.distance <= p.dist(&b) + 1e-9);
            // The foot lies on the chord.
            prop_assert!((a.dist(&pr.foot) + pr.foot.dist(&b) - a.dist(&b)).abs() < 1e-6);
            prop_assert!(pr.offset >= 0.0 && pr.offset <= s.length + 1e-9);
            // Sampled chord points are never closer.
            for k in 0..=20 {
                let t = k as f64 / 20.0;
                let q = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                prop_assert!(pr.distance <= p.dist(&q) + 1e-9);
            }
        }
    }

    #[test]
    fn index_candidates_match_brute_force(g in graph_strategy(), x in 0.0..1000.0f64, y in 0.0..1000.0f64, r in 1.0..300.0f64, bucket in 20.0..400.0f64) {
        let idx = SpatialIndex::build(&g, bucket).unwrap();
        let p = Point::new(x, y);
        let got: Vec<usize> = candidate_segments(p, r, &g, &idx).unwrap().iter().map(|c| c.segment).collect();
        let mut want: Vec<(f64, usize)> = g
            .segments()
            .iter()
            .map(|s| (project_to_segment(p, s.id, &g).unwrap().distance, s.id))
            .filter(|(d, _)| *d <= r)
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(got, want.into_iter().map(|(_, s)| s).collect::<Vec<_>>());
    }

    #[test]
    fn grid_cells_contain_their_points(x in -1e4..1e4f64, y in -1e4..1e4f64, ox in -50.0..50.0f64, cell in 1.0..200.0f64) {
        let grid = GridSpec::new(ox, -ox, cell).unwrap();
        let c = grid_cell_of(Point::new(x, y), &grid).unwrap();
        let (x0, y0) = (ox + c.col as f64 * cell, -ox + c.row as f64 * cell);
        prop_assert!(x0 <= x + 1e-9 && x < x0 + cell + 1e-9);
        prop_assert!(y0 <= y + 1e-9 && y < y0 + cell + 1e-9);
    }
}

#[test]
fn non_finite_points_are_rejected() {
    assert!(grid_cell_of(Point::new(f64::NAN, 0.0), &GridSpec::default()).is_err());
    assert!(GridSpec::new(0.0, 0.0, 0.0).is_err());
}
