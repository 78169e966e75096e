//! Versioned text artifacts exchanged between pipeline stages.
//!
//! Every file opens with a `<KIND> v1` header line. Maps and vocabularies
//! are whitespace-separated lines; per-trajectory records are JSON lines.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GridCellId, Node, Point, RoadGraph, Segment};
use crate::hmm::MatchedRoute;
use crate::prep::{Fragment, TokenId, TokenKey, Vocab, VocabKind, N_SPECIAL};
use crate::simulate::{GpsPoint, GroundTruthSample};

pub const VERSION: &str = "v1";

/// Writes via a temporary sibling and a rename so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Splits off the header line and checks kind and version; returns the
/// remaining header fields and the body.
fn expect_header<'a>(text: &'a str, kind: &str) -> Result<(Vec<&'a str>, &'a str)> {
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    let mut fields = head.split_whitespace();
    match (fields.next(), fields.next()) {
        (Some(k), Some(VERSION)) if k == kind => Ok((fields.collect(), body)),
        (Some(k), Some(v)) if k == kind => Err(Error::invalid(format!("{kind} file has version {v}, expected {VERSION}"))),
        _ => Err(Error::invalid(format!("expected a {kind} {VERSION} header, found {head:?}"))),
    }
}

fn bad_line(kind: &str, n: usize, line: &str) -> Error {
    Error::invalid(format!("{kind} line {}: cannot parse {line:?}", n + 2))
}

pub fn map_to_string(g: &RoadGraph) -> String {
    let mut s = format!("MAP {VERSION}\n");
    for n in g.nodes() {
        let _ = writeln!(s, "N {} {} {}", n.id, n.pos.x, n.pos.y);
    }
    for seg in g.segments() {
        let _ = writeln!(s, "S {} {} {} {}", seg.id, seg.from, seg.to, seg.length);
    }
    s
}

pub fn map_from_str(text: &str) -> Result<RoadGraph> {
    let (_, body) = expect_header(text, "MAP")?;
    let mut nodes = Vec::new();
    let mut segments = Vec::new();
    for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || bad_line("MAP", i, line);
        match f.as_slice() {
            ["N", id, x, y] => nodes.push(Node {
                id: id.parse().map_err(|_| bad())?,
                pos: Point::new(x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?),
            }),
            ["S", id, from, to, len] => segments.push(Segment {
                id: id.parse().map_err(|_| bad())?,
                from: from.parse().map_err(|_| bad())?,
                to: to.parse().map_err(|_| bad())?,
                length: len.parse().map_err(|_| bad())?,
            }),
            _ => return Err(bad()),
        }
    }
    RoadGraph::build(nodes, segments)
}

fn jsonl_to_string<T: Serialize>(header: &str, records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut s = format!("{header}\n");
    for r in records {
        s.push_str(&serde_json::to_string(&r).map_err(|e| Error::invalid(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn jsonl_from_str<T: DeserializeOwned>(kind: &str, body: &str) -> Result<Vec<T>> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{kind} line {}: {e}", i + 2))))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    traj_id: u64,
    points: Vec<[f64; 3]>,
    true_route: Vec<usize>,
    alignment: Vec<usize>,
}

pub fn dataset_to_string(samples: &[GroundTruthSample]) -> Result<String> {
    jsonl_to_string(
        &format!("DATASET {VERSION}"),
        samples.iter().map(|s| DatasetRecord {
            traj_id: s.traj_id,
            points: s.points.iter().map(|p| [p.pos.x, p.pos.y, p.t]).collect(),
            true_route: s.route.clone(),
            alignment: s.alignment.clone(),
        }),
    )
}

pub fn dataset_from_str(text: &str) -> Result<Vec<GroundTruthSample>> {
    let (_, body) = expect_header(text, "DATASET")?;
    let recs: Vec<DatasetRecord> = jsonl_from_str("DATASET", body)?;
    Ok(recs
        .into_iter()
        .map(|r| GroundTruthSample {
            traj_id: r.traj_id,
            route: r.true_route,
            points: r.points.iter().map(|p| GpsPoint { pos: Point::new(p[0], p[1]), t: p[2] }).collect(),
            alignment: r.alignment,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRecord {
    traj_id: u64,
    hmm_route: Vec<usize>,
    hmm_alignment: Vec<usize>,
    dropped_points: Vec<usize>,
    splits: Vec<usize>,
}

pub fn labels_to_string(labels: &[(u64, MatchedRoute)]) -> Result<String> {
    jsonl_to_string(
        &format!("LABELS {VERSION}"),
        labels.iter().map(|(id, m)| LabelRecord {
            traj_id: *id,
            hmm_route: m.route.clone(),
            hmm_alignment: m.alignment.clone(),
            dropped_points: m.dropped.clone(),
            splits: m.splits.clone(),
        }),
    )
}

pub fn labels_from_str(text: &str) -> Result<Vec<(u64, MatchedRoute)>> {
    let (_, body) = expect_header(text, "LABELS")?;
    let recs: Vec<LabelRecord> = jsonl_from_str("LABELS", body)?;
    Ok(recs
        .into_iter()
        .map(|r| {
            (r.traj_id, MatchedRoute { route: r.hmm_route, alignment: r.hmm_alignment, dropped: r.dropped_points, splits: r.splits })
        })
        .collect())
}

const SPECIAL_NAMES: [&str; N_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub fn vocab_to_string(v: &Vocab) -> String {
    let mut s = format!("VOCAB {VERSION} {} {}\n", v.kind().as_str(), v.len());
    for (id, name) in SPECIAL_NAMES.iter().enumerate() {
        let _ = writeln!(s, "{id} {name}");
    }
    for (i, k) in v.keys().iter().enumerate() {
        let key = match k {
            TokenKey::Cell(c) => format!("{},{}", c.col, c.row),
            TokenKey::Segment(id) => id.to_string(),
        };
        let _ = writeln!(s, "{} {key}", i + N_SPECIAL);
    }
    s
}

pub fn vocab_from_str(text: &str) -> Result<Vocab> {
    let (fields, body) = expect_header(text, "VOCAB")?;
    let (kind, size) = match fields.as_slice() {
        ["grid", n] => (VocabKind::Grid, n),
        ["segment", n] => (VocabKind::Segment, n),
        _ => return Err(Error::invalid(format!("vocab header fields {fields:?}"))),
    };
    let size: usize = size.parse().map_err(|_| Error::invalid(format!("vocab size {size:?}")))?;
    let mut keys = Vec::new();
    for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || bad_line("VOCAB", i, line);
        let (id, key) = line.split_once(' ').ok_or_else(bad)?;
        let id: usize = id.parse().map_err(|_| bad())?;
        if id < N_SPECIAL {
            if key != SPECIAL_NAMES[id] {
                return Err(bad());
            }
            continue;
        }
        if id != keys.len() + N_SPECIAL {
            return Err(Error::invalid(format!("vocab ids not dense at line {}", i + 2)));
        }
        keys.push(match kind {
            VocabKind::Grid => {
                let (c, r) = key.split_once(',').ok_or_else(bad)?;
                TokenKey::Cell(GridCellId { col: c.parse().map_err(|_| bad())?, row: r.parse().map_err(|_| bad())? })
            }
            VocabKind::Segment => TokenKey::Segment(key.parse().map_err(|_| bad())?),
        });
    }
    let v = Vocab::from_keys(kind, keys)?;
    if v.len() != size {
        return Err(Error::invalid(format!("vocab header says {size} tokens, file has {}", v.len())));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FragmentRecord {
    traj_id: u64,
    index: usize,
    input: Vec<TokenId>,
    target: Vec<TokenId>,
    points: (usize, usize),
    segments: (usize, usize),
    ambiguous_cut: bool,
}

pub fn fragments_to_string(frags: &[Fragment]) -> Result<String> {
    jsonl_to_string(
        &format!("FRAGMENTS {VERSION}"),
        frags.iter().map(|f| FragmentRecord {
            traj_id: f.traj_id,
            index: f.index,
            input: f.input.clone(),
            target: f.target.clone(),
            points: f.points,
            segments: f.segments,
            ambiguous_cut: f.ambiguous_cut,
        }),
    )
}

pub fn fragments_from_str(text: &str) -> Result<Vec<Fragment>> {
    let (_, body) = expect_header(text, "FRAGMENTS")?;
    let recs: Vec<FragmentRecord> = jsonl_from_str("FRAGMENTS", body)?;
    Ok(recs
        .into_iter()
        .map(|r| Fragment {
            traj_id: r.traj_id,
            index: r.index,
            input: r.input,
            target: r.target,
            points: r.points,
            segments: r.segments,
            ambiguous_cut: r.ambiguous_cut,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub traj_id: u64,
    pub route: Vec<usize>,
    #[serde(default)]
    pub discontinuities: Vec<usize>,
    #[serde(default)]
    pub truncated: Vec<usize>,
}

/// `source` names what produced the routes (model kind or baseline).
pub fn predictions_to_string(source: &str, preds: &[PredictionRecord]) -> Result<String> {
    jsonl_to_string(&format!("PREDICTIONS {VERSION} {source}"), preds)
}

pub fn predictions_from_str(text: &str) -> Result<(String, Vec<PredictionRecord>)> {
    let (fields, body) = expect_header(text, "PREDICTIONS")?;
    let source = fields.first().map_or(String::new(), |s| s.to_string());
    Ok((source, jsonl_from_str("PREDICTIONS", body)?))
}

/// One line feature per route, in map coordinates.
pub struct GeoRoute<'a> {
    pub traj_id: u64,
    pub role: &'a str,
    pub route: &'a [usize],
}

/// GeoJSON feature collection of route polylines and, optionally, the raw
/// GPS points of each trajectory.
pub fn routes_to_geojson(graph: &RoadGraph, routes: &[GeoRoute<'_>], points: &[(u64, &[GpsPoint])]) -> Result<String> {
    let mut features = Vec::new();
    for r in routes {
        let mut coords: Vec<[f64; 2]> = Vec::with_capacity(r.route.len() + 1);
        for (k, &s) in r.route.iter().enumerate() {
            let seg = graph.segment(s)?;
            let a = graph.node(seg.from).pos;
            let b = graph.node(seg.to).pos;
            if k == 0 || coords.last() != Some(&[a.x, a.y]) {
                coords.push([a.x, a.y]);
            }
            coords.push([b.x, b.y]);
        }
        features.push(serde_json::json!({
            "type": "Feature",
            "properties": { "traj_id": r.traj_id, "role": r.role, "segments": r.route },
            "geometry": { "type": "LineString", "coordinates": coords },
        }));
    }
    for (id, pts) in points {
        let coords: Vec<[f64; 2]> = pts.iter().map(|p| [p.pos.x, p.pos.y]).collect();
        features.push(serde_json::json!({
            "type": "Feature",
            "properties": { "traj_id": id, "role": "gps" },
            "geometry": { "type": "MultiPoint", "coordinates": coords },
        }));
    }
    let fc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    serde_json::to_string_pretty(&fc).map_err(|e| Error::invalid(e.to_string()))
}
