use std::collections::BTreeMap;
use std::fmt::Write as _;

use mmseq::geo::SpatialIndex;
use mmseq::hmm::{nearest_segment_route, MatchedRoute, Matcher};
use mmseq::io::{self, GeoRoute, PredictionRecord};
use mmseq::model::{ModelKind, Seq2Seq};
use mmseq::pipeline::{self, Role, INDEX_BUCKET_M};
use mmseq::prep::{build_vocabs, Fragment, SplitSpec, Vocab};
use mmseq::rnn::BiGru;
use mmseq::simulate::{gen_map as generate_map, simulate_dataset, GroundTruthSample};
use mmseq::train::{fit, resume_state, to_checkpoint, Example, TrainState};
use mmseq::transformer::Transformer;
use mmseq::{Checkpoint, Error, Result, RoadGraph};
use serde_json::json;

use crate::workspace::Workspace;
use crate::{ModelArg, SourceArg};

pub const MAP: &str = "map.txt";
pub const DATASET: &str = "dataset.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const SPLIT: &str = "split.txt";
pub const GRID_VOCAB: &str = "vocab_grid.txt";
pub const SEG_VOCAB: &str = "vocab_segment.txt";

pub fn model_name(m: ModelArg) -> &'static str {
    kind_of(m).cli_name()
}

pub fn kind_of(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::Tfm => ModelKind::Transformer,
        ModelArg::Gru => ModelKind::Gru,
    }
}

pub fn source_name(s: SourceArg) -> &'static str {
    match s {
        SourceArg::Tfm => "tfm",
        SourceArg::Gru => "gru",
        SourceArg::Naive => "naive",
        SourceArg::Hmm => "hmm",
    }
}

pub fn fragments_file(m: ModelArg, part: &str) -> String {
    format!("fragments_{}_{part}.jsonl", model_name(m))
}

pub fn checkpoint_file(m: ModelArg) -> String {
    format!("{}.ckpt", model_name(m))
}

fn epoch_checkpoint(m: ModelArg, epoch: usize) -> String {
    format!("checkpoints/{}/epoch_{epoch:03}.ckpt", model_name(m))
}

pub fn load_map(ws: &mut Workspace) -> Result<RoadGraph> {
    io::map_from_str(&ws.read(MAP)?)
}

fn load_dataset(ws: &mut Workspace) -> Result<Vec<GroundTruthSample>> {
    io::dataset_from_str(&ws.read(DATASET)?)
}

pub fn load_labels(ws: &mut Workspace) -> Result<BTreeMap<u64, MatchedRoute>> {
    Ok(io::labels_from_str(&ws.read(LABELS)?)?.into_iter().collect())
}

fn load_split(ws: &mut Workspace) -> Result<BTreeMap<u64, Role>> {
    let text = ws.read(SPLIT)?;
    let mut lines = text.lines();
    if lines.next() != Some("SPLIT v1") {
        return Err(Error::Validation("split file lacks a SPLIT v1 header".into()));
    }
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Validation(format!("split line {line:?}"));
        let (id, role) = line.split_once(' ').ok_or_else(bad)?;
        out.insert(id.parse().map_err(|_| bad())?, Role::parse(role)?);
    }
    Ok(out)
}

pub fn load_vocabs(ws: &mut Workspace) -> Result<(Vocab, Vocab)> {
    Ok((io::vocab_from_str(&ws.read(GRID_VOCAB)?)?, io::vocab_from_str(&ws.read(SEG_VOCAB)?)?))
}

pub fn gen_map(ws: &mut Workspace) -> Result<()> {
    let g = generate_map(&ws.cfg.map()?)?;
    ws.notes.insert("nodes".into(), json!(g.nodes().len()));
    ws.notes.insert("segments".into(), json!(g.segments().len()));
    ws.write(MAP, io::map_to_string(&g).as_bytes())
}

pub fn simulate(ws: &mut Workspace) -> Result<()> {
    let g = load_map(ws)?;
    let data = simulate_dataset(&g, &ws.cfg.sim()?, &ws.cfg.noise()?)?;
    ws.notes.insert("trajectories".into(), json!(data.len()));
    ws.write(DATASET, io::dataset_to_string(&data)?.as_bytes())
}

pub fn match_hmm(ws: &mut Workspace) -> Result<()> {
    let g = load_map(ws)?;
    let data = load_dataset(ws)?;
    let routes = pipeline::label_trajectories(&g, data.iter().map(|d| &d.points), ws.cfg.hmm()?)?;
    let labels: Vec<(u64, MatchedRoute)> = data.iter().map(|d| d.traj_id).zip(routes).collect();
    let dropped: usize = labels.iter().map(|(_, l)| l.dropped.len()).sum();
    let splits: usize = labels.iter().map(|(_, l)| l.splits.len()).sum();
    ws.notes.insert("dropped_points".into(), json!(dropped));
    ws.notes.insert("route_splits".into(), json!(splits));
    ws.write(LABELS, io::labels_to_string(&labels)?.as_bytes())
}

pub fn prepare(ws: &mut Workspace) -> Result<()> {
    let g = load_map(ws)?;
    let data = load_dataset(ws)?;
    let labels = load_labels(ws)?;
    if let Some(d) = data.iter().find(|d| !labels.contains_key(&d.traj_id)) {
        return Err(Error::Validation(format!("trajectory {} has no label", d.traj_id)));
    }
    let ids: Vec<u64> = data.iter().map(|d| d.traj_id).collect();
    let roles = pipeline::assign_roles(&ids, ws.cfg.test_fraction()?, ws.cfg.val_fraction()?, ws.cfg.seed()?)?;
    let count = |r: Role| roles.values().filter(|&&x| x == r).count();
    let mut split = String::from("SPLIT v1\n");
    for (id, role) in &roles {
        let _ = writeln!(split, "{id} {}", role.as_str());
    }
    ws.write(SPLIT, split.as_bytes())?;
    ws.notes.insert("split".into(), json!({ "train": count(Role::Train), "val": count(Role::Val), "test": count(Role::Test) }));

    let grid = ws.cfg.grid()?;
    let train_traj = data.iter().filter(|d| roles[&d.traj_id] == Role::Train).map(|d| &d.points);
    let (gv, sv) = build_vocabs(train_traj, g.segments().len(), &grid)?;
    ws.write(GRID_VOCAB, io::vocab_to_string(&gv).as_bytes())?;
    ws.write(SEG_VOCAB, io::vocab_to_string(&sv).as_bytes())?;
    ws.notes.insert("vocab".into(), json!({ "grid": gv.len(), "segment": sv.len() }));

    for (model, spec) in [(ModelArg::Tfm, ws.cfg.split_spec_tfm()?), (ModelArg::Gru, ws.cfg.split_spec_gru()?)] {
        let mut parts: BTreeMap<&str, Vec<Fragment>> = BTreeMap::new();
        let mut skipped = 0;
        for d in &data {
            let role = roles[&d.traj_id];
            if role == Role::Test {
                continue;
            }
            match pipeline::fragments_for(d.traj_id, &d.points, &labels[&d.traj_id], &grid, &gv, &sv, &spec) {
                Ok(f) => parts.entry(role.as_str()).or_default().extend(f),
                Err(Error::Validation(msg)) => {
                    log::warn!("skipping trajectory {}: {msg}", d.traj_id);
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        for part in ["train", "val"] {
            let frags = parts.remove(part).unwrap_or_default();
            ws.notes.insert(format!("fragments_{}_{part}", model_name(model)), json!(frags.len()));
            ws.write(&fragments_file(model, part), io::fragments_to_string(&frags)?.as_bytes())?;
        }
        ws.notes.insert(format!("skipped_{}", model_name(model)), json!(skipped));
    }
    Ok(())
}

fn latest_epoch(ws: &Workspace, m: ModelArg) -> Option<usize> {
    let dir = ws.path(&format!("checkpoints/{}", model_name(m)));
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .max()
}

fn read_checkpoint(ws: &mut Workspace, name: &str) -> Result<Checkpoint> {
    let bytes = ws.read_bytes(name)?;
    Checkpoint::read_from(&mut bytes.as_slice())
}

pub fn train(ws: &mut Workspace, m: ModelArg, resume: bool) -> Result<()> {
    let (gv, sv) = load_vocabs(ws)?;
    let load = |ws: &mut Workspace, part| -> Result<Vec<Example>> {
        Ok(io::fragments_from_str(&ws.read(&fragments_file(m, part))?)?.iter().map(Example::from).collect())
    };
    let train = load(ws, "train")?;
    let val = load(ws, "val")?;
    let tc = ws.cfg.train_config(kind_of(m))?;
    let seed = ws.cfg.seed()?;
    let start = if resume {
        let epoch = latest_epoch(ws, m).ok_or_else(|| Error::Validation(format!("no {} checkpoint to resume from", model_name(m))))?;
        Some(read_checkpoint(ws, &epoch_checkpoint(m, epoch))?)
    } else {
        None
    };
    match m {
        ModelArg::Tfm => {
            let model = match &start {
                Some(ck) => Transformer::from_checkpoint(ck)?,
                None => Transformer::new(ws.cfg.transformer(gv.len(), sv.len())?, seed)?,
            };
            train_model(ws, m, model, start.as_ref(), &train, &val, &tc)
        }
        ModelArg::Gru => {
            let model = match &start {
                Some(ck) => BiGru::from_checkpoint(ck)?,
                None => BiGru::new(ws.cfg.rnn(gv.len(), sv.len())?, seed)?,
            };
            train_model(ws, m, model, start.as_ref(), &train, &val, &tc)
        }
    }
}

fn train_model<M: Seq2Seq>(
    ws: &mut Workspace,
    m: ModelArg,
    mut model: M,
    start: Option<&Checkpoint>,
    train: &[Example],
    val: &[Example],
    tc: &mmseq::train::TrainConfig,
) -> Result<()> {
    let state = match start {
        Some(ck) => resume_state(ck)?,
        None => TrainState::default(),
    };
    log::info!("training {} on {} fragments ({} validation) from epoch {}", model_name(m), train.len(), val.len(), state.epoch);
    let mut on_epoch = |model: &M, st: &TrainState| -> Result<()> {
        let bytes = to_checkpoint(model, Some(st))?.to_bytes()?;
        ws.write(&epoch_checkpoint(m, st.epoch), &bytes)?;
        if val.is_empty() || st.best_epoch == Some(st.epoch) {
            ws.write(&checkpoint_file(m), &bytes)?;
        }
        Ok(())
    };
    let state = fit(&mut model, train, val, tc, state, &mut on_epoch)?;
    let mut csv = String::from("epoch,steps,train_loss,train_acc,val_loss,val_acc\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in &state.history {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.epoch, r.steps, r.train_loss, r.train_acc, opt(r.val_loss), opt(r.val_acc));
    }
    ws.write(&format!("loss_{}.csv", model_name(m)), csv.as_bytes())?;
    ws.notes.insert("epochs".into(), json!(state.epoch));
    ws.notes.insert("steps".into(), json!(state.step));
    ws.notes.insert("best_epoch".into(), json!(state.best_epoch));
    ws.notes.insert("early_stopped".into(), json!(state.stopped));
    Ok(())
}

pub fn test_samples(ws: &mut Workspace) -> Result<Vec<GroundTruthSample>> {
    let split = load_split(ws)?;
    Ok(load_dataset(ws)?.into_iter().filter(|d| split.get(&d.traj_id) == Some(&Role::Test)).collect())
}

pub fn infer(ws: &mut Workspace, src: SourceArg) -> Result<()> {
    let g = load_map(ws)?;
    let test = test_samples(ws)?;
    let preds: Vec<PredictionRecord> = match src {
        SourceArg::Naive => {
            let index = SpatialIndex::build(&g, INDEX_BUCKET_M)?;
            let matcher = Matcher::new(&g, &index, ws.cfg.hmm()?)?;
            test.iter()
                .map(|d| Ok(record(d.traj_id, nearest_segment_route(&d.points, &matcher)?)))
                .collect::<Result<_>>()?
        }
        SourceArg::Hmm => {
            let labels = load_labels(ws)?;
            test.iter().map(|d| record(d.traj_id, labels[&d.traj_id].route.clone())).collect()
        }
        SourceArg::Tfm => {
            let ck = read_checkpoint(ws, &checkpoint_file(ModelArg::Tfm))?;
            let model = Transformer::from_checkpoint(&ck)?;
            let spec = ws.cfg.split_spec_tfm()?;
            predict_all(ws, &model, &test, &spec)?
        }
        SourceArg::Gru => {
            let ck = read_checkpoint(ws, &checkpoint_file(ModelArg::Gru))?;
            let model = BiGru::from_checkpoint(&ck)?;
            let spec = ws.cfg.split_spec_gru()?;
            predict_all(ws, &model, &test, &spec)?
        }
    };
    let contiguous = preds.iter().filter(|p| g.is_contiguous(&p.route)).count();
    ws.notes.insert("contiguous_routes".into(), json!(contiguous));
    ws.notes.insert("routes".into(), json!(preds.len()));
    let text = io::predictions_to_string(source_name(src), &preds)?;
    ws.write(&format!("predictions_{}.jsonl", source_name(src)), text.as_bytes())
}

fn record(traj_id: u64, route: Vec<usize>) -> PredictionRecord {
    PredictionRecord { traj_id, route, discontinuities: Vec::new(), truncated: Vec::new() }
}

fn predict_all<M: Seq2Seq>(ws: &mut Workspace, model: &M, test: &[GroundTruthSample], spec: &SplitSpec) -> Result<Vec<PredictionRecord>> {
    let (gv, sv) = load_vocabs(ws)?;
    let grid = ws.cfg.grid()?;
    let mode = ws.cfg.decode_mode()?;
    test.iter()
        .map(|d| {
            let p = pipeline::predict_route(model, &d.points, &grid, &gv, &sv, spec, mode)?;
            Ok(PredictionRecord { traj_id: d.traj_id, route: p.route, discontinuities: p.discontinuities, truncated: p.truncated })
        })
        .collect()
}

pub fn evaluate(ws: &mut Workspace, src: SourceArg) -> Result<()> {
    let g = load_map(ws)?;
    let split = load_split(ws)?;
    let labels = load_labels(ws)?;
    let (_, preds) = io::predictions_from_str(&ws.read(&format!("predictions_{}.jsonl", source_name(src)))?)?;
    let truth: Vec<(u64, Vec<usize>)> = labels
        .into_iter()
        .filter(|(id, _)| split.get(id) == Some(&Role::Test))
        .map(|(id, l)| (id, l.route))
        .collect();
    let preds: Vec<(u64, Vec<usize>)> = preds.into_iter().map(|p| (p.traj_id, p.route)).collect();
    let report = mmseq::metrics::evaluate_dataset(&preds, &truth, &g)?;
    print!("{}", report.table());
    let name = source_name(src);
    ws.write(&format!("eval_{name}.txt"), report.table().as_bytes())?;
    ws.write(&format!("eval_{name}.kv"), report.key_values().as_bytes())?;
    ws.write(&format!("eval_{name}.csv"), report.per_traj_csv().as_bytes())
}

pub fn export_geo(ws: &mut Workspace) -> Result<()> {
    let g = load_map(ws)?;
    let test = test_samples(ws)?;
    let labels = load_labels(ws)?;
    let mut predicted: Vec<(&str, BTreeMap<u64, Vec<usize>>)> = Vec::new();
    for src in ["tfm", "gru", "naive"] {
        let name = format!("predictions_{src}.jsonl");
        if ws.exists(&name) {
            let (_, recs) = io::predictions_from_str(&ws.read(&name)?)?;
            predicted.push((src, recs.into_iter().map(|r| (r.traj_id, r.route)).collect()));
        }
    }
    let chosen: Vec<&GroundTruthSample> = test.iter().take(ws.cfg.export_limit()?).collect();
    let mut routes = Vec::new();
    for d in &chosen {
        routes.push(GeoRoute { traj_id: d.traj_id, role: "truth", route: &d.route });
        routes.push(GeoRoute { traj_id: d.traj_id, role: "hmm", route: &labels[&d.traj_id].route });
        for (src, preds) in &predicted {
            if let Some(r) = preds.get(&d.traj_id) {
                routes.push(GeoRoute { traj_id: d.traj_id, role: src, route: r });
            }
        }
    }
    let points: Vec<(u64, &[mmseq::simulate::GpsPoint])> = chosen.iter().map(|d| (d.traj_id, d.points.as_slice())).collect();
    let text = io::routes_to_geojson(&g, &routes, &points)?;
    ws.write("routes.geojson", text.as_bytes())
}
