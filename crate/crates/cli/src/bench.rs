//! Wall-clock scaling of training steps and inference with input length.

use std::fmt::Write as _;
use std::time::Instant;

use mmseq::model::{decode, DecodeMode, Seq2Seq};
use mmseq::prep::{encode_input, Vocab};
use mmseq::rng::derive_seed;
use mmseq::rnn::BiGru;
use mmseq::simulate::{simulate_dataset, GroundTruthSample, SimConfig};
use mmseq::train::{batch_gradients, Example};
use mmseq::transformer::Transformer;
use mmseq::{Checkpoint, Error, GridSpec, Result};
use serde_json::json;

use crate::commands::{checkpoint_file, load_map};
use crate::workspace::Workspace;
use crate::ModelArg;

struct Row {
    model: &'static str,
    length: usize,
    examples: usize,
    train_s: f64,
    infer_s: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Trajectories long enough for the largest bucket, simulated on the run's
/// map with the run's noise. Timing only needs realistic token sequences, so
/// the ground-truth route serves as the target.
fn bench_samples(ws: &mut Workspace, longest: usize, count: usize) -> Result<Vec<GroundTruthSample>> {
    let graph = load_map(ws)?;
    let sim = ws.cfg.sim()?;
    let block = graph.segments().iter().map(|s| s.length).fold(f64::INFINITY, f64::min);
    let need = (((longest - 1) as f64 * sim.speed_mps * sim.sample_interval_s) / block).ceil() as usize + 1;
    let cfg = SimConfig {
        trajectories: count,
        min_route_segments: need,
        max_route_segments: need + 4,
        seed: derive_seed(sim.seed, "bench", 0),
        ..sim
    };
    simulate_dataset(&graph, &cfg, &ws.cfg.noise()?)
}

/// The first `len` points of each sample, paired with the route they cover.
fn bucket_examples(samples: &[GroundTruthSample], len: usize, max_out: usize, grid: &GridSpec, gv: &Vocab, sv: &Vocab) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in samples.iter().filter(|d| d.points.len() >= len) {
        let (a, b) = (d.alignment[0], d.alignment[len - 1]);
        let mut target = sv.encode_route(&d.route[a..=b]);
        target.truncate(max_out);
        out.push(Example { input: encode_input(&d.points[..len].to_vec(), grid, gv)?, target });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no benchmark trajectory has {len} points")));
    }
    Ok(out)
}

fn time_model<M: Seq2Seq>(
    ws: &mut Workspace,
    name: &'static str,
    model: &M,
    samples: &[GroundTruthSample],
    buckets: &[usize],
    rows: &mut Vec<Row>,
) -> Result<()> {
    let (gv, sv) = crate::commands::load_vocabs(ws)?;
    let grid = ws.cfg.grid()?;
    let repeats = ws.cfg.bench_repeats()?;
    for &len in buckets {
        let examples = bucket_examples(samples, len, model.max_out(), &grid, &gv, &sv)?;
        let refs: Vec<&Example> = examples.iter().collect();
        let mut train_t = Vec::with_capacity(repeats);
        let mut infer_t = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let start = Instant::now();
            batch_gradients(model, &refs, r as u64)?;
            train_t.push(start.elapsed().as_secs_f64());
            let start = Instant::now();
            for ex in &examples {
                let mut dec = model.start_decoding(&ex.input)?;
                decode(dec.as_mut(), DecodeMode::Greedy, model.max_out())?;
            }
            infer_t.push(start.elapsed().as_secs_f64() / examples.len() as f64);
        }
        log::info!("{name} length {len}: {} examples", examples.len());
        rows.push(Row { model: name, length: len, examples: examples.len(), train_s: median(train_t), infer_s: median(infer_t) });
    }
    Ok(())
}

fn read_checkpoint(ws: &mut Workspace, m: ModelArg) -> Result<Checkpoint> {
    let name = checkpoint_file(m);
    if !ws.exists(&name) {
        return Err(Error::Validation(format!("{name} not found; train the model before benchmarking")));
    }
    let bytes = ws.read_bytes(&name)?;
    Checkpoint::read_from(&mut bytes.as_slice())
}

pub fn run(ws: &mut Workspace) -> Result<()> {
    let buckets = ws.cfg.bench_buckets()?;
    let longest = buckets.iter().copied().max().unwrap_or(1);
    let tfm = Transformer::from_checkpoint(&read_checkpoint(ws, ModelArg::Tfm)?)?;
    let mut gru = BiGru::from_checkpoint(&read_checkpoint(ws, ModelArg::Gru)?)?;
    if tfm.max_in() < longest {
        return Err(Error::Config(format!("transformer accepts at most {} input tokens; bench.buckets asks for {longest}", tfm.max_in())));
    }
    if gru.max_in() < longest {
        gru.set_max_in_len(longest)?;
    }
    let samples = bench_samples(ws, longest, ws.cfg.bench_batch_size()?)?;
    let mut rows = Vec::new();
    time_model(ws, "tfm", &tfm, &samples, &buckets, &mut rows)?;
    time_model(ws, "gru", &gru, &samples, &buckets, &mut rows)?;

    let mut csv = String::from("model,length,examples,train_step_s,infer_per_traj_s,train_ratio,infer_ratio\n");
    for r in &rows {
        let base = rows.iter().find(|b| b.model == r.model).expect("row exists");
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.3},{:.3}",
            r.model,
            r.length,
            r.examples,
            r.train_s,
            r.infer_s,
            r.train_s / base.train_s,
            r.infer_s / base.infer_s
        );
        ws.notes.insert(format!("{}_{}_infer_ratio", r.model, r.length), json!(r.infer_s / base.infer_s));
    }
    print!("{csv}");
    ws.write("bench.csv", csv.as_bytes())
}
