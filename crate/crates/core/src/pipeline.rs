//! Glue between the stages: HMM labelling of a dataset, fragment
//! preparation and whole-trajectory inference with fragment merging.

use crate::error::{Error, Result};
use crate::geo::{DistanceCache, GridSpec, RoadGraph, SpatialIndex};
use crate::hmm::{HmmParams, MatchedRoute, Matcher};
use crate::model::{decode, DecodeMode, Seq2Seq};
use crate::prep::{encode_input, merge, split, Fragment, SplitSpec, TokenId, Vocab};
use crate::simulate::Trajectory;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Bucket size for the spatial index used by the matcher, in meters.
pub const INDEX_BUCKET_M: f64 = 100.0;

/// HMM labels for every trajectory, in input order.
pub fn label_trajectories<'t>(
    graph: &RoadGraph,
    trajectories: impl IntoIterator<Item = &'t Trajectory>,
    params: HmmParams,
) -> Result<Vec<MatchedRoute>> {
    let index = SpatialIndex::build(graph, INDEX_BUCKET_M)?;
    let matcher = Matcher::new(graph, &index, params)?;
    let mut cache = DistanceCache::default();
    trajectories.into_iter().map(|t| matcher.match_trajectory(t, &mut cache)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => Err(Error::invalid(format!("unknown split role {s:?}"))),
        }
    }
}

/// Seeded shuffle of the ids, then the first `test_fraction` go to test and
/// `val_fraction` of the rest to validation. Each role keeps at least one
/// trajectory when there are enough to go round.
pub fn assign_roles(ids: &[u64], test_fraction: f64, val_fraction: f64, seed: u64) -> Result<BTreeMap<u64, Role>> {
    if ids.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 trajectories to split, got {}", ids.len())));
    }
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config("split fractions must lie in [0, 1)".into()));
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::invalid("trajectory ids are not unique"));
    }
    order.shuffle(&mut crate::rng::rng_for(seed, "split", 0));
    let n = order.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 2);
    let n_val = (((n - n_test) as f64 * val_fraction).round() as usize).clamp(1, n - n_test - 1);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let role = if i < n_test {
                Role::Test
            } else if i < n_test + n_val {
                Role::Val
            } else {
                Role::Train
            };
            (id, role)
        })
        .collect())
}

/// Labelled fragments of one trajectory.
pub fn fragments_for(
    traj_id: u64,
    traj: &Trajectory,
    label: &MatchedRoute,
    grid: &GridSpec,
    grid_vocab: &Vocab,
    seg_vocab: &Vocab,
    spec: &SplitSpec,
) -> Result<Vec<Fragment>> {
    let input = encode_input(traj, grid, grid_vocab)?;
    let target = seg_vocab.encode_route(&label.route);
    split(traj_id, &input, &target, &label.alignment, spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub route: Vec<usize>,
    /// Fragment indices whose prediction did not overlap the route so far.
    pub discontinuities: Vec<usize>,
    /// Fragments whose decoding hit the length limit.
    pub truncated: Vec<usize>,
}

/// Splits, decodes each fragment and merges the predicted segment runs.
pub fn predict_route<M: Seq2Seq>(
    model: &M,
    traj: &Trajectory,
    grid: &GridSpec,
    grid_vocab: &Vocab,
    seg_vocab: &Vocab,
    spec: &SplitSpec,
    mode: DecodeMode,
) -> Result<Prediction> {
    if spec.max_in > model.max_in() {
        return Err(Error::Config(format!(
            "split max_in {} exceeds the model's input limit {}",
            spec.max_in,
            model.max_in()
        )));
    }
    let input = encode_input(traj, grid, grid_vocab)?;
    let frags = split(0, &input, &[], &[], spec)?;
    let mut pieces: Vec<Vec<usize>> = Vec::with_capacity(frags.len());
    let mut truncated = Vec::new();
    for f in &frags {
        let tokens = decode_tokens(model, &f.input, mode, spec.max_out.min(model.max_out()))?;
        if tokens.1 {
            truncated.push(f.index);
        }
        pieces.push(seg_vocab.decode_route(&tokens.0));
    }
    let merged = merge(&pieces, spec.max_out);
    Ok(Prediction { route: merged.route, discontinuities: merged.discontinuities, truncated })
}

fn decode_tokens<M: Seq2Seq>(model: &M, input: &[TokenId], mode: DecodeMode, max_len: usize) -> Result<(Vec<TokenId>, bool)> {
    let mut dec = model.start_decoding(input)?;
    let d = decode(dec.as_mut(), mode, max_len)?;
    Ok((d.tokens, d.truncated))
}
