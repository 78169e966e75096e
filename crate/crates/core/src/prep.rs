//! Tokenization, fragment splitting and merging, and batch padding.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::geo::{grid_cell_of, GridCellId, GridSpec};
use crate::simulate::Trajectory;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const N_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocabKind {
    Grid,
    Segment,
}

impl VocabKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabKind::Grid => "grid",
            VocabKind::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKey {
    Cell(GridCellId),
    Segment(usize),
}

/// Dense token space with the four reserved ids in front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    kind: VocabKind,
    keys: Vec<TokenKey>,
    ids: HashMap<TokenKey, TokenId>,
}

impl Vocab {
    /// Keys are assigned ids in the given order, starting after the specials.
    pub fn from_keys(kind: VocabKind, keys: Vec<TokenKey>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            let expected = match (kind, k) {
                (VocabKind::Grid, TokenKey::Cell(_)) | (VocabKind::Segment, TokenKey::Segment(_)) => true,
                _ => false,
            };
            if !expected {
                return Err(Error::invalid(format!("token {k:?} does not belong in a {} vocab", kind.as_str())));
            }
            if ids.insert(*k, (i + N_SPECIAL) as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocab token {k:?}")));
            }
        }
        Ok(Vocab { kind, keys, ids })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Size including the specials.
    pub fn len(&self) -> usize {
        self.keys.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[TokenKey] {
        &self.keys
    }

    pub fn id(&self, key: &TokenKey) -> TokenId {
        self.ids.get(key).copied().unwrap_or(UNK)
    }

    pub fn key(&self, id: TokenId) -> Option<TokenKey> {
        (id as usize).checked_sub(N_SPECIAL).and_then(|i| self.keys.get(i)).copied()
    }

    pub fn encode_route(&self, route: &[usize]) -> Vec<TokenId> {
        route.iter().map(|&s| self.id(&TokenKey::Segment(s))).collect()
    }

    /// Segment ids for the non-special tokens, in order.
    pub fn decode_route(&self, tokens: &[TokenId]) -> Vec<usize> {
        tokens
            .iter()
            .filter_map(|&t| match self.key(t) {
                Some(TokenKey::Segment(s)) => Some(s),
                _ => None,
            })
            .collect()
    }
}

/// Grid vocab over every cell visited by the given trajectories (row-major
/// order) and segment vocab over the whole map (by id).
pub fn build_vocabs<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    n_segments: usize,
    grid: &GridSpec,
) -> Result<(Vocab, Vocab)> {
    let mut cells = BTreeSet::new();
    let mut any = false;
    for t in trajectories {
        any = true;
        for p in t {
            let c = grid_cell_of(p.pos, grid)?;
            cells.insert((c.row, c.col));
        }
    }
    if !any {
        return Err(Error::invalid("cannot build vocabularies from an empty dataset"));
    }
    let grid_keys = cells.into_iter().map(|(row, col)| TokenKey::Cell(GridCellId { col, row })).collect();
    let seg_keys = (0..n_segments).map(TokenKey::Segment).collect();
    Ok((Vocab::from_keys(VocabKind::Grid, grid_keys)?, Vocab::from_keys(VocabKind::Segment, seg_keys)?))
}

/// One token per GPS point; repeated cells are kept.
pub fn encode_input(traj: &Trajectory, grid: &GridSpec, vocab: &Vocab) -> Result<Vec<TokenId>> {
    traj.iter()
        .map(|p| Ok(vocab.id(&TokenKey::Cell(grid_cell_of(p.pos, grid)?))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub max_in: usize,
    pub max_out: usize,
    pub overlap_points: usize,
}

impl SplitSpec {
    pub const TRANSFORMER: SplitSpec = SplitSpec { max_in: 20, max_out: 100, overlap_points: 2 };
    pub const RNN: SplitSpec = SplitSpec { max_in: 8, max_out: 50, overlap_points: 2 };

    pub fn validate(&self) -> Result<()> {
        if self.max_in == 0 || self.max_out == 0 || self.overlap_points >= self.max_in {
            return Err(Error::invalid(format!("invalid split spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub traj_id: u64,
    pub index: usize,
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Inclusive point range in the parent trajectory.
    pub points: (usize, usize),
    /// Inclusive route range in the parent trajectory.
    pub segments: (usize, usize),
    /// The segment overlap with the next fragment is a single segment, so
    /// merging has only one token to anchor on.
    pub ambiguous_cut: bool,
}

/// Cuts a labelled trajectory into windows of at most `max_in` points whose
/// aligned sub-route has at most `max_out` segments. Consecutive windows
/// share `overlap_points` points and the segments between them.
///
/// `alignment[i]` is the route index of point `i`; `target` holds one token
/// per route segment. `target` may be empty for inference-only inputs, in
/// which case `alignment` may be empty as well.
pub fn split(
    traj_id: u64,
    input: &[TokenId],
    target: &[TokenId],
    alignment: &[usize],
    spec: &SplitSpec,
) -> Result<Vec<Fragment>> {
    spec.validate()?;
    let n = input.len();
    if n == 0 {
        return Err(Error::invalid(format!("trajectory {traj_id} has no points")));
    }
    let labelled = !target.is_empty();
    if labelled {
        if alignment.len() != n {
            return Err(Error::invalid(format!(
                "trajectory {traj_id}: {} alignment entries for {n} points",
                alignment.len()
            )));
        }
        if alignment.windows(2).any(|w| w[1] < w[0]) || alignment.iter().any(|&a| a >= target.len()) {
            return Err(Error::invalid(format!("trajectory {traj_id}: alignment not monotone within route")));
        }
    }
    let seg_lo = |s: usize| if s == 0 || !labelled { 0 } else { alignment[s] };
    let seg_hi = |e: usize| {
        if !labelled {
            0
        } else if e == n - 1 {
            target.len() - 1
        } else {
            alignment[e]
        }
    };
    let mut frags: Vec<Fragment> = Vec::new();
    let mut s = 0;
    loop {
        let mut e = (s + spec.max_in - 1).min(n - 1);
        while labelled && seg_hi(e) - seg_lo(s) + 1 > spec.max_out {
            if e == s {
                return Err(Error::invalid(format!(
                    "trajectory {traj_id}: gap after point {s} spans more than {} segments",
                    spec.max_out
                )));
            }
            e -= 1;
        }
        if e == s && e < n - 1 {
            return Err(Error::invalid(format!(
                "trajectory {traj_id}: gap after point {s} spans more than {} segments",
                spec.max_out
            )));
        }
        let (lo, hi) = (seg_lo(s), seg_hi(e));
        frags.push(Fragment {
            traj_id,
            index: frags.len(),
            input: input[s..=e].to_vec(),
            target: if labelled { target[lo..=hi].to_vec() } else { Vec::new() },
            points: (s, e),
            segments: (lo, hi),
            ambiguous_cut: false,
        });
        if e == n - 1 {
            break;
        }
        s = (e + 1).saturating_sub(spec.overlap_points).max(s + 1);
    }
    if labelled {
        for i in 1..frags.len() {
            let overlap = frags[i - 1].segments.1 + 1 - frags[i].segments.0;
            frags[i - 1].ambiguous_cut = overlap == 1;
        }
    }
    Ok(frags)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merged<T> {
    pub route: Vec<T>,
    /// Indices of fragments that shared no overlap with what preceded them.
    pub discontinuities: Vec<usize>,
}

/// Stitches ordered fragment predictions: the longest suffix of the route so
/// far (at most `max_overlap` items) that equals a prefix of the next
/// fragment is dropped from that fragment before appending.
pub fn merge<T: PartialEq + Clone>(fragments: &[Vec<T>], max_overlap: usize) -> Merged<T> {
    let mut route: Vec<T> = Vec::new();
    let mut discontinuities = Vec::new();
    for (i, frag) in fragments.iter().enumerate() {
        if i == 0 {
            route.extend_from_slice(frag);
            continue;
        }
        let longest = route.len().min(frag.len()).min(max_overlap);
        let overlap = (1..=longest).rev().find(|&l| route[route.len() - l..] == frag[..l]);
        match overlap {
            Some(l) => route.extend_from_slice(&frag[l..]),
            None => {
                discontinuities.push(i);
                route.extend_from_slice(frag);
            }
        }
    }
    Merged { route, discontinuities }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// [batch, max input len], PAD on the right.
    pub inputs: Vec<Vec<TokenId>>,
    /// [batch, max framed len]: BOS, tokens, EOS, then PAD.
    pub targets: Vec<Vec<TokenId>>,
    /// True exactly at PAD positions.
    pub input_pad: Vec<Vec<bool>>,
    pub target_pad: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of non-PAD prediction positions (framed length minus BOS).
    pub fn target_tokens(&self) -> usize {
        self.target_pad.iter().map(|row| row.iter().skip(1).filter(|p| !**p).count()).sum()
    }
}

/// Right-pads inputs and frames targets with BOS/EOS. `max_out` bounds the
/// unframed target length.
pub fn pad_batch(pairs: &[(Vec<TokenId>, Vec<TokenId>)], max_in: usize, max_out: usize) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot pad an empty batch"));
    }
    for (i, (inp, tgt)) in pairs.iter().enumerate() {
        if inp.is_empty() || inp.len() > max_in {
            return Err(Error::invalid(format!("batch row {i}: input length {} outside 1..={max_in}", inp.len())));
        }
        if tgt.len() + 2 > max_out + 2 {
            return Err(Error::invalid(format!(
                "batch row {i}: framed target length {} exceeds {}",
                tgt.len() + 2,
                max_out + 2
            )));
        }
    }
    let w_in = pairs.iter().map(|(i, _)| i.len()).max().unwrap();
    let w_out = pairs.iter().map(|(_, t)| t.len() + 2).max().unwrap();
    let mut batch = Batch { inputs: Vec::new(), targets: Vec::new(), input_pad: Vec::new(), target_pad: Vec::new() };
    for (inp, tgt) in pairs {
        let mut row = inp.clone();
        row.resize(w_in, PAD);
        batch.input_pad.push((0..w_in).map(|j| j >= inp.len()).collect());
        batch.inputs.push(row);
        let mut framed = Vec::with_capacity(w_out);
        framed.push(BOS);
        framed.extend_from_slice(tgt);
        framed.push(EOS);
        let used = framed.len();
        framed.resize(w_out, PAD);
        batch.target_pad.push((0..w_out).map(|j| j >= used).collect());
        batch.targets.push(framed);
    }
    Ok(batch)
}
