//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file overrides any subset. Unknown
//! keys and malformed values are configuration errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use mmseq::geo::GridCellId;
use mmseq::hmm::HmmParams;
use mmseq::model::DecodeMode;
use mmseq::prep::SplitSpec;
use mmseq::rnn::RnnConfig;
use mmseq::simulate::{MapSpec, NoiseModel, SimConfig};
use mmseq::train::TrainConfig;
use mmseq::transformer::TransformerConfig;
use mmseq::{Error, GridSpec, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("map.cols", "8"),
    ("map.rows", "8"),
    ("map.block_m", "80"),
    ("map.removal_prob", "0"),
    ("map.oneway_prob", "0"),
    ("noise.sigma_m", "15"),
    ("noise.hotspots", ""),
    ("sim.trajectories", "500"),
    ("sim.interval_s", "30"),
    ("sim.speed_mps", "8"),
    ("sim.min_segments", "8"),
    ("sim.max_segments", "30"),
    ("hmm.sigma_z", "15"),
    ("hmm.beta", "50"),
    ("hmm.radius", "60"),
    ("hmm.max_candidates", "8"),
    ("grid.cell_m", "45.72"),
    ("grid.origin_x", "0"),
    ("grid.origin_y", "0"),
    ("split.test_fraction", "0.1"),
    ("split.val_fraction", "0.1"),
    ("split.overlap_points", "2"),
    ("tfm.d_emb", "64"),
    ("tfm.d_ff", "256"),
    ("tfm.blocks", "2"),
    ("tfm.heads", "4"),
    ("tfm.dropout", "0"),
    ("tfm.max_in", "20"),
    ("tfm.max_out", "100"),
    ("gru.d_emb", "64"),
    ("gru.hidden", "64"),
    ("gru.max_in", "8"),
    ("gru.max_out", "50"),
    ("train.epochs", "30"),
    ("train.batch_size", "32"),
    ("train.lr_tfm", "0.001"),
    ("train.lr_gru", "0.001"),
    ("train.patience", "4"),
    ("train.max_steps", "0"),
    ("decode.mode", "greedy"),
    ("decode.beam_width", "4"),
    ("bench.repeats", "3"),
    ("bench.buckets", "5,10,20"),
    ("bench.batch_size", "8"),
    ("export.limit", "10"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}")))
    }

    /// Every key with its effective value, sorted.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Builds every typed view once so errors surface before any work.
    pub fn validate(&self) -> Result<()> {
        check_map(&self.map()?)?;
        self.noise()?.validate().map_err(as_config)?;
        self.sim()?.validate().map_err(as_config)?;
        self.hmm()?.validate().map_err(as_config)?;
        self.grid()?;
        self.split_spec_tfm()?.validate().map_err(as_config)?;
        self.split_spec_gru()?.validate().map_err(as_config)?;
        self.transformer(10, 10)?.validate().map_err(as_config)?;
        self.rnn(10, 10)?.validate().map_err(as_config)?;
        self.train_config(mmseq::model::ModelKind::Transformer)?.validate()?;
        self.decode_mode()?;
        self.bench_buckets()?;
        let (t, v) = (self.test_fraction()?, self.val_fraction()?);
        if !(0.0..1.0).contains(&t) || !(0.0..1.0).contains(&v) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn map(&self) -> Result<MapSpec> {
        Ok(MapSpec {
            cols: self.get("map.cols")?,
            rows: self.get("map.rows")?,
            block_m: self.get("map.block_m")?,
            removal_prob: self.get("map.removal_prob")?,
            oneway_prob: self.get("map.oneway_prob")?,
            seed: self.seed()?,
        })
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.get("grid.origin_x")?, self.get("grid.origin_y")?, self.get("grid.cell_m")?).map_err(as_config)
    }

    /// `noise.hotspots` holds `col,row,multiplier` triples separated by `;`.
    pub fn noise(&self) -> Result<NoiseModel> {
        let mut hotspots = Vec::new();
        for item in self.raw("noise.hotspots").split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = || Error::Config(format!("noise.hotspots entry {item:?} is not col,row,multiplier"));
            let f: Vec<&str> = item.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let cell = GridCellId { col: f[0].parse().map_err(|_| bad())?, row: f[1].parse().map_err(|_| bad())? };
            hotspots.push((cell, f[2].parse().map_err(|_| bad())?));
        }
        Ok(NoiseModel { base_sigma_m: self.get("noise.sigma_m")?, hotspots, grid: self.grid()? })
    }

    pub fn sim(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            sample_interval_s: self.get("sim.interval_s")?,
            speed_mps: self.get("sim.speed_mps")?,
            trajectories: self.get("sim.trajectories")?,
            min_route_segments: self.get("sim.min_segments")?,
            max_route_segments: self.get("sim.max_segments")?,
            seed: self.seed()?,
        })
    }

    pub fn hmm(&self) -> Result<HmmParams> {
        Ok(HmmParams {
            sigma_z: self.get("hmm.sigma_z")?,
            beta: self.get("hmm.beta")?,
            candidate_radius: self.get("hmm.radius")?,
            max_candidates: self.get("hmm.max_candidates")?,
        })
    }

    pub fn test_fraction(&self) -> Result<f64> {
        self.get("split.test_fraction")
    }

    pub fn val_fraction(&self) -> Result<f64> {
        self.get("split.val_fraction")
    }

    pub fn split_spec_tfm(&self) -> Result<SplitSpec> {
        Ok(SplitSpec { max_in: self.get("tfm.max_in")?, max_out: self.get("tfm.max_out")?, overlap_points: self.get("split.overlap_points")? })
    }

    pub fn split_spec_gru(&self) -> Result<SplitSpec> {
        Ok(SplitSpec { max_in: self.get("gru.max_in")?, max_out: self.get("gru.max_out")?, overlap_points: self.get("split.overlap_points")? })
    }

    pub fn transformer(&self, grid_vocab: usize, seg_vocab: usize) -> Result<TransformerConfig> {
        Ok(TransformerConfig {
            d_emb: self.get("tfm.d_emb")?,
            d_ff: self.get("tfm.d_ff")?,
            n_blocks: self.get("tfm.blocks")?,
            heads: self.get("tfm.heads")?,
            max_in_len: self.get("tfm.max_in")?,
            max_out_len: self.get("tfm.max_out")?,
            grid_vocab,
            seg_vocab,
            dropout: self.get("tfm.dropout")?,
        })
    }

    pub fn rnn(&self, grid_vocab: usize, seg_vocab: usize) -> Result<RnnConfig> {
        Ok(RnnConfig {
            d_emb: self.get("gru.d_emb")?,
            hidden: self.get("gru.hidden")?,
            max_in_len: self.get("gru.max_in")?,
            max_out_len: self.get("gru.max_out")?,
            grid_vocab,
            seg_vocab,
        })
    }

    pub fn train_config(&self, kind: mmseq::model::ModelKind) -> Result<TrainConfig> {
        let lr_key = match kind {
            mmseq::model::ModelKind::Transformer => "train.lr_tfm",
            mmseq::model::ModelKind::Gru => "train.lr_gru",
        };
        let patience: usize = self.get("train.patience")?;
        let max_steps: usize = self.get("train.max_steps")?;
        Ok(TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get(lr_key)?,
            seed: self.seed()?,
            patience: (patience > 0).then_some(patience),
            max_steps: (max_steps > 0).then_some(max_steps),
        })
    }

    pub fn decode_mode(&self) -> Result<DecodeMode> {
        match self.raw("decode.mode") {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam(self.get("decode.beam_width")?)),
            other => Err(Error::Config(format!("decode.mode must be greedy or beam, got {other:?}"))),
        }
    }

    pub fn bench_repeats(&self) -> Result<usize> {
        self.get("bench.repeats")
    }

    pub fn bench_batch_size(&self) -> Result<usize> {
        self.get("bench.batch_size")
    }

    pub fn bench_buckets(&self) -> Result<Vec<usize>> {
        self.raw("bench.buckets")
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bench.buckets entry {s:?} is not a length"))))
            .collect()
    }

    pub fn export_limit(&self) -> Result<usize> {
        self.get("export.limit")
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Validation(m) | Error::Shape(m) => Error::Config(m),
        other => other,
    }
}

fn check_map(m: &MapSpec) -> Result<()> {
    if m.cols < 2 || m.rows < 2 || !(m.block_m > 0.0) {
        return Err(Error::Config(format!("map needs at least 2x2 nodes and a positive block size: {m:?}")));
    }
    let p = |x: f64| (0.0..=1.0).contains(&x);
    if !p(m.removal_prob) || !p(m.oneway_prob) {
        return Err(Error::Config("map probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}
