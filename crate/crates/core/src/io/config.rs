//! Run configuration files.
//!
//! A config is a TOML document restricted to a flat layout: a handful of
//! `[section]` headers, each holding `key = value` lines. Every key is
//! optional and falls back to the built-in default. Unknown sections or
//! keys, wrongly typed values and values that fail validation are all
//! reported together, one line each, prefixed with `file:line:`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::Value;

use crate::env::{Segment, TrackConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_EPISODES;
use crate::train::{TrainConfig, Variant};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub track: TrackConfig,
    /// Save a checkpoint every this many steps (0: final checkpoint only).
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    pub eval_episodes: usize,
    origin: String,
    key_lines: HashMap<String, usize>,
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.train == other.train
            && self.track == other.track
            && self.checkpoint_every == other.checkpoint_every
            && self.out_dir == other.out_dir
            && self.eval_episodes == other.eval_episodes
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            track: TrackConfig::default(),
            checkpoint_every: 10_000,
            out_dir: None,
            eval_episodes: DEFAULT_EPISODES,
            origin: "<default>".into(),
            key_lines: HashMap::new(),
        }
    }
}

/// Maps `section.key` to the 1-based line it was written on.
fn index_keys(text: &str) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            if let Some(name) = rest.strip_suffix(']') {
                section = name.trim().to_string();
                out.entry(section.clone()).or_insert(i + 1);
            }
            continue;
        }
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim().trim_matches('"');
            let bare = key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !key.is_empty() && bare {
                out.entry(format!("{section}.{key}")).or_insert(i + 1);
            }
        }
    }
    out
}

struct Loader<'a> {
    origin: &'a str,
    lines: &'a HashMap<String, usize>,
    errs: Vec<String>,
}

impl Loader<'_> {
    fn diag(&mut self, path: &str, msg: impl std::fmt::Display) {
        let line = self.lines.get(path).map(|l| format!(":{l}")).unwrap_or_default();
        self.errs.push(format!("{}{line}: {msg}", self.origin));
    }

    fn float(&mut self, path: &str, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.diag(path, format!("{path} must be a number, got {}", v.type_str()));
                None
            }
        }
    }

    fn uint(&mut self, path: &str, v: &Value) -> Option<u64> {
        match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.diag(path, format!("{path} must be a non-negative integer, got {v}"));
                None
            }
        }
    }

    fn small_uint<T: TryFrom<u64>>(&mut self, path: &str, v: &Value) -> Option<T> {
        let x = self.uint(path, v)?;
        match T::try_from(x) {
            Ok(x) => Some(x),
            Err(_) => {
                self.diag(path, format!("{path} is out of range: {x}"));
                None
            }
        }
    }

    fn boolean(&mut self, path: &str, v: &Value) -> Option<bool> {
        match v {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.diag(path, format!("{path} must be true or false, got {}", v.type_str()));
                None
            }
        }
    }

    fn string<'v>(&mut self, path: &str, v: &'v Value) -> Option<&'v str> {
        match v {
            Value::String(s) => Some(s),
            _ => {
                self.diag(path, format!("{path} must be a string, got {}", v.type_str()));
                None
            }
        }
    }

    fn uint_list(&mut self, path: &str, v: &Value) -> Option<Vec<usize>> {
        let items = match v {
            Value::Array(a) => a,
            _ => {
                self.diag(path, format!("{path} must be an array of integers"));
                return None;
            }
        };
        let mut out = Vec::with_capacity(items.len());
        for x in items {
            match x {
                Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                _ => {
                    self.diag(path, format!("{path} must be an array of non-negative integers, found {x}"));
                    return None;
                }
            }
        }
        Some(out)
    }
}

macro_rules! set {
    ($dst:expr, $opt:expr) => {
        if let Some(v) = $opt {
            $dst = v;
        }
    };
}

impl RunConfig {
    /// Parses a config document; field values are not yet cross-validated.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("{origin}: {e}")]))?;
        let lines = index_keys(text);
        let mut l = Loader {
            origin,
            lines: &lines,
            errs: Vec::new(),
        };
        let mut cfg = RunConfig::default();
        for (section, body) in &doc {
            let Value::Table(body) = body else {
                l.diag(section, format!("top-level key {section:?} must sit inside a section"));
                continue;
            };
            if !SECTIONS.contains(&section.as_str()) {
                l.diag(section, format!("unknown section [{section}]"));
                continue;
            }
            for (key, v) in body {
                let path = format!("{section}.{key}");
                let p = path.as_str();
                let tc = &mut cfg.train;
                let tk = &mut cfg.track;
                match (section.as_str(), key.as_str()) {
                    ("run", "seed") => set!(tc.seed, l.uint(p, v)),
                    ("run", "variant") => {
                        if let Some(s) = l.string(p, v) {
                            match s.parse::<Variant>() {
                                Ok(var) => tc.variant = var,
                                Err(e) => l.diag(p, format!("run.variant: {e}")),
                            }
                        }
                    }
                    ("run", "out_dir") => {
                        if let Some(s) = l.string(p, v) {
                            cfg.out_dir = Some(PathBuf::from(s));
                        }
                    }
                    ("run", "checkpoint_every") => set!(cfg.checkpoint_every, l.uint(p, v)),
                    ("train", "total_steps") => set!(tc.total_steps, l.uint(p, v)),
                    ("train", "train_freq") => set!(tc.train_freq, l.uint(p, v)),
                    ("train", "target_update_freq") => set!(tc.target_update_freq, l.uint(p, v)),
                    ("train", "batch_size") => set!(tc.batch_size, l.small_uint(p, v)),
                    ("train", "gamma") => set!(tc.gamma, l.float(p, v)),
                    ("train", "learning_rate") => set!(tc.learning_rate, l.float(p, v)),
                    ("train", "grad_clip") => {
                        if let Some(c) = l.float(p, v) {
                            tc.grad_clip = Some(c);
                        }
                    }
                    ("train", "buffer_capacity") => set!(tc.buffer_capacity, l.small_uint(p, v)),
                    ("train", "heads") => {
                        if let Some(k) = l.small_uint(p, v) {
                            tc.heads = Some(k);
                        }
                    }
                    ("epsilon", "start") => set!(tc.epsilon.start, l.float(p, v)),
                    ("epsilon", "end") => set!(tc.epsilon.end, l.float(p, v)),
                    ("epsilon", "decay_start") => set!(tc.epsilon.t0, l.uint(p, v)),
                    ("epsilon", "decay_end") => set!(tc.epsilon.t1, l.uint(p, v)),
                    ("schedule", "xi") => set!(tc.schedule.xi, l.uint(p, v)),
                    ("schedule", "m") => set!(tc.schedule.m, l.uint(p, v)),
                    ("schedule", "n") => set!(tc.schedule.n, l.uint(p, v)),
                    ("risk", "lambda_p") => set!(tc.risk.lambda_p, l.float(p, v)),
                    ("risk", "lambda_a") => set!(tc.risk.lambda_a, l.float(p, v)),
                    ("risk", "zero_sum") => set!(tc.zero_sum, l.boolean(p, v)),
                    ("mask", "rate") => set!(tc.mask_rate, l.float(p, v)),
                    ("mask", "scheme") => match l.string(p, v) {
                        Some("subset") => {
                            tc.heads_per_update.get_or_insert(5);
                        }
                        Some("plain") => tc.heads_per_update = None,
                        Some(other) => l.diag(p, format!("mask.scheme must be \"subset\" or \"plain\", got {other:?}")),
                        None => {}
                    },
                    ("mask", "heads_per_update") => {
                        if let Some(h) = l.small_uint(p, v) {
                            tc.heads_per_update = Some(h);
                        }
                    }
                    ("network", "trunk_hidden") => set!(tc.trunk_hidden, l.uint_list(p, v)),
                    ("network", "head_hidden") => set!(tc.head_hidden, l.uint_list(p, v)),
                    ("eval", "episodes") => set!(cfg.eval_episodes, l.small_uint(p, v)),
                    ("track", "segments") => match v.clone().try_into::<Vec<Segment>>() {
                        Ok(s) => tk.segments = s,
                        Err(e) => l.diag(p, format!("track.segments: {}", e.message())),
                    },
                    ("track", "width") => set!(tk.width, l.float(p, v)),
                    ("track", "wall_margin") => set!(tk.wall_margin, l.float(p, v)),
                    ("track", "beta") => set!(tk.beta, l.float(p, v)),
                    ("track", "r_cat") => set!(tk.r_cat, l.float(p, v)),
                    ("track", "dt") => set!(tk.dt, l.float(p, v)),
                    ("track", "accel") => set!(tk.accel, l.float(p, v)),
                    ("track", "steer") => set!(tk.steer, l.float(p, v)),
                    ("track", "v_max") => set!(tk.v_max, l.float(p, v)),
                    ("track", "max_heading_err") => set!(tk.max_heading_err, l.float(p, v)),
                    ("track", "stuck_speed_threshold") => set!(tk.stuck_speed_threshold, l.float(p, v)),
                    ("track", "stuck_patience") => set!(tk.stuck_patience, l.small_uint(p, v)),
                    ("track", "stuck_warmup") => set!(tk.stuck_warmup, l.small_uint(p, v)),
                    ("track", "max_episode_steps") => set!(tk.max_episode_steps, l.small_uint(p, v)),
                    ("track", "start_jitter") => set!(tk.start_jitter, l.float(p, v)),
                    ("track", "lookahead") => match v.clone().try_into::<[f64; 3]>() {
                        Ok(a) => tk.lookahead = a,
                        Err(_) => l.diag(p, "track.lookahead must be an array of 3 numbers"),
                    },
                    _ => l.diag(p, format!("unknown key {p}")),
                }
            }
        }
        let errs = l.errs;
        cfg.origin = origin.to_string();
        cfg.key_lines = lines;
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Runs every nested validation, pointing each complaint at the line
    /// that set the offending key when there is one.
    pub fn validate(&self) -> Result<()> {
        let mut raw = Vec::new();
        for r in [self.train.validate(), self.track.validate()] {
            if let Err(Error::Config(e)) = r {
                raw.extend(e);
            }
        }
        if self.eval_episodes == 0 {
            raw.push("eval.episodes must be >= 1".to_string());
        }
        if raw.is_empty() {
            return Ok(());
        }
        let errs = raw
            .into_iter()
            .map(|msg| {
                let line = msg
                    .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.'))
                    .filter(|w| w.contains('.'))
                    .find_map(|w| self.key_lines.get(w));
                match line {
                    Some(l) => format!("{}:{l}: {msg}", self.origin),
                    None => format!("{}: {msg}", self.origin),
                }
            })
            .collect();
        Err(Error::Config(errs))
    }

    /// Hex SHA-256 of the effective training and track settings.
    pub fn digest(&self) -> String {
        let canon = format!("{:?}\n{:?}", self.train, self.track);
        let hash = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(64);
        for b in hash {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

const SECTIONS: [&str; 9] = [
    "run", "train", "epsilon", "schedule", "risk", "mask", "network", "eval", "track",
];
