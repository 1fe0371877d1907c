//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [model]
//! name = H+Vamp (Gated)
//! K = 1000
//! [train]
//! beta_cap = 0.2
//! ```
//!
//! `model.name` applies a preset (prior, hierarchy, gating) before any
//! other model key, so explicit keys refine it. `--set section.key=value`
//! entries are applied after the file, in order.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vampcf::eval::MetricSpec;
use vampcf::model::{Hierarchy, Likelihood, ModelConfig, PriorKind, Variant};
use vampcf::trainer::TrainConfig;
use vampcf::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub prior: PriorKind,
    pub hierarchy: Hierarchy,
    pub likelihood: Likelihood,
    pub gated: bool,
    pub depth: usize,
    pub hidden: usize,
    pub d_z1: usize,
    pub d_z2: usize,
    pub k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(1, Variant::HVampGated);
        ModelSection {
            prior: c.prior,
            hierarchy: c.hierarchy,
            likelihood: c.likelihood,
            gated: c.gated,
            depth: c.depth,
            hidden: c.hidden,
            d_z1: c.latent_z1,
            d_z2: c.latent_z2,
            k: c.n_pseudo,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            prior: self.prior,
            hierarchy: self.hierarchy,
            likelihood: self.likelihood,
            gated: self.gated,
            depth: self.depth,
            hidden: self.hidden,
            latent_z1: self.d_z1,
            latent_z2: self.d_z2,
            n_pseudo: self.k,
        }
    }

    fn apply_variant(&mut self, v: Variant) {
        let mut c = self.to_config(1);
        v.apply(&mut c);
        self.prior = c.prior;
        self.hierarchy = c.hierarchy;
        self.gated = c.gated;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub ratings: Option<PathBuf>,
    pub split_dir: Option<PathBuf>,
    pub min_rating: f64,
    pub min_items: usize,
    pub fold_in_fraction: f64,
    pub n_heldout_users: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            ratings: None,
            split_dir: None,
            min_rating: 4.0,
            min_items: 5,
            fold_in_fraction: 0.8,
            n_heldout_users: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

struct Entry {
    section: String,
    key: String,
    value: String,
    origin: String,
}

fn parse<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| {
        Error::Config(format!(
            "{}: invalid value {:?} for {}.{}",
            e.origin, e.value, e.section, e.key
        ))
    })
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{}: {}.{} expects true or false, got {:?}",
            e.origin, e.section, e.key, e.value
        ))),
    }
}

fn read_entries(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let origin = format!("{source}:{}", idx + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}: expected key = value")))?;
        if section.is_empty() {
            return Err(Error::Config(format!("{origin}: key outside of a [section]")));
        }
        out.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(out)
}

fn read_override(s: &str) -> Result<Entry> {
    let bad = || Error::Config(format!("--set expects section.key=value, got {s:?}"));
    let (path, value) = s.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    Ok(Entry {
        section: section.to_string(),
        key: key.to_string(),
        value: value.trim().to_string(),
        origin: format!("--set {s}"),
    })
}

impl RunConfig {
    /// Parses the optional file, then the overrides, then validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            entries.extend(read_entries(&text, &path.display().to_string())?);
        }
        for s in overrides {
            entries.push(read_override(s)?);
        }
        Self::from_entries(&entries)
    }

    #[cfg(test)]
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries = read_entries(text, "config")?;
        for s in overrides {
            entries.push(read_override(s)?);
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // Presets first so that explicit keys refine them.
        for e in entries.iter().filter(|e| e.section == "model" && e.key == "name") {
            cfg.model.apply_variant(e.value.parse::<Variant>()?);
        }
        for e in entries {
            cfg.set(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, e: &Entry) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match (e.section.as_str(), e.key.as_str()) {
            ("model", "name") => {}
            ("model", "prior_kind") => m.prior = e.value.parse()?,
            ("model", "hierarchy") => m.hierarchy = e.value.parse()?,
            ("model", "likelihood") => m.likelihood = e.value.parse()?,
            ("model", "gated") => m.gated = parse_bool(e)?,
            ("model", "depth") => m.depth = parse(e)?,
            ("model", "hidden") => m.hidden = parse(e)?,
            ("model", "D_z1") => m.d_z1 = parse(e)?,
            ("model", "D_z2") => m.d_z2 = parse(e)?,
            ("model", "K") => m.k = parse(e)?,
            ("train", "batch_size") => t.batch_size = parse(e)?,
            ("train", "max_epochs") => t.max_epochs = parse(e)?,
            ("train", "learning_rate") => t.learning_rate = parse(e)?,
            ("train", "beta_cap") => t.beta_cap = parse(e)?,
            ("train", "anneal_steps") => t.anneal_steps = Some(parse(e)?),
            ("train", "dropout_rate") => t.dropout_rate = parse(e)?,
            ("train", "patience") => t.patience = parse(e)?,
            ("train", "seed") => t.seed = parse(e)?,
            ("train", "eval_metric") => t.eval_metric = e.value.parse::<MetricSpec>()?,
            ("data", "ratings") => d.ratings = Some(PathBuf::from(&e.value)),
            ("data", "split_dir") => d.split_dir = Some(PathBuf::from(&e.value)),
            ("data", "min_rating") => d.min_rating = parse(e)?,
            ("data", "min_items") => d.min_items = parse(e)?,
            ("data", "fold_in_fraction") => d.fold_in_fraction = parse(e)?,
            ("data", "n_heldout_users") => d.n_heldout_users = parse(e)?,
            (s, k) => {
                return Err(Error::Config(format!("{}: unknown key {s}.{k}", e.origin)));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.to_config(1).validate()?;
        let f = self.data.fold_in_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "data.fold_in_fraction must lie in (0, 1), got {f}"
            )));
        }
        Ok(())
    }
}
