//! Run configuration: one TOML file with `[model]`, `[train]` and `[io]`
//! sections. Every key is checked before anything runs and all problems are
//! reported together.

use std::path::{Path, PathBuf};

use gs_lvmogp::kernels::KernelFamily;
use gs_lvmogp::model::{InitConfig, LikelihoodKind, ModelConfig};
use gs_lvmogp::trainer::{Sampler, TrainConfig};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSource {
    Zeros,
    /// CSV `output_id, c_0..c_{Q_H-1}`; every `q` shares the coordinates.
    Coordinates(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Defaults to the number of outputs in the data.
    pub d: Option<usize>,
    pub q: usize,
    pub q_h: usize,
    pub m_h: usize,
    pub m_x: usize,
    pub kernels_h: Vec<KernelFamily>,
    pub kernels_x: Vec<KernelFamily>,
    pub likelihood: LikelihoodKind,
    pub tie_noise: bool,
    pub kuu_jitter: f64,
    pub prior: PriorSource,
    pub init: InitConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoSection {
    pub data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub gh_degree: usize,
    /// When false the loss file's wall-clock column is zero, making it reproducible byte for byte.
    pub record_time: bool,
    pub io: IoSection,
}

impl RunConfig {
    pub fn model_config(&self, d: usize, q_x: usize) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(m.d.unwrap_or(d), m.q, m.q_h, q_x, m.m_h, m.m_x);
        c.kernels_h = m.kernels_h.clone();
        c.kernels_x = m.kernels_x.clone();
        c.likelihood = m.likelihood;
        c.tie_noise = m.tie_noise;
        c.kuu_jitter = m.kuu_jitter;
        c.gh_degree = self.gh_degree;
        c.init = m.init.clone();
        c
    }
}

/// Reads, overrides and validates. Relative paths resolve against the
/// config file's directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| vec![format!("{}: {}", path.display(), e.message())])?;
    apply_overrides(&mut table, overrides)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_table(&table, &base)
}

/// Applies `section.key=value` overrides; values are TOML literals, and bare
/// words are taken as strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            errors.push(format!("override {o:?} is not of the form section.key=value"));
            continue;
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            errors.push(format!("override key {key:?} must name a section and a key"));
            continue;
        }
        let value = format!("v = {}", raw.trim())
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.trim().to_string()));
        if let Err(p) = insert_path(table, &parts, value) {
            errors.push(format!("override {key:?}: {p} is not a section"));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn insert_path(t: &mut Table, parts: &[&str], value: Value) -> Result<(), String> {
    let (head, rest) = parts.split_first().expect("non-empty key path");
    if rest.is_empty() {
        t.insert(head.to_string(), value);
        return Ok(());
    }
    match t.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new())) {
        Value::Table(inner) => insert_path(inner, rest, value),
        _ => Err(head.to_string()),
    }
}

struct Section<'a> {
    name: String,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(name: &str, parent: &'a Table, errors: &mut Vec<String>) -> Self {
        let table = match parent.get(name.rsplit('.').next().unwrap_or(name)) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("{name}: must be a table"));
                None
            }
        };
        Self { name: name.to_string(), table, seen: Vec::new() }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.push(key);
        self.table.and_then(|t| t.get(key))
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn positive(&mut self, key: &'static str, default: usize, errors: &mut Vec<String>) -> usize {
        self.count(key, default, 1, errors)
    }

    fn count(&mut self, key: &'static str, default: usize, min: usize, errors: &mut Vec<String>) -> usize {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(v)) if *v >= min as i64 => *v as usize,
            Some(v) => {
                errors.push(format!("{}: expected an integer ≥ {min}, got {v}", self.key(key)));
                default
            }
        }
    }

    fn real(&mut self, key: &'static str, default: f64, check: fn(f64) -> bool, what: &str, errors: &mut Vec<String>) -> f64 {
        let v = match self.raw(key) {
            None => return default,
            Some(Value::Float(v)) => *v,
            Some(Value::Integer(v)) => *v as f64,
            Some(v) => {
                errors.push(format!("{}: expected a number, got {v}", self.key(key)));
                return default;
            }
        };
        if !check(v) {
            errors.push(format!("{}: must be {what}, got {v}", self.key(key)));
        }
        v
    }

    fn boolean(&mut self, key: &'static str, default: bool, errors: &mut Vec<String>) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                errors.push(format!("{}: expected true or false, got {v}", self.key(key)));
                default
            }
        }
    }

    fn string(&mut self, key: &'static str, errors: &mut Vec<String>) -> Option<String> {
        match self.raw(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                errors.push(format!("{}: expected a string, got {v}", self.key(key)));
                None
            }
        }
    }

    /// One family, or one per `q`.
    fn families(&mut self, key: &'static str, q: usize, default: KernelFamily, errors: &mut Vec<String>) -> Vec<KernelFamily> {
        let names: Vec<String> = match self.raw(key) {
            None => return vec![default; q],
            Some(Value::String(s)) => vec![s.clone(); q],
            Some(Value::Array(a)) => {
                let names: Option<Vec<String>> = a.iter().map(|v| v.as_str().map(str::to_string)).collect();
                match names {
                    Some(n) if n.len() == q || n.len() == 1 => {
                        if n.len() == 1 {
                            vec![n[0].clone(); q]
                        } else {
                            n
                        }
                    }
                    Some(n) => {
                        errors.push(format!("{}: expected 1 or {q} kernel families, got {}", self.key(key), n.len()));
                        return vec![default; q];
                    }
                    None => {
                        errors.push(format!("{}: kernel families must be strings", self.key(key)));
                        return vec![default; q];
                    }
                }
            }
            Some(v) => {
                errors.push(format!("{}: expected a family name or a list of them, got {v}", self.key(key)));
                return vec![default; q];
            }
        };
        names
            .iter()
            .map(|n| {
                KernelFamily::parse(n).unwrap_or_else(|| {
                    errors.push(format!(
                        "{}: unknown kernel family {n:?} (expected se-ard, matern12, matern32, matern52 or periodic-matern52)",
                        self.key(key)
                    ));
                    default
                })
            })
            .collect()
    }

    fn finish(self, errors: &mut Vec<String>, nested: &[&str]) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.seen.contains(&k.as_str()) && !nested.contains(&k.as_str()) {
                    errors.push(format!("{}: unknown key", self.key(k)));
                }
            }
        }
    }
}

fn positive_finite(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn nonnegative_finite(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

pub fn from_table(root: &Table, base: &Path) -> Result<RunConfig, Vec<String>> {
    let mut errors = Vec::new();
    for k in root.keys() {
        if !["model", "train", "io"].contains(&k.as_str()) {
            errors.push(format!("{k}: unknown section (expected model, train or io)"));
        }
    }
    let resolve = |p: String| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let mut m = Section::new("model", root, &mut errors);
    let d = match m.raw("d") {
        None => None,
        Some(Value::Integer(v)) if *v >= 1 => Some(*v as usize),
        Some(v) => {
            errors.push(format!("model.d: expected a positive integer, got {v}"));
            None
        }
    };
    let q = m.positive("q", 1, &mut errors);
    let q_h = m.positive("q_h", 2, &mut errors);
    let m_h = m.positive("m_h", 20, &mut errors);
    let m_x = m.positive("m_x", 30, &mut errors);
    let kernels_h = m.families("kernels_h", q, KernelFamily::SeArd, &mut errors);
    let kernels_x = m.families("kernels_x", q, KernelFamily::Matern52, &mut errors);
    let likelihood = match m.string("likelihood", &mut errors).as_deref() {
        None | Some("gaussian") => LikelihoodKind::Gaussian,
        Some("poisson") => LikelihoodKind::Poisson,
        Some(other) => {
            errors.push(format!("model.likelihood: expected gaussian or poisson, got {other:?}"));
            LikelihoodKind::Gaussian
        }
    };
    let tie_noise = m.boolean("tie_noise", false, &mut errors);
    let kuu_jitter = m.real("kuu_jitter", 1e-6, nonnegative_finite, "finite and nonnegative", &mut errors);
    let prior_kind = m.string("prior", &mut errors);
    let coords = m.string("coordinates", &mut errors);
    let prior = match prior_kind.as_deref() {
        None | Some("zeros") => {
            if coords.is_some() {
                errors.push("model.coordinates: only used with prior = \"coordinates\"".into());
            }
            PriorSource::Zeros
        }
        Some("coordinates") => match coords {
            Some(p) => PriorSource::Coordinates(resolve(p)),
            None => {
                errors.push("model.coordinates: required when prior = \"coordinates\"".into());
                PriorSource::Zeros
            }
        },
        Some(other) => {
            errors.push(format!("model.prior: expected zeros or coordinates, got {other:?}"));
            PriorSource::Zeros
        }
    };
    let mut init = InitConfig::default();
    if let Some(mt) = m.table {
        let mut it = Section::new("model.init", mt, &mut errors);
        init.outputscale_h = it.real("outputscale_h", init.outputscale_h, positive_finite, "positive", &mut errors);
        init.lengthscale_h = it.real("lengthscale_h", init.lengthscale_h, positive_finite, "positive", &mut errors);
        init.outputscale_x = it.real("outputscale_x", init.outputscale_x, positive_finite, "positive", &mut errors);
        init.lengthscale_x = it.real("lengthscale_x", init.lengthscale_x, positive_finite, "positive", &mut errors);
        init.period_x = it.real("period_x", init.period_x, positive_finite, "positive", &mut errors);
        init.noise_std = it.real("noise_std", init.noise_std, positive_finite, "positive", &mut errors);
        init.whitened_scale = it.real("whitened_scale", init.whitened_scale, positive_finite, "positive", &mut errors);
        it.finish(&mut errors, &[]);
    }
    m.finish(&mut errors, &["init"]);

    let mut t = Section::new("train", root, &mut errors);
    let iterations = t.count("iterations", 2000, 0, &mut errors);
    let learning_rate = t.real("learning_rate", 0.05, positive_finite, "positive", &mut errors);
    let sampler_kind = t.string("sampler", &mut errors);
    let m_b = t.positive("m_b", 1000, &mut errors);
    let b_o = t.positive("b_o", 100, &mut errors);
    let b_x = t.positive("b_x", 10, &mut errors);
    let sampler = match sampler_kind.as_deref() {
        None | Some("structured") => Sampler::Structured { b_o, b_x },
        Some("flat") => Sampler::Flat { m_b },
        Some(other) => {
            errors.push(format!("train.sampler: expected structured or flat, got {other:?}"));
            Sampler::Structured { b_o, b_x }
        }
    };
    let j = t.positive("j", 1, &mut errors);
    let gh_degree = t.count("gh_degree", 20, 1, &mut errors);
    if gh_degree > 200 {
        errors.push(format!("train.gh_degree: must be at most 200, got {gh_degree}"));
    }
    let seed = match t.raw("seed") {
        None => 0,
        Some(Value::Integer(v)) if *v >= 0 => *v as u64,
        Some(v) => {
            errors.push(format!("train.seed: expected a nonnegative integer, got {v}"));
            0
        }
    };
    let record_time = t.boolean("record_time", true, &mut errors);
    t.finish(&mut errors, &[]);

    let mut io = Section::new("io", root, &mut errors);
    let data = io.string("data", &mut errors).map(resolve);
    let checkpoint = resolve(io.string("checkpoint", &mut errors).unwrap_or_else(|| "model.json".into()));
    let loss = resolve(io.string("loss", &mut errors).unwrap_or_else(|| "loss.csv".into()));
    io.finish(&mut errors, &[]);

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(RunConfig {
        model: ModelSection { d, q, q_h, m_h, m_x, kernels_h, kernels_x, likelihood, tie_noise, kuu_jitter, prior, init },
        train: TrainConfig { iterations, learning_rate, sampler, j, seed },
        gh_degree,
        record_time,
        io: IoSection { data, checkpoint, loss },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, Vec<String>> {
        from_table(&s.parse().unwrap(), Path::new("/base"))
    }

    #[test]
    fn defaults_and_paths() {
        let c = parse("[io]\ndata = \"d.csv\"\n").unwrap();
        assert_eq!(c.model.q, 1);
        assert_eq!(c.train.sampler, Sampler::Structured { b_o: 100, b_x: 10 });
        assert_eq!(c.io.data, Some(PathBuf::from("/base/d.csv")));
        assert_eq!(c.io.checkpoint, PathBuf::from("/base/model.json"));
    }

    #[test]
    fn every_bad_key_is_listed() {
        let errs = parse(
            "[model]\nq = 0\nkernels_x = [\"cubic\"]\nbogus = 1\n[model.init]\nnoise_std = -1\n[train]\nlearning_rate = \"fast\"\n[extra]\n",
        )
        .unwrap_err();
        for key in ["model.q", "model.kernels_x", "model.bogus", "model.init.noise_std", "train.learning_rate", "extra"] {
            assert!(errs.iter().any(|e| e.starts_with(key)), "{key} missing from {errs:?}");
        }
    }

    #[test]
    fn families_broadcast_and_per_term() {
        let c = parse("[model]\nq = 2\nkernels_h = \"matern32\"\nkernels_x = [\"matern52\", \"periodic-matern52\"]\n").unwrap();
        assert_eq!(c.model.kernels_h, vec![KernelFamily::Matern32; 2]);
        assert_eq!(c.model.kernels_x[1], KernelFamily::PeriodicMatern52);
        assert!(parse("[model]\nq = 3\nkernels_h = [\"se-ard\", \"se-ard\"]\n").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut t: Table = "[train]\niterations = 5\n".parse().unwrap();
        apply_overrides(&mut t, &["train.iterations=7".into(), "model.likelihood=poisson".into(), "model.init.noise_std=0.3".into()]).unwrap();
        let c = from_table(&t, Path::new("")).unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.model.likelihood, LikelihoodKind::Poisson);
        assert_eq!(c.model.init.noise_std, 0.3);
        assert!(apply_overrides(&mut t, &["iterations=3".into()]).is_err());
        assert!(apply_overrides(&mut t, &["train.iterations.x=3".into()]).is_err());
    }
}
