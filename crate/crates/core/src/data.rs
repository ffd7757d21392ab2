//! Heterotopic datasets, the synthetic benchmark and evaluation metrics.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Observations of one output. Missing points are simply absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub split: Vec<Split>,
}

impl OutputData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.split[n] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|s| **s == split).count()
    }

    pub fn mean_of(&self, split: Split) -> Option<f64> {
        let idx = self.indices(split);
        (!idx.is_empty()).then(|| idx.iter().map(|&n| self.y[n]).sum::<f64>() / idx.len() as f64)
    }
}

/// Outputs are indexed `0..D`; an output may have no rows at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub q_x: usize,
    pub outputs: Vec<OutputData>,
}

impl Dataset {
    pub fn new(q_x: usize, d: usize) -> Self {
        Self { q_x, outputs: vec![OutputData::default(); d] }
    }

    pub fn d(&self) -> usize {
        self.outputs.len()
    }

    pub fn push(&mut self, d: usize, x: Vec<f64>, y: f64, split: Split) -> Result<()> {
        if x.len() != self.q_x {
            return Err(Error::dim("input vector", self.q_x, x.len()));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite observation for output {d}")));
        }
        if d >= self.outputs.len() {
            self.outputs.resize_with(d + 1, OutputData::default);
        }
        let o = &mut self.outputs[d];
        o.x.push(x);
        o.y.push(y);
        o.split.push(split);
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.outputs.iter().map(|o| o.count(split)).sum()
    }

    pub fn n_train(&self) -> usize {
        self.count(Split::Train)
    }

    /// All training `(d, n)` pairs in output-major order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(Split::Train)
    }

    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.outputs
            .iter()
            .enumerate()
            .flat_map(|(d, o)| o.indices(split).into_iter().map(move |n| (d, n)))
            .collect()
    }

    pub fn train_inputs(&self) -> Vec<&[f64]> {
        self.train_pairs().into_iter().map(|(d, n)| self.outputs[d].x[n].as_slice()).collect()
    }

    /// True when every output has training rows at one shared, identically
    /// ordered list of inputs.
    pub fn is_isotopic_train(&self) -> bool {
        let mut first: Option<Vec<&Vec<f64>>> = None;
        for o in &self.outputs {
            let xs: Vec<&Vec<f64>> = o.indices(Split::Train).into_iter().map(|n| &o.x[n]).collect();
            match &first {
                None => first = Some(xs),
                Some(f) if *f != xs => return false,
                _ => {}
            }
        }
        true
    }

    pub fn validate(&self) -> Result<()> {
        for (d, o) in self.outputs.iter().enumerate() {
            if o.x.len() != o.y.len() || o.split.len() != o.y.len() {
                return Err(Error::Precondition(format!("output {d} has misaligned columns")));
            }
            if let Some(x) = o.x.iter().find(|x| x.len() != self.q_x) {
                return Err(Error::dim(format!("input of output {d}"), self.q_x, x.len()));
            }
            if o.y.iter().any(|y| !y.is_finite()) {
                return Err(Error::InvalidParameter(format!("output {d} has non-finite targets")));
            }
        }
        Ok(())
    }
}

/// Coefficients of `sin²(ax+b) + cos(cx) + dx³ + ex² + fx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl SyntheticCoefficients {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            a: rng.random_range(2.0 * PI..3.0 * PI),
            b: rng.random_range(-1.0..1.0),
            c: rng.random_range(2.0 * PI..3.0 * PI),
            d: rng.random_range(-1.0..1.0),
            e: rng.random_range(-1.0..1.0),
            f: rng.random_range(-1.0..1.0),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b).sin().powi(2) + (self.c * x).cos() + self.d * x.powi(3) + self.e * x * x + self.f * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub d: usize,
    pub n: usize,
    /// Fraction of each output's points tagged for training.
    pub train_fraction: f64,
    /// Standard deviation of additive Gaussian noise; `None` means noiseless.
    pub noise_std: Option<f64>,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { d: 100, n: 100, train_fraction: 0.5, noise_std: None }
    }
}

/// The synthetic multi-output benchmark: independent coefficients and inputs
/// (uniform on `[-1, 1]`) per output, with a random train/test split.
pub fn gen_synthetic(seed: u64, opts: &SyntheticOptions) -> (Dataset, Vec<SyntheticCoefficients>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(1, opts.d);
    let mut coefs = Vec::with_capacity(opts.d);
    let n_train = (opts.n as f64 * opts.train_fraction).round() as usize;
    for d in 0..opts.d {
        let c = SyntheticCoefficients::sample(&mut rng);
        let xs: Vec<f64> = (0..opts.n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut order: Vec<usize> = (0..opts.n).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Test; opts.n];
        for &k in &order[..n_train] {
            split[k] = Split::Train;
        }
        for (k, &x) in xs.iter().enumerate() {
            let mut y = c.eval(x);
            if let Some(s) = opts.noise_std {
                y += s * rng.sample::<f64, _>(StandardNormal);
            }
            let o = &mut ds.outputs[d];
            o.x.push(vec![x]);
            o.y.push(y);
            o.split.push(split[k]);
        }
        coefs.push(c);
    }
    (ds, coefs)
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::dim("predictions", targets.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Precondition("mean squared error of an empty set".into()));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    mse(preds, targets).map(f64::sqrt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmseReport {
    pub value: f64,
    pub scored: usize,
    /// Outputs whose targets have zero spread around the reference mean.
    pub excluded: Vec<usize>,
    pub per_output: Vec<Option<f64>>,
}

/// Per-output MSE normalised by `mean((t - ref_d)²)`, averaged over scored
/// outputs. Outputs without targets are skipped; zero-spread ones are excluded.
pub fn smse(preds: &[Vec<f64>], targets: &[Vec<f64>], reference_means: &[f64]) -> Result<SmseReport> {
    if preds.len() != targets.len() || reference_means.len() != targets.len() {
        return Err(Error::dim("per-output predictions", targets.len(), preds.len().min(reference_means.len())));
    }
    let mut total = 0.0;
    let mut scored = 0;
    let mut excluded = Vec::new();
    let mut per_output = vec![None; targets.len()];
    for d in 0..targets.len() {
        if targets[d].is_empty() {
            continue;
        }
        let err = mse(&preds[d], &targets[d])?;
        let spread = targets[d].iter().map(|t| (t - reference_means[d]).powi(2)).sum::<f64>() / targets[d].len() as f64;
        if spread > 0.0 {
            let v = err / spread;
            per_output[d] = Some(v);
            total += v;
            scored += 1;
        } else {
            excluded.push(d);
        }
    }
    if scored == 0 {
        return Err(Error::Precondition("no output has a nonzero normaliser".into()));
    }
    Ok(SmseReport { value: total / scored as f64, scored, excluded, per_output })
}

/// Mean of per-point negative log predictive densities.
pub fn nlpd_dataset(nlpds: &[f64]) -> Result<f64> {
    if nlpds.is_empty() {
        return Err(Error::Precondition("NLPD of an empty set".into()));
    }
    Ok(nlpds.iter().sum::<f64>() / nlpds.len() as f64)
}

/// Reads `output_id, x_0..x_{Q_X-1}, y, split`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let q_x = parse_header(&names).map_err(|message| Error::Parse { path: path.into(), line: 1, message })?;
    let mut ds = Dataset::new(q_x, 0);
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |message: String| Error::Parse { path: path.into(), line, message };
        if rec.len() != q_x + 3 {
            return Err(bad(format!("expected {} fields, found {}", q_x + 3, rec.len())));
        }
        let d: usize = rec[0].parse().map_err(|_| bad(format!("output_id {:?} is not a nonnegative integer", &rec[0])))?;
        let mut x = Vec::with_capacity(q_x);
        for i in 0..q_x {
            x.push(parse_finite(&rec[1 + i]).ok_or_else(|| bad(format!("x_{i} {:?} is not a finite number", &rec[1 + i])))?);
        }
        let y = parse_finite(&rec[1 + q_x]).ok_or_else(|| bad(format!("y {:?} is not a finite number", &rec[1 + q_x])))?;
        let split = Split::parse(&rec[2 + q_x]).ok_or_else(|| bad(format!("split {:?} is neither train nor test", &rec[2 + q_x])))?;
        ds.push(d, x, y, split).map_err(|e| bad(e.to_string()))?;
    }
    Ok(ds)
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_header(names: &[&str]) -> std::result::Result<usize, String> {
    if names.len() < 4 || names[0] != "output_id" || names[names.len() - 2] != "y" || names[names.len() - 1] != "split" {
        return Err(format!("header must be output_id,x_0,...,y,split; found {}", names.join(",")));
    }
    let q_x = names.len() - 3;
    for (i, n) in names[1..1 + q_x].iter().enumerate() {
        if *n != format!("x_{i}") {
            return Err(format!("column {} should be x_{i}, found {n}", i + 2));
        }
    }
    Ok(q_x)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.into(), line, message: format!("{other:?}") },
    }
}

/// Writes the dataset in output-major order. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["output_id".to_string()];
    header.extend((0..ds.q_x).map(|i| format!("x_{i}")));
    header.push("y".into());
    header.push("split".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (d, o) in ds.outputs.iter().enumerate() {
        for n in 0..o.len() {
            let mut rec = vec![d.to_string()];
            rec.extend(o.x[n].iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", o.y[n]));
            rec.push(o.split[n].as_str().into());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
