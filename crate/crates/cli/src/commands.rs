use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use gs_lvmogp::checkpoint::{Checkpoint, RngState};
use gs_lvmogp::data::{gen_synthetic, load_csv, mse, save_csv, smse, Split, SyntheticOptions};
use gs_lvmogp::latent::LatentPrior;
use gs_lvmogp::model::{LikelihoodKind, ModelConfig, ModelState, ParamRole};
use gs_lvmogp::predict::{evaluate as eval_model, state_nlpd, LatentQuery, PredictMode, Predictor};
use gs_lvmogp::trainer::{gradcheck as run_gradcheck, tiny_problem, train_with, TINY_MAX_M, TINY_MAX_N};
use gs_lvmogp::Error;

use crate::config;

pub enum CliError {
    /// Bad input, configuration or usage.
    Usage(String),
    Config(Vec<String>),
    /// A numerical failure or a failed check.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Config(errs) => {
                writeln!(f, "invalid configuration ({} problem{}):", errs.len(), if errs.len() == 1 { "" } else { "s" })?;
                for e in errs {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::Singular { .. } => CliError::Check(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    match out {
        Some(p) => File::create(p)
            .map(|f| Box::new(io::BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(sink(out)?))
}

fn write_err(out: Option<&Path>, e: impl fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", out.map_or_else(|| "stdout".into(), |p| p.display().to_string())))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn generate(seed: u64, outputs: usize, points: usize, train_fraction: f64, noise_std: Option<f64>, out: &Path) -> Result<()> {
    if outputs == 0 || points == 0 {
        return Err(CliError::Usage("--outputs and --points must be positive".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(CliError::Usage(format!("--train-fraction must be in [0, 1], got {train_fraction}")));
    }
    if let Some(s) = noise_std {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(CliError::Usage(format!("--noise-std must be nonnegative, got {s}")));
        }
    }
    let (ds, _) = gen_synthetic(seed, &SyntheticOptions { d: outputs, n: points, train_fraction, noise_std });
    save_csv(&ds, out)?;
    Ok(())
}

fn load_coordinates(path: &Path, d: usize, q: usize, q_h: usize) -> Result<LatentPrior> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let bad = |m: String| CliError::Usage(format!("{}, line {line}: {m}", path.display()));
        if rec.len() != q_h + 1 {
            return Err(bad(format!("expected output_id and {q_h} coordinates, found {} fields", rec.len())));
        }
        let id: usize = rec[0].parse().map_err(|_| bad(format!("bad output_id {:?}", &rec[0])))?;
        let c: Vec<f64> = (1..=q_h)
            .map(|i| rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad coordinate {:?}", &rec[i]))))
            .collect::<Result<_>>()?;
        if rows.insert(id, c).is_some() {
            return Err(bad(format!("duplicate output_id {id}")));
        }
    }
    let coords: Vec<Vec<f64>> = (0..d)
        .map(|i| rows.remove(&i).ok_or_else(|| CliError::Usage(format!("{}: no coordinates for output {i}", path.display()))))
        .collect::<Result<_>>()?;
    Ok(LatentPrior::from_coordinates(&coords, q)?)
}

pub fn train(config_path: &Path, overrides: &[String], log_every: usize) -> Result<()> {
    let cfg = config::load(config_path, overrides).map_err(CliError::Config)?;
    let data_path = cfg.io.data.clone().ok_or_else(|| CliError::Config(vec!["io.data: required for training".into()]))?;
    let data = load_csv(&data_path)?;
    let d = cfg.model.d.unwrap_or(data.d());
    if d < data.d() {
        return Err(CliError::Config(vec![format!("model.d: {d} is smaller than the {} outputs in the data", data.d())]));
    }
    let model = cfg.model_config(d, data.q_x);
    let prior = match &cfg.model.prior {
        config::PriorSource::Zeros => None,
        config::PriorSource::Coordinates(p) => Some(load_coordinates(p, d, model.q, model.q_h)?),
    };
    let n_iter = cfg.train.iterations;
    let out = train_with(&data, model, prior, &cfg.train, |r| {
        if log_every > 0 && (r.iteration % log_every == 0 || r.iteration + 1 == n_iter) {
            eprintln!("iteration {:>6}  loss {:.6}  {:.1} s", r.iteration, r.loss, r.elapsed_ms / 1e3);
        }
    })?;
    let mut ck = Checkpoint::from_state(&out.state);
    ck.train = Some(cfg.train.clone());
    ck.iterations_done = n_iter;
    ck.adam = Some(out.adam.clone());
    ck.rng = Some(RngState::capture(&out.rng));
    ck.save(&cfg.io.checkpoint)?;
    let loss_path = Some(cfg.io.loss.as_path());
    let mut w = csv_writer(loss_path)?;
    w.write_record(["iteration", "loss", "elapsed_ms"]).map_err(|e| write_err(loss_path, e))?;
    for r in &out.trajectory {
        let ms = if cfg.record_time { r.elapsed_ms } else { 0.0 };
        w.write_record([r.iteration.to_string(), num(r.loss), num(ms)]).map_err(|e| write_err(loss_path, e))?;
    }
    w.flush().map_err(|e| write_err(loss_path, e))?;
    if let Some(last) = out.trajectory.last() {
        eprintln!("final loss {:.6}; checkpoint {}", last.loss, cfg.io.checkpoint.display());
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<ModelState> {
    Ok(Checkpoint::load(path)?.state()?)
}

struct Query {
    d: usize,
    x: Vec<f64>,
    y: Option<f64>,
}

/// `output_id, x_0..x_{Q_X-1}` with optional `y` and `split` columns.
fn load_queries(path: &Path, q_x: usize) -> Result<Vec<Query>> {
    let perr = |line: usize, m: String| CliError::Usage(format!("{}, line {line}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?.iter().map(str::to_string).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("output_id").ok_or_else(|| perr(1, "missing output_id column".into()))?;
    let x_cols: Vec<usize> = (0..q_x).map(|i| col(&format!("x_{i}")).ok_or_else(|| perr(1, format!("missing x_{i} column")))).collect::<Result<_>>()?;
    if col(&format!("x_{q_x}")).is_some() {
        return Err(perr(1, format!("the model has {q_x} input dimensions but the query has more")));
    }
    let y_col = col("y");
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        let d: usize = rec.get(id_col).and_then(|s| s.parse().ok()).ok_or_else(|| perr(line, "bad output_id".into()))?;
        let x = x_cols
            .iter()
            .map(|&c| rec.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()).ok_or_else(|| perr(line, format!("bad input in column {}", headers[c]))))
            .collect::<Result<Vec<f64>>>()?;
        let y = match y_col.and_then(|c| rec.get(c)) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(line, format!("bad target {s:?}")))?),
        };
        out.push(Query { d, x, y });
    }
    Ok(out)
}

/// `output_id, q, h_0..h_{Q_H-1}`; every `q` must be given for each listed output.
fn load_latent_coords(path: &Path, q: usize, q_h: usize) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let perr = |line: usize, m: String| CliError::Usage(format!("{}, line {line}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut map: BTreeMap<usize, Vec<Option<Vec<f64>>>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        if rec.len() != q_h + 2 {
            return Err(perr(line, format!("expected output_id, q and {q_h} coordinates, found {} fields", rec.len())));
        }
        let d: usize = rec[0].parse().map_err(|_| perr(line, "bad output_id".into()))?;
        let qq: usize = rec[1].parse().ok().filter(|v| *v < q).ok_or_else(|| perr(line, format!("q must be below {q}")))?;
        let h = (0..q_h)
            .map(|i| rec[2 + i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(line, format!("bad coordinate h_{i}"))))
            .collect::<Result<Vec<f64>>>()?;
        let slot = &mut map.entry(d).or_insert_with(|| vec![None; q])[qq];
        if slot.replace(h).is_some() {
            return Err(perr(line, format!("duplicate entry for output {d}, q {qq}")));
        }
    }
    map.into_iter()
        .map(|(d, v)| {
            let full: Option<Vec<Vec<f64>>> = v.into_iter().collect();
            full.map(|f| (d, f)).ok_or_else(|| CliError::Usage(format!("{}: output {d} lacks coordinates for some q", path.display())))
        })
        .collect()
}

pub fn predict(checkpoint: &Path, query: &Path, out: Option<&Path>, moment_matched: bool, latent_coords: Option<&Path>) -> Result<()> {
    let state = load_state(checkpoint)?;
    let c = &state.config;
    let queries = load_queries(query, c.q_x)?;
    let coords = match latent_coords {
        Some(p) => load_latent_coords(p, c.q, c.q_h)?,
        None => BTreeMap::new(),
    };
    let pr = Predictor::new(&state)?;
    let with_targets = queries.iter().any(|q| q.y.is_some());
    let mut rows = Vec::with_capacity(queries.len());
    for (k, q) in queries.iter().enumerate() {
        let dist = if let Some(h) = coords.get(&q.d) {
            pr.at_means(&LatentQuery::Coords(h.clone()), &q.x)?
        } else if q.d < c.d {
            if moment_matched {
                pr.moment_matched(q.d, &q.x)?
            } else {
                pr.at_means(&LatentQuery::Output(q.d), &q.x)?
            }
        } else {
            return Err(CliError::Usage(format!(
                "query row {}: output {} is not a trained output (the model has {}); supply --latent-coords",
                k + 2,
                q.d,
                c.d
            )));
        };
        let nlpd = q.y.and_then(|y| state_nlpd(&state, &dist, y).ok());
        rows.push((q, dist, nlpd));
    }
    let mut w = csv_writer(out)?;
    let mut header = vec!["output_id".to_string()];
    header.extend((0..c.q_x).map(|i| format!("x_{i}")));
    header.extend(["mean", "std_f", "std_y"].map(String::from));
    if with_targets {
        header.push("nlpd".into());
    }
    w.write_record(&header).map_err(|e| write_err(out, e))?;
    for (q, dist, nlpd) in rows {
        let mut rec = vec![q.d.to_string()];
        rec.extend(q.x.iter().map(|v| num(*v)));
        rec.push(num(dist.mean));
        rec.push(num(dist.variance_f.sqrt()));
        rec.push(opt(dist.variance_y.map(f64::sqrt)));
        if with_targets {
            rec.push(opt(nlpd));
        }
        w.write_record(&rec).map_err(|e| write_err(out, e))?;
    }
    w.flush().map_err(|e| write_err(out, e))
}

struct MetricRow {
    scope: String,
    n: usize,
    mse: f64,
    smse: Option<f64>,
    nlpd: Option<f64>,
}

fn write_metrics(rows: &[MetricRow], out: Option<&Path>) -> Result<()> {
    let mut w = csv_writer(out)?;
    w.write_record(["scope", "n", "mse", "rmse", "smse", "nlpd"]).map_err(|e| write_err(out, e))?;
    for r in rows {
        w.write_record([r.scope.clone(), r.n.to_string(), num(r.mse), num(r.mse.sqrt()), opt(r.smse), opt(r.nlpd)])
            .map_err(|e| write_err(out, e))?;
    }
    w.flush().map_err(|e| write_err(out, e))?;
    if out.is_some() {
        let all = rows.last().expect("aggregate row");
        println!("MSE  {}", num(all.mse));
        println!("RMSE {}", num(all.mse.sqrt()));
        println!("SMSE {}", opt(all.smse));
        println!("NLPD {}", opt(all.nlpd));
    }
    Ok(())
}

pub fn evaluate(checkpoint: &Path, data: &Path, moment_matched: bool, out: Option<&Path>) -> Result<()> {
    let state = load_state(checkpoint)?;
    let ds = load_csv(data)?;
    if ds.count(Split::Test) == 0 {
        return Err(CliError::Usage(format!("{}: no test points to evaluate", data.display())));
    }
    let mode = if moment_matched { PredictMode::MomentMatched } else { PredictMode::AtMeans };
    let rep = eval_model(&state, &ds, mode)?;
    let mut rows = Vec::new();
    for d in 0..ds.d() {
        if let Some(m) = rep.per_output_mse[d] {
            let n = rep.points.iter().filter(|p| p.d == d).count();
            rows.push(MetricRow { scope: d.to_string(), n, mse: m, smse: rep.smse.per_output[d], nlpd: rep.per_output_nlpd[d] });
        }
    }
    if !rep.smse.excluded.is_empty() {
        eprintln!("warning: {} output(s) excluded from SMSE for zero target spread: {:?}", rep.smse.excluded.len(), rep.smse.excluded);
    }
    rows.push(MetricRow { scope: "all".into(), n: rep.points.len(), mse: rep.mse, smse: Some(rep.smse.value), nlpd: rep.nlpd });
    write_metrics(&rows, out)
}

/// Each output's training mean as the prediction for all its test points.
pub fn evaluate_baseline(data: &Path, out: Option<&Path>) -> Result<()> {
    let ds = load_csv(data)?;
    if ds.count(Split::Test) == 0 {
        return Err(CliError::Usage(format!("{}: no test points to evaluate", data.display())));
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut refs = Vec::new();
    for o in &ds.outputs {
        let t: Vec<f64> = o.indices(Split::Test).into_iter().map(|n| o.y[n]).collect();
        let m = o.mean_of(Split::Train).or_else(|| o.mean_of(Split::Test)).unwrap_or(0.0);
        preds.push(vec![m; t.len()]);
        targets.push(t);
        refs.push(m);
    }
    let s = smse(&preds, &targets, &refs)?;
    let mut rows = Vec::new();
    for d in 0..ds.d() {
        if !targets[d].is_empty() {
            rows.push(MetricRow { scope: d.to_string(), n: targets[d].len(), mse: mse(&preds[d], &targets[d])?, smse: s.per_output[d], nlpd: None });
        }
    }
    let all_p: Vec<f64> = preds.concat();
    let all_t: Vec<f64> = targets.concat();
    rows.push(MetricRow { scope: "all".into(), n: all_t.len(), mse: mse(&all_p, &all_t)?, smse: Some(s.value), nlpd: None });
    write_metrics(&rows, out)
}

pub fn export_latents(checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let state = load_state(checkpoint)?;
    let c = &state.config;
    let mut w = csv_writer(out)?;
    let mut header = vec!["output_id".to_string(), "q".to_string()];
    header.extend((0..c.q_h).map(|i| format!("mean_{i}")));
    header.extend((0..c.q_h).map(|i| format!("std_{i}")));
    w.write_record(&header).map_err(|e| write_err(out, e))?;
    for d in 0..c.d {
        for q in 0..c.q {
            let mut rec = vec![d.to_string(), q.to_string()];
            rec.extend(state.latent.mean(d, q).iter().map(|v| num(*v)));
            rec.extend(state.latent.std(d, q).into_iter().map(num));
            w.write_record(&rec).map_err(|e| write_err(out, e))?;
        }
    }
    w.flush().map_err(|e| write_err(out, e))
}

pub fn gradcheck(
    config_path: Option<&Path>,
    overrides: &[String],
    likelihood: Option<LikelihoodKind>,
    q: Option<usize>,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<()> {
    // tiny defaults: D = 3, N = 4, M_H = 3, M_X = 4, Gaussian with Q = 2
    let mut model = ModelConfig::new(3, 2, 2, 1, 3, TINY_MAX_M);
    if let Some(p) = config_path {
        let cfg = config::load(p, overrides).map_err(CliError::Config)?;
        let m = &cfg.model;
        model = ModelConfig::new(3, m.q, m.q_h.min(3), 1, m.m_h.min(3), m.m_x.min(TINY_MAX_M));
        model.kernels_h = m.kernels_h.clone();
        model.kernels_x = m.kernels_x.clone();
        model.likelihood = m.likelihood;
        model.tie_noise = m.tie_noise;
        model.gh_degree = cfg.gh_degree;
    } else if !overrides.is_empty() {
        return Err(CliError::Usage("--set needs --config".into()));
    }
    if let Some(l) = likelihood {
        model.likelihood = l;
    }
    if let Some(q) = q {
        if q == 0 {
            return Err(CliError::Usage("--q must be positive".into()));
        }
        if q != model.q {
            let (fh, fx) = (model.kernels_h[0], model.kernels_x[0]);
            model.kernels_h = vec![fh; q];
            model.kernels_x = vec![fx; q];
            model.q = q;
        }
    }
    let corrupt_role = match corrupt {
        None => None,
        Some(name) => Some(ParamRole::parse(name).ok_or_else(|| CliError::Usage(format!("unknown parameter block {name:?}")))?),
    };
    let tp = tiny_problem(&model, TINY_MAX_N.min(4), seed)?;
    let hook = move |g: &mut [f64], s: &ModelState| {
        if let Some(role) = corrupt_role {
            let r = s.layout().range(role);
            if !r.is_empty() {
                g[r.start] += 1.0;
            }
        }
    };
    let rep = run_gradcheck(&tp.state, &tp.data, &tp.batch, tp.j, &tp.noise, Some(&hook))?;
    let lik = match model.likelihood {
        LikelihoodKind::Gaussian => "gaussian",
        LikelihoodKind::Poisson => "poisson",
    };
    println!("gradcheck: {lik} likelihood, Q={}, Q_H={}, D={}, N={}, M_H={}, M_X={}", model.q, model.q_h, model.d, 4, model.m_h, model.m_x);
    println!("{:<22} {:>14} {:>8} {:>16} {:>16}", "block", "max_rel_error", "index", "analytic", "numeric");
    for b in &rep.blocks {
        println!("{:<22} {:>14.3e} {:>8} {:>16.8e} {:>16.8e}", b.role.name(), b.max_rel_error, b.worst_index, b.analytic, b.numeric);
    }
    let worst = rep.worst().expect("nine blocks");
    if rep.passed() {
        println!("PASS (threshold {:e})", rep.threshold);
        Ok(())
    } else {
        println!("FAIL (threshold {:e})", rep.threshold);
        Err(CliError::Check(format!(
            "gradient check failed; worst offender {} with relative error {:.3e}",
            worst.role.name(),
            worst.max_rel_error
        )))
    }
}
