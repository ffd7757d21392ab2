//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero when a fatal criterion fails. Criterion 10 is reported but
//! never fatal.
//!
//! Oracles here are written against nalgebra and plain loops, not against the
//! library's own helpers.

use std::process::{Command, ExitCode};
use std::time::Instant;

use gs_lvmogp::data::{gen_synthetic, Dataset, Split, SyntheticOptions};
use gs_lvmogp::elbo::{closed_form_F, elbo_estimate, sample_noise, seard_statistics, MiniBatch};
use gs_lvmogp::inducing::KuuFactor;
use gs_lvmogp::kernels::{KernelFamily, KernelSpec};
use gs_lvmogp::kron::{kl_dense_gaussian, kl_whitened_kron, kron_cholesky, kron_matvec, JitterPolicy, KronPair, SumKron};
use gs_lvmogp::likelihood::{expected_loglik_gaussian, gauss_hermite_expected_loglik, gh_rule};
use gs_lvmogp::model::{ModelConfig, ModelState, ParamRole};
use gs_lvmogp::predict::{evaluate, PredictMode};
use gs_lvmogp::trainer::{train, Sampler, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(n, n) * 0.5
}

fn random_lower(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
        std::cmp::Ordering::Equal => rng.random_range(0.3..1.5),
        std::cmp::Ordering::Less => 0.0,
    })
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// `σ² exp(-½ Σ (a_i - b_i)² / l_i)` with `l` as stored (not squared).
fn se_oracle(a: &[f64], b: &[f64], sigma2: f64, l: &[f64]) -> f64 {
    let e: f64 = a.iter().zip(b).zip(l).map(|((a, b), l)| (a - b).powi(2) / l).sum();
    sigma2 * (-0.5 * e).exp()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let policy = JitterPolicy::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (a, b) = (random_spd(m, &mut rng), random_spd(n, &mut rng));
        let dense = a.kronecker(&b);
        let pair = KronPair::new(a.clone(), b.clone()).unwrap();

        let (la, lb) = kron_cholesky(&pair, &policy).unwrap();
        let l_dense = dense.clone().cholesky().unwrap().l();
        worst = worst.max(rel_frob(&la.l.kronecker(&lb.l), &l_dense));

        let v = DVector::from_fn(m * n, |_, _| rng.random_range(-2.0..2.0));
        let mv = kron_matvec(&pair, &v).unwrap();
        let mv_dense = &dense * &v;
        worst = worst.max((&mv - &mv_dense).norm() / mv_dense.norm());

        let factor = KuuFactor::new(&SumKron::new(vec![pair]).unwrap(), &policy).unwrap();
        let inv_dense = dense.clone().try_inverse().unwrap();
        worst = worst.max(rel_frob(&factor.inverse(), &inv_dense));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 1e-8 && secs < 5.0, format!("max relative error {worst:.2e}, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (mh, mx) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (l0h, l0x) = (random_lower(mh, &mut rng), random_lower(mx, &mut rng));
        let (s0h, s0x) = (&l0h * l0h.transpose(), &l0x * l0x.transpose());
        let m0 = DVector::from_fn(mh * mx, |_, _| rng.random_range(-1.0..1.0));
        let k = mh * mx;
        let factored = kl_whitened_kron(&m0, &s0h, &s0x).unwrap();
        let dense = kl_dense_gaussian(&m0, &s0h.kronecker(&s0x), &DMatrix::identity(k, k)).unwrap();
        // Independent closed form for a standard-normal reference.
        let s = s0h.kronecker(&s0x);
        let oracle = 0.5 * (s.trace() - k as f64 + m0.norm_squared() - s.determinant().ln());
        worst = worst.max((factored - dense).abs()).max((factored - oracle).abs());
    }
    outcome(worst <= 1e-9, format!("max absolute difference {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let rule = gh_rule(20).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let y = rng.random_range(-3.0..3.0);
        let a = rng.random_range(-3.0..3.0);
        let b: f64 = rng.random_range(0.01..2.0);
        let sigma: f64 = rng.random_range(0.05..2.0);
        let s2 = sigma * sigma;
        let logn = |y: f64, f: f64| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (y - f).powi(2) / (2.0 * s2);
        let gh = gauss_hermite_expected_loglik(y, a, b, logn, &rule);
        let closed = expected_loglik_gaussian(y, a, b * b, s2).unwrap();
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - ((y - a).powi(2) + b * b) / (2.0 * s2);
        worst = worst.max((gh - closed).abs()).max((closed - oracle).abs());
    }
    outcome(worst <= 1e-9, format!("max absolute difference {worst:.2e} over 200 tuples"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let samples = 1_000_000;
    let mut worst_z: f64 = 0.0;
    let mut psi_exact = true;
    for _ in 0..20 {
        let q_h = rng.random_range(1..=3);
        let nz = rng.random_range(1..=4);
        let sigma2 = rng.random_range(0.5..2.0);
        let l: Vec<f64> = (0..q_h).map(|_| rng.random_range(0.3..2.0)).collect();
        let m: Vec<f64> = (0..q_h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..q_h).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: Vec<Vec<f64>> = (0..nz).map(|_| (0..q_h).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let spec = KernelSpec::new(KernelFamily::SeArd, sigma2, &l, None).unwrap();
        let st = seard_statistics(&m, &s, &z, &spec).unwrap();
        psi_exact &= st.psi == spec.outputscale();

        let mut sum = vec![0.0; nz + nz * nz];
        let mut sum2 = vec![0.0; nz + nz * nz];
        let mut h = vec![0.0; q_h];
        let mut k = vec![0.0; nz];
        for _ in 0..samples {
            for t in 0..q_h {
                h[t] = m[t] + s[t].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..nz {
                k[i] = se_oracle(&h, &z[i], sigma2, &l);
                sum[i] += k[i];
                sum2[i] += k[i] * k[i];
            }
            for i in 0..nz {
                for j in 0..nz {
                    let v = k[i] * k[j];
                    sum[nz + i * nz + j] += v;
                    sum2[nz + i * nz + j] += v * v;
                }
            }
        }
        let n = samples as f64;
        for e in 0..sum.len() {
            let mean = sum[e] / n;
            let se = ((sum2[e] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            let exact = if e < nz { st.psi_vec[e] } else { st.phi[((e - nz) / nz, (e - nz) % nz)] };
            worst_z = worst_z.max((mean - exact).abs() / se.max(1e-300));
        }
    }
    outcome(worst_z <= 3.0 && psi_exact, format!("max |MC - analytic| = {worst_z:.2} SE, psi exact: {psi_exact}"))
}

fn isotopic_dataset(d: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ds = Dataset::new(1, d);
    for out in 0..d {
        let (amp, phase) = (rng.random_range(0.5..1.5), rng.random_range(0.0..3.0));
        for &x in &xs {
            let y = amp * (3.0 * x + phase).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal);
            ds.push(out, vec![x], y, Split::Train).unwrap();
        }
    }
    ds
}

fn perturbed_state(cfg: ModelConfig, ds: &Dataset, scale: f64, rng: &mut ChaCha8Rng) -> ModelState {
    let mut st = ModelState::init(cfg, ds, None, rng).unwrap();
    let mut p = st.pack();
    for v in p.iter_mut() {
        *v += rng.random_range(-scale..scale);
    }
    st.unpack(&p).unwrap();
    st
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let (d, n) = (5, 6);
    let ds = isotopic_dataset(d, n, 505);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut cfg = ModelConfig::new(d, 1, 2, 1, 3, 3);
    cfg.tie_noise = true;
    let mut st = perturbed_state(cfg, &ds, 0.2, &mut rng);
    // Broad latent posteriors so the latent integral matters.
    for v in st.latent.log_stds.iter_mut() {
        *v = rng.random_range(-1.2..-0.3);
    }
    let exact = closed_form_F(&st, &ds).unwrap();
    let batch = MiniBatch::full(&ds, d);
    let reps = 100_000;
    let vals: Vec<f64> = (0..reps)
        .map(|_| {
            let noise = sample_noise(batch.len(), 1, 1, 2, &mut rng);
            elbo_estimate(&st, &ds, &batch, 1, &noise).unwrap().data
        })
        .collect();
    let (mean, se) = mean_and_se(&vals);
    let z = (mean - exact).abs() / se;
    let secs = t0.elapsed().as_secs_f64();
    outcome(z <= 3.0 && secs < 120.0, format!("closed form {exact:.6}, MC {mean:.6} ± {se:.2e} ({z:.2} SE), {secs:.1} s"))
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let bin = env!("CARGO_BIN_EXE_gs-lvmogp");
    let mut details = Vec::new();
    let mut pass = true;
    for args in [&["gradcheck", "--size", "tiny", "--likelihood", "gaussian", "--q", "2"][..], &["gradcheck", "--size", "tiny", "--likelihood", "poisson", "--q", "1"][..]] {
        let out = Command::new(bin).args(args).output().expect("run gradcheck");
        let stdout = String::from_utf8_lossy(&out.stdout);
        let ok = out.status.success() && stdout.lines().last().is_some_and(|l| l.starts_with("PASS"));
        pass &= ok;
        details.push(format!("{} {}", args[4], if ok { "ok" } else { "failed" }));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(pass && secs < 60.0, format!("{}, {secs:.1} s", details.join(", ")))
}

fn criterion_7() -> Outcome {
    let (d, n, q, q_h) = (10, 10, 1, 2);
    let (ds, _) = gen_synthetic(707, &SyntheticOptions { d, n, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut cfg = ModelConfig::new(d, q, q_h, 1, 3, 4);
    cfg.init.noise_std = 0.3;
    let st = perturbed_state(cfg, &ds, 0.2, &mut rng);
    // One latent draw per training pair, shared by every estimator.
    let per = q * q_h;
    let table: Vec<Vec<f64>> = (0..d).map(|_| sample_noise(n, 1, q, q_h, &mut rng)).collect();
    let noise_for = |b: &MiniBatch| -> Vec<f64> { b.pairs.iter().flat_map(|&(d, k)| table[d][k * per..(k + 1) * per].iter().copied()).collect() };
    let full = MiniBatch::full(&ds, d);
    let exact = elbo_estimate(&st, &ds, &full, 1, &noise_for(&full)).unwrap().elbo;
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, sampler) in [("structured", Sampler::Structured { b_o: 4, b_x: 3 }), ("flat", Sampler::Flat { m_b: 12 })] {
        let vals: Vec<f64> = (0..2000)
            .map(|_| {
                let b = match sampler {
                    Sampler::Structured { b_o, b_x } => MiniBatch::sample_structured(&ds, b_o, b_x, d, &mut rng),
                    Sampler::Flat { m_b } => MiniBatch::sample_flat(&ds, m_b, d, &mut rng),
                }
                .unwrap();
                elbo_estimate(&st, &ds, &b, 1, &noise_for(&b)).unwrap().elbo
            })
            .collect();
        let (mean, se) = mean_and_se(&vals);
        let z = (mean - exact).abs() / se;
        pass &= z <= 3.0;
        parts.push(format!("{name} {z:.2} SE"));
    }
    outcome(pass, format!("full batch {exact:.4}; {}", parts.join(", ")))
}

struct Benchmark {
    smse: f64,
    nlpd: f64,
    smse_mm: f64,
    nlpd_mm: f64,
    secs: f64,
}

fn benchmark(q: usize, m_h: usize, m_x: usize) -> Benchmark {
    let (ds, _) = gen_synthetic(0, &SyntheticOptions::default());
    let cfg = ModelConfig::new(ds.d(), q, 2, 1, m_h, m_x);
    let tc = TrainConfig { iterations: 2000, learning_rate: 0.05, sampler: Sampler::Structured { b_o: 100, b_x: 10 }, j: 1, seed: 0 };
    let t0 = Instant::now();
    let out = train(&ds, cfg, None, &tc).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let at = evaluate(&out.state, &ds, PredictMode::AtMeans).unwrap();
    let mm = evaluate(&out.state, &ds, PredictMode::MomentMatched).unwrap();
    Benchmark {
        smse: at.smse.value,
        nlpd: at.nlpd.unwrap_or(f64::INFINITY),
        smse_mm: mm.smse.value,
        nlpd_mm: mm.nlpd.unwrap_or(f64::INFINITY),
        secs,
    }
}

fn criterion_8(b: &Benchmark) -> Outcome {
    outcome(
        b.smse <= 0.35 && b.nlpd <= 0.75 && b.secs <= 900.0,
        format!(
            "SMSE {:.4}, NLPD {:.4} (moment-matched SMSE {:.4}, NLPD {:.4}), training {:.1} s",
            b.smse, b.nlpd, b.smse_mm, b.nlpd_mm, b.secs
        ),
    )
}

/// Dense `log N(y | 0, K + diag σ²)` at the latent means, written directly
/// from the kernel definitions.
fn exact_log_marginal(st: &ModelState, ds: &Dataset) -> f64 {
    let pairs = ds.train_pairs();
    let kh = &st.kernels_h[0];
    let kx = &st.kernels_x[0];
    let (sh, lh): (f64, Vec<f64>) = (kh.log_outputscale.exp(), kh.log_lengthscales.iter().map(|v| v.exp()).collect());
    let (sx, lx): (f64, Vec<f64>) = (kx.log_outputscale.exp(), kx.log_lengthscales.iter().map(|v| v.exp()).collect());
    let n = pairs.len();
    let mut k = DMatrix::from_fn(n, n, |r, c| {
        let ((d1, k1), (d2, k2)) = (pairs[r], pairs[c]);
        se_oracle(st.latent.mean(d1, 0), st.latent.mean(d2, 0), sh, &lh) * se_oracle(&ds.outputs[d1].x[k1], &ds.outputs[d2].x[k2], sx, &lx)
    });
    for (r, &(d, _)) in pairs.iter().enumerate() {
        k[(r, r)] += st.likelihood.noise_var(d).unwrap();
    }
    let y = DVector::from_iterator(n, pairs.iter().map(|&(d, k)| ds.outputs[d].y[k]));
    let ch = k.cholesky().unwrap();
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + y.dot(&ch.solve(&y)))
}

/// Places the inducing points on the data of a single-output instance and sets
/// `q(u)` to the collapsed optimum, which is Kronecker-representable when
/// `M_H = 1`. The bound is then tight up to the inducing jitter.
fn tighten(st: &mut ModelState, ds: &Dataset) {
    let o = &ds.outputs[0];
    let n = o.len();
    let m = st.latent.mean(0, 0).to_vec();
    st.inducing.z_h.copy_from_slice(&m);
    for k in 0..n {
        st.inducing.z_x[k] = o.x[k][0];
    }
    let kx = &st.kernels_x[0];
    let sh = st.kernels_h[0].log_outputscale.exp();
    let (sx, lx): (f64, Vec<f64>) = (kx.log_outputscale.exp(), kx.log_lengthscales.iter().map(|v| v.exp()).collect());
    let eps = st.config.kuu_jitter;
    let gx = DMatrix::from_fn(n, n, |a, b| se_oracle(&o.x[a], &o.x[b], sx, &lx));
    let kfu = &gx * sh;
    let l = (&gx + DMatrix::identity(n, n) * eps).cholesky().unwrap().l() * (sh + eps).sqrt();
    let noise2 = st.likelihood.noise_var(0).unwrap();
    let y = DVector::from_column_slice(&o.y);
    // Whitened optimum: precision I + A Aᵀ / σ², mean P⁻¹ A y / σ², A = L⁻¹ K_uf.
    let a_mat = l.solve_lower_triangular(&kfu.transpose()).unwrap();
    let prec = DMatrix::identity(n, n) + &a_mat * a_mat.transpose() / noise2;
    let cov = prec.clone().try_inverse().unwrap();
    st.posterior.m0 = &cov * (&a_mat * &y) / noise2;
    st.posterior.l0x = ((&cov + cov.transpose()) * 0.5).cholesky().unwrap().l();
    st.posterior.l0h = DMatrix::identity(1, 1);
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = f64::NEG_INFINITY;
    let mut tightest = f64::NEG_INFINITY;
    for s in 0..20 {
        let tight = s >= 10;
        let (d, n) = if tight { (1, 10) } else { (4, 5) };
        let ds = if tight {
            isotopic_dataset(d, n, 900 + s)
        } else {
            gen_synthetic(900 + s, &SyntheticOptions { d, n, train_fraction: 1.0, noise_std: Some(0.1) }).0
        };
        let (m_h, m_x) = if tight { (d, n) } else { (3, 4) };
        let mut cfg = ModelConfig::new(d, 1, 2, 1, m_h, m_x);
        cfg.kernels_x = vec![KernelFamily::SeArd];
        cfg.tie_noise = tight;
        let mut st = perturbed_state(cfg, &ds, 0.5, &mut rng);
        let r = st.layout().range(ParamRole::LatentLogStds);
        let mut p = st.pack();
        for v in &mut p[r] {
            *v = (1e-9f64).ln();
        }
        st.unpack(&p).unwrap();
        if tight {
            tighten(&mut st, &ds);
        }
        let batch = MiniBatch::full(&ds, d);
        let noise = sample_noise(batch.len(), 1, 1, 2, &mut rng);
        let t = elbo_estimate(&st, &ds, &batch, 1, &noise).unwrap();
        // Conditional on H, the sparse bound omits the latent KL.
        let gap = t.data - t.kl_u - exact_log_marginal(&st, &ds);
        worst = worst.max(gap);
        if tight {
            tightest = tightest.max(gap);
        }
    }
    outcome(worst <= 1e-6, format!("max (bound - exact log marginal) = {worst:.3e}; closest near-tight setting {tightest:.3e}"))
}

fn main() -> ExitCode {
    let mut fatal = false;
    let mut line = |k: usize, name: &str, o: Outcome, is_fatal: bool| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && !is_fatal { " (non-fatal)" } else { "" };
        println!("{tag} criterion {k} {name}: {}{note}", o.detail);
        fatal |= !o.pass && is_fatal;
    };
    line(1, "kronecker algebra", criterion_1(), true);
    line(2, "kl equivalence", criterion_2(), true);
    line(3, "quadrature", criterion_3(), true);
    line(4, "se-ard statistics", criterion_4(), true);
    line(5, "closed-form oracle", criterion_5(), true);
    line(6, "gradient contract", criterion_6(), true);
    line(7, "estimator unbiasedness", criterion_7(), true);
    let q1 = benchmark(1, 20, 30);
    line(8, "synthetic benchmark", criterion_8(&q1), true);
    line(9, "bound sanity", criterion_9(), true);
    let q2 = benchmark(2, 10, 20);
    let detail = format!("Q=2 SMSE {:.4} vs Q=1 SMSE {:.4} (+0.05 allowed), Q=2 training {:.1} s", q2.smse, q1.smse, q2.secs);
    line(10, "q flexibility", outcome(q2.smse <= q1.smse + 0.05, detail), false);
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
