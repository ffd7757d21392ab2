//! Mini-batch weights must give an unbiased ELBO when some outputs have no
//! training data and the rest have unequal counts.

use gs_lvmogp::data::{Dataset, Split};
use gs_lvmogp::elbo::{elbo_estimate, sample_noise, MiniBatch};
use gs_lvmogp::model::{ModelConfig, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heterotopic() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ds = Dataset::new(1, 5);
    for (d, n) in [(0, 7), (1, 2), (3, 5), (4, 1)] {
        for _ in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            ds.push(d, vec![x], (2.0 * x + d as f64).cos(), Split::Train).unwrap();
        }
        ds.push(d, vec![0.0], 0.0, Split::Test).unwrap();
    }
    ds
}

fn check(sample: impl Fn(&Dataset, &mut ChaCha8Rng) -> MiniBatch) {
    let ds = heterotopic();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let st = ModelState::init(ModelConfig::new(5, 1, 2, 1, 2, 3), &ds, None, &mut rng).unwrap();
    let per = 2;
    let table: Vec<Vec<f64>> = ds.outputs.iter().map(|o| sample_noise(o.len(), 1, 1, 2, &mut rng)).collect();
    let noise_for = |b: &MiniBatch| -> Vec<f64> { b.pairs.iter().flat_map(|&(d, k)| table[d][k * per..(k + 1) * per].to_vec()).collect() };
    let full = MiniBatch::full(&ds, 5);
    let exact = elbo_estimate(&st, &ds, &full, 1, &noise_for(&full)).unwrap().elbo;
    let vals: Vec<f64> = (0..4000)
        .map(|_| {
            let b = sample(&ds, &mut rng);
            elbo_estimate(&st, &ds, &b, 1, &noise_for(&b)).unwrap().elbo
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - exact).abs() < 3.5 * se, "mean {mean} vs {exact} (se {se})");
}

#[test]
fn structured_batches_are_unbiased_on_heterotopic_data() {
    check(|ds, rng| MiniBatch::sample_structured(ds, 2, 3, 5, rng).unwrap());
}

#[test]
fn flat_batches_are_unbiased_on_heterotopic_data() {
    check(|ds, rng| MiniBatch::sample_flat(ds, 4, 5, rng).unwrap());
}
