//! Helpers shared by the integration suites.
#![allow(dead_code)]

use dualimpute::data::DataMatrix;
use dualimpute::numerics::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rows `√ρ·f + √(1−ρ)·ε` with one shared factor `f` per row.
pub fn equicorrelated(n: usize, d: usize, rho: f64, seed: u64) -> DataMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::with_capacity(n * d);
    for _ in 0..n {
        let f: f64 = r.sample(StandardNormal);
        for _ in 0..d {
            let e: f64 = r.sample(StandardNormal);
            v.push(rho.sqrt() * f + (1.0 - rho).sqrt() * e);
        }
    }
    DataMatrix::new(n, d, v).unwrap()
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| lo + (hi - lo) * r.random::<f64>()).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Largest elementwise `|a − n| / max(|a|, |n|)`, ignoring pairs where both
/// magnitudes are below `floor`.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Central differences of `f` over every scalar of the listed parameters.
pub fn fd_params(store: &ParamStore, ids: &[ParamId], h: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<Tensor> {
    let mut probe = store.clone();
    ids.iter()
        .map(|&id| {
            let mut g = Tensor::zeros(probe.get(id).shape());
            for k in 0..g.len() {
                let orig = probe.get(id).data()[k];
                probe.get_mut(id).data_mut()[k] = orig + h;
                let up = f(&probe);
                probe.get_mut(id).data_mut()[k] = orig - h;
                let down = f(&probe);
                probe.get_mut(id).data_mut()[k] = orig;
                g.data_mut()[k] = (up - down) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// Parameter ids whose names start with `prefix`.
pub fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect()
}
pub mod gradcheck;
