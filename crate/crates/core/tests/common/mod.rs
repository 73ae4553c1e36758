#![allow(dead_code)]

use fsv_vb::model::{ErrorFamily, LatentStates, ModelSpec, ReturnsPanel, ThetaReal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(r: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(r)
}

/// Random instance with moderate parameter values.
pub fn instance(s: usize, k: usize, t: usize, family: ErrorFamily, seed: u64) -> (ModelSpec, ThetaReal, LatentStates, ReturnsPanel) {
    let spec = ModelSpec::new(s, k, t, family).unwrap();
    let mut r = rng(seed);
    let mut theta = ThetaReal::zeros(&spec);
    let fill = |v: &mut Vec<f64>, sd: f64, r: &mut ChaCha8Rng| v.iter_mut().for_each(|x| *x = sd * normal(r));
    fill(&mut theta.kappa_eps, 0.5, &mut r);
    fill(&mut theta.alpha_eps, 0.5, &mut r);
    fill(&mut theta.psi_eps, 1.0, &mut r);
    fill(&mut theta.alpha_f, 0.5, &mut r);
    fill(&mut theta.psi_f, 1.0, &mut r);
    fill(&mut theta.beta_free, 0.5, &mut r);
    let ve = theta.vstar_eps.len();
    let vf = theta.vstar_f.len();
    theta.vstar_eps = (0..ve).map(|_| 1.5 + 0.3 * normal(&mut r)).collect();
    theta.vstar_f = (0..vf).map(|_| 1.5 + 0.3 * normal(&mut r)).collect();
    let mut x = LatentStates::zeros(&spec);
    fill(&mut x.h_eps, 0.7, &mut r);
    fill(&mut x.h_f, 0.7, &mut r);
    fill(&mut x.f, 1.0, &mut r);
    if let Some(w) = x.w_eps.as_mut() {
        w.iter_mut().for_each(|w| *w = (0.4 * normal(&mut r)).exp());
    }
    if let Some(w) = x.w_f.as_mut() {
        w.iter_mut().for_each(|w| *w = (0.4 * normal(&mut r)).exp());
    }
    let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..s).map(|_| normal(&mut r)).collect()).collect();
    let y = ReturnsPanel::from_rows(&rows).unwrap();
    (spec, theta, x, y)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
