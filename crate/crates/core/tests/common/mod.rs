#![allow(dead_code)]

use cscct::autodiff::{Tape, Tensor, Var};
use cscct::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, uniform(rng, rows * cols, -1.0, 1.0)).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` for analytic gradient `a` and central
/// difference `n`; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Builds `f` on a fresh tape with every input as a parameter, runs
/// backward, and compares each input's gradient with central differences
/// of the forward value. Returns the worst relative error over inputs.
pub fn finite_difference_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut all = inputs.to_vec();
                let mut data = all[i].data().to_vec();
                data[j] += delta;
                all[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                eval(&all)
            };
            *slot = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Greedy herding by brute force: every step recomputes, for each
/// candidate, the mean of the already-picked features plus the candidate
/// and keeps the candidate closest to the class mean. Sums run in pick
/// order (class mean: ascending id) so exact ties stay exact.
pub fn herding_oracle(examples: &[(u64, Vec<f64>)], budget: usize) -> Vec<u64> {
    let mut items: Vec<(u64, Vec<f64>)> = examples.iter().map(|(id, f)| (*id, normalize(f))).collect();
    items.sort_by_key(|(id, _)| *id);
    let dim = items[0].1.len();
    let mut class_sum = vec![0.0; dim];
    for (_, f) in &items {
        for (s, x) in class_sum.iter_mut().zip(f) {
            *s += x;
        }
    }
    let class_mean: Vec<f64> = class_sum.iter().map(|s| s / items.len() as f64).collect();

    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < budget.min(items.len()) {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, (id, f)) in items.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let mut sum = vec![0.0; dim];
            for &p in &picked {
                for (s, x) in sum.iter_mut().zip(&items[p].1) {
                    *s += x;
                }
            }
            let size = (picked.len() + 1) as f64;
            let dist: f64 = (0..dim)
                .map(|d| {
                    let diff = class_mean[d] - (sum[d] + f[d]) / size;
                    diff * diff
                })
                .sum();
            let better = match best {
                None => true,
                Some((bd, bid, _)) => dist < bd || (dist == bd && *id < bid),
            };
            if better {
                best = Some((dist, *id, i));
            }
        }
        picked.push(best.unwrap().2);
    }
    picked.into_iter().map(|i| items[i].0).collect()
}
