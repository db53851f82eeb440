#![allow(dead_code)]

use impalloc::marlia::net::Cache;
use impalloc::marlia::{Grads, Head, MlpNet};
use impalloc::{Contract, Impression};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance with continuous values, so ties have probability zero.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, m: usize, horizon: u32) -> (Vec<Contract>, Vec<Impression>) {
    let contracts = (0..m)
        .map(|j| Contract {
            id: j as u32,
            demand: rng.random_range(1..=(n as u64 / 2).max(1)),
            unit_price: rng.random_range(0.0..0.5),
            penalty: rng.random_range(0.2..1.5),
            quality_weight: rng.random_range(0.1..1.0),
        })
        .collect();
    let mut steps: Vec<u32> = (0..n).map(|_| rng.random_range(1..=horizon)).collect();
    steps.sort_unstable();
    let impressions = steps
        .into_iter()
        .enumerate()
        .map(|(i, step)| {
            let b2: f64 = rng.random_range(0.05..1.0);
            Impression {
                id: i as u64,
                step,
                first_bid: b2 + rng.random_range(0.0..0.5),
                second_bid: b2,
                quality: (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
            }
        })
        .collect();
    (contracts, impressions)
}

/// Best outcome over every integral allocation, enumerated as base-(m+1)
/// counters; digit 0 is RTB, digit `j+1` is contract `j`.
pub fn enumerate_optimum(impressions: &[Impression], contracts: &[Contract]) -> f64 {
    let n = impressions.len();
    let m = contracts.len();
    let prepaid: f64 = contracts.iter().map(|c| c.unit_price * c.demand as f64).sum();
    let total = (m + 1).pow(n as u32);
    let mut best = f64::NEG_INFINITY;
    for code in 0..total {
        let mut rest = code;
        let mut load = vec![0u64; m];
        let mut value = prepaid;
        for imp in impressions {
            let digit = rest % (m + 1);
            rest /= m + 1;
            if digit == 0 {
                value += imp.second_bid;
            } else {
                let j = digit - 1;
                load[j] += 1;
                value += contracts[j].quality_weight * imp.quality[j];
            }
        }
        if load.iter().zip(contracts).any(|(&l, c)| l > c.demand) {
            continue;
        }
        value -= contracts.iter().zip(&load).map(|(c, &l)| c.penalty * (c.demand - l) as f64).sum::<f64>();
        best = best.max(value);
    }
    best
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub const H: f64 = 1e-6;

/// Central-difference derivative of `f` at `x` along one coordinate.
pub fn central<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

pub fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn flat(g: &Grads) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

/// Checks `d_out * ∂net/∂θ` and `∂net/∂x` against central differences at
/// `probes` random (input, parameter) pairs.
pub fn gradient_check(sizes: &[usize], head: Head, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut net = MlpNet::new(sizes, head, &mut rng);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut cache = Cache::default();
        net.forward_cached(&x, &mut cache);
        let mut g = Grads::zeros_like(&net);
        let mut dx = vec![0.0; sizes[0]];
        net.backward(&cache, 1.0, Some(&mut g), Some(&mut dx));
        let analytic = flat(&g);

        let k = rng.random_range(0..net.n_params());
        let base = *net.params().nth(k).unwrap();
        let numeric = central(base, |v| {
            *net.params_mut().nth(k).unwrap() = v;
            net.forward(&x)
        });
        *net.params_mut().nth(k).unwrap() = base;
        worst = worst.max(rel(analytic[k], numeric));

        let i = rng.random_range(0..sizes[0]);
        let numeric = central(x[i], |v| {
            let mut x2 = x.clone();
            x2[i] = v;
            net.forward(&x2)
        });
        worst = worst.max(rel(dx[i], numeric));
    }
    worst
}
