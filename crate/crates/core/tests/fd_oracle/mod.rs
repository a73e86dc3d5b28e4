//! Analytic gradients of both training losses against central differences.
//!
//! At h = 1e-5 the f64 loss carries cancellation noise of order ε·L/h, which
//! swamps small gradient coordinates. The loss values for the differences are
//! therefore recomputed here in double-double arithmetic, with the parameter
//! shifted by exactly ±h. The oracle is checked against the library's f64
//! inference path at the unperturbed point.

use nlc_core::neural::{Corrector, Denoiser, MlpNet, ResidualModel, Role, RESIDUAL_FLOOR};
use nlc_core::numeric::{norm, Rng, Vec64};
use nlc_core::schedule::{build_ddpm_schedule, NoiseSchedule};
use nlc_core::training::{denoiser_loss_and_grads, denoiser_objective, nlc_loss_and_grads};
use std::ops::{Add, Mul, Neg, Sub};

pub const H: f64 = 1e-5;

/// Unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
}

fn quick(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn recip(self) -> Dd {
        let one = Dd::new(1.0);
        let q1 = 1.0 / self.hi;
        let r = one - self * Dd::new(q1);
        let q2 = r.hi / self.hi;
        let r = r - self * Dd::new(q2);
        let q3 = r.hi / self.hi;
        quick(q1, q2) + Dd::new(q3)
    }

    fn scale2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    fn exp(self) -> Dd {
        const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319046813846299558e-17 };
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).scale2(-10);
        // Taylor series on |r| < 4e-4, then undo the 2^-10 by squaring
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for i in 1..=12 {
            term = term * r * Dd::new(1.0 / i as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale2(k as i32)
    }

    fn max(self, floor: f64) -> Dd {
        if self.to_f64() < floor { Dd::new(floor) } else { self }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let u = quick(s.hi, s.lo + t.hi);
        quick(u.hi, u.lo + t.lo)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

fn silu(z: Dd) -> Dd {
    z * (Dd::new(1.0) + (-z).exp()).recip()
}

/// Network parameters in double-double, layer by layer as (weight, bias).
struct DdNet {
    layers: Vec<(usize, Vec<Dd>, Vec<Dd>)>,
    clamp: bool,
}

impl DdNet {
    /// Copies `net` and shifts flat parameter `k` by exactly `delta`.
    fn shifted(net: &MlpNet, k: usize, delta: f64) -> Self {
        let mut flat: Vec<Dd> = net.tensors().flatten().map(|&v| Dd::new(v)).collect();
        flat[k] = two_sum(flat[k].hi, delta);
        let mut it = flat.into_iter();
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = it.by_ref().take(l.weight.as_slice().len()).collect();
                let b = it.by_ref().take(l.bias.len()).collect();
                (l.input_dim(), w, b)
            })
            .collect();
        DdNet { layers, clamp: net.role() == Role::Corrector }
    }

    fn forward(&self, input: &[f64]) -> Vec<Dd> {
        let mut a: Vec<Dd> = input.iter().map(|&v| Dd::new(v)).collect();
        let last = self.layers.len() - 1;
        for (i, (cols, w, b)) in self.layers.iter().enumerate() {
            a = b
                .iter()
                .enumerate()
                .map(|(r, &bias)| {
                    let z = w[r * cols..(r + 1) * cols].iter().zip(&a).fold(bias, |s, (&wv, &av)| s + wv * av);
                    if i < last {
                        silu(z)
                    } else if self.clamp {
                        z.max(RESIDUAL_FLOOR)
                    } else {
                        z
                    }
                })
                .collect();
        }
        a
    }
}

/// `[c_in x, ln σ]` with its f64 coefficients; the same inputs reach both
/// sides of every difference.
fn features(x: &[f64], sigma: f64) -> (Vec<f64>, f64, f64) {
    let s2 = 1.0 / x.len() as f64;
    let total = sigma * sigma + s2;
    let c_in = 1.0 / total.sqrt();
    let mut f: Vec<f64> = x.iter().map(|v| v * c_in).collect();
    f.push(sigma.ln());
    (f, sigma / total, s2.sqrt() / total.sqrt())
}

fn batch(n: usize, size: usize, seed: u64) -> Vec<Vec64> {
    let mut rng = Rng::new(seed);
    (0..size)
        .map(|_| rng.gaussian_vec(n).iter().map(|v| 0.5 * v).collect::<Vec<_>>().into())
        .collect()
}

/// Denoising loss `mean ‖ε_θ(x_t, σ) − ε‖²`, draws per sample: level, noise.
fn denoiser_value(net: &DdNet, batch: &[Vec64], sched: &NoiseSchedule, rng: &mut Rng) -> Dd {
    let mut total = Dd::new(0.0);
    for x0 in batch {
        let sigma = sched.sigma(rng.below(sched.len()));
        let eps = rng.gaussian_vec(x0.len());
        let xt: Vec<f64> = x0.iter().zip(eps.iter()).map(|(a, e)| a + sigma * e).collect();
        let (f, skip, out) = features(&xt, sigma);
        for ((y, &x), &e) in net.forward(&f).into_iter().zip(&xt).zip(eps.iter()) {
            let d = Dd::new(skip) * Dd::new(x) + Dd::new(out) * y - Dd::new(e);
            total = total + d * d;
        }
    }
    total * Dd::new(1.0 / batch.len() as f64)
}

/// NLC loss `mean (√n σ (1 + r) − σ λ ‖ε‖)²`, draws per sample: level,
/// noise, λ.
fn nlc_value(net: &DdNet, batch: &[Vec64], sched: &NoiseSchedule, delta: f64, rng: &mut Rng) -> Dd {
    let root_n = (batch[0].len() as f64).sqrt();
    let mut total = Dd::new(0.0);
    for x0 in batch {
        let sigma = sched.sigma(rng.below(sched.len()));
        let eps = rng.gaussian_vec(x0.len());
        let lambda = rng.uniform_range(1.0 - delta, 1.0 + delta);
        let xt: Vec<f64> = x0.iter().zip(eps.iter()).map(|(a, e)| a + sigma * lambda * e).collect();
        let r = net.forward(&features(&xt, sigma).0)[0];
        let d = Dd::new(root_n * sigma) * (Dd::new(1.0) + r) - Dd::new(sigma * lambda * norm(&eps));
        total = total + d * d;
    }
    total * Dd::new(1.0 / batch.len() as f64)
}

/// Same NLC loss through the public per-sample inference path in f64.
fn nlc_reference(net: &MlpNet, batch: &[Vec64], sched: &NoiseSchedule, delta: f64, rng: &mut Rng) -> f64 {
    let corrector = Corrector::new(net.clone()).unwrap();
    let root_n = (batch[0].len() as f64).sqrt();
    let mut total = 0.0;
    for x0 in batch {
        let sigma = sched.sigma(rng.below(sched.len()));
        let eps = rng.gaussian_vec(x0.len());
        let lambda = rng.uniform_range(1.0 - delta, 1.0 + delta);
        let xt: Vec<f64> = x0.iter().zip(eps.iter()).map(|(a, e)| a + sigma * lambda * e).collect();
        let r = corrector.residual(&xt, sigma).unwrap();
        total += (root_n * sigma * (1.0 + r) - sigma * lambda * norm(&eps)).powi(2);
    }
    total / batch.len() as f64
}

/// Worst relative error over `coords` random coordinates of a fresh
/// network of shape `dims`, initialised from `seed`.
pub fn worst_relative_error(role: Role, dims: &[usize], coords: usize, seed: u64) -> f64 {
    let rng = Rng::new(seed);
    let net = MlpNet::init(role, dims, &mut rng.fork(0)).unwrap();
    let n = match role {
        Role::Denoiser => dims[dims.len() - 1],
        Role::Corrector => dims[0] - 1,
    };
    let data = batch(n, 6, seed ^ 1);
    let sched = build_ddpm_schedule(100, 1e-3, 0.05).unwrap();
    let draws = rng.fork(1);
    let value = |p: &DdNet| match role {
        Role::Denoiser => denoiser_value(p, &data, &sched, &mut draws.clone()),
        Role::Corrector => nlc_value(p, &data, &sched, 0.5, &mut draws.clone()),
    };
    let (loss, grads) = match role {
        Role::Denoiser => denoiser_loss_and_grads(&net, &data, &sched, &mut draws.clone()).unwrap(),
        Role::Corrector => nlc_loss_and_grads(&net, &data, &sched, 0.5, &mut draws.clone()).unwrap(),
    };
    let reference = match role {
        Role::Denoiser => {
            denoiser_objective(&Denoiser::new(net.clone()).unwrap(), &data, &sched, &mut draws.clone()).unwrap()
        }
        Role::Corrector => nlc_reference(&net, &data, &sched, 0.5, &mut draws.clone()),
    };
    let oracle = value(&DdNet::shifted(&net, 0, 0.0)).to_f64();
    assert!((oracle - reference).abs() <= 1e-12 * reference, "oracle {oracle} vs {reference}");
    assert!((loss - reference).abs() <= 1e-12 * reference, "loss {loss} vs {reference}");
    let analytic = grads.flat();
    let mut pick = rng.fork(2);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let k = pick.below(analytic.len());
        let diff = value(&DdNet::shifted(&net, k, H)) - value(&DdNet::shifted(&net, k, -H));
        let fd = diff.to_f64() / (2.0 * H);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

