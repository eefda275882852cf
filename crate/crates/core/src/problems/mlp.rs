use super::{hessian_fd, Dataset, Objective};
use crate::linalg::{Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IN: usize = 4;
const H1: usize = 10;
const H2: usize = 10;
const OUT: usize = 3;

/// 4-10-10-3 sigmoid network with mean softmax cross-entropy loss, viewed as
/// a function of its flattened parameters.
///
/// Layout: `W1` (row-major, hidden×input), `b1`, `W2`, `b2`, `W3`, `b3`.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    data: Dataset,
}

#[derive(Clone)]
struct Net {
    w1: [[f64; IN]; H1],
    b1: [f64; H1],
    w2: [[f64; H1]; H2],
    b2: [f64; H2],
    w3: [[f64; H2]; OUT],
    b3: [f64; OUT],
}

impl Net {
    const LEN: usize = H1 * (IN + 1) + H2 * (H1 + 1) + OUT * (H2 + 1);

    fn zeros() -> Self {
        Self { w1: [[0.0; IN]; H1], b1: [0.0; H1], w2: [[0.0; H1]; H2], b2: [0.0; H2], w3: [[0.0; H2]; OUT], b3: [0.0; OUT] }
    }

    fn from_slice(theta: &[f64]) -> Self {
        let mut net = Self::zeros();
        let mut it = theta.iter().copied();
        let mut next = || it.next().expect("parameter vector too short");
        net.w1.iter_mut().flatten().for_each(|v| *v = next());
        net.b1.iter_mut().for_each(|v| *v = next());
        net.w2.iter_mut().flatten().for_each(|v| *v = next());
        net.b2.iter_mut().for_each(|v| *v = next());
        net.w3.iter_mut().flatten().for_each(|v| *v = next());
        net.b3.iter_mut().for_each(|v| *v = next());
        net
    }

    fn to_vector(&self) -> Vector {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend(self.w1.iter().flatten());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter().flatten());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter().flatten());
        out.extend(self.b3.iter());
        Vector::from_vec(out)
    }
}

/// Activations and backward-pass quantities for one sample.
#[derive(Clone)]
struct Pass {
    h1: [f64; H1],
    h2: [f64; H2],
    /// `log Σ exp z − z_label`.
    loss: f64,
    /// `(softmax(z) − onehot) / n`.
    dz: [f64; OUT],
    p: [f64; OUT],
    dh2: [f64; H2],
    da2: [f64; H2],
    dh1: [f64; H1],
    da1: [f64; H1],
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn run(net: &Net, x: &[f64; IN], label: usize, inv_n: f64) -> Pass {
    let mut h1 = [0.0; H1];
    for j in 0..H1 {
        let a: f64 = (0..IN).map(|i| net.w1[j][i] * x[i]).sum();
        h1[j] = sigmoid(a + net.b1[j]);
    }
    let mut h2 = [0.0; H2];
    for j in 0..H2 {
        let a: f64 = (0..H1).map(|i| net.w2[j][i] * h1[i]).sum();
        h2[j] = sigmoid(a + net.b2[j]);
    }
    let mut z = [0.0; OUT];
    for c in 0..OUT {
        z[c] = net.b3[c] + (0..H2).map(|i| net.w3[c][i] * h2[i]).sum::<f64>();
    }
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - zmax).exp());
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    let loss = zmax + sum.ln() - z[label];

    let mut dz = p;
    dz[label] -= 1.0;
    dz.iter_mut().for_each(|v| *v *= inv_n);
    let mut dh2 = [0.0; H2];
    let mut da2 = [0.0; H2];
    for j in 0..H2 {
        dh2[j] = (0..OUT).map(|c| net.w3[c][j] * dz[c]).sum();
        da2[j] = dh2[j] * h2[j] * (1.0 - h2[j]);
    }
    let mut dh1 = [0.0; H1];
    let mut da1 = [0.0; H1];
    for i in 0..H1 {
        dh1[i] = (0..H2).map(|j| net.w2[j][i] * da2[j]).sum();
        da1[i] = dh1[i] * h1[i] * (1.0 - h1[i]);
    }
    Pass { h1, h2, loss, dz, p, dh2, da2, dh1, da1 }
}

impl MlpClassifier {
    pub fn iris(data: Dataset) -> Self {
        Self { data }
    }

    pub fn n_params(&self) -> usize {
        Net::LEN
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Seeded uniform(−0.5, 0.5) parameters.
    pub fn init_params(&self, seed: u64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Vector::from_fn(self.n_params(), |_, _| rng.gen_range(-0.5..0.5))
    }

    fn inv_n(&self) -> f64 {
        1.0 / self.data.len() as f64
    }

    fn passes(&self, net: &Net) -> Vec<Pass> {
        let inv_n = self.inv_n();
        self.data.features.iter().zip(&self.data.labels).map(|(x, &l)| run(net, x, l, inv_n)).collect()
    }

    fn linearize(&self, x: &Vector) -> Linearization<'_> {
        let net = Net::from_slice(x.as_slice());
        let passes = self.passes(&net);
        Linearization { data: &self.data, net, passes, inv_n: self.inv_n() }
    }
}

impl Objective for MlpClassifier {
    fn dim(&self) -> usize {
        self.n_params()
    }

    fn value(&self, x: &Vector) -> f64 {
        let net = Net::from_slice(x.as_slice());
        self.passes(&net).iter().map(|p| p.loss).sum::<f64>() * self.inv_n()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let net = Net::from_slice(x.as_slice());
        let mut g = Net::zeros();
        for (pass, feat) in self.passes(&net).iter().zip(&self.data.features) {
            for c in 0..OUT {
                for j in 0..H2 {
                    g.w3[c][j] += pass.dz[c] * pass.h2[j];
                }
                g.b3[c] += pass.dz[c];
            }
            for j in 0..H2 {
                for i in 0..H1 {
                    g.w2[j][i] += pass.da2[j] * pass.h1[i];
                }
                g.b2[j] += pass.da2[j];
            }
            for j in 0..H1 {
                for i in 0..IN {
                    g.w1[j][i] += pass.da1[j] * feat[i];
                }
                g.b1[j] += pass.da1[j];
            }
        }
        g.to_vector()
    }

    /// Finite-difference Hessian of the analytic gradient.
    fn hessian(&self, x: &Vector) -> Mat {
        hessian_fd(self, x, 1e-4)
    }

    /// Exact Hessian-vector product (forward-mode differentiation of the
    /// backward pass).
    fn hvp(&self, x: &Vector, v: &Vector) -> Vector {
        self.linearize(x).apply(v)
    }

    fn hessian_operator<'a>(&'a self, x: &Vector) -> Box<dyn Fn(&Vector) -> Vector + Send + Sync + 'a> {
        let lin = self.linearize(x);
        Box::new(move |v| lin.apply(v))
    }
}

/// Forward and backward passes at fixed parameters, kept for repeated
/// Hessian-vector products.
struct Linearization<'a> {
    data: &'a Dataset,
    net: Net,
    passes: Vec<Pass>,
    inv_n: f64,
}

impl Linearization<'_> {
    fn apply(&self, v: &Vector) -> Vector {
        let w = &self.net;
        let dv = Net::from_slice(v.as_slice());
        let mut out = Net::zeros();
        for (s, x) in self.passes.iter().zip(&self.data.features) {
            let mut rh1 = [0.0; H1];
            for j in 0..H1 {
                let ra: f64 = dv.b1[j] + (0..IN).map(|i| dv.w1[j][i] * x[i]).sum::<f64>();
                rh1[j] = s.h1[j] * (1.0 - s.h1[j]) * ra;
            }
            let mut rh2 = [0.0; H2];
            for j in 0..H2 {
                let ra: f64 = dv.b2[j] + (0..H1).map(|i| dv.w2[j][i] * s.h1[i] + w.w2[j][i] * rh1[i]).sum::<f64>();
                rh2[j] = s.h2[j] * (1.0 - s.h2[j]) * ra;
            }
            let mut rz = [0.0; OUT];
            for c in 0..OUT {
                rz[c] = dv.b3[c] + (0..H2).map(|i| dv.w3[c][i] * s.h2[i] + w.w3[c][i] * rh2[i]).sum::<f64>();
            }
            let prz: f64 = (0..OUT).map(|c| s.p[c] * rz[c]).sum();
            let rdz: [f64; OUT] = std::array::from_fn(|c| s.p[c] * (rz[c] - prz) * self.inv_n);

            for c in 0..OUT {
                for j in 0..H2 {
                    out.w3[c][j] += rdz[c] * s.h2[j] + s.dz[c] * rh2[j];
                }
                out.b3[c] += rdz[c];
            }
            let mut rda2 = [0.0; H2];
            for j in 0..H2 {
                let rdh2: f64 = (0..OUT).map(|c| dv.w3[c][j] * s.dz[c] + w.w3[c][j] * rdz[c]).sum();
                rda2[j] = rdh2 * s.h2[j] * (1.0 - s.h2[j]) + s.dh2[j] * (1.0 - 2.0 * s.h2[j]) * rh2[j];
            }
            for j in 0..H2 {
                for i in 0..H1 {
                    out.w2[j][i] += rda2[j] * s.h1[i] + s.da2[j] * rh1[i];
                }
                out.b2[j] += rda2[j];
            }
            for i in 0..H1 {
                let rdh1: f64 = (0..H2).map(|j| dv.w2[j][i] * s.da2[j] + w.w2[j][i] * rda2[j]).sum();
                let rda1 = rdh1 * s.h1[i] * (1.0 - s.h1[i]) + s.dh1[i] * (1.0 - 2.0 * s.h1[i]) * rh1[i];
                for k in 0..IN {
                    out.w1[i][k] += rda1 * x[k];
                }
                out.b1[i] += rda1;
            }
        }
        out.to_vector()
    }
}
