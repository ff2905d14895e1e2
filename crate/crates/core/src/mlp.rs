//! Two-layer tanh perceptron with an explicit backward pass.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::math::tanh;

/// `out = W2 · tanh(W1 · x + b1) + b2`, weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// `[hidden, in_dim]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[out_dim, hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient accumulator with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrad {
    pub fn zeros(mlp: &Mlp) -> Self {
        MlpGrad {
            w1: vec![0.0; mlp.w1.len()],
            b1: vec![0.0; mlp.b1.len()],
            w2: vec![0.0; mlp.w2.len()],
            b2: vec![0.0; mlp.b2.len()],
        }
    }
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            in_dim,
            hidden,
            out_dim,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    /// Gaussian first layer scaled by `1/sqrt(in_dim)`, second layer scaled by `out_std`.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Mlp::zeros(in_dim, hidden, out_dim);
        let n1 = Normal::new(0.0, 1.0 / crate::math::sqrt(in_dim as f64)).unwrap();
        for w in m.w1.iter_mut() {
            *w = n1.sample(rng);
        }
        if out_std > 0.0 {
            let n2 = Normal::new(0.0, out_std).unwrap();
            for w in m.w2.iter_mut() {
                *w = n2.sample(rng);
            }
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Writes hidden activations into `hid` and outputs into `out`.
    pub fn forward_into(&self, x: &[f64], hid: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (j, h) in hid.iter_mut().enumerate() {
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            let mut acc = self.b1[j];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *h = tanh(acc);
        }
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let mut acc = self.b2[o];
            for (w, h) in row.iter().zip(hid.iter()) {
                acc += w * h;
            }
            *y = acc;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut hid = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut hid, &mut out);
        out
    }

    /// Accumulates weight gradients into `grad` (when given) and returns nothing;
    /// input gradients are added to `dx` when it is given.
    ///
    /// `dhid` is scratch of length `hidden`.
    pub fn backward(
        &self,
        x: &[f64],
        hid: &[f64],
        dout: &[f64],
        grad: Option<&mut MlpGrad>,
        dx: Option<&mut [f64]>,
        dhid: &mut [f64],
    ) {
        for d in dhid.iter_mut() {
            *d = 0.0;
        }
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            for (dh, w) in dhid.iter_mut().zip(row) {
                *dh += g * w;
            }
        }
        // through tanh
        for (dh, h) in dhid.iter_mut().zip(hid) {
            *dh *= 1.0 - h * h;
        }
        if let Some(grad) = grad {
            for (o, &g) in dout.iter().enumerate() {
                grad.b2[o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = &mut grad.w2[o * self.hidden..(o + 1) * self.hidden];
                for (gw, h) in row.iter_mut().zip(hid) {
                    *gw += g * h;
                }
            }
            for (j, &dh) in dhid.iter().enumerate() {
                grad.b1[j] += dh;
                if dh == 0.0 {
                    continue;
                }
                let row = &mut grad.w1[j * self.in_dim..(j + 1) * self.in_dim];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += dh * xi;
                }
            }
        }
        if let Some(dx) = dx {
            for (j, &dh) in dhid.iter().enumerate() {
                if dh == 0.0 {
                    continue;
                }
                let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += dh * w;
                }
            }
        }
    }
}
