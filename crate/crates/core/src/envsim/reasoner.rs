use serde::{Deserialize, Serialize};

use super::EnvConfig;
use crate::numerics::{Matrix, RngStream, Vector};

/// Frozen recurrent map `h' = tanh(A h + B W_env x)` with a linear readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReasoner {
    /// `D_L x D_L`, spectral norm at most the configured cap.
    pub a: Matrix,
    /// `D_L x D_L`.
    pub b: Matrix,
    /// `D_L x D_v`, the reasoner's own input map.
    pub w_env: Matrix,
    /// `C x D_L`.
    pub readout: Matrix,
    pub h0: Vector,
}

impl ToyReasoner {
    pub fn init(cfg: &EnvConfig, rng: &mut RngStream) -> Self {
        let d_l = cfg.d_l;
        let mut a = Matrix::gaussian(d_l, d_l, 1.0, rng);
        // Power iteration underestimates the norm, so leave a little slack.
        let sigma = a.spectral_norm(500);
        a.scale(cfg.spectral_cap * (1.0 - 1e-6) / sigma);
        let b = Matrix::gaussian(d_l, d_l, cfg.input_gain / (d_l as f64).sqrt(), rng);
        let w_env = Matrix::gaussian(d_l, cfg.d_v, 1.0 / (cfg.d_v as f64).sqrt(), rng);
        let readout = Matrix::gaussian(cfg.classes, d_l, 1.0, rng);
        let h0 = Vector::from_raw((0..d_l).map(|_| (0.5 * rng.normal()).tanh()).collect());
        ToyReasoner {
            a,
            b,
            w_env,
            readout,
            h0,
        }
    }

    pub fn step(&self, h: &[f64], injected: &[f64]) -> Vector {
        let mut pre = self.a.matvec(h);
        let drive = self.b.matvec(&self.w_env.matvec(injected));
        pre.axpy(1.0, &drive);
        Vector::from_raw(pre.iter().map(|v| v.tanh()).collect())
    }

    /// Injects every vector in order starting from `h`.
    pub fn run<'a, I>(&self, h: &Vector, injected: I) -> Vector
    where
        I: IntoIterator<Item = &'a Vector>,
    {
        injected
            .into_iter()
            .fold(h.clone(), |h, x| self.step(&h, x))
    }

    /// `argmax(readout h)`, ties to the lower class.
    pub fn answer(&self, h: &[f64]) -> usize {
        let logits = self.readout.matvec(h);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Removes the component of every readout row along `m`, so a typical
    /// final state carries no bias toward any class.
    pub fn center_readout(&mut self, m: &Vector) {
        let mm = m.dot(m);
        if mm == 0.0 {
            return;
        }
        let rows = self.readout.rows();
        let cols = self.readout.cols();
        let data = self.readout.as_mut_slice();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let coef = row.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>() / mm;
            for (x, mv) in row.iter_mut().zip(m.iter()) {
                *x -= coef * mv;
            }
        }
    }
}
