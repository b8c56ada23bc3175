//! Single-step GRU memory cell with a hand-derived backward pass.
//!
//! ```text
//! r  = σ(W_r [x, h])
//! z  = σ(W_z [x, h])
//! h~ = tanh(W x + U (r ⊙ h))
//! h' = z ⊙ h + (1 - z) ⊙ h~
//! ```
//!
//! The input and the hidden state share dimension `d`; there are no biases.

use crate::error::Result;
use crate::numerics::{init_params, seed_for, sigmoid, InitScheme, Matrix, ParamStore, Tensor, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Reset gate, `d x 2d`.
    pub w_r: Matrix,
    /// Update gate, `d x 2d`.
    pub w_z: Matrix,
    /// Candidate input map, `d x d`.
    pub w: Matrix,
    /// Candidate recurrent map, `d x d`.
    pub u: Matrix,
}

const NAMES: [&str; 4] = ["W_r", "W_z", "W", "U"];

impl GruParams {
    pub fn zeros(d: usize) -> Self {
        GruParams {
            w_r: Matrix::zeros(d, 2 * d),
            w_z: Matrix::zeros(d, 2 * d),
            w: Matrix::zeros(d, d),
            u: Matrix::zeros(d, d),
        }
    }

    pub fn init(d: usize, seed: u64, prefix: &str) -> Self {
        let mat = |name: &str, rows: usize, cols: usize| match init_params(
            &[rows, cols],
            seed_for(seed, &format!("{prefix}/{name}")),
            InitScheme::FanUniform,
        ) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => unreachable!(),
        };
        GruParams {
            w_r: mat("W_r", d, 2 * d),
            w_z: mat("W_z", d, 2 * d),
            w: mat("W", d, d),
            u: mat("U", d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_r, &self.w_z, &self.w, &self.u]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_r, &mut self.w_z, &mut self.w, &mut self.u]
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &GruParams) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.axpy(k, b);
        }
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (name, m) in NAMES.iter().zip(self.matrices()) {
            store.insert(format!("{prefix}/{name}"), m.clone());
        }
    }

    pub fn import(prefix: &str, store: &ParamStore) -> Result<Self> {
        let get = |name: &str| store.matrix(&format!("{prefix}/{name}")).cloned();
        Ok(GruParams {
            w_r: get("W_r")?,
            w_z: get("W_z")?,
            w: get("W")?,
            u: get("U")?,
        })
    }

    /// Adds `self` into the gradient buffers of `prefix/*`.
    pub fn accumulate_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for (name, m) in NAMES.iter().zip(self.matrices()) {
            store.accumulate(&format!("{prefix}/{name}"), &Tensor::Matrix(m.clone()))?;
        }
        Ok(())
    }
}

/// Intermediates of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Vector,
    pub h: Vector,
    pub r: Vector,
    pub z: Vector,
    pub candidate: Vector,
}

pub fn gru_forward(p: &GruParams, x: &Vector, h: &Vector) -> (Vector, GruCache) {
    let d = p.dim();
    assert!(
        x.dim() == d && h.dim() == d,
        "gru_forward: cell dim {d}, x dim {}, h dim {}",
        x.dim(),
        h.dim()
    );
    let xh = x.concat(h);
    let r = Vector(p.w_r.affine(&xh).iter().map(|&t| sigmoid(t)).collect());
    let z = Vector(p.w_z.affine(&xh).iter().map(|&t| sigmoid(t)).collect());
    let rh = r.mul(h);
    let pre = p.w.affine(x).add(&p.u.affine(&rh));
    let candidate = Vector(pre.iter().map(|t| t.tanh()).collect());
    let next = Vector(
        (0..d)
            .map(|k| z[k] * h[k] + (1.0 - z[k]) * candidate[k])
            .collect(),
    );
    let cache = GruCache {
        x: x.clone(),
        h: h.clone(),
        r,
        z,
        candidate,
    };
    (next, cache)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruInputGrads {
    pub dx: Vector,
    pub dh: Vector,
}

/// Backpropagates `dnext` through one cell, adding parameter gradients into
/// `grads` and returning the input gradients.
pub fn gru_backward(p: &GruParams, cache: &GruCache, dnext: &Vector, grads: &mut GruParams) -> GruInputGrads {
    let d = p.dim();
    assert!(
        dnext.dim() == d && cache.h.dim() == d && grads.dim() == d,
        "gru_backward: cell dim {d}, cache dim {}, upstream dim {}, grads dim {}",
        cache.h.dim(),
        dnext.dim(),
        grads.dim()
    );
    let GruCache { x, h, r, z, candidate } = cache;

    let mut dh = Vector((0..d).map(|k| dnext[k] * z[k]).collect());
    let dz_pre = Vector(
        (0..d)
            .map(|k| dnext[k] * (h[k] - candidate[k]) * z[k] * (1.0 - z[k]))
            .collect(),
    );
    let dcand_pre = Vector(
        (0..d)
            .map(|k| dnext[k] * (1.0 - z[k]) * (1.0 - candidate[k] * candidate[k]))
            .collect(),
    );

    let rh = r.mul(h);
    grads.w.add_outer(1.0, &dcand_pre, x);
    grads.u.add_outer(1.0, &dcand_pre, &rh);
    let mut dx = p.w.affine_transpose(&dcand_pre);
    let drh = p.u.affine_transpose(&dcand_pre);
    let dr_pre = Vector((0..d).map(|k| drh[k] * h[k] * r[k] * (1.0 - r[k])).collect());
    for k in 0..d {
        dh[k] += drh[k] * r[k];
    }

    let xh = x.concat(h);
    grads.w_z.add_outer(1.0, &dz_pre, &xh);
    grads.w_r.add_outer(1.0, &dr_pre, &xh);
    let mut dxh = p.w_z.affine_transpose(&dz_pre);
    dxh.add_assign(&p.w_r.affine_transpose(&dr_pre));
    let (dx_gate, dh_gate) = dxh.split_at(d);
    dx.add_assign(&dx_gate);
    dh.add_assign(&dh_gate);
    GruInputGrads { dx, dh }
}
