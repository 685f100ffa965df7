//! Parameter handles for the few layer types the models share.

use rand::Rng;

use crate::{glorot_uniform, Graph, Matrix, ParamId, ParamStore, Var};

/// `x · W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
        let b = bias.then(|| store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { w, b }
    }

    /// Looks up `{name}.w` and, if present, `{name}.b`.
    pub fn lookup(store: &ParamStore, name: &str) -> Option<Self> {
        Some(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b")),
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalisation with a learned gain and shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            shift: store.insert(format!("{name}.shift"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Var {
        let n = g.normalize_rows(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}
