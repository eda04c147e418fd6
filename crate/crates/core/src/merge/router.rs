use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu_scalar, softmax_slice, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    #[default]
    Linear,
    Mlp2,
}

/// One expert: the MLP of `layer` in source model `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpertRef {
    pub source: usize,
    pub layer: usize,
}

/// Dense softmax gate over a roster of experts.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub kind: RouterKind,
    /// Linear: `[N, d]`. Mlp2: first layer `[d_hidden, d]`.
    pub w: Tensor,
    /// Mlp2 only: second layer `[N, d_hidden]`.
    pub w2: Option<Tensor>,
    pub roster: Vec<ExpertRef>,
}

impl Router {
    /// Output logits start at zero so the initial mixture is uniform.
    pub fn new<R: Rng + ?Sized>(kind: RouterKind, d_model: usize, roster: Vec<ExpertRef>, rng: &mut R) -> Result<Self> {
        let n = roster.len();
        if n == 0 {
            return Err(Error::contract("router needs at least one expert"));
        }
        let mut seen = roster.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::contract("router roster has duplicate experts"));
        }
        Ok(match kind {
            RouterKind::Linear => Self {
                kind,
                w: Tensor::zeros(&[n, d_model]),
                w2: None,
                roster,
            },
            RouterKind::Mlp2 => Self {
                kind,
                w: Tensor::randn(&[d_model, d_model], (d_model as f64).powf(-0.5), rng),
                w2: Some(Tensor::zeros(&[n, d_model])),
                roster,
            },
        })
    }

    pub fn n_experts(&self) -> usize {
        self.roster.len()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.w2.as_ref().map_or(0, Tensor::len)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w];
        if let Some(w2) = self.w2.as_mut() {
            v.push(w2);
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundRouter {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundRouter {
            w: put(&self.w),
            w2: self.w2.as_ref().map(put),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundRouter) -> Result<()> {
        if let Some(g) = tape.grad(bound.w) {
            self.w.accumulate_grad(g)?;
        }
        if let (Some(w2), Some(v)) = (self.w2.as_mut(), bound.w2) {
            if let Some(g) = tape.grad(v) {
                w2.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundRouter {
    pub w: Var,
    pub w2: Option<Var>,
}

/// Routing weights for one hidden vector.
pub fn route(router: &Router, x: &[f64]) -> Result<Vec<f64>> {
    let d = router.w.cols();
    if x.len() != d {
        return Err(Error::Dimension {
            op: "route",
            left: router.w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let affine = |w: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|i| w.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let logits = match &router.w2 {
        None => affine(&router.w, x),
        Some(w2) => {
            let h: Vec<f64> = affine(&router.w, x).into_iter().map(gelu_scalar).collect();
            affine(w2, &h)
        }
    };
    Ok(softmax_slice(&logits))
}

/// Routing weights `[rows, N]` for hidden states `h` `[rows, d]`, on the tape.
pub fn route_tape(tape: &mut Tape, router: &BoundRouter, h: Var) -> Result<Var> {
    let logits = match router.w2 {
        None => tape.matmul_nt(h, router.w)?,
        Some(w2) => {
            let u = tape.matmul_nt(h, router.w)?;
            let u = tape.gelu(u);
            tape.matmul_nt(u, w2)?
        }
    };
    tape.softmax(logits, 1)
}
