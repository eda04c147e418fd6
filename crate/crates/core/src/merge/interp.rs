use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::Tensor;

/// Directions closer than this to (anti)parallel fall back to linear interpolation.
pub const COLINEAR_THRESHOLD: f64 = 1.0 - 1e-7;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b`
pub fn lerp(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    same_len("lerp", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spherical interpolation from `v0` (t = 0) to `v1` (t = 1).
pub fn slerp(v0: &[f64], v1: &[f64], t: f64) -> Result<Vec<f64>> {
    same_len("slerp", v0, v1)?;
    let (n0, n1) = (norm(v0), norm(v1));
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::contract("slerp of a zero-norm vector"));
    }
    let dot: f64 = v0.iter().zip(v1).map(|(a, b)| a * b).sum::<f64>() / (n0 * n1);
    if dot.abs() > COLINEAR_THRESHOLD {
        // `v0 + t (v1 - v0)` is exact when the inputs coincide.
        return Ok(v0.iter().zip(v1).map(|(a, b)| a + t * (b - a)).collect());
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let c0 = ((1.0 - t) * theta).sin() / s;
    let c1 = (t * theta).sin() / s;
    Ok(v0.iter().zip(v1).map(|(a, b)| c0 * a + c1 * b).collect())
}

fn check_pair(a: &TransformerModel, b: &TransformerModel) -> Result<()> {
    if a.config != b.config {
        return Err(Error::IncompatibleModels("model configurations differ".into()));
    }
    if a.trunk_hash() != b.trunk_hash() {
        return Err(Error::IncompatibleModels("models do not share a trunk".into()));
    }
    Ok(())
}

/// Copy of `a` whose MLP tensors are `f(a_tensor, b_tensor)`; the shared trunk is kept as is.
fn merge_mlps(
    a: &TransformerModel,
    b: &TransformerModel,
    f: &dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<TransformerModel> {
    check_pair(a, b)?;
    let mut out = a.clone();
    for (ob, bb) in out.blocks.iter_mut().zip(&b.blocks) {
        let theirs = bb.mlp.tensors();
        let mut err = None;
        let mut i = 0;
        ob.mlp.visit_mut("", &mut |_, _, t| {
            match f(t.data(), theirs[i].data()) {
                Ok(v) => *t = Tensor::new(t.shape(), v).expect("same shape"),
                Err(e) => err = Some(e),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(out)
}

/// Weight-space LERP of the experts: `alpha` = 1 gives `a`, 0 gives `b`.
pub fn lerp_models(a: &TransformerModel, b: &TransformerModel, alpha: f64) -> Result<TransformerModel> {
    merge_mlps(a, b, &|x, y| lerp(x, y, alpha))
}

/// Per-tensor SLERP of the experts with the same endpoint convention as
/// [`lerp_models`]. Tensors with no direction (e.g. all-zero biases) are lerped.
pub fn slerp_models(a: &TransformerModel, b: &TransformerModel, alpha: f64) -> Result<TransformerModel> {
    merge_mlps(a, b, &|x, y| {
        if norm(x) == 0.0 || norm(y) == 0.0 {
            lerp(x, y, alpha)
        } else {
            slerp(y, x, alpha)
        }
    })
}
