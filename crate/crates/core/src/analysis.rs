//! Linear-kernel CKA and layer-wise similarity grids.

use std::fmt::Write as _;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{seeded, Tensor};

/// Default cap on the number of token positions entering one Gram matrix.
pub const MAX_ROWS: usize = 2048;

/// Ratio below which a centered Gram matrix counts as having no variance.
const DEGENERATE_RATIO: f64 = 1e-24;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SourceTag {
    pub model: String,
    pub layer: usize,
    pub dataset: String,
}

/// Activations `[n, d]` for `n` token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    x: Tensor,
    pub tag: SourceTag,
}

impl ActivationMatrix {
    pub fn new(x: Tensor, tag: SourceTag) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() < 2 {
            return Err(Error::contract(format!(
                "activation matrix needs shape [n >= 2, d], got {:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::contract("activation matrix has non-finite entries"));
        }
        Ok(Self { x, tag })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkaResult {
    pub value: f64,
    pub n: usize,
    pub x_tag: SourceTag,
    pub y_tag: SourceTag,
}

impl CkaResult {
    /// Representational divergence `D = 1 - CKA`.
    pub fn divergence(&self) -> f64 {
        1.0 - self.value
    }
}

/// `K = X Xᵀ`.
pub fn gram(x: &ActivationMatrix) -> Tensor {
    let (n, d) = (x.x.rows(), x.x.cols());
    let xs = x.x.data();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let ri = &xs[i * d..(i + 1) * d];
        for j in i..n {
            let v: f64 = ri.iter().zip(&xs[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Tensor::new(&[n, n], k).expect("square gram")
}

fn square(k: &Tensor, op: &'static str) -> Result<usize> {
    match k.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::Dimension {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

/// `H K H` with `H = I - 11ᵀ/n`, computed from row, column and grand means.
pub fn center(k: &Tensor) -> Result<Tensor> {
    let n = square(k, "center")?;
    let kd = k.data();
    let row: Vec<f64> = (0..n)
        .map(|i| kd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let col: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| kd[i * n + j]).sum::<f64>() / n as f64)
        .collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        kd[idx] - row[i] - col[j] + grand
    }))
}

fn hsic_centered(kc: &Tensor, lc: &Tensor) -> f64 {
    let n = kc.rows() as f64;
    let s: f64 = kc.data().iter().zip(lc.data()).map(|(a, b)| a * b).sum();
    s / ((n - 1.0) * (n - 1.0))
}

/// `tr(K̄ L̄) / (n - 1)²`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let n = square(k, "hsic")?;
    let m = square(l, "hsic")?;
    if n != m {
        return Err(Error::Dimension {
            op: "hsic",
            left: k.shape().to_vec(),
            right: l.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::contract("hsic needs n >= 2"));
    }
    Ok(hsic_centered(&center(k)?, &center(l)?))
}

/// A centered Gram matrix with its self-HSIC, reusable across many CKA cells.
#[derive(Clone, Debug)]
pub struct CenteredGram {
    kc: Tensor,
    self_hsic: f64,
    tag: SourceTag,
}

impl CenteredGram {
    pub fn new(x: &ActivationMatrix) -> Result<Self> {
        let k = gram(x);
        let kc = center(&k)?;
        let self_hsic = hsic_centered(&kc, &kc);
        let scale: f64 = k.data().iter().map(|v| v * v).sum::<f64>();
        let n = x.n() as f64;
        if !(self_hsic * (n - 1.0) * (n - 1.0) > DEGENERATE_RATIO * scale) {
            return Err(Error::UndefinedSimilarity(format!(
                "{} layer {}: activations have zero centered variance",
                x.tag.model, x.tag.layer
            )));
        }
        Ok(Self {
            kc,
            self_hsic,
            tag: x.tag.clone(),
        })
    }

    pub fn cka(&self, other: &CenteredGram) -> Result<CkaResult> {
        if self.kc.rows() != other.kc.rows() {
            return Err(Error::Dimension {
                op: "cka",
                left: self.kc.shape().to_vec(),
                right: other.kc.shape().to_vec(),
            });
        }
        let value = hsic_centered(&self.kc, &other.kc) / (self.self_hsic * other.self_hsic).sqrt();
        Ok(CkaResult {
            value,
            n: self.kc.rows(),
            x_tag: self.tag.clone(),
            y_tag: other.tag.clone(),
        })
    }
}

pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<CkaResult> {
    if x.n() != y.n() {
        return Err(Error::Dimension {
            op: "cka",
            left: x.x.shape().to_vec(),
            right: y.x.shape().to_vec(),
        });
    }
    CenteredGram::new(x)?.cka(&CenteredGram::new(y)?)
}

/// Seeded uniform subsample of at most `cap` row indices, in increasing order.
pub fn subsample_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = sample(&mut seeded(seed, "cka-subsample"), n, cap).into_vec();
    idx.sort_unstable();
    idx
}

pub fn take_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    Intra,
    Inter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSimilarityMatrix {
    pub mode: SimilarityMode,
    pub dataset: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major CKA values; entry `(i, j)` compares layer `i` of A with layer `j` of B.
    pub values: Vec<f64>,
    pub n: usize,
}

impl LayerSimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Mean over cells with `|i - j| <= 1` and over cells with `|i - j| >= 2`.
    pub fn band_means(&self) -> (f64, f64) {
        let (mut near, mut nn, mut far, mut nf) = (0.0, 0, 0.0, 0);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i.abs_diff(j) <= 1 {
                    near += self.get(i, j);
                    nn += 1;
                } else {
                    far += self.get(i, j);
                    nf += 1;
                }
            }
        }
        (near / nn.max(1) as f64, far / nf.max(1) as f64)
    }

    /// Header row and column carry layer indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for j in 0..self.cols {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.rows {
            let _ = write!(s, "{i}");
            for j in 0..self.cols {
                let _ = write!(s, ",{:.12}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// CKA between every MLP-output layer of `a` and of `b` on the same batch.
/// Positions are the unmasked tokens, subsampled to at most `cap` rows.
#[allow(clippy::too_many_arguments)]
pub fn layer_similarity(
    a: &TransformerModel,
    b: &TransformerModel,
    tokens: &[usize],
    batch: usize,
    mask: Option<&[bool]>,
    dataset: &str,
    cap: usize,
    seed: u64,
) -> Result<LayerSimilarityMatrix> {
    let intra = std::ptr::eq(a, b) || a.full_hash() == b.full_hash();
    let grams = |m: &TransformerModel, name: &str| -> Result<Vec<CenteredGram>> {
        let (_, trace) = m.forward_with_trace(tokens, batch, mask)?;
        let keep = subsample_rows(trace.layers[0].rows(), cap, seed);
        trace
            .layers
            .iter()
            .enumerate()
            .map(|(layer, t)| {
                let tag = SourceTag {
                    model: name.to_string(),
                    layer,
                    dataset: dataset.to_string(),
                };
                CenteredGram::new(&ActivationMatrix::new(take_rows(t, &keep)?, tag)?)
            })
            .collect()
    };
    let ga = grams(a, "a")?;
    let gb = if intra { ga.clone() } else { grams(b, "b")? };
    let (rows, cols) = (ga.len(), gb.len());
    let mut values = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            values[i * cols + j] = if intra && j < i {
                values[j * cols + i]
            } else {
                ga[i].cka(&gb[j])?.value
            };
        }
    }
    Ok(LayerSimilarityMatrix {
        mode: if intra {
            SimilarityMode::Intra
        } else {
            SimilarityMode::Inter
        },
        dataset: dataset.to_string(),
        rows,
        cols,
        values,
        n: ga[0].kc.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn am(rows: usize, cols: usize, data: Vec<f64>) -> ActivationMatrix {
        ActivationMatrix::new(Tensor::new(&[rows, cols], data).unwrap(), SourceTag::default()).unwrap()
    }

    #[test]
    fn gram_examples() {
        let k = gram(&am(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(k.data(), &[1.0, 0.0, 0.0, 1.0]);
        let k = gram(&am(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        assert!(k.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn constant_and_degenerate() {
        let c = Tensor::full(&[4, 4], 3.0);
        assert!(center(&c).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        assert!(hsic(&Tensor::identity(4), &c).unwrap().abs() < 1e-15);
        let x = am(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = am(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(cka(&x, &y), Err(Error::UndefinedSimilarity(_))));
        assert!(ActivationMatrix::new(Tensor::zeros(&[1, 3]), SourceTag::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = LayerSimilarityMatrix {
            mode: SimilarityMode::Inter,
            dataset: "d".into(),
            rows: 2,
            cols: 2,
            values: vec![1.0, 0.5, 0.25, 1.0],
            n: 10,
        };
        let csv = m.to_csv();
        assert!(csv.starts_with("layer,0,1\n0,1.000000000000,0.500000000000\n"));
        assert_eq!(m.band_means(), (0.6875, 0.0));
    }
}
