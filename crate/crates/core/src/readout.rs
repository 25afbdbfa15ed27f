//! Output layer shared by the recurrent recommenders: hidden state → item
//! scores, either over the whole catalog or over a sampled item subset.

use crate::error::{Error, Result};
use crate::loss::{row_loss, LossKind, ScoreRow};
use crate::tensor::{glorot_uniform, softmax, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `d_h x n_items`
    pub weight: Matrix,
    /// `1 x n_items`
    pub bias: Matrix,
}

impl Readout {
    pub fn zeros(d_h: usize, n_items: usize) -> Self {
        Readout {
            weight: Matrix::zeros(d_h, n_items),
            bias: Matrix::zeros(1, n_items),
        }
    }

    pub fn init(rng: &mut Rng, d_h: usize, n_items: usize) -> Self {
        Readout {
            weight: glorot_uniform(d_h, n_items, rng),
            bias: Matrix::zeros(1, n_items),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Readout::zeros(self.hidden_dim(), self.n_items())
    }

    pub fn n_items(&self) -> usize {
        self.weight.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Raw scores for every item. Summation order matches
    /// [`Readout::sampled_logits`], so shared coordinates agree bit for bit.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let n = self.n_items();
        let mut out = vec![0.0; n];
        for (k, &hk) in h.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(k)) {
                *o += hk * w;
            }
        }
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        out
    }

    /// `h · W[:, items] + b[items]`, shape `rows(h) x len(items)`.
    pub fn sampled_logits(&self, h: &Matrix, items: &[usize]) -> Result<Matrix> {
        self.check(h, items)?;
        let mut out = Matrix::zeros(h.rows(), items.len());
        for r in 0..h.rows() {
            let hr = h.row(r);
            for (c, &item) in items.iter().enumerate() {
                let mut acc = 0.0;
                for (k, &hk) in hr.iter().enumerate() {
                    acc += hk * self.weight.get(k, item);
                }
                out.set(r, c, acc + self.bias.get(0, item));
            }
        }
        Ok(out)
    }

    /// Accumulates into `grads` and returns the gradient w.r.t. `h`.
    pub fn sampled_backward(
        &self,
        h: &Matrix,
        items: &[usize],
        d_logits: &Matrix,
        grads: &mut Readout,
    ) -> Result<Matrix> {
        self.check(h, items)?;
        if d_logits.shape() != (h.rows(), items.len()) {
            return Err(Error::shape("Readout::sampled_backward", "gradient shape"));
        }
        let d_h_dim = self.hidden_dim();
        let mut d_h = Matrix::zeros(h.rows(), d_h_dim);
        for r in 0..h.rows() {
            for (c, &item) in items.iter().enumerate() {
                let g = d_logits.get(r, c);
                if g == 0.0 {
                    continue;
                }
                for k in 0..d_h_dim {
                    let w = self.weight.get(k, item);
                    d_h.data_mut()[r * d_h_dim + k] += g * w;
                    let gw = grads.weight.get(k, item) + g * h.get(r, k);
                    grads.weight.set(k, item, gw);
                }
                let gb = grads.bias.get(0, item) + g;
                grads.bias.set(0, item, gb);
            }
        }
        Ok(d_h)
    }

    fn check(&self, h: &Matrix, items: &[usize]) -> Result<()> {
        if h.cols() != self.hidden_dim() {
            return Err(Error::shape(
                "Readout",
                format!("hidden has {} columns, expected {}", h.cols(), self.hidden_dim()),
            ));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= self.n_items()) {
            return Err(Error::ItemOutOfRange {
                index: bad,
                n_items: self.n_items(),
            });
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Final score nonlinearity: `tanh` for the pairwise losses, softmax for
/// cross-entropy.
pub fn score_activation(loss: LossKind, logits: &mut [f64]) {
    match loss {
        LossKind::Top1 | LossKind::Bpr => logits.iter_mut().for_each(|v| *v = v.tanh()),
        LossKind::Xent => {
            let p = softmax(logits);
            logits.copy_from_slice(&p);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampledLoss {
    /// Mean loss over the rows that had at least one negative.
    pub loss: f64,
    pub rows: usize,
    /// Gradient of `loss` w.r.t. the logits.
    pub d_logits: Matrix,
}

/// In-batch negative loss. Row `i` of `logits` scores lane `i`'s hidden state
/// against every lane's target; its positive is column `i`, its negatives are
/// the other columns whose target differs from lane `i`'s. Rows without any
/// negative contribute nothing.
pub fn sampled_loss(logits: &Matrix, targets: &[usize], kind: LossKind) -> SampledLoss {
    let n = targets.len();
    assert_eq!(logits.shape(), (n, n), "square in-batch logits expected");
    let mut d_logits = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut rows = 0;
    let squash = kind != LossKind::Xent;
    for i in 0..n {
        let cols: Vec<usize> = (0..n).filter(|&j| j != i && targets[j] != targets[i]).collect();
        if cols.is_empty() {
            continue;
        }
        let score = |j: usize| {
            let v = logits.get(i, j);
            if squash {
                v.tanh()
            } else {
                v
            }
        };
        let row = ScoreRow {
            positive: score(i),
            negatives: cols.iter().map(|&j| score(j)).collect(),
        };
        let (l, g) = row_loss(kind, &row);
        total += l;
        rows += 1;
        for (&j, &gj) in std::iter::once(&i).chain(&cols).zip(&g) {
            let d = if squash {
                let t = logits.get(i, j).tanh();
                gj * (1.0 - t * t)
            } else {
                gj
            };
            d_logits.set(i, j, d_logits.get(i, j) + d);
        }
    }
    if rows > 0 {
        let inv = 1.0 / rows as f64;
        d_logits.data_mut().iter_mut().for_each(|v| *v *= inv);
        total *= inv;
    }
    SampledLoss {
        loss: total,
        rows,
        d_logits,
    }
}
