//! Pairwise and listwise ranking losses over one positive score and a set of
//! sampled negative scores, with exact gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{sigmoid, softmax};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Top1,
    Bpr,
    Xent,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Top1 => "top1",
            LossKind::Bpr => "bpr",
            LossKind::Xent => "xent",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "top1" => Ok(LossKind::Top1),
            "bpr" => Ok(LossKind::Bpr),
            "xent" | "cross-entropy" => Ok(LossKind::Xent),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected top1, bpr or xent)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
}

/// `L = 1/N Σ_j σ(r_j − r_i) + σ(r_j²)`.
pub fn top1_loss(row: &ScoreRow) -> LossGrad {
    let n = row.negatives.len();
    assert!(n > 0, "TOP1 needs at least one negative");
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_pos = 0.0;
    let mut d_negs = Vec::with_capacity(n);
    for &neg in &row.negatives {
        let rank = sigmoid(neg - row.positive);
        let reg = sigmoid(neg * neg);
        loss += rank + reg;
        let d_rank = rank * (1.0 - rank);
        let d_reg = reg * (1.0 - reg) * 2.0 * neg;
        d_pos -= d_rank;
        d_negs.push((d_rank + d_reg) * inv);
    }
    LossGrad {
        loss: loss * inv,
        d_positive: d_pos * inv,
        d_negatives: d_negs,
    }
}

/// The two TOP1 summands separately: `(rank term, regularizer)`.
pub fn top1_terms(row: &ScoreRow) -> (f64, f64) {
    let inv = 1.0 / row.negatives.len() as f64;
    let rank: f64 = row.negatives.iter().map(|&n| sigmoid(n - row.positive)).sum();
    let reg: f64 = row.negatives.iter().map(|&n| sigmoid(n * n)).sum();
    (rank * inv, reg * inv)
}

/// `−ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `L = −1/N Σ_j ln σ(r_i − r_j)`.
pub fn bpr_loss(row: &ScoreRow) -> LossGrad {
    let n = row.negatives.len();
    assert!(n > 0, "BPR needs at least one negative");
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_pos = 0.0;
    let mut d_negs = Vec::with_capacity(n);
    for &neg in &row.negatives {
        let diff = row.positive - neg;
        loss += neg_log_sigmoid(diff);
        // d/d diff of −ln σ(diff) = −(1 − σ(diff)) = −σ(−diff)
        let g = sigmoid(-diff);
        d_pos -= g;
        d_negs.push(g * inv);
    }
    LossGrad {
        loss: loss * inv,
        d_positive: d_pos * inv,
        d_negatives: d_negs,
    }
}

/// Softmax cross-entropy over the sampled score set. Returns the loss and the
/// gradient for every score, positive included.
pub fn xent_loss(scores: &[f64], positive_index: usize) -> (f64, Vec<f64>) {
    assert!(scores.len() >= 2, "cross-entropy needs at least two scores");
    assert!(positive_index < scores.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let loss = log_norm - scores[positive_index];
    let mut grad = softmax(scores);
    grad[positive_index] -= 1.0;
    (loss, grad)
}

/// Applies `kind` to a row laid out as `[positive, negatives...]`, returning
/// the loss and gradients in the same layout.
pub fn row_loss(kind: LossKind, row: &ScoreRow) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Top1 | LossKind::Bpr => {
            let lg = if kind == LossKind::Top1 {
                top1_loss(row)
            } else {
                bpr_loss(row)
            };
            let mut g = Vec::with_capacity(row.negatives.len() + 1);
            g.push(lg.d_positive);
            g.extend(lg.d_negatives);
            (lg.loss, g)
        }
        LossKind::Xent => {
            let mut scores = Vec::with_capacity(row.negatives.len() + 1);
            scores.push(row.positive);
            scores.extend_from_slice(&row.negatives);
            xent_loss(&scores, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn fd_check(kind: LossKind, row: &ScoreRow) -> f64 {
        let h = 1e-6;
        let (_, g) = row_loss(kind, row);
        let mut flat = vec![row.positive];
        flat.extend_from_slice(&row.negatives);
        let eval = |v: &[f64]| {
            row_loss(
                kind,
                &ScoreRow {
                    positive: v[0],
                    negatives: v[1..].to_vec(),
                },
            )
            .0
        };
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += h;
            m[i] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let scale = g[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max((g[i] - num).abs() / scale);
        }
        worst
    }

    #[test]
    fn top1_fixed_values() {
        let l = top1_loss(&ScoreRow {
            positive: 0.0,
            negatives: vec![0.0],
        });
        assert_eq!(l.loss, 1.0);

        let l = top1_loss(&ScoreRow {
            positive: 50.0,
            negatives: vec![0.0],
        });
        assert!((l.loss - 0.5).abs() < 1e-15);

        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = 0.5 * (s(-0.4) + s(0.01) + s(-0.8) + s(0.09));
        let l = top1_loss(&ScoreRow {
            positive: 0.5,
            negatives: vec![0.1, -0.3],
        });
        assert!((l.loss - want).abs() < 1e-15);
    }

    #[test]
    fn bpr_fixed_values() {
        let l = bpr_loss(&ScoreRow {
            positive: 0.7,
            negatives: vec![0.7],
        });
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
        let l = bpr_loss(&ScoreRow {
            positive: 10.0,
            negatives: vec![0.0],
        });
        // −ln σ(10) = ln(1 + e^{−10})
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((l.loss - want).abs() < 1e-12 * want);
        assert!((l.loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn xent_fixed_values() {
        let (l, g) = xent_loss(&[0.3, 0.3], 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);

        let e = std::f64::consts::E;
        let (l, g) = xent_loss(&[1.0, 0.0, 0.0], 0);
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        for kind in [LossKind::Top1, LossKind::Bpr, LossKind::Xent] {
            for _ in 0..10 {
                let n = 1 + rng.below(6);
                let row = ScoreRow {
                    positive: rng.uniform_range(-2.0, 2.0),
                    negatives: (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
                };
                let worst = fd_check(kind, &row);
                assert!(worst < 1e-6, "{kind}: {worst}");
            }
        }
    }

    #[test]
    fn parse_loss_names() {
        assert_eq!("top1".parse::<LossKind>().unwrap(), LossKind::Top1);
        assert_eq!("BPR".parse::<LossKind>().unwrap(), LossKind::Bpr);
        assert_eq!("xent".parse::<LossKind>().unwrap(), LossKind::Xent);
        assert!("hinge".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn top1_is_bounded(pos in -20.0f64..20.0, negs in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
            let l = top1_loss(&ScoreRow { positive: pos, negatives: negs });
            prop_assert!(l.loss >= 0.0 && l.loss <= 2.0);
        }

        #[test]
        fn top1_rank_term_is_translation_invariant(
            pos in -5.0f64..5.0, negs in proptest::collection::vec(-5.0f64..5.0, 1..10), c in -3.0f64..3.0
        ) {
            let row = ScoreRow { positive: pos, negatives: negs.clone() };
            let moved = ScoreRow { positive: pos + c, negatives: negs.iter().map(|n| n + c).collect() };
            let (a, _) = top1_terms(&row);
            let (b, _) = top1_terms(&moved);
            prop_assert!((a - b).abs() < 1e-12);
            let (rank, reg) = top1_terms(&row);
            prop_assert!((rank + reg - top1_loss(&row).loss).abs() < 1e-12);
        }
    }
}
