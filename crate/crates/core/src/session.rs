//! Session-only GRU recommender trained with session-parallel mini-batches
//! and in-batch negative sampling.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::gru::{gru_backward, gru_forward, gru_forward_with, GatePreacts, GruInput, GruParams};
use crate::loss::LossKind;
use crate::readout::{sampled_loss, score_activation, Readout};
use crate::tensor::{dropout_mask, AdaGradMomentum, Matrix, Optimizer, Rng};

/// RNG stream used for parameter initialization.
pub(crate) const STREAM_INIT: u64 = 0;
/// RNG stream used for the per-epoch ordering of sessions or users.
pub(crate) const STREAM_ORDER: u64 = 1;
/// RNG stream used for dropout masks.
pub(crate) const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Dropout on the session-level hidden state fed to the output layer.
    pub dropout_hidden: f64,
    pub seed: u64,
    pub hidden_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Top1,
            batch_size: 50,
            epochs: 10,
            learning_rate: 0.1,
            momentum: 0.0,
            dropout_hidden: 0.0,
            seed: 42,
            hidden_size: 100,
        }
    }
}

pub(crate) fn check_dropout(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 so every lane has a negative".into(),
            ));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        check_dropout("dropout_hidden", self.dropout_hidden)
    }

    pub(crate) fn optimizer(&self) -> Optimizer {
        Optimizer::new(AdaGradMomentum::new(self.learning_rate, self.momentum))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over steps of the per-step (row-averaged) loss.
    pub mean_loss: f64,
    pub steps: usize,
    pub targets: usize,
}

/// One step of a session-parallel schedule. Only active lanes appear, in
/// ascending lane order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionBatch {
    pub lanes: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// The lane started a new session at this step; its hidden state resets.
    pub starts: Vec<bool>,
    /// This is the lane's last step in its current session.
    pub ends: Vec<bool>,
}

impl SessionBatch {
    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

/// Session-parallel schedule: each lane walks one session; when it runs out,
/// the next session in order takes its place. Lanes with nothing left to
/// take drop out.
#[derive(Clone, Debug)]
pub struct SessionParallel<'a> {
    sessions: Vec<&'a [usize]>,
    next: usize,
    lanes: Vec<Option<(usize, usize)>>,
    fresh: Vec<bool>,
}

impl<'a> SessionParallel<'a> {
    /// Sessions shorter than two events carry no target and are skipped.
    pub fn new(sessions: Vec<&'a [usize]>, batch_size: usize) -> Self {
        let sessions: Vec<&[usize]> = sessions.into_iter().filter(|s| s.len() >= 2).collect();
        let mut width = batch_size.max(1);
        if sessions.len() < width {
            warn!(
                "batch size {batch_size} exceeds the {} usable sessions; clamping",
                sessions.len()
            );
            width = sessions.len();
        }
        let mut it = SessionParallel {
            sessions,
            next: 0,
            lanes: vec![None; width],
            fresh: vec![true; width],
        };
        for lane in 0..width {
            it.lanes[lane] = it.next_session();
        }
        it
    }

    pub fn width(&self) -> usize {
        self.lanes.len()
    }

    fn next_session(&mut self) -> Option<(usize, usize)> {
        let s = self.next;
        if s < self.sessions.len() {
            self.next += 1;
            Some((s, 0))
        } else {
            None
        }
    }
}

impl Iterator for SessionParallel<'_> {
    type Item = SessionBatch;

    fn next(&mut self) -> Option<SessionBatch> {
        let mut b = SessionBatch {
            lanes: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            starts: Vec::new(),
            ends: Vec::new(),
        };
        for lane in 0..self.lanes.len() {
            let Some((s, cur)) = self.lanes[lane] else {
                continue;
            };
            let items = self.sessions[s];
            let end = cur + 2 == items.len();
            b.lanes.push(lane);
            b.inputs.push(items[cur]);
            b.targets.push(items[cur + 1]);
            b.starts.push(self.fresh[lane]);
            b.ends.push(end);
            self.fresh[lane] = false;
            if end {
                self.lanes[lane] = self.next_session();
                self.fresh[lane] = true;
            } else {
                self.lanes[lane] = Some((s, cur + 1));
            }
        }
        (!b.is_empty()).then_some(b)
    }
}

/// Session-parallel schedule over all sessions of `corpus` in an order
/// shuffled by `rng`.
pub fn session_parallel_batches<'a>(
    corpus: &'a Corpus,
    batch_size: usize,
    rng: &mut Rng,
) -> SessionParallel<'a> {
    let mut sessions: Vec<&[usize]> = corpus.sessions().map(|s| s.items.as_slice()).collect();
    rng.shuffle(&mut sessions);
    SessionParallel::new(sessions, batch_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRnn {
    pub gru: GruParams,
    pub readout: Readout,
    /// Selects the score activation.
    pub loss: LossKind,
}

impl SessionRnn {
    pub fn new(n_items: usize, hidden: usize, loss: LossKind, rng: &mut Rng) -> Self {
        SessionRnn {
            gru: GruParams::init(rng, n_items, hidden),
            readout: Readout::init(rng, hidden, n_items),
            loss,
        }
    }

    pub fn zeros(n_items: usize, hidden: usize, loss: LossKind) -> Self {
        SessionRnn {
            gru: GruParams::zeros(n_items, hidden),
            readout: Readout::zeros(hidden, n_items),
            loss,
        }
    }

    pub fn n_items(&self) -> usize {
        self.readout.n_items()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.hidden_dim()]
    }

    /// Consumes one item without scoring.
    pub fn advance(&self, item: usize, state: &[f64]) -> Result<Vec<f64>> {
        let h = Matrix::row_vector(state);
        let (h_new, _) = gru_forward(&self.gru, GruInput::OneHot(&[item]), &h)?;
        Ok(h_new.into_vec())
    }

    /// Activated scores for the whole catalog from a hidden state.
    pub fn scores(&self, state: &[f64]) -> Vec<f64> {
        let mut s = self.readout.logits(state);
        score_activation(self.loss, &mut s);
        s
    }

    /// Consumes `item` and scores every catalog item as the next event.
    pub fn score_step(&self, item: usize, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let next = self.advance(item, state)?;
        Ok((self.scores(&next), next))
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> =
            self.gru.named().into_iter().map(|(n, m)| (format!("gru.{n}"), m)).collect();
        out.extend(self.readout.named().into_iter().map(|(n, m)| (format!("out.{n}"), m)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = self
            .gru
            .named_mut()
            .into_iter()
            .map(|(n, m)| (format!("gru.{n}"), m))
            .collect();
        out.extend(
            self.readout
                .named_mut()
                .into_iter()
                .map(|(n, m)| (format!("out.{n}"), m)),
        );
        out
    }
}

pub(crate) struct StepOutput {
    pub loss: f64,
    pub rows: usize,
    pub h_new: Matrix,
    pub d_h_prev: Matrix,
    pub d_preacts: GatePreacts,
}

/// Forward, in-batch loss and backward for one step of a GRU followed by the
/// readout. `out_mask` multiplies the GRU output before the readout; the
/// returned `h_new` is unmasked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn supervised_step(
    gru: &GruParams,
    readout: &Readout,
    loss: LossKind,
    inputs: &[usize],
    extra: Option<&GatePreacts>,
    h_prev: &Matrix,
    targets: &[usize],
    out_mask: &Matrix,
    g_gru: &mut GruParams,
    g_out: &mut Readout,
) -> Result<StepOutput> {
    let (h_new, tape) = gru_forward_with(gru, GruInput::OneHot(inputs), extra, h_prev)?;
    let out = h_new.hadamard(out_mask)?;
    let logits = readout.sampled_logits(&out, targets)?;
    let sl = sampled_loss(&logits, targets, loss);
    let d_out = readout.sampled_backward(&out, targets, &sl.d_logits, g_out)?;
    let d_h = d_out.hadamard(out_mask)?;
    let back = gru_backward(gru, &tape, &d_h, g_gru)?;
    Ok(StepOutput {
        loss: sl.loss,
        rows: sl.rows,
        h_new,
        d_h_prev: back.d_h_prev,
        d_preacts: back.d_preacts,
    })
}

pub(crate) fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

pub fn train_session_rnn(train: &Corpus, cfg: &TrainConfig) -> Result<SessionRnn> {
    train_session_rnn_with(train, cfg, |_| {}).map(|(m, _)| m)
}

/// Trains and reports each finished epoch to `on_epoch`.
pub fn train_session_rnn_with(
    train: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(SessionRnn, Vec<EpochStats>)> {
    cfg.validate()?;
    train.validate()?;
    if train.n_events() == 0 {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    let mut init_rng = Rng::with_stream(cfg.seed, STREAM_INIT);
    let mut model = SessionRnn::new(train.n_items(), cfg.hidden_size, cfg.loss, &mut init_rng);
    let mut order_rng = Rng::with_stream(cfg.seed, STREAM_ORDER);
    let mut drop_rng = Rng::with_stream(cfg.seed, STREAM_DROPOUT);
    let mut opt = cfg.optimizer();
    let mut g_gru = model.gru.zeros_like();
    let mut g_out = model.readout.zeros_like();
    let d = cfg.hidden_size;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let schedule = session_parallel_batches(train, cfg.batch_size, &mut order_rng);
        let mut hidden = Matrix::zeros(schedule.width(), d);
        let (mut total, mut steps, mut targets) = (0.0, 0, 0);
        for batch in schedule {
            let n = batch.len();
            let mut h_prev = hidden.select_rows(&batch.lanes);
            for (row, &start) in batch.starts.iter().enumerate() {
                if start {
                    h_prev.row_mut(row).fill(0.0);
                }
            }
            let mask = dropout_mask(n, d, cfg.dropout_hidden, &mut drop_rng);
            zero_grads(&mut g_gru, &mut g_out);
            let out = supervised_step(
                &model.gru,
                &model.readout,
                cfg.loss,
                &batch.inputs,
                None,
                &h_prev,
                &batch.targets,
                &mask,
                &mut g_gru,
                &mut g_out,
            )?;
            if !out.loss.is_finite() {
                return Err(diverged(epoch, steps, out.loss));
            }
            targets += n;
            if out.rows > 0 {
                total += out.loss;
                steps += 1;
                apply(&mut opt, &mut model, &g_gru, &g_out);
            }
            for (row, &lane) in batch.lanes.iter().enumerate() {
                hidden.row_mut(lane).copy_from_slice(out.h_new.row(row));
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
            steps,
            targets,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

fn zero_grads(g_gru: &mut GruParams, g_out: &mut Readout) {
    for (_, m) in g_gru.named_mut() {
        m.fill(0.0);
    }
    for (_, m) in g_out.named_mut() {
        m.fill(0.0);
    }
}

fn apply(opt: &mut Optimizer, model: &mut SessionRnn, g_gru: &GruParams, g_out: &Readout) {
    let params: Vec<&mut Matrix> = model.named_mut().into_iter().map(|(_, m)| m).collect();
    let grads: Vec<&Matrix> = g_gru
        .named()
        .into_iter()
        .chain(g_out.named())
        .map(|(_, m)| m)
        .collect();
    opt.apply(params, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Session;
    use crate::tensor::sigmoid;

    fn corpus_of(n_items: usize, users: Vec<Vec<Vec<usize>>>) -> Corpus {
        Corpus::from_sessions(
            n_items,
            users
                .into_iter()
                .map(|u| u.into_iter().map(Session::from_items).collect())
                .collect(),
        )
    }

    #[test]
    fn zero_model_scores_uniformly() {
        let m = SessionRnn::zeros(4, 3, LossKind::Top1);
        let (s, h) = m.score_step(2, &m.initial_state()).unwrap();
        assert_eq!(s, vec![0.0; 4]);
        assert_eq!(h, vec![0.0; 3]);
        let m = SessionRnn::zeros(4, 3, LossKind::Xent);
        let (s, _) = m.score_step(1, &m.initial_state()).unwrap();
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(m.score_step(4, &m.initial_state()).is_err());
    }

    #[test]
    fn score_step_matches_scalar_oracle() {
        // d_h = 2, n_items = 3
        let mut rng = Rng::new(8);
        let mut m = SessionRnn::new(3, 2, LossKind::Top1, &mut rng);
        for (_, p) in m.named_mut() {
            for v in p.data_mut() {
                *v = rng.uniform_range(-1.0, 1.0);
            }
        }
        let h0 = [0.3, -0.6];
        let item = 1;
        let (scores, h1) = m.score_step(item, &h0).unwrap();
        let g = &m.gru;
        let mut want_h = [0.0; 2];
        for j in 0..2 {
            let az = g.w_z.get(item, j) + h0[0] * g.u_z.get(0, j) + h0[1] * g.u_z.get(1, j) + g.b_z.get(0, j);
            let z = sigmoid(az);
            let r: Vec<f64> = (0..2)
                .map(|k| {
                    sigmoid(g.w_r.get(item, k) + h0[0] * g.u_r.get(0, k) + h0[1] * g.u_r.get(1, k) + g.b_r.get(0, k))
                })
                .collect();
            let ah = g.w_h.get(item, j)
                + r[0] * h0[0] * g.u_h.get(0, j)
                + r[1] * h0[1] * g.u_h.get(1, j)
                + g.b_h.get(0, j);
            want_h[j] = (1.0 - z) * h0[j] + z * ah.tanh();
        }
        for j in 0..2 {
            assert!((h1[j] - want_h[j]).abs() < 1e-14);
        }
        for i in 0..3 {
            let logit = want_h[0] * m.readout.weight.get(0, i)
                + want_h[1] * m.readout.weight.get(1, i)
                + m.readout.bias.get(0, i);
            assert!((scores[i] - logit.tanh()).abs() < 1e-14);
        }
        let again = m.score_step(item, &h0).unwrap();
        assert_eq!(again.0, scores);
    }

    #[test]
    fn small_schedules() {
        let c = corpus_of(6, vec![vec![vec![0, 1, 2]], vec![vec![3, 4, 5]]]);
        let steps: Vec<_> = SessionParallel::new(c.sessions().map(|s| s.items.as_slice()).collect(), 2).collect();
        assert_eq!(steps.len(), 2);
        assert!(steps.iter().all(|b| b.len() == 2));
        assert_eq!(steps[0].targets, vec![1, 4]);
        assert_eq!(steps[0].starts, vec![true, true]);
        assert_eq!(steps[1].ends, vec![true, true]);

        let pair = [7usize, 8];
        let steps: Vec<_> = SessionParallel::new(vec![&pair[..]], 3).collect();
        assert_eq!(steps.len(), 1);
        assert_eq!((steps[0].inputs[0], steps[0].targets[0]), (7, 8));
    }

    #[test]
    fn lane_refill_marks_start() {
        let a = [0usize, 1];
        let b = [2usize, 3, 4];
        let c = [5usize, 6];
        let steps: Vec<_> = SessionParallel::new(vec![&a[..], &b[..], &c[..]], 2).collect();
        // lane 0: a then c; lane 1: b
        assert_eq!(steps[1].lanes, vec![0, 1]);
        assert_eq!(steps[1].inputs, vec![5, 3]);
        assert_eq!(steps[1].starts, vec![true, false]);
    }

    fn successor_corpus(n_items: usize, n_sessions: usize, rng: &mut Rng) -> Corpus {
        let sessions = (0..n_sessions)
            .map(|_| {
                let start = rng.below(n_items);
                let len = 3 + rng.below(4);
                Session::from_items((0..len).map(|k| (start + k) % n_items).collect())
            })
            .collect::<Vec<_>>();
        Corpus::from_sessions(n_items, sessions.into_iter().map(|s| vec![s]).collect())
    }

    #[test]
    fn learns_deterministic_successor_rule() {
        let mut rng = Rng::new(1);
        let n = 12;
        let c = successor_corpus(n, 300, &mut rng);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 5,
            hidden_size: 16,
            learning_rate: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m, stats) = train_session_rnn_with(&c, &cfg, |_| {}).unwrap();
        assert!(stats[2].mean_loss < stats[0].mean_loss);
        let hits = (0..n)
            .filter(|&k| {
                let (s, _) = m.score_step(k, &m.initial_state()).unwrap();
                let best = (0..n).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
                best == (k + 1) % n
            })
            .count();
        assert!(hits * 10 >= n * 9, "{hits}/{n}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(2);
        let c = successor_corpus(10, 40, &mut rng);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            hidden_size: 6,
            dropout_hidden: 0.2,
            ..TrainConfig::default()
        };
        let a = train_session_rnn(&c, &cfg).unwrap();
        let b = train_session_rnn(&c, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            dropout_hidden: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = Rng::new(4);
        let c = successor_corpus(8, 20, &mut rng);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: f64::MAX,
            momentum: 0.9,
            epochs: 3,
            hidden_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(train_session_rnn(&c, &cfg), Err(Error::Diverged { .. })));
    }
}
