//! Hierarchical recurrent recommender: a user-level GRU carries a user state
//! `c` across sessions and initializes (and optionally feeds) the
//! session-level GRU. Trained with user-parallel mini-batches.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, UserHistory};
use crate::error::{Error, Result};
use crate::gru::{gru_backward, gru_forward, gru_forward_with, GruInput, GruParams, GruTape, InputBlock};
use crate::loss::LossKind;
use crate::readout::{score_activation, Readout};
use crate::session::{
    check_dropout, diverged, supervised_step, EpochStats, SessionRnn, TrainConfig, STREAM_DROPOUT,
    STREAM_INIT, STREAM_ORDER,
};
use crate::tensor::{dropout_mask, glorot_uniform, Matrix, Optimizer, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The user state only initializes each session.
    #[default]
    Init,
    /// The user state also enters every session step as extra input.
    All,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Init => "init",
            Variant::All => "all",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "init" => Ok(Variant::Init),
            "all" => Ok(Variant::All),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected init or all)"))),
        }
    }
}

/// When the user-GRU gradient collected during a session is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserGradMode {
    /// Collected over the session and applied with the session's last step.
    #[default]
    Accumulate,
    /// Applied with every step that produced it.
    PerStep,
}

impl FromStr for UserGradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accumulate" => Ok(UserGradMode::Accumulate),
            "per-step" => Ok(UserGradMode::PerStep),
            other => Err(Error::Config(format!(
                "unknown user gradient mode `{other}` (expected accumulate or per-step)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrnnConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub variant: Variant,
    /// User-state size; `0` means the session hidden size.
    pub user_hidden: usize,
    pub dropout_user: f64,
    pub dropout_init: f64,
    pub user_grad: UserGradMode,
}

impl Default for HrnnConfig {
    fn default() -> Self {
        HrnnConfig {
            train: TrainConfig::default(),
            variant: Variant::Init,
            user_hidden: 0,
            dropout_user: 0.0,
            dropout_init: 0.0,
            user_grad: UserGradMode::Accumulate,
        }
    }
}

impl HrnnConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        check_dropout("dropout_user", self.dropout_user)?;
        check_dropout("dropout_init", self.dropout_init)
    }

    pub fn user_dim(&self) -> usize {
        if self.user_hidden == 0 {
            self.train.hidden_size
        } else {
            self.user_hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrnnModel {
    /// Item one-hot → session state.
    pub session_gru: GruParams,
    /// Last session state → user state.
    pub user_gru: GruParams,
    /// `d_usr x d_ses`
    pub w_init: Matrix,
    /// `1 x d_ses`
    pub b_init: Matrix,
    /// Extra user-state input of the session GRU; present for [`Variant::All`].
    pub context: Option<InputBlock>,
    pub readout: Readout,
    pub variant: Variant,
    pub loss: LossKind,
}

impl HrnnModel {
    pub fn new(
        n_items: usize,
        d_ses: usize,
        d_usr: usize,
        variant: Variant,
        loss: LossKind,
        rng: &mut Rng,
    ) -> Self {
        let session_gru = GruParams::init(rng, n_items, d_ses);
        let user_gru = GruParams::init(rng, d_ses, d_usr);
        let w_init = glorot_uniform(d_usr, d_ses, rng);
        let context = (variant == Variant::All).then(|| InputBlock::init(rng, d_usr, d_ses));
        let readout = Readout::init(rng, d_ses, n_items);
        HrnnModel {
            session_gru,
            user_gru,
            w_init,
            b_init: Matrix::zeros(1, d_ses),
            context,
            readout,
            variant,
            loss,
        }
    }

    pub fn zeros(n_items: usize, d_ses: usize, d_usr: usize, variant: Variant, loss: LossKind) -> Self {
        HrnnModel {
            session_gru: GruParams::zeros(n_items, d_ses),
            user_gru: GruParams::zeros(d_ses, d_usr),
            w_init: Matrix::zeros(d_usr, d_ses),
            b_init: Matrix::zeros(1, d_ses),
            context: (variant == Variant::All).then(|| InputBlock::zeros(d_usr, d_ses)),
            readout: Readout::zeros(d_ses, n_items),
            variant,
            loss,
        }
    }

    /// Same session GRU and output layer as `rnn`, every user-side weight
    /// zero.
    pub fn from_session_rnn(rnn: &SessionRnn, d_usr: usize, variant: Variant) -> Self {
        let mut m = HrnnModel::zeros(rnn.n_items(), rnn.hidden_dim(), d_usr, variant, rnn.loss);
        m.session_gru = rnn.gru.clone();
        m.readout = rnn.readout.clone();
        m
    }

    pub fn zeros_like(&self) -> Self {
        HrnnModel::zeros(self.n_items(), self.session_dim(), self.user_dim(), self.variant, self.loss)
    }

    pub fn n_items(&self) -> usize {
        self.readout.n_items()
    }

    pub fn session_dim(&self) -> usize {
        self.session_gru.hidden_dim()
    }

    pub fn user_dim(&self) -> usize {
        self.user_gru.hidden_dim()
    }

    /// One user-GRU step on the last hidden state of a finished session.
    pub fn update_user_state(&self, s_last: &[f64], c_prev: &[f64]) -> Result<Vec<f64>> {
        let (c, _) = gru_forward(
            &self.user_gru,
            GruInput::Dense(&Matrix::row_vector(s_last)),
            &Matrix::row_vector(c_prev),
        )?;
        Ok(c.into_vec())
    }

    /// `tanh(c · W_init + b_init)`.
    pub fn init_session_state(&self, c: &[f64]) -> Result<Vec<f64>> {
        let mut a = Matrix::row_vector(c).matmul(&self.w_init)?;
        a.add_assign(&self.b_init)?;
        Ok(a.map(f64::tanh).into_vec())
    }

    /// Consumes `item` with the user state `c_fixed` held for the session.
    pub fn advance(&self, item: usize, s_prev: &[f64], c_fixed: &[f64]) -> Result<Vec<f64>> {
        let extra = match &self.context {
            Some(ctx) => Some(ctx.project(&Matrix::row_vector(c_fixed))?),
            None => None,
        };
        let (s, _) = gru_forward_with(
            &self.session_gru,
            GruInput::OneHot(&[item]),
            extra.as_ref(),
            &Matrix::row_vector(s_prev),
        )?;
        Ok(s.into_vec())
    }

    pub fn scores(&self, s: &[f64]) -> Vec<f64> {
        let mut out = self.readout.logits(s);
        score_activation(self.loss, &mut out);
        out
    }

    /// Returns `(scores for the next item, new session state)`.
    pub fn hrnn_step(&self, item: usize, s_prev: &[f64], c_fixed: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.advance(item, s_prev, c_fixed)?;
        Ok((self.scores(&s), s))
    }

    /// User state after replaying `sessions` in order, starting from zero.
    /// Sessions shorter than two events are skipped, as in training.
    pub fn replay_history<'a>(&self, sessions: impl IntoIterator<Item = &'a [usize]>) -> Result<Vec<f64>> {
        let mut c = vec![0.0; self.user_dim()];
        for items in sessions {
            if items.len() < 2 {
                continue;
            }
            let mut s = self.init_session_state(&c)?;
            for &item in &items[..items.len() - 1] {
                s = self.advance(item, &s, &c)?;
            }
            c = self.update_user_state(&s, &c)?;
        }
        Ok(c)
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        out.extend(self.session_gru.named().into_iter().map(|(n, m)| (format!("ses.{n}"), m)));
        out.extend(self.user_gru.named().into_iter().map(|(n, m)| (format!("usr.{n}"), m)));
        out.push(("init.w".into(), &self.w_init));
        out.push(("init.b".into(), &self.b_init));
        if let Some(ctx) = &self.context {
            out.extend(ctx.named().into_iter().map(|(n, m)| (format!("ctx.{n}"), m)));
        }
        out.extend(self.readout.named().into_iter().map(|(n, m)| (format!("out.{n}"), m)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        out.extend(
            self.session_gru
                .named_mut()
                .into_iter()
                .map(|(n, m)| (format!("ses.{n}"), m)),
        );
        out.extend(self.user_gru.named_mut().into_iter().map(|(n, m)| (format!("usr.{n}"), m)));
        out.push(("init.w".into(), &mut self.w_init));
        out.push(("init.b".into(), &mut self.b_init));
        if let Some(ctx) = &mut self.context {
            out.extend(ctx.named_mut().into_iter().map(|(n, m)| (format!("ctx.{n}"), m)));
        }
        out.extend(self.readout.named_mut().into_iter().map(|(n, m)| (format!("out.{n}"), m)));
        out
    }
}

/// One step of a user-parallel schedule. Only active lanes appear, in
/// ascending lane order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserBatch {
    pub lanes: Vec<usize>,
    /// Position of the lane's user in the corpus user list.
    pub users: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// First step of a session: the session state is (re)initialized.
    pub session_starts: Vec<bool>,
    /// First step of the user's first session: the user state resets to zero.
    pub user_starts: Vec<bool>,
    pub session_ends: Vec<bool>,
    pub user_ends: Vec<bool>,
}

impl UserBatch {
    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Cursor {
    user: usize,
    session: usize,
    event: usize,
}

/// User-parallel schedule: each lane walks all sessions of one user in
/// order, then admits the next user.
#[derive(Clone, Debug)]
pub struct UserParallel<'a> {
    /// `(corpus position, usable sessions)` per user, in visiting order.
    users: Vec<(usize, Vec<&'a [usize]>)>,
    next: usize,
    lanes: Vec<Option<Cursor>>,
}

impl<'a> UserParallel<'a> {
    /// `order` lists positions into `users`; sessions shorter than two events
    /// and users left without sessions are skipped.
    pub fn new(users: &'a [UserHistory], order: &[usize], batch_size: usize) -> Self {
        let users: Vec<(usize, Vec<&[usize]>)> = order
            .iter()
            .map(|&u| {
                let sessions = users[u]
                    .sessions
                    .iter()
                    .map(|s| s.items.as_slice())
                    .filter(|s| s.len() >= 2)
                    .collect::<Vec<_>>();
                (u, sessions)
            })
            .filter(|(_, s)| !s.is_empty())
            .collect();
        let mut width = batch_size.max(1);
        if users.len() < width {
            warn!(
                "batch size {batch_size} exceeds the {} usable users; clamping",
                users.len()
            );
            width = users.len();
        }
        let mut it = UserParallel {
            users,
            next: 0,
            lanes: vec![None; width],
        };
        for lane in 0..width {
            it.lanes[lane] = it.next_user();
        }
        it
    }

    pub fn width(&self) -> usize {
        self.lanes.len()
    }

    fn next_user(&mut self) -> Option<Cursor> {
        let u = self.next;
        if u < self.users.len() {
            self.next += 1;
            Some(Cursor {
                user: u,
                session: 0,
                event: 0,
            })
        } else {
            None
        }
    }
}

impl Iterator for UserParallel<'_> {
    type Item = UserBatch;

    fn next(&mut self) -> Option<UserBatch> {
        let mut b = UserBatch {
            lanes: Vec::new(),
            users: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            session_starts: Vec::new(),
            user_starts: Vec::new(),
            session_ends: Vec::new(),
            user_ends: Vec::new(),
        };
        for lane in 0..self.lanes.len() {
            let Some(cur) = self.lanes[lane] else {
                continue;
            };
            let (pos, sessions) = &self.users[cur.user];
            let items = sessions[cur.session];
            let session_end = cur.event + 2 == items.len();
            let user_end = session_end && cur.session + 1 == sessions.len();
            b.lanes.push(lane);
            b.users.push(*pos);
            b.inputs.push(items[cur.event]);
            b.targets.push(items[cur.event + 1]);
            b.session_starts.push(cur.event == 0);
            b.user_starts.push(cur.event == 0 && cur.session == 0);
            b.session_ends.push(session_end);
            b.user_ends.push(user_end);
            self.lanes[lane] = if user_end {
                self.next_user()
            } else if session_end {
                Some(Cursor {
                    session: cur.session + 1,
                    event: 0,
                    ..cur
                })
            } else {
                Some(Cursor {
                    event: cur.event + 1,
                    ..cur
                })
            };
        }
        (!b.is_empty()).then_some(b)
    }
}

/// User-parallel schedule over `corpus` with users visited in an order
/// shuffled by `rng`.
pub fn user_parallel_batches<'a>(corpus: &'a Corpus, batch_size: usize, rng: &mut Rng) -> UserParallel<'a> {
    let mut order: Vec<usize> = (0..corpus.users.len()).collect();
    rng.shuffle(&mut order);
    UserParallel::new(&corpus.users, &order, batch_size)
}

/// Per-lane state carried between steps.
#[derive(Clone, Debug)]
struct Lane {
    /// Session state after the lane's latest step, undropped.
    s: Vec<f64>,
    /// User state, undropped.
    c: Vec<f64>,
    /// User state as consumed during the current session (after dropout).
    c_in: Vec<f64>,
    user_mask: Vec<f64>,
    /// Tape of the user-GRU step that produced `c`; `None` in a first session.
    user_tape: Option<GruTape>,
    pending_dc: Vec<f64>,
}

impl Lane {
    fn new(d_ses: usize, d_usr: usize) -> Self {
        Lane {
            s: vec![0.0; d_ses],
            c: vec![0.0; d_usr],
            c_in: vec![0.0; d_usr],
            user_mask: vec![1.0; d_usr],
            user_tape: None,
            pending_dc: vec![0.0; d_usr],
        }
    }
}

/// Inputs needed to recompute a session start from frozen carried values.
#[derive(Clone, Debug)]
struct StartRecord {
    /// `None` for a user's first session (`c = 0`).
    s_last: Option<Vec<f64>>,
    c_prev: Vec<f64>,
    user_mask: Vec<f64>,
    init_mask: Vec<f64>,
}

#[derive(Clone, Debug)]
struct TraceStep {
    batch: UserBatch,
    /// Carried session states; rows of starting lanes are unused.
    h_prev: Matrix,
    starts: Vec<Option<StartRecord>>,
    out_mask: Matrix,
}

enum Mode {
    Train { opt: Optimizer, grads: HrnnModel },
    Probe { grads: HrnnModel, trace: Vec<TraceStep> },
}

impl Mode {
    fn grads(&mut self) -> &mut HrnnModel {
        match self {
            Mode::Train { grads, .. } | Mode::Probe { grads, .. } => grads,
        }
    }
}

fn row_of(values: &[f64]) -> Matrix {
    Matrix::row_vector(values)
}

fn flush_user_grad(model: &HrnnModel, lane: &mut Lane, grads: &mut GruParams) -> Result<()> {
    if let Some(tape) = &lane.user_tape {
        if lane.pending_dc.iter().any(|&v| v != 0.0) {
            gru_backward(&model.user_gru, tape, &row_of(&lane.pending_dc), grads)?;
        }
    }
    lane.pending_dc.fill(0.0);
    Ok(())
}

/// One pass over the schedule. Returns the epoch statistics.
fn run_epoch(
    model: &mut HrnnModel,
    cfg: &HrnnConfig,
    train: &Corpus,
    order_rng: &mut Rng,
    drop_rng: &mut Rng,
    epoch: usize,
    mode: &mut Mode,
) -> Result<EpochStats> {
    let d_ses = model.session_dim();
    let d_usr = model.user_dim();
    let schedule = user_parallel_batches(train, cfg.train.batch_size, order_rng);
    let mut lanes = vec![Lane::new(d_ses, d_usr); schedule.width()];
    let (mut total, mut steps, mut targets) = (0.0, 0, 0);
    let probing = matches!(mode, Mode::Probe { .. });

    for batch in schedule {
        let n = batch.len();
        if let Mode::Train { grads, .. } = mode {
            for (_, m) in grads.named_mut() {
                m.fill(0.0);
            }
        }

        // Session starts: one user-GRU step, then the initial session state.
        let mut h_prev = Matrix::zeros(n, d_ses);
        let mut starts: Vec<Option<StartRecord>> = vec![None; n];
        let mut init_masks: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut s0s: Vec<Option<Vec<f64>>> = vec![None; n];
        for row in 0..n {
            let lane = &mut lanes[batch.lanes[row]];
            if !batch.session_starts[row] {
                h_prev.row_mut(row).copy_from_slice(&lane.s);
                continue;
            }
            let (s_last, c_prev) = if batch.user_starts[row] {
                (None, vec![0.0; d_usr])
            } else {
                (Some(lane.s.clone()), lane.c.clone())
            };
            match &s_last {
                None => {
                    lane.c = vec![0.0; d_usr];
                    lane.user_tape = None;
                }
                Some(s) => {
                    let (c, tape) = gru_forward(&model.user_gru, GruInput::Dense(&row_of(s)), &row_of(&c_prev))?;
                    lane.c = c.into_vec();
                    lane.user_tape = Some(tape);
                }
            }
            lane.pending_dc.fill(0.0);
            lane.user_mask = dropout_mask(1, d_usr, cfg.dropout_user, drop_rng).into_vec();
            lane.c_in = lane.c.iter().zip(&lane.user_mask).map(|(c, m)| c * m).collect();
            let s0 = model.init_session_state(&lane.c_in)?;
            let init_mask = dropout_mask(1, d_ses, cfg.dropout_init, drop_rng).into_vec();
            for (k, (s, m)) in s0.iter().zip(&init_mask).enumerate() {
                h_prev.set(row, k, s * m);
            }
            if probing {
                starts[row] = Some(StartRecord {
                    s_last,
                    c_prev,
                    user_mask: lane.user_mask.clone(),
                    init_mask: init_mask.clone(),
                });
            }
            s0s[row] = Some(s0);
            init_masks[row] = Some(init_mask);
        }

        let c_in = Matrix::from_rows(
            &batch
                .lanes
                .iter()
                .map(|&l| lanes[l].c_in.clone())
                .collect::<Vec<_>>(),
        );
        let extra = match &model.context {
            Some(ctx) => Some(ctx.project(&c_in)?),
            None => None,
        };
        let out_mask = dropout_mask(n, d_ses, cfg.train.dropout_hidden, drop_rng);
        let grads = mode.grads();
        let out = supervised_step(
            &model.session_gru,
            &model.readout,
            cfg.train.loss,
            &batch.inputs,
            extra.as_ref(),
            &h_prev,
            &batch.targets,
            &out_mask,
            &mut grads.session_gru,
            &mut grads.readout,
        )?;
        if !out.loss.is_finite() {
            return Err(diverged(epoch, steps, out.loss));
        }

        // Gradient w.r.t. the user state as consumed in this step.
        let mut d_c_in = match (&model.context, &mut grads.context) {
            (Some(ctx), Some(g_ctx)) => ctx.backward(&c_in, &out.d_preacts, g_ctx)?,
            _ => Matrix::zeros(n, d_usr),
        };
        for row in 0..n {
            let (Some(s0), Some(init_mask)) = (&s0s[row], &init_masks[row]) else {
                continue;
            };
            let d_a0: Vec<f64> = (0..d_ses)
                .map(|k| out.d_h_prev.get(row, k) * init_mask[k] * (1.0 - s0[k] * s0[k]))
                .collect();
            let c_row = c_in.row(row);
            for (i, &ci) in c_row.iter().enumerate() {
                for (k, &dk) in d_a0.iter().enumerate() {
                    let g = grads.w_init.get(i, k) + ci * dk;
                    grads.w_init.set(i, k, g);
                }
            }
            for (k, &dk) in d_a0.iter().enumerate() {
                let g = grads.b_init.get(0, k) + dk;
                grads.b_init.set(0, k, g);
            }
            let back = row_of(&d_a0).matmul_t(&model.w_init)?;
            for (dst, v) in d_c_in.row_mut(row).iter_mut().zip(back.data()) {
                *dst += v;
            }
        }
        for row in 0..n {
            let lane = &mut lanes[batch.lanes[row]];
            for ((p, d), m) in lane
                .pending_dc
                .iter_mut()
                .zip(d_c_in.row(row))
                .zip(&lane.user_mask)
            {
                *p += d * m;
            }
            if cfg.user_grad == UserGradMode::PerStep || batch.session_ends[row] {
                flush_user_grad(model, lane, &mut grads.user_gru)?;
            }
            lane.s.copy_from_slice(out.h_new.row(row));
        }

        targets += n;
        if out.rows > 0 {
            total += out.loss;
            steps += 1;
        }
        match mode {
            Mode::Train { opt, grads } => {
                if out.rows > 0 {
                    let params: Vec<&mut Matrix> = model.named_mut().into_iter().map(|(_, m)| m).collect();
                    let g: Vec<&Matrix> = grads.named().into_iter().map(|(_, m)| m).collect();
                    opt.apply(params, g);
                }
            }
            Mode::Probe { trace, .. } => trace.push(TraceStep {
                batch,
                h_prev,
                starts,
                out_mask,
            }),
        }
    }
    Ok(EpochStats {
        epoch,
        mean_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
        steps,
        targets,
    })
}

fn check_corpus(train: &Corpus) -> Result<()> {
    train.validate()?;
    if train.n_events() == 0 {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    Ok(())
}

pub fn train_hrnn(train: &Corpus, cfg: &HrnnConfig) -> Result<HrnnModel> {
    train_hrnn_with(train, cfg, |_| {}).map(|(m, _)| m)
}

/// Trains and reports each finished epoch to `on_epoch`.
pub fn train_hrnn_with(
    train: &Corpus,
    cfg: &HrnnConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(HrnnModel, Vec<EpochStats>)> {
    cfg.validate()?;
    check_corpus(train)?;
    let mut init_rng = Rng::with_stream(cfg.train.seed, STREAM_INIT);
    let mut model = HrnnModel::new(
        train.n_items(),
        cfg.train.hidden_size,
        cfg.user_dim(),
        cfg.variant,
        cfg.train.loss,
        &mut init_rng,
    );
    let mut order_rng = Rng::with_stream(cfg.train.seed, STREAM_ORDER);
    let mut drop_rng = Rng::with_stream(cfg.train.seed, STREAM_DROPOUT);
    let mut mode = Mode::Train {
        opt: cfg.train.optimizer(),
        grads: model.zeros_like(),
    };
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let stats = run_epoch(&mut model, cfg, train, &mut order_rng, &mut drop_rng, epoch, &mut mode)?;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

/// Gradient checking support. [`probe`] runs one epoch of the training
/// schedule without updating anything and returns the summed step loss, its
/// analytic gradient and a [`Trace`] holding every value training treats as
/// a constant: carried session states, the inputs of each boundary user-GRU
/// step and all dropout masks. [`replay_loss`] recomputes the same objective
/// for arbitrary parameters, so central differences over it can be compared
/// with the analytic gradient.
pub mod gradcheck {
    use super::*;
    use crate::readout::sampled_loss;

    #[derive(Clone, Debug)]
    pub struct Trace {
        steps: Vec<TraceStep>,
    }

    impl Trace {
        pub fn steps(&self) -> usize {
            self.steps.len()
        }

        pub fn targets(&self) -> usize {
            self.steps.iter().map(|s| s.batch.len()).sum()
        }
    }

    pub struct Probe {
        pub loss: f64,
        pub grads: HrnnModel,
        pub trace: Trace,
    }

    pub fn probe(model: &HrnnModel, train: &Corpus, cfg: &HrnnConfig) -> Result<Probe> {
        cfg.validate()?;
        check_corpus(train)?;
        let mut m = model.clone();
        let mut order_rng = Rng::with_stream(cfg.train.seed, STREAM_ORDER);
        let mut drop_rng = Rng::with_stream(cfg.train.seed, STREAM_DROPOUT);
        let mut mode = Mode::Probe {
            grads: model.zeros_like(),
            trace: Vec::new(),
        };
        let stats = run_epoch(&mut m, cfg, train, &mut order_rng, &mut drop_rng, 1, &mut mode)?;
        let Mode::Probe { grads, trace } = mode else {
            unreachable!()
        };
        Ok(Probe {
            loss: stats.mean_loss * stats.steps as f64,
            grads,
            trace: Trace { steps: trace },
        })
    }

    /// Summed step loss of `model` along the frozen schedule in `trace`.
    pub fn replay_loss(model: &HrnnModel, trace: &Trace) -> Result<f64> {
        let d_usr = model.user_dim();
        let mut c_in: Vec<Vec<f64>> = Vec::new();
        let mut total = 0.0;
        for step in &trace.steps {
            let b = &step.batch;
            let width = b.lanes.iter().max().map_or(0, |&l| l + 1);
            if c_in.len() < width {
                c_in.resize(width, vec![0.0; d_usr]);
            }
            let mut h_prev = step.h_prev.clone();
            for (row, start) in step.starts.iter().enumerate() {
                let Some(st) = start else { continue };
                let c = match &st.s_last {
                    None => vec![0.0; d_usr],
                    Some(s) => model.update_user_state(s, &st.c_prev)?,
                };
                let ci: Vec<f64> = c.iter().zip(&st.user_mask).map(|(c, m)| c * m).collect();
                let s0 = model.init_session_state(&ci)?;
                for (k, (s, m)) in s0.iter().zip(&st.init_mask).enumerate() {
                    h_prev.set(row, k, s * m);
                }
                c_in[b.lanes[row]] = ci;
            }
            let c_rows = Matrix::from_rows(&b.lanes.iter().map(|&l| c_in[l].clone()).collect::<Vec<_>>());
            let extra = match &model.context {
                Some(ctx) => Some(ctx.project(&c_rows)?),
                None => None,
            };
            let (h_new, _) = gru_forward_with(&model.session_gru, GruInput::OneHot(&b.inputs), extra.as_ref(), &h_prev)?;
            let out = h_new.hadamard(&step.out_mask)?;
            let logits = model.readout.sampled_logits(&out, &b.targets)?;
            total += sampled_loss(&logits, &b.targets, model.loss).loss;
        }
        Ok(total)
    }

    /// Largest relative error `|a − n| / max(|a|, |n|, floor)` between the
    /// analytic gradient and central differences with step `h`, over every
    /// parameter entry. Returns `(worst error, parameter name, entry index)`.
    pub fn max_relative_error(
        model: &HrnnModel,
        probe: &Probe,
        h: f64,
        floor: f64,
    ) -> Result<(f64, String, usize)> {
        let analytic: Vec<(String, Vec<f64>)> = probe
            .grads
            .named()
            .into_iter()
            .map(|(n, m)| (n, m.data().to_vec()))
            .collect();
        let mut worst = (0.0, String::new(), 0);
        let mut work = model.clone();
        for (p, (name, grad)) in analytic.iter().enumerate() {
            for (i, &a) in grad.iter().enumerate() {
                let orig = work.named()[p].1.data()[i];
                set_entry(&mut work, p, i, orig + h);
                let plus = replay_loss(&work, &probe.trace)?;
                set_entry(&mut work, p, i, orig - h);
                let minus = replay_loss(&work, &probe.trace)?;
                set_entry(&mut work, p, i, orig);
                let num = (plus - minus) / (2.0 * h);
                let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
                if err > worst.0 {
                    worst = (err, name.clone(), i);
                }
            }
        }
        Ok(worst)
    }

    fn set_entry(model: &mut HrnnModel, param: usize, index: usize, value: f64) {
        let mut named = model.named_mut();
        named[param].1.data_mut()[index] = value;
    }
}
