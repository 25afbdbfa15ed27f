//! A single GRU layer with a hand-written backward pass.
//!
//! Row-vector convention, one row per mini-batch lane:
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Matrix,
    pub b_r: Matrix,
    pub b_h: Matrix,
}

impl GruParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        GruParams {
            w_z: Matrix::zeros(d_in, d_h),
            w_r: Matrix::zeros(d_in, d_h),
            w_h: Matrix::zeros(d_in, d_h),
            u_z: Matrix::zeros(d_h, d_h),
            u_r: Matrix::zeros(d_h, d_h),
            u_h: Matrix::zeros(d_h, d_h),
            b_z: Matrix::zeros(1, d_h),
            b_r: Matrix::zeros(1, d_h),
            b_h: Matrix::zeros(1, d_h),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(rng: &mut Rng, d_in: usize, d_h: usize) -> Self {
        assert!(d_in > 0 && d_h > 0, "GRU dimensions must be positive");
        GruParams {
            w_z: glorot_uniform(d_in, d_h, rng),
            w_r: glorot_uniform(d_in, d_h, rng),
            w_h: glorot_uniform(d_in, d_h, rng),
            u_z: glorot_uniform(d_h, d_h, rng),
            u_r: glorot_uniform(d_h, d_h, rng),
            u_h: glorot_uniform(d_h, d_h, rng),
            b_z: Matrix::zeros(1, d_h),
            b_r: Matrix::zeros(1, d_h),
            b_h: Matrix::zeros(1, d_h),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows()
    }

    pub fn zeros_like(&self) -> Self {
        GruParams::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 9] {
        [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum GruInput<'a> {
    Dense(&'a Matrix),
    /// One item index per lane; never materialized as a one-hot matrix.
    OneHot(&'a [usize]),
}

impl GruInput<'_> {
    fn rows(&self) -> usize {
        match self {
            GruInput::Dense(x) => x.rows(),
            GruInput::OneHot(ix) => ix.len(),
        }
    }
}

#[derive(Clone, Debug)]
enum TapeInput {
    Dense(Matrix),
    OneHot(Vec<usize>),
}

/// Additive contributions to the three gate pre-activations coming from an
/// extra input block (see [`InputBlock`]). Also the shape of the pre-activation
/// gradients returned by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GatePreacts {
    pub z: Matrix,
    pub r: Matrix,
    pub h: Matrix,
}

/// Values cached by [`gru_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GruTape {
    input: TapeInput,
    h_prev: Matrix,
    z: Matrix,
    r: Matrix,
    h_tilde: Matrix,
}

impl GruTape {
    pub fn update_gate(&self) -> &Matrix {
        &self.z
    }

    pub fn reset_gate(&self) -> &Matrix {
        &self.r
    }

    pub fn candidate(&self) -> &Matrix {
        &self.h_tilde
    }

    pub fn h_prev(&self) -> &Matrix {
        &self.h_prev
    }
}

pub struct GruBackward {
    /// Gradient w.r.t. a dense input; `None` for one-hot inputs.
    pub d_x: Option<Matrix>,
    pub d_h_prev: Matrix,
    /// Gradients w.r.t. the gate pre-activations, for routing into extra
    /// input blocks.
    pub d_preacts: GatePreacts,
}

fn input_term(w: &Matrix, x: &GruInput) -> Result<Matrix> {
    match x {
        GruInput::Dense(x) => x.matmul(w),
        GruInput::OneHot(ix) => {
            if let Some(&bad) = ix.iter().find(|&&i| i >= w.rows()) {
                return Err(Error::ItemOutOfRange {
                    index: bad,
                    n_items: w.rows(),
                });
            }
            Ok(w.select_rows(ix))
        }
    }
}

pub fn gru_forward(p: &GruParams, x: GruInput, h_prev: &Matrix) -> Result<(Matrix, GruTape)> {
    gru_forward_with(p, x, None, h_prev)
}

/// Forward step with optional extra gate contributions (added to `x·W_*`).
pub fn gru_forward_with(
    p: &GruParams,
    x: GruInput,
    extra: Option<&GatePreacts>,
    h_prev: &Matrix,
) -> Result<(Matrix, GruTape)> {
    let d_h = p.hidden_dim();
    let batch = x.rows();
    if h_prev.shape() != (batch, d_h) {
        return Err(Error::shape(
            "gru_forward",
            format!(
                "h_prev is {}x{}, expected {batch}x{d_h}",
                h_prev.rows(),
                h_prev.cols()
            ),
        ));
    }
    if let GruInput::Dense(m) = x {
        if m.cols() != p.input_dim() {
            return Err(Error::shape(
                "gru_forward",
                format!("input has {} columns, expected {}", m.cols(), p.input_dim()),
            ));
        }
    }
    if let Some(e) = extra {
        for m in [&e.z, &e.r, &e.h] {
            if m.shape() != (batch, d_h) {
                return Err(Error::shape("gru_forward", "extra gate input shape"));
            }
        }
    }

    let mut a_z = input_term(&p.w_z, &x)?;
    let mut a_r = input_term(&p.w_r, &x)?;
    let mut a_h = input_term(&p.w_h, &x)?;
    if let Some(e) = extra {
        a_z.add_assign(&e.z)?;
        a_r.add_assign(&e.r)?;
        a_h.add_assign(&e.h)?;
    }
    a_z.add_assign(&h_prev.matmul(&p.u_z)?)?;
    a_r.add_assign(&h_prev.matmul(&p.u_r)?)?;
    a_z.add_row_broadcast(p.b_z.data())?;
    a_r.add_row_broadcast(p.b_r.data())?;
    let z = a_z.map(sigmoid);
    let r = a_r.map(sigmoid);

    let rh = r.hadamard(h_prev)?;
    a_h.add_assign(&rh.matmul(&p.u_h)?)?;
    a_h.add_row_broadcast(p.b_h.data())?;
    let h_tilde = a_h.map(f64::tanh);

    let mut h_new = Matrix::zeros(batch, d_h);
    for ((o, &hp), (&zv, &ht)) in h_new
        .data_mut()
        .iter_mut()
        .zip(h_prev.data())
        .zip(z.data().iter().zip(h_tilde.data()))
    {
        *o = (1.0 - zv) * hp + zv * ht;
    }

    let input = match x {
        GruInput::Dense(m) => TapeInput::Dense(m.clone()),
        GruInput::OneHot(ix) => TapeInput::OneHot(ix.to_vec()),
    };
    Ok((
        h_new,
        GruTape {
            input,
            h_prev: h_prev.clone(),
            z,
            r,
            h_tilde,
        },
    ))
}

/// Backward step. Parameter gradients are *added* into `grads`, so calling it
/// once per unrolled step accumulates over the unroll.
pub fn gru_backward(
    p: &GruParams,
    tape: &GruTape,
    d_h_new: &Matrix,
    grads: &mut GruParams,
) -> Result<GruBackward> {
    if d_h_new.shape() != tape.z.shape() {
        return Err(Error::shape(
            "gru_backward",
            format!(
                "d_h_new is {}x{}, tape is {}x{}",
                d_h_new.rows(),
                d_h_new.cols(),
                tape.z.rows(),
                tape.z.cols()
            ),
        ));
    }
    let n = d_h_new.data().len();
    let (h, z, r, ht) = (&tape.h_prev, &tape.z, &tape.r, &tape.h_tilde);
    let g = d_h_new.data();

    let mut d_az = d_h_new.zeros_like();
    let mut d_ah = d_h_new.zeros_like();
    let mut d_h_prev = d_h_new.zeros_like();
    for i in 0..n {
        let zi = z.data()[i];
        d_az.data_mut()[i] = g[i] * (ht.data()[i] - h.data()[i]) * zi * (1.0 - zi);
        let hti = ht.data()[i];
        d_ah.data_mut()[i] = g[i] * zi * (1.0 - hti * hti);
        d_h_prev.data_mut()[i] = g[i] * (1.0 - zi);
    }

    // through (r ⊙ h)·U_h
    let d_rh = d_ah.matmul_t(&p.u_h)?;
    let mut d_ar = d_h_new.zeros_like();
    for i in 0..n {
        let ri = r.data()[i];
        d_ar.data_mut()[i] = d_rh.data()[i] * h.data()[i] * ri * (1.0 - ri);
        d_h_prev.data_mut()[i] += d_rh.data()[i] * ri;
    }
    d_h_prev.add_assign(&d_az.matmul_t(&p.u_z)?)?;
    d_h_prev.add_assign(&d_ar.matmul_t(&p.u_r)?)?;

    let rh = r.hadamard(h)?;
    grads.u_z.add_t_matmul(h, &d_az)?;
    grads.u_r.add_t_matmul(h, &d_ar)?;
    grads.u_h.add_t_matmul(&rh, &d_ah)?;
    grads.b_z.add_assign(&d_az.column_sums())?;
    grads.b_r.add_assign(&d_ar.column_sums())?;
    grads.b_h.add_assign(&d_ah.column_sums())?;

    let d_x = match &tape.input {
        TapeInput::Dense(x) => {
            grads.w_z.add_t_matmul(x, &d_az)?;
            grads.w_r.add_t_matmul(x, &d_ar)?;
            grads.w_h.add_t_matmul(x, &d_ah)?;
            let mut dx = d_az.matmul_t(&p.w_z)?;
            dx.add_assign(&d_ar.matmul_t(&p.w_r)?)?;
            dx.add_assign(&d_ah.matmul_t(&p.w_h)?)?;
            Some(dx)
        }
        TapeInput::OneHot(ix) => {
            for (lane, &item) in ix.iter().enumerate() {
                for (gw, d) in [
                    (&mut grads.w_z, &d_az),
                    (&mut grads.w_r, &d_ar),
                    (&mut grads.w_h, &d_ah),
                ] {
                    for (a, b) in gw.row_mut(item).iter_mut().zip(d.row(lane)) {
                        *a += b;
                    }
                }
            }
            None
        }
    };

    Ok(GruBackward {
        d_x,
        d_h_prev,
        d_preacts: GatePreacts {
            z: d_az,
            r: d_ar,
            h: d_ah,
        },
    })
}

/// An additional dense input feeding all three gates, e.g. a context vector
/// concatenated to the regular input. Keeping it as a separate block leaves the
/// one-hot lookup path untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBlock {
    pub z: Matrix,
    pub r: Matrix,
    pub h: Matrix,
}

impl InputBlock {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        InputBlock {
            z: Matrix::zeros(d_in, d_h),
            r: Matrix::zeros(d_in, d_h),
            h: Matrix::zeros(d_in, d_h),
        }
    }

    pub fn init(rng: &mut Rng, d_in: usize, d_h: usize) -> Self {
        InputBlock {
            z: glorot_uniform(d_in, d_h, rng),
            r: glorot_uniform(d_in, d_h, rng),
            h: glorot_uniform(d_in, d_h, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        InputBlock::zeros(self.z.rows(), self.z.cols())
    }

    pub fn project(&self, c: &Matrix) -> Result<GatePreacts> {
        Ok(GatePreacts {
            z: c.matmul(&self.z)?,
            r: c.matmul(&self.r)?,
            h: c.matmul(&self.h)?,
        })
    }

    /// Accumulates weight gradients into `grads` and returns `d c`.
    pub fn backward(&self, c: &Matrix, d: &GatePreacts, grads: &mut InputBlock) -> Result<Matrix> {
        grads.z.add_t_matmul(c, &d.z)?;
        grads.r.add_t_matmul(c, &d.r)?;
        grads.h.add_t_matmul(c, &d.h)?;
        let mut dc = d.z.matmul_t(&self.z)?;
        dc.add_assign(&d.r.matmul_t(&self.r)?)?;
        dc.add_assign(&d.h.matmul_t(&self.h)?)?;
        Ok(dc)
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 3] {
        [("z", &mut self.z), ("r", &mut self.r), ("h", &mut self.h)]
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 3] {
        [("z", &self.z), ("r", &self.r), ("h", &self.h)]
    }
}
