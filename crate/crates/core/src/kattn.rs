//! Knowledge attention layer.
//!
//! Every head runs two attention paths over shared Q/K/V: the plain scaled
//! dot-product path and a path whose raw scores are multiplied elementwise by
//! the prior matrix before scaling. The two outputs are then merged per token
//! in three stages:
//!
//! 1. mutual alignment: each token's plain output attends (additively) over
//!    the knowledge path's full sequence, and the refined knowledge vector in
//!    turn attends over the plain path's sequence;
//! 2. gated fusion: a scalar sigmoid gate mixes the two refined vectors after
//!    a `tanh` projection;
//! 3. filtration: a second scalar gate, conditioned on the plain output and
//!    the fused vector, scales `tanh(W_out·u + b_out)`.
//!
//! Head outputs are concatenated and projected back to the model width.
//! Forward functions return every intermediate needed by the matching
//! `*_backward` function.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::{glorot_init, ops, Gradients, Matrix, ParamId, ParamStore, Rng};
use crate::prior::PriorMatrix;
use crate::scalar::{self, Scalar};

macro_rules! head_params {
    ($($field:ident),* $(,)?) => {
        /// Per-head parameters, generic over what is stored per field: owned
        /// matrices, borrowed views, store handles or shapes.
        #[derive(Debug, Clone, PartialEq)]
        pub struct HeadParams<M> {
            $(pub $field: M,)*
        }

        impl<M> HeadParams<M> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn map<N>(self, mut f: impl FnMut(&'static str, M) -> N) -> HeadParams<N> {
                HeadParams { $($field: f(stringify!($field), self.$field),)* }
            }

            pub fn as_ref(&self) -> HeadParams<&M> {
                HeadParams { $($field: &self.$field,)* }
            }

            pub fn into_named(self) -> Vec<(&'static str, M)> {
                vec![$((stringify!($field), self.$field)),*]
            }
        }
    };
}

head_params!(
    w_q, w_k, w_v,
    // mutual alignment, stage 1: knowledge sequence keyed by the plain token
    w_keys_knw, w_query_sem, b_query_sem, w_score_knw, b_score_knw,
    // stage 2: plain sequence keyed by the refined knowledge token
    w_keys_sem, w_query_knw, b_query_knw, w_score_sem, b_score_sem,
    // gated fusion
    w_fuse_knw, b_fuse_knw, w_fuse_sem, b_fuse_sem, w_gate_fuse, b_gate_fuse,
    // filtration
    w_gate_filter, b_gate_filter, w_out, b_out,
);

pub type HeadView<'a, T> = HeadParams<&'a Matrix<T>>;

/// Head dimensions; the additive-attention and fusion widths equal `d_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl HeadDims {
    pub fn shapes(&self) -> HeadParams<(usize, usize)> {
        let (dm, dk, dv) = (self.d_model, self.d_k, self.d_v);
        let (da, dh) = (dv, dv);
        HeadParams {
            w_q: (dk, dm),
            w_k: (dk, dm),
            w_v: (dv, dm),
            w_keys_knw: (da, dv),
            w_query_sem: (da, dv),
            b_query_sem: (1, da),
            w_score_knw: (1, da),
            b_score_knw: (1, 1),
            w_keys_sem: (da, dv),
            w_query_knw: (da, dv),
            b_query_knw: (1, da),
            w_score_sem: (1, da),
            b_score_sem: (1, 1),
            w_fuse_knw: (dh, dv),
            b_fuse_knw: (1, dh),
            w_fuse_sem: (dh, dv),
            b_fuse_sem: (1, dh),
            w_gate_fuse: (1, 2 * dh),
            b_gate_fuse: (1, 1),
            w_gate_filter: (1, dv + dh),
            b_gate_filter: (1, 1),
            w_out: (dv, dh),
            b_out: (1, dv),
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.starts_with("b_")
}

impl<T: Scalar> HeadParams<Matrix<T>> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: HeadDims, rng: &mut Rng) -> Self {
        dims.shapes().map(|name, (r, c)| {
            if is_bias(name) {
                Matrix::zeros(r, c)
            } else {
                glorot_init(r, c, rng)
            }
        })
    }

    pub fn zeros(dims: HeadDims) -> Self {
        dims.shapes().map(|_, (r, c)| Matrix::zeros(r, c))
    }

    pub fn zeros_like(&self) -> Self {
        self.as_ref().map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    /// Moves the tensors into `store` as `{prefix}.{field}`.
    pub fn register(self, store: &mut ParamStore<T>, prefix: &str) -> Result<HeadParams<ParamId>> {
        let mut err = None;
        let ids = self.map(|name, m| match store.add(format!("{prefix}.{name}"), m) {
            Ok(id) => Some(id),
            Err(e) => {
                err.get_or_insert(e);
                None
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(ids.map(|_, id| id.expect("registered"))),
        }
    }

    pub fn view(&self) -> HeadView<'_, T> {
        self.as_ref()
    }
}

impl HeadParams<ParamId> {
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut missing = None;
        let ids = HeadParams::<()>::unit().map(|name, ()| {
            let full = format!("{prefix}.{name}");
            let id = store.id(&full);
            if id.is_none() {
                missing.get_or_insert(full);
            }
            id
        });
        match missing {
            Some(name) => Err(Error::Data(format!("missing parameter {name}"))),
            None => Ok(ids.map(|_, id| id.expect("present"))),
        }
    }

    pub fn view<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> HeadView<'a, T> {
        self.as_ref().map(|_, &id| store.value(id))
    }

    /// Adds per-head gradients into the matching store-wide buffer entries.
    pub fn accumulate<T: Scalar>(&self, grads: &mut Gradients<T>, head: &HeadParams<Matrix<T>>) -> Result<()> {
        for ((_, id), (_, g)) in self.as_ref().into_named().into_iter().zip(head.as_ref().into_named()) {
            grads.accumulate(*id, g)?;
        }
        Ok(())
    }
}

impl HeadParams<()> {
    fn unit() -> Self {
        HeadDims { d_model: 1, d_k: 1, d_v: 1 }.shapes().map(|_, _| ())
    }
}

fn check_shapes<T: Scalar>(p: &HeadView<'_, T>, d_model: usize) -> Result<HeadDims> {
    let dims = HeadDims {
        d_model,
        d_k: p.w_q.rows(),
        d_v: p.w_v.rows(),
    };
    let expected = dims.shapes();
    for ((name, m), (_, shape)) in p.as_ref().into_named().into_iter().zip(expected.into_named()) {
        if m.shape() != shape {
            return Err(Error::shape(
                "head params",
                format!("{name} is {:?}, expected {shape:?}", m.shape()),
            ));
        }
    }
    if dims.d_k == 0 || dims.d_v == 0 {
        return Err(Error::shape("head params", "zero head dimension"));
    }
    Ok(dims)
}

/// Both attention paths of one head.
#[derive(Debug, Clone)]
pub struct DualAttnOutput<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// `Q·Kᵀ` before scaling.
    pub raw: Matrix<T>,
    pub a_sem: Matrix<T>,
    pub a_knw: Matrix<T>,
    pub o_sem: Matrix<T>,
    pub o_knw: Matrix<T>,
}

pub fn dual_attention<T: Scalar>(h: &Matrix<T>, prior: &PriorMatrix<T>, p: &HeadView<'_, T>) -> Result<DualAttnOutput<T>> {
    let dims = check_shapes(p, h.cols())?;
    let len = h.rows();
    if prior.k.shape() != (len, len) {
        return Err(Error::shape(
            "dual_attention",
            format!("prior {:?} for sequence length {len}", prior.k.shape()),
        ));
    }
    let inv_sqrt = T::one() / T::lit(dims.d_k as f64).sqrt();
    let q = ops::linear(h, p.w_q, None)?;
    let k = ops::linear(h, p.w_k, None)?;
    let v = ops::linear(h, p.w_v, None)?;
    let raw = q.matmul_t(&k)?;
    let a_sem = ops::softmax_rows(&raw.scale(inv_sqrt));
    let a_knw = ops::softmax_rows(&raw.hadamard(&prior.k)?.scale(inv_sqrt));
    let o_sem = a_sem.matmul(&v)?;
    let o_knw = a_knw.matmul(&v)?;
    Ok(DualAttnOutput {
        q,
        k,
        v,
        raw,
        a_sem,
        a_knw,
        o_sem,
        o_knw,
    })
}

/// Concatenates head outputs, masks them and projects. Returns
/// `(projection input, output)`.
pub fn project_heads<T: Scalar>(
    ys: &[&Matrix<T>],
    w_proj: &Matrix<T>,
    b_proj: &Matrix<T>,
    proj_mask: Option<&Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut proj_input = Matrix::hcat(ys)?;
    if let Some(mask) = proj_mask {
        proj_input = proj_input.hadamard(mask)?;
    }
    let out = ops::linear(&proj_input, w_proj, Some(b_proj))?;
    Ok((proj_input, out))
}

/// Returns `(dH, dPrior)`.
pub fn dual_attention_backward<T: Scalar>(
    h: &Matrix<T>,
    prior: &PriorMatrix<T>,
    p: &HeadView<'_, T>,
    fwd: &DualAttnOutput<T>,
    d_o_sem: &Matrix<T>,
    d_o_knw: &Matrix<T>,
    g: &mut HeadParams<Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let inv_sqrt = T::one() / T::lit(fwd.q.cols() as f64).sqrt();
    let d_a_sem = d_o_sem.matmul_t(&fwd.v)?;
    let d_a_knw = d_o_knw.matmul_t(&fwd.v)?;
    let mut d_v = fwd.a_sem.t_matmul(d_o_sem)?;
    d_v.add_assign(&fwd.a_knw.t_matmul(d_o_knw)?)?;
    let d_s_sem = ops::softmax_rows_backward(&fwd.a_sem, &d_a_sem);
    let d_s_knw = ops::softmax_rows_backward(&fwd.a_knw, &d_a_knw);
    let d_raw = d_s_sem.add(&d_s_knw.hadamard(&prior.k)?)?.scale(inv_sqrt);
    let d_prior = d_s_knw.hadamard(&fwd.raw)?.scale(inv_sqrt);
    let d_q = d_raw.matmul(&fwd.k)?;
    let d_k = d_raw.t_matmul(&fwd.q)?;
    let mut d_h = ops::linear_backward(h, p.w_q, &d_q, &mut g.w_q, None)?;
    d_h.add_assign(&ops::linear_backward(h, p.w_k, &d_k, &mut g.w_k, None)?)?;
    d_h.add_assign(&ops::linear_backward(h, p.w_v, &d_v, &mut g.w_v, None)?)?;
    Ok((d_h, d_prior))
}

/// One additive-attention pass: every query row `i` scores every key row
/// `j` by `w·tanh(keys_j + query_i)` and averages `values` with the softmax.
#[derive(Debug, Clone)]
pub struct AdditiveAttention<T> {
    pub keys: Matrix<T>,
    pub queries: Matrix<T>,
    /// `tanh` activations, one `L × d_attn` block per query row.
    pub z: Vec<Matrix<T>>,
    pub alpha: Matrix<T>,
    pub out: Matrix<T>,
}

fn additive_attention<T: Scalar>(
    keys: Matrix<T>,
    queries: Matrix<T>,
    score: &Matrix<T>,
    values: &Matrix<T>,
) -> Result<AdditiveAttention<T>> {
    let len = keys.rows();
    let mut z = Vec::with_capacity(queries.rows());
    let mut e = Matrix::zeros(queries.rows(), len);
    let w = score.data();
    // tanh(k + q) = 1 − 2 / (1 + e^{2k}·e^{2q}) needs only L·d exponentials;
    // fall back to direct evaluation when the product could overflow
    let limit = T::max_value().ln() / T::lit(4.5);
    let bounded = |m: &Matrix<T>| m.data().iter().all(|v| v.abs() < limit);
    let factored = bounded(&keys) && bounded(&queries);
    let two = T::lit(2.0);
    let exp2 = |m: &Matrix<T>| m.map(|v| (v + v).exp());
    let (ek, eq) = if factored {
        (exp2(&keys), exp2(&queries))
    } else {
        (keys.clone(), queries.clone())
    };
    for i in 0..queries.rows() {
        let qi = eq.row(i);
        let mut zi = Matrix::zeros(len, keys.cols());
        for j in 0..len {
            let row = zi.row_mut(j);
            let mut acc = T::zero();
            for (((zv, &kv), &qv), &wv) in row.iter_mut().zip(ek.row(j)).zip(qi).zip(w) {
                *zv = if factored {
                    T::one() - two / (T::one() + kv * qv)
                } else {
                    scalar::tanh(kv + qv)
                };
                acc += wv * *zv;
            }
            // the scalar score bias shifts the whole row and cancels in the softmax
            e[(i, j)] = acc;
        }
        z.push(zi);
    }
    let alpha = ops::softmax_rows(&e);
    let out = alpha.matmul(values)?;
    Ok(AdditiveAttention {
        keys,
        queries,
        z,
        alpha,
        out,
    })
}

/// Returns `(d_keys, d_queries, d_values)`; accumulates the score-vector gradient.
fn additive_attention_backward<T: Scalar>(
    fwd: &AdditiveAttention<T>,
    score: &Matrix<T>,
    values: &Matrix<T>,
    d_out: &Matrix<T>,
    d_score: &mut Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let d_alpha = d_out.matmul_t(values)?;
    let d_values = fwd.alpha.t_matmul(d_out)?;
    let d_e = ops::softmax_rows_backward(&fwd.alpha, &d_alpha);
    let (n_q, len, da) = (fwd.queries.rows(), fwd.keys.rows(), fwd.keys.cols());
    let mut d_keys = Matrix::zeros(len, da);
    let mut d_queries = Matrix::zeros(n_q, da);
    let w = score.data();
    for i in 0..n_q {
        let zi = &fwd.z[i];
        for j in 0..len {
            let de = d_e[(i, j)];
            if de == T::zero() {
                continue;
            }
            for (c, &zv) in zi.row(j).iter().enumerate() {
                d_score[(0, c)] += de * zv;
                let dpre = de * w[c] * (T::one() - zv * zv);
                d_keys[(j, c)] += dpre;
                d_queries[(i, c)] += dpre;
            }
        }
    }
    Ok((d_keys, d_queries, d_values))
}

#[derive(Debug, Clone)]
pub struct MutualAlignment<T> {
    /// Stage 1: knowledge sequence attended from each plain token.
    pub knw: AdditiveAttention<T>,
    /// Stage 2: plain sequence attended from each refined knowledge token.
    pub sem: AdditiveAttention<T>,
}

impl<T> MutualAlignment<T> {
    pub fn hat_knw(&self) -> &Matrix<T> {
        &self.knw.out
    }

    pub fn hat_sem(&self) -> &Matrix<T> {
        &self.sem.out
    }
}

pub fn mutual_align<T: Scalar>(o_sem: &Matrix<T>, o_knw: &Matrix<T>, p: &HeadView<'_, T>) -> Result<MutualAlignment<T>> {
    if o_sem.shape() != o_knw.shape() {
        return Err(Error::shape("mutual_align", format!("{:?} vs {:?}", o_sem.shape(), o_knw.shape())));
    }
    let knw = additive_attention(
        ops::linear(o_knw, p.w_keys_knw, None)?,
        ops::linear(o_sem, p.w_query_sem, Some(p.b_query_sem))?,
        p.w_score_knw,
        o_knw,
    )?;
    let sem = additive_attention(
        ops::linear(o_sem, p.w_keys_sem, None)?,
        ops::linear(&knw.out, p.w_query_knw, Some(p.b_query_knw))?,
        p.w_score_sem,
        o_sem,
    )?;
    Ok(MutualAlignment { knw, sem })
}

/// Returns `(d_o_sem, d_o_knw)`.
pub fn mutual_align_backward<T: Scalar>(
    o_sem: &Matrix<T>,
    o_knw: &Matrix<T>,
    p: &HeadView<'_, T>,
    fwd: &MutualAlignment<T>,
    d_hat_sem: &Matrix<T>,
    d_hat_knw: &Matrix<T>,
    g: &mut HeadParams<Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (d_keys, d_queries, mut d_o_sem) =
        additive_attention_backward(&fwd.sem, p.w_score_sem, o_sem, d_hat_sem, &mut g.w_score_sem)?;
    d_o_sem.add_assign(&ops::linear_backward(o_sem, p.w_keys_sem, &d_keys, &mut g.w_keys_sem, None)?)?;
    let mut d_hat_knw = d_hat_knw.clone();
    d_hat_knw.add_assign(&ops::linear_backward(
        &fwd.knw.out,
        p.w_query_knw,
        &d_queries,
        &mut g.w_query_knw,
        Some(&mut g.b_query_knw),
    )?)?;

    let (d_keys, d_queries, mut d_o_knw) =
        additive_attention_backward(&fwd.knw, p.w_score_knw, o_knw, &d_hat_knw, &mut g.w_score_knw)?;
    d_o_knw.add_assign(&ops::linear_backward(o_knw, p.w_keys_knw, &d_keys, &mut g.w_keys_knw, None)?)?;
    d_o_sem.add_assign(&ops::linear_backward(
        o_sem,
        p.w_query_sem,
        &d_queries,
        &mut g.w_query_sem,
        Some(&mut g.b_query_sem),
    )?)?;
    Ok((d_o_sem, d_o_knw))
}

#[derive(Debug, Clone)]
pub struct GatedFusion<T> {
    pub t_knw: Matrix<T>,
    pub t_sem: Matrix<T>,
    /// `L × 1` fusion gate.
    pub gate: Matrix<T>,
    pub u: Matrix<T>,
}

/// Row-wise over tokens: `u = g·t_sem + (1 − g)·t_knw`.
pub fn gated_fuse<T: Scalar>(hat_sem: &Matrix<T>, hat_knw: &Matrix<T>, p: &HeadView<'_, T>) -> Result<GatedFusion<T>> {
    if hat_sem.shape() != hat_knw.shape() {
        return Err(Error::shape("gated_fuse", "refined signals differ in shape"));
    }
    let t_knw = ops::tanh(&ops::linear(hat_knw, p.w_fuse_knw, Some(p.b_fuse_knw))?);
    let t_sem = ops::tanh(&ops::linear(hat_sem, p.w_fuse_sem, Some(p.b_fuse_sem))?);
    let cat = Matrix::hcat(&[&t_knw, &t_sem])?;
    let gate = ops::sigmoid(&ops::linear(&cat, p.w_gate_fuse, Some(p.b_gate_fuse))?);
    let mut u = Matrix::zeros(t_sem.rows(), t_sem.cols());
    for r in 0..u.rows() {
        let gr = gate[(r, 0)];
        for ((o, &s), &k) in u.row_mut(r).iter_mut().zip(t_sem.row(r)).zip(t_knw.row(r)) {
            *o = gr * s + (T::one() - gr) * k;
        }
    }
    Ok(GatedFusion { t_knw, t_sem, gate, u })
}

/// Returns `(d_hat_sem, d_hat_knw)`.
pub fn gated_fuse_backward<T: Scalar>(
    hat_sem: &Matrix<T>,
    hat_knw: &Matrix<T>,
    p: &HeadView<'_, T>,
    fwd: &GatedFusion<T>,
    d_u: &Matrix<T>,
    g: &mut HeadParams<Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (rows, dh) = d_u.shape();
    let mut d_t_sem = Matrix::zeros(rows, dh);
    let mut d_t_knw = Matrix::zeros(rows, dh);
    let mut d_gate_pre = Matrix::zeros(rows, 1);
    for r in 0..rows {
        let gr = fwd.gate[(r, 0)];
        let mut dg = T::zero();
        for c in 0..dh {
            let du = d_u[(r, c)];
            d_t_sem[(r, c)] = gr * du;
            d_t_knw[(r, c)] = (T::one() - gr) * du;
            dg += du * (fwd.t_sem[(r, c)] - fwd.t_knw[(r, c)]);
        }
        d_gate_pre[(r, 0)] = dg * gr * (T::one() - gr);
    }
    let cat = Matrix::hcat(&[&fwd.t_knw, &fwd.t_sem])?;
    let d_cat = ops::linear_backward(&cat, p.w_gate_fuse, &d_gate_pre, &mut g.w_gate_fuse, Some(&mut g.b_gate_fuse))?;
    d_t_knw.add_assign(&d_cat.slice_cols(0, dh))?;
    d_t_sem.add_assign(&d_cat.slice_cols(dh, 2 * dh))?;
    let d_pre_knw = ops::tanh_backward(&fwd.t_knw, &d_t_knw)?;
    let d_pre_sem = ops::tanh_backward(&fwd.t_sem, &d_t_sem)?;
    let d_hat_knw = ops::linear_backward(hat_knw, p.w_fuse_knw, &d_pre_knw, &mut g.w_fuse_knw, Some(&mut g.b_fuse_knw))?;
    let d_hat_sem = ops::linear_backward(hat_sem, p.w_fuse_sem, &d_pre_sem, &mut g.w_fuse_sem, Some(&mut g.b_fuse_sem))?;
    Ok((d_hat_sem, d_hat_knw))
}

#[derive(Debug, Clone)]
pub struct Filtration<T> {
    /// `L × 1` filtration gate.
    pub gate: Matrix<T>,
    /// `tanh(W_out·u + b_out)`.
    pub h: Matrix<T>,
    pub y: Matrix<T>,
}

/// Row-wise over tokens: `y = σ(W_gf·[o_sem ; u] + b_gf) · tanh(W_out·u + b_out)`.
pub fn filtration<T: Scalar>(o_sem: &Matrix<T>, u: &Matrix<T>, p: &HeadView<'_, T>) -> Result<Filtration<T>> {
    if o_sem.rows() != u.rows() {
        return Err(Error::shape("filtration", "token counts differ"));
    }
    let cat = Matrix::hcat(&[o_sem, u])?;
    let gate = ops::sigmoid(&ops::linear(&cat, p.w_gate_filter, Some(p.b_gate_filter))?);
    let h = ops::tanh(&ops::linear(u, p.w_out, Some(p.b_out))?);
    let mut y = h.clone();
    for r in 0..y.rows() {
        let gr = gate[(r, 0)];
        for v in y.row_mut(r) {
            *v *= gr;
        }
    }
    Ok(Filtration { gate, h, y })
}

/// Returns `(d_o_sem, d_u)`.
pub fn filtration_backward<T: Scalar>(
    o_sem: &Matrix<T>,
    u: &Matrix<T>,
    p: &HeadView<'_, T>,
    fwd: &Filtration<T>,
    d_y: &Matrix<T>,
    g: &mut HeadParams<Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (rows, dv) = d_y.shape();
    let mut d_h = Matrix::zeros(rows, dv);
    let mut d_gate_pre = Matrix::zeros(rows, 1);
    for r in 0..rows {
        let gr = fwd.gate[(r, 0)];
        let mut dg = T::zero();
        for c in 0..dv {
            d_h[(r, c)] = gr * d_y[(r, c)];
            dg += d_y[(r, c)] * fwd.h[(r, c)];
        }
        d_gate_pre[(r, 0)] = dg * gr * (T::one() - gr);
    }
    let cat = Matrix::hcat(&[o_sem, u])?;
    let d_cat = ops::linear_backward(&cat, p.w_gate_filter, &d_gate_pre, &mut g.w_gate_filter, Some(&mut g.b_gate_filter))?;
    let d_o_sem = d_cat.slice_cols(0, o_sem.cols());
    let mut d_u = d_cat.slice_cols(o_sem.cols(), o_sem.cols() + u.cols());
    let d_pre = ops::tanh_backward(&fwd.h, &d_h)?;
    d_u.add_assign(&ops::linear_backward(u, p.w_out, &d_pre, &mut g.w_out, Some(&mut g.b_out))?)?;
    Ok((d_o_sem, d_u))
}

#[derive(Debug, Clone)]
pub struct HeadForward<T> {
    pub dual: DualAttnOutput<T>,
    pub mutual: MutualAlignment<T>,
    pub fusion: GatedFusion<T>,
    pub filter: Filtration<T>,
}

impl<T: Scalar> HeadForward<T> {
    pub fn y(&self) -> &Matrix<T> {
        &self.filter.y
    }

    pub fn trace(&self) -> Vec<FusionTrace> {
        (0..self.filter.y.rows())
            .map(|i| FusionTrace {
                pos: i,
                g_fuse: self.fusion.gate[(i, 0)].as_f64(),
                g_filter: self.filter.gate[(i, 0)].as_f64(),
                u: self.fusion.u.row(i).iter().map(|v| v.as_f64()).collect(),
                y: self.filter.y.row(i).iter().map(|v| v.as_f64()).collect(),
            })
            .collect()
    }
}

pub fn head_forward<T: Scalar>(h: &Matrix<T>, prior: &PriorMatrix<T>, p: &HeadView<'_, T>) -> Result<HeadForward<T>> {
    let dual = dual_attention(h, prior, p)?;
    let mutual = mutual_align(&dual.o_sem, &dual.o_knw, p)?;
    let fusion = gated_fuse(mutual.hat_sem(), mutual.hat_knw(), p)?;
    let filter = filtration(&dual.o_sem, &fusion.u, p)?;
    Ok(HeadForward {
        dual,
        mutual,
        fusion,
        filter,
    })
}

/// Returns `(dH, dPrior)` and accumulates parameter gradients into `g`.
pub fn head_backward<T: Scalar>(
    h: &Matrix<T>,
    prior: &PriorMatrix<T>,
    p: &HeadView<'_, T>,
    fwd: &HeadForward<T>,
    d_y: &Matrix<T>,
    g: &mut HeadParams<Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let o_sem = &fwd.dual.o_sem;
    let (mut d_o_sem, d_u) = filtration_backward(o_sem, &fwd.fusion.u, p, &fwd.filter, d_y, g)?;
    let (d_hat_sem, d_hat_knw) =
        gated_fuse_backward(fwd.mutual.hat_sem(), fwd.mutual.hat_knw(), p, &fwd.fusion, &d_u, g)?;
    let (d_sem_m, d_o_knw) = mutual_align_backward(o_sem, &fwd.dual.o_knw, p, &fwd.mutual, &d_hat_sem, &d_hat_knw, g)?;
    d_o_sem.add_assign(&d_sem_m)?;
    dual_attention_backward(h, prior, p, &fwd.dual, &d_o_sem, &d_o_knw, g)
}

/// Per-token gate values of one head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionTrace {
    pub pos: usize,
    pub g_fuse: f64,
    pub g_filter: f64,
    #[serde(skip)]
    pub u: Vec<f64>,
    #[serde(skip)]
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerForward<T> {
    pub heads: Vec<HeadForward<T>>,
    /// Concatenated head outputs after the dropout mask, input of the projection.
    pub proj_input: Matrix<T>,
    pub out: Matrix<T>,
}

/// All heads, concatenation, then `out = concat · W_projᵀ + b_proj`.
/// `proj_mask` is an optional dropout mask applied before the projection.
pub fn knowledge_attention_layer<T: Scalar>(
    h: &Matrix<T>,
    prior: &PriorMatrix<T>,
    heads: &[HeadView<'_, T>],
    w_proj: &Matrix<T>,
    b_proj: &Matrix<T>,
    proj_mask: Option<&Matrix<T>>,
) -> Result<LayerForward<T>> {
    if heads.is_empty() {
        return Err(Error::shape("knowledge_attention_layer", "at least one head required"));
    }
    let fwds = heads
        .iter()
        .map(|p| head_forward(h, prior, p))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<&Matrix<T>> = fwds.iter().map(HeadForward::y).collect();
    let (proj_input, out) = project_heads(&ys, w_proj, b_proj, proj_mask)?;
    Ok(LayerForward {
        heads: fwds,
        proj_input,
        out,
    })
}

/// Returns `(dH, dPrior)`.
#[allow(clippy::too_many_arguments)]
pub fn knowledge_attention_layer_backward<T: Scalar>(
    h: &Matrix<T>,
    prior: &PriorMatrix<T>,
    heads: &[HeadView<'_, T>],
    w_proj: &Matrix<T>,
    proj_mask: Option<&Matrix<T>>,
    fwd: &LayerForward<T>,
    d_out: &Matrix<T>,
    head_grads: &mut [HeadParams<Matrix<T>>],
    d_w_proj: &mut Matrix<T>,
    d_b_proj: &mut Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut d_cat = ops::linear_backward(&fwd.proj_input, w_proj, d_out, d_w_proj, Some(d_b_proj))?;
    if let Some(mask) = proj_mask {
        d_cat = d_cat.hadamard(mask)?;
    }
    let mut d_h = Matrix::zeros(h.rows(), h.cols());
    let mut d_prior = Matrix::zeros(prior.k.rows(), prior.k.cols());
    let mut col = 0;
    for ((p, f), g) in heads.iter().zip(&fwd.heads).zip(head_grads.iter_mut()) {
        let dv = f.filter.y.cols();
        let d_y = d_cat.slice_cols(col, col + dv);
        col += dv;
        let (dh, dp) = head_backward(h, prior, p, f, &d_y, g)?;
        d_h.add_assign(&dh)?;
        d_prior.add_assign(&dp)?;
    }
    Ok((d_h, d_prior))
}

/// `σ` applied to a single value; exposed for gate-saturation reasoning in tests.
pub fn gate_value<T: Scalar>(x: T) -> T {
    scalar::sigmoid(x)
}
