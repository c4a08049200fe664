//! Scalar-loop reference for the knowledge attention layer. Works on nested
//! `Vec<f64>` and shares no code with the vectorized implementation.

pub type Grid = Vec<Vec<f64>>;

pub fn grid(m: &knowfuse::Mat) -> Grid {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|e| e / s).collect()
}

/// `W · x` for `W: out × in`.
fn apply(w: &Grid, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub struct Head {
    pub w_q: Grid,
    pub w_k: Grid,
    pub w_v: Grid,
    pub w_keys_knw: Grid,
    pub w_query_sem: Grid,
    pub b_query_sem: Vec<f64>,
    pub w_score_knw: Vec<f64>,
    pub b_score_knw: f64,
    pub w_keys_sem: Grid,
    pub w_query_knw: Grid,
    pub b_query_knw: Vec<f64>,
    pub w_score_sem: Vec<f64>,
    pub b_score_sem: f64,
    pub w_fuse_knw: Grid,
    pub b_fuse_knw: Vec<f64>,
    pub w_fuse_sem: Grid,
    pub b_fuse_sem: Vec<f64>,
    pub w_gate_fuse: Vec<f64>,
    pub b_gate_fuse: f64,
    pub w_gate_filter: Vec<f64>,
    pub b_gate_filter: f64,
    pub w_out: Grid,
    pub b_out: Vec<f64>,
}

impl Head {
    pub fn from_params(p: &knowfuse::kattn::HeadParams<knowfuse::Mat>) -> Self {
        let row = |m: &knowfuse::Mat| m.row(0).to_vec();
        let s = |m: &knowfuse::Mat| m[(0, 0)];
        Head {
            w_q: grid(&p.w_q),
            w_k: grid(&p.w_k),
            w_v: grid(&p.w_v),
            w_keys_knw: grid(&p.w_keys_knw),
            w_query_sem: grid(&p.w_query_sem),
            b_query_sem: row(&p.b_query_sem),
            w_score_knw: row(&p.w_score_knw),
            b_score_knw: s(&p.b_score_knw),
            w_keys_sem: grid(&p.w_keys_sem),
            w_query_knw: grid(&p.w_query_knw),
            b_query_knw: row(&p.b_query_knw),
            w_score_sem: row(&p.w_score_sem),
            b_score_sem: s(&p.b_score_sem),
            w_fuse_knw: grid(&p.w_fuse_knw),
            b_fuse_knw: row(&p.b_fuse_knw),
            w_fuse_sem: grid(&p.w_fuse_sem),
            b_fuse_sem: row(&p.b_fuse_sem),
            w_gate_fuse: row(&p.w_gate_fuse),
            b_gate_fuse: s(&p.b_gate_fuse),
            w_gate_filter: row(&p.w_gate_filter),
            b_gate_filter: s(&p.b_gate_filter),
            w_out: grid(&p.w_out),
            b_out: row(&p.b_out),
        }
    }
}

pub struct HeadOut {
    pub o_sem: Grid,
    pub o_knw: Grid,
    pub hat_knw: Grid,
    pub hat_sem: Grid,
    pub g_fuse: Vec<f64>,
    pub u: Grid,
    pub g_filter: Vec<f64>,
    pub y: Grid,
}

/// Additive attention of `query` over `seq`, scored with
/// `w·tanh(W_keys·seq_j + W_query·query + b) + b_score`.
fn attend(seq: &Grid, w_keys: &Grid, query: &[f64], w_query: &Grid, b_query: &[f64], w: &[f64], b_score: f64) -> Vec<f64> {
    let qv = apply(w_query, query);
    let scores: Vec<f64> = seq
        .iter()
        .map(|sj| {
            let kv = apply(w_keys, sj);
            (0..kv.len())
                .map(|c| w[c] * (kv[c] + qv[c] + b_query[c]).tanh())
                .sum::<f64>()
                + b_score
        })
        .collect();
    let alpha = softmax(&scores);
    let d = seq[0].len();
    (0..d)
        .map(|c| (0..seq.len()).map(|j| alpha[j] * seq[j][c]).sum())
        .collect()
}

pub fn head(h: &Grid, prior: &Grid, p: &Head) -> HeadOut {
    let len = h.len();
    let q: Grid = h.iter().map(|x| apply(&p.w_q, x)).collect();
    let k: Grid = h.iter().map(|x| apply(&p.w_k, x)).collect();
    let v: Grid = h.iter().map(|x| apply(&p.w_v, x)).collect();
    let dk = p.w_q.len() as f64;
    let dv = p.w_v.len();
    let mut o_sem = vec![vec![0.0; dv]; len];
    let mut o_knw = vec![vec![0.0; dv]; len];
    for i in 0..len {
        let raw: Vec<f64> = (0..len)
            .map(|j| (0..q[i].len()).map(|c| q[i][c] * k[j][c]).sum())
            .collect();
        let a_sem = softmax(&raw.iter().map(|r| r / dk.sqrt()).collect::<Vec<_>>());
        let a_knw = softmax(&(0..len).map(|j| raw[j] * prior[i][j] / dk.sqrt()).collect::<Vec<_>>());
        for j in 0..len {
            for c in 0..dv {
                o_sem[i][c] += a_sem[j] * v[j][c];
                o_knw[i][c] += a_knw[j] * v[j][c];
            }
        }
    }
    let mut out = HeadOut {
        o_sem: o_sem.clone(),
        o_knw: o_knw.clone(),
        hat_knw: vec![],
        hat_sem: vec![],
        g_fuse: vec![],
        u: vec![],
        g_filter: vec![],
        y: vec![],
    };
    for i in 0..len {
        let hk = attend(&o_knw, &p.w_keys_knw, &o_sem[i], &p.w_query_sem, &p.b_query_sem, &p.w_score_knw, p.b_score_knw);
        let hs = attend(&o_sem, &p.w_keys_sem, &hk, &p.w_query_knw, &p.b_query_knw, &p.w_score_sem, p.b_score_sem);
        let tk: Vec<f64> = apply(&p.w_fuse_knw, &hk).iter().zip(&p.b_fuse_knw).map(|(a, b)| (a + b).tanh()).collect();
        let ts: Vec<f64> = apply(&p.w_fuse_sem, &hs).iter().zip(&p.b_fuse_sem).map(|(a, b)| (a + b).tanh()).collect();
        let mut gate_in = p.b_gate_fuse;
        for (c, t) in tk.iter().chain(ts.iter()).enumerate() {
            gate_in += p.w_gate_fuse[c] * t;
        }
        let g = sigmoid(gate_in);
        let u: Vec<f64> = (0..ts.len()).map(|c| g * ts[c] + (1.0 - g) * tk[c]).collect();
        let mut filt_in = p.b_gate_filter;
        for (c, t) in o_sem[i].iter().chain(u.iter()).enumerate() {
            filt_in += p.w_gate_filter[c] * t;
        }
        let gf = sigmoid(filt_in);
        let y: Vec<f64> = apply(&p.w_out, &u).iter().zip(&p.b_out).map(|(a, b)| gf * (a + b).tanh()).collect();
        out.hat_knw.push(hk);
        out.hat_sem.push(hs);
        out.g_fuse.push(g);
        out.u.push(u);
        out.g_filter.push(gf);
        out.y.push(y);
    }
    out
}

/// Heads, concatenation and output projection.
pub fn layer(h: &Grid, prior: &Grid, heads: &[Head], w_proj: &Grid, b_proj: &[f64]) -> Grid {
    let outs: Vec<HeadOut> = heads.iter().map(|p| head(h, prior, p)).collect();
    (0..h.len())
        .map(|i| {
            let cat: Vec<f64> = outs.iter().flat_map(|o| o.y[i].clone()).collect();
            apply(w_proj, &cat).iter().zip(b_proj).map(|(a, b)| a + b).collect()
        })
        .collect()
}

pub fn max_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
