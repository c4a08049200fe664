//! Knowledge-augmented co-attention between the two texts and the L×L prior
//! matrix assembled from it.
//!
//! Scores are `s_ij = h^A_i · h^B_j + γ·𝕀(k_ij)`. Row softmax gives ω^A
//! (each A token over B), column softmax gives ω^B (each B token over A).
//! The prior places `(ω^A_ij + ω^B_ij)/2` (Raw) or `1 + κ·(ω^A_ij + ω^B_ij)/2`
//! (Boost) at both cross positions of the pair and 1 everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexkb::{indicator, normalize_lemma, LexicalKB, RelationVector};
use crate::numcore::{dot, ops, Matrix};
use crate::scalar::Scalar;
use crate::textio::SpanLayout;

/// `hA · hB + γ·𝕀(k)`.
pub fn knowledge_score<T: Scalar>(ha: &[T], hb: &[T], k: RelationVector, gamma: T) -> Result<T> {
    if ha.len() != hb.len() {
        return Err(Error::shape("knowledge_score", format!("{} vs {}", ha.len(), hb.len())));
    }
    Ok(dot(ha, hb) + gamma * T::lit(f64::from(indicator(k))))
}

/// `m × n` matrix of relation indicators between the lemmas of A and B.
pub fn relation_indicators<T: Scalar>(kb: &LexicalKB, lemmas_a: &[String], lemmas_b: &[String]) -> Matrix<T> {
    let norm_b: Vec<String> = lemmas_b.iter().map(|s| normalize_lemma(s)).collect();
    let mut out = Matrix::zeros(lemmas_a.len(), lemmas_b.len());
    if kb.is_empty() {
        return out;
    }
    for (i, a) in lemmas_a.iter().enumerate() {
        let a = normalize_lemma(a);
        for (j, b) in norm_b.iter().enumerate() {
            out[(i, j)] = T::lit(f64::from(indicator(kb.lookup(&a, b))));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CoAttention<T> {
    /// `m × n` augmented scores.
    pub scores: Matrix<T>,
    /// Row-stochastic: A token i over B.
    pub omega_a: Matrix<T>,
    /// Column-stochastic: B token j over A.
    pub omega_b: Matrix<T>,
    /// `m × d_h` context vectors `c^A_i = Σ_j ω^A_ij h^B_j`.
    pub context_a: Matrix<T>,
    /// `n × d_h` context vectors `c^B_j = Σ_i ω^B_ij h^A_i`.
    pub context_b: Matrix<T>,
}

pub fn coattention<T: Scalar>(
    ha: &Matrix<T>,
    hb: &Matrix<T>,
    kb: &LexicalKB,
    lemmas_a: &[String],
    lemmas_b: &[String],
    gamma: T,
) -> Result<CoAttention<T>> {
    if lemmas_a.len() != ha.rows() || lemmas_b.len() != hb.rows() {
        return Err(Error::shape(
            "coattention",
            format!(
                "{} lemmas for {} A rows, {} lemmas for {} B rows",
                lemmas_a.len(),
                ha.rows(),
                lemmas_b.len(),
                hb.rows()
            ),
        ));
    }
    let ind = relation_indicators(kb, lemmas_a, lemmas_b);
    coattention_with_indicators(ha, hb, &ind, gamma)
}

/// Co-attention given a precomputed `m × n` indicator matrix.
pub fn coattention_with_indicators<T: Scalar>(
    ha: &Matrix<T>,
    hb: &Matrix<T>,
    indicators: &Matrix<T>,
    gamma: T,
) -> Result<CoAttention<T>> {
    if ha.rows() == 0 || hb.rows() == 0 {
        return Err(Error::shape("coattention", "both texts need at least one token"));
    }
    if indicators.shape() != (ha.rows(), hb.rows()) {
        return Err(Error::shape("coattention", "indicator matrix shape"));
    }
    let scores = ha.matmul_t(hb)?.add(&indicators.scale(gamma))?;
    let omega_a = ops::softmax_rows(&scores);
    let omega_b = ops::softmax_cols(&scores);
    let context_a = omega_a.matmul(hb)?;
    let context_b = omega_b.t_matmul(ha)?;
    Ok(CoAttention {
        scores,
        omega_a,
        omega_b,
        context_a,
        context_b,
    })
}

/// Gradients of `ha`, `hb` given gradients of the two weight matrices.
pub fn coattention_backward<T: Scalar>(
    co: &CoAttention<T>,
    ha: &Matrix<T>,
    hb: &Matrix<T>,
    d_omega_a: &Matrix<T>,
    d_omega_b: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let ds = ops::softmax_rows_backward(&co.omega_a, d_omega_a)
        .add(&ops::softmax_cols_backward(&co.omega_b, d_omega_b))?;
    Ok((ds.matmul(hb)?, ds.t_matmul(ha)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Raw,
    #[default]
    Boost,
}

impl std::str::FromStr for PriorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "raw" => Ok(PriorMode::Raw),
            "boost" => Ok(PriorMode::Boost),
            o => Err(format!("unknown prior mode {o:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriorMatrix<T> {
    pub k: Matrix<T>,
    pub mode: PriorMode,
    pub kappa: T,
    pub layout: Option<SpanLayout>,
}

impl<T: Scalar> PriorMatrix<T> {
    /// All-ones prior of size `len`.
    pub fn neutral(len: usize) -> Self {
        PriorMatrix {
            k: Matrix::ones(len, len),
            mode: PriorMode::Boost,
            kappa: T::zero(),
            layout: None,
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..self.k.rows())
            .map(|r| self.k.row(r).iter().map(|v| v.as_f64()).collect())
            .collect();
        serde_json::json!({ "L": self.k.rows(), "rows": rows })
    }
}

fn cross_scale<T: Scalar>(mode: PriorMode, kappa: T) -> (T, T) {
    match mode {
        PriorMode::Raw => (T::zero(), T::one()),
        PriorMode::Boost => (T::one(), kappa),
    }
}

pub fn build_prior_matrix<T: Scalar>(
    co: &CoAttention<T>,
    layout: SpanLayout,
    mode: PriorMode,
    kappa: T,
) -> Result<PriorMatrix<T>> {
    if co.omega_a.shape() != (layout.m, layout.n) {
        return Err(Error::shape(
            "build_prior_matrix",
            format!("co-attention {:?} for layout m={}, n={}", co.omega_a.shape(), layout.m, layout.n),
        ));
    }
    if kappa < T::zero() {
        return Err(Error::Config("kappa must be non-negative".into()));
    }
    let (offset, scale) = cross_scale(mode, kappa);
    let half = T::lit(0.5);
    let mut k = Matrix::ones(layout.len(), layout.len());
    for i in 0..layout.m {
        for j in 0..layout.n {
            let avg = (co.omega_a[(i, j)] + co.omega_b[(i, j)]) * half;
            let v = offset + scale * avg;
            k[(layout.pos_a(i), layout.pos_b(j))] = v;
            k[(layout.pos_b(j), layout.pos_a(i))] = v;
        }
    }
    Ok(PriorMatrix {
        k,
        mode,
        kappa,
        layout: Some(layout),
    })
}

/// Pulls an `L × L` gradient of the prior back to `(dω^A, dω^B)`.
pub fn prior_backward<T: Scalar>(
    d_k: &Matrix<T>,
    layout: SpanLayout,
    mode: PriorMode,
    kappa: T,
) -> (Matrix<T>, Matrix<T>) {
    let (_, scale) = cross_scale(mode, kappa);
    let half = T::lit(0.5);
    let mut d = Matrix::zeros(layout.m, layout.n);
    for i in 0..layout.m {
        for j in 0..layout.n {
            let (pa, pb) = (layout.pos_a(i), layout.pos_b(j));
            d[(i, j)] = scale * half * (d_k[(pa, pb)] + d_k[(pb, pa)]);
        }
    }
    (d.clone(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexkb::RelationKind;

    fn lemmas(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn knowledge_score_cases() {
        let a = [0.5, 0.0];
        let b = [1.0, 3.0];
        let ant = RelationVector::from_kinds([RelationKind::Antonym]);
        let syn = RelationVector::from_kinds([RelationKind::Synonym]);
        assert_eq!(knowledge_score(&a, &b, ant, 1.0).unwrap(), 1.5);
        assert_eq!(knowledge_score(&a, &b, RelationVector::ZERO, 1.0).unwrap(), 0.5);
        let c = [-0.2, 0.0];
        assert_eq!(knowledge_score(&c, &b, syn, 0.0).unwrap(), -0.2);
        assert!(knowledge_score(&a, &[1.0], syn, 1.0).is_err());
    }

    #[test]
    fn uniform_coattention() {
        let ha = Matrix::<f64>::zeros(2, 3);
        let hb = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let co = coattention(&ha, &hb, &LexicalKB::empty(), &lemmas(&["x", "y"]), &lemmas(&["u", "v"]), 1.0).unwrap();
        assert!(co.omega_a.data().iter().all(|&w| w == 0.5));
        assert!(co.omega_b.data().iter().all(|&w| w == 0.5));
        for i in 0..2 {
            assert_eq!(co.context_a.row(i), &[0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn synonym_boost_raises_weight_to_two_thirds() {
        let mut kb = LexicalKB::empty();
        kb.insert("a1", "b1", RelationKind::Synonym).unwrap();
        let h = Matrix::<f64>::zeros(2, 2);
        let co = coattention(&h, &h, &kb, &lemmas(&["a1", "a2"]), &lemmas(&["b1", "b2"]), std::f64::consts::LN_2).unwrap();
        assert!((co.omega_a[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((co.omega_a[(1, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lemma_count_mismatch() {
        let h = Matrix::<f64>::zeros(2, 2);
        assert!(coattention(&h, &h, &LexicalKB::empty(), &lemmas(&["a"]), &lemmas(&["b", "c"]), 1.0).is_err());
    }

    fn uniform_co(m: usize, n: usize) -> CoAttention<f64> {
        let ha = Matrix::zeros(m, 2);
        let hb = Matrix::zeros(n, 2);
        coattention_with_indicators(&ha, &hb, &Matrix::zeros(m, n), 1.0).unwrap()
    }

    #[test]
    fn raw_and_boost_fill() {
        let layout = SpanLayout { m: 2, n: 2 };
        let co = uniform_co(2, 2);
        let raw = build_prior_matrix(&co, layout, PriorMode::Raw, 1.0).unwrap();
        let boost = build_prior_matrix(&co, layout, PriorMode::Boost, 1.0).unwrap();
        for r in 0..layout.len() {
            for c in 0..layout.len() {
                let cross = (layout.a_span().contains(&r) && layout.b_span().contains(&c))
                    || (layout.b_span().contains(&r) && layout.a_span().contains(&c));
                if cross {
                    assert_eq!(raw.k[(r, c)], 0.5);
                    assert_eq!(boost.k[(r, c)], 1.5);
                } else {
                    assert_eq!(raw.k[(r, c)], 1.0);
                    assert_eq!(boost.k[(r, c)], 1.0);
                }
            }
        }
    }

    #[test]
    fn single_token_texts() {
        let layout = SpanLayout { m: 1, n: 1 };
        let p = build_prior_matrix(&uniform_co(1, 1), layout, PriorMode::Raw, 1.0).unwrap();
        assert_eq!(p.k[(1, 3)], 1.0);
        assert_eq!(p.k[(3, 1)], 1.0);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let co = uniform_co(2, 3);
        assert!(build_prior_matrix(&co, SpanLayout { m: 3, n: 2 }, PriorMode::Raw, 1.0).is_err());
    }
}
