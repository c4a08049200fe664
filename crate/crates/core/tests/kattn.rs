mod common;

use common::oracle::{self, grid, max_diff};
use knowfuse::kattn::{self, HeadDims, HeadParams, HeadView};
use knowfuse::numcore::{check_gradients, glorot_init, Matrix, ParamStore, Rng};
use knowfuse::prior::PriorMatrix;
use knowfuse::Mat;
use proptest::prelude::*;

/// Random head with non-zero biases so the oracle comparison covers them.
fn random_head(dims: HeadDims, rng: &mut Rng) -> HeadParams<Mat> {
    dims.shapes().map(|_, (r, c)| glorot_init(r, c, rng).scale(1.5))
}

fn random_prior(len: usize, rng: &mut Rng) -> PriorMatrix<f64> {
    let mut p = PriorMatrix::neutral(len);
    for v in p.k.data_mut() {
        *v = rng.uniform(0.2, 2.0);
    }
    p
}

struct Instance {
    h: Mat,
    prior: PriorMatrix<f64>,
    heads: Vec<HeadParams<Mat>>,
    w_proj: Mat,
    b_proj: Mat,
}

fn instance(seed: u64, len: usize, d_model: usize, d_v: usize, n_heads: usize) -> Instance {
    let mut rng = Rng::new(seed);
    let dims = HeadDims { d_model, d_k: d_v, d_v };
    Instance {
        h: glorot_init(len, d_model, &mut rng).scale(2.0),
        prior: random_prior(len, &mut rng),
        heads: (0..n_heads).map(|_| random_head(dims, &mut rng)).collect(),
        w_proj: glorot_init(d_model, n_heads * d_v, &mut rng),
        b_proj: glorot_init(1, d_model, &mut rng),
    }
}

#[test]
fn mutual_align_matches_scalar_oracle() {
    let inst = instance(11, 3, 2, 2, 1);
    let p = &inst.heads[0];
    let fwd = kattn::head_forward(&inst.h, &inst.prior, &p.view()).unwrap();
    let reference = oracle::head(&grid(&inst.h), &grid(&inst.prior.k), &oracle::Head::from_params(p));
    assert!(max_diff(&grid(&fwd.dual.o_sem), &reference.o_sem) < 1e-12);
    assert!(max_diff(&grid(&fwd.dual.o_knw), &reference.o_knw) < 1e-12);
    assert!(max_diff(&grid(fwd.mutual.hat_knw()), &reference.hat_knw) < 1e-12);
    assert!(max_diff(&grid(fwd.mutual.hat_sem()), &reference.hat_sem) < 1e-12);
}

#[test]
fn gated_fuse_and_filtration_match_scalar_oracle() {
    let inst = instance(12, 4, 3, 3, 1);
    let p = &inst.heads[0];
    let fwd = kattn::head_forward(&inst.h, &inst.prior, &p.view()).unwrap();
    let reference = oracle::head(&grid(&inst.h), &grid(&inst.prior.k), &oracle::Head::from_params(p));
    for i in 0..4 {
        assert!((fwd.fusion.gate[(i, 0)] - reference.g_fuse[i]).abs() < 1e-12);
        assert!((fwd.filter.gate[(i, 0)] - reference.g_filter[i]).abs() < 1e-12);
    }
    assert!(max_diff(&grid(&fwd.fusion.u), &reference.u) < 1e-12);
    assert!(max_diff(&grid(&fwd.filter.y), &reference.y) < 1e-12);
}

#[test]
fn layer_matches_composed_oracle() {
    let inst = instance(13, 5, 4, 2, 2);
    let views: Vec<HeadView<'_, f64>> = inst.heads.iter().map(|p| p.view()).collect();
    let out = kattn::knowledge_attention_layer(&inst.h, &inst.prior, &views, &inst.w_proj, &inst.b_proj, None).unwrap();
    let heads: Vec<oracle::Head> = inst.heads.iter().map(oracle::Head::from_params).collect();
    let reference = oracle::layer(&grid(&inst.h), &grid(&inst.prior.k), &heads, &grid(&inst.w_proj), inst.b_proj.row(0));
    assert!(max_diff(&grid(&out.out), &reference) < 1e-9);
}

#[test]
fn huge_inputs_take_the_direct_tanh_path_and_match_oracle() {
    let mut inst = instance(14, 4, 4, 2, 1);
    inst.h = inst.h.scale(400.0);
    let p = &inst.heads[0];
    let fwd = kattn::head_forward(&inst.h, &inst.prior, &p.view()).unwrap();
    let largest = [&fwd.mutual.knw, &fwd.mutual.sem]
        .iter()
        .flat_map(|a| a.keys.data().iter().chain(a.queries.data()))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(largest > f64::MAX.ln() / 4.5, "{largest}");
    let reference = oracle::head(&grid(&inst.h), &grid(&inst.prior.k), &oracle::Head::from_params(p));
    assert!(fwd.filter.y.data().iter().all(|v| v.is_finite()));
    assert!(max_diff(&grid(&fwd.filter.y), &reference.y) < 1e-9);
}

/// Loss `Σ R ⊙ layer(H, K)` over a store holding every head parameter,
/// the projection, and the two inputs `H` and `K` as pseudo-parameters.
fn layer_gradcheck(seed: u64, with_mask: bool, strict: bool) {
    let inst = instance(seed, 5, 4, 2, 2);
    let mut rng = Rng::new(seed + 100);
    let weights: Mat = glorot_init(5, 4, &mut rng);
    let mask: Option<Mat> = with_mask.then(|| knowfuse::numcore::dropout_mask(5, 4, 0.3, &mut rng));

    let mut store = ParamStore::<f64>::new();
    let head_ids: Vec<_> = inst
        .heads
        .iter()
        .enumerate()
        .map(|(i, p)| p.clone().register(&mut store, &format!("head{i}")).unwrap())
        .collect();
    let w_proj = store.add("w_proj", inst.w_proj.clone()).unwrap();
    let b_proj = store.add("b_proj", inst.b_proj.clone()).unwrap();
    let h_id = store.add("input", inst.h.clone()).unwrap();
    let k_id = store.add("prior", inst.prior.k.clone()).unwrap();

    let forward = |s: &ParamStore<f64>| {
        let views: Vec<_> = head_ids.iter().map(|ids| ids.view(s)).collect();
        let prior = PriorMatrix { k: s.value(k_id).clone(), ..PriorMatrix::neutral(5) };
        let out = kattn::knowledge_attention_layer(s.value(h_id), &prior, &views, s.value(w_proj), s.value(b_proj), mask.as_ref())?;
        Ok::<_, knowfuse::Error>((prior, out))
    };
    let loss = |s: &ParamStore<f64>| Ok(forward(s)?.1.out.hadamard(&weights)?.sum());

    let (prior, fwd) = forward(&store).unwrap();
    let views: Vec<_> = head_ids.iter().map(|ids| ids.view(&store)).collect();
    let mut head_grads: Vec<_> = inst.heads.iter().map(HeadParams::zeros_like).collect();
    let mut d_w_proj = Matrix::zeros(4, 4);
    let mut d_b_proj = Matrix::zeros(1, 4);
    let (d_h, d_k) = kattn::knowledge_attention_layer_backward(
        store.value(h_id),
        &prior,
        &views,
        store.value(w_proj),
        mask.as_ref(),
        &fwd,
        &weights,
        &mut head_grads,
        &mut d_w_proj,
        &mut d_b_proj,
    )
    .unwrap();
    let mut grads = store.zeros_like();
    for (ids, g) in head_ids.iter().zip(&head_grads) {
        ids.accumulate(&mut grads, g).unwrap();
    }
    grads.accumulate(w_proj, &d_w_proj).unwrap();
    grads.accumulate(b_proj, &d_b_proj).unwrap();
    grads.accumulate(h_id, &d_h).unwrap();
    grads.accumulate(k_id, &d_k).unwrap();
    store.set_grads(grads).unwrap();

    let report = check_gradients(loss, &store, 1e-5, 1e-4).unwrap();
    for t in &report.tensors {
        // central differences of this loss carry ~5e-11 of roundoff, which
        // dominates the relative error of gradients below ~1e-6
        let ok = t.max_rel_err < 1e-4 || (t.analytic - t.numeric).abs() < 1e-10;
        assert!(ok, "{}: {:?}", t.name, t);
    }
    if strict {
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn layer_gradients_pass_finite_difference_check() {
    layer_gradcheck(21, false, true);
    layer_gradcheck(22, false, true);
}

#[test]
fn layer_gradients_with_frozen_dropout_mask() {
    // masked heads produce some gradients in the 1e-8..1e-10 range
    for seed in [23, 24, 25, 26, 27] {
        layer_gradcheck(seed, true, false);
    }
}

fn row_stochastic(m: &Mat) -> bool {
    (0..m.rows()).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9 && m.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_stochastic_and_gates_open(seed in 0u64..10_000, len in 1usize..7) {
        let inst = instance(seed, len, 4, 2, 1);
        let f = kattn::head_forward(&inst.h, &inst.prior, &inst.heads[0].view()).unwrap();
        prop_assert!(row_stochastic(&f.dual.a_sem));
        prop_assert!(row_stochastic(&f.dual.a_knw));
        prop_assert!(row_stochastic(&f.mutual.knw.alpha));
        prop_assert!(row_stochastic(&f.mutual.sem.alpha));
        for g in f.fusion.gate.data().iter().chain(f.filter.gate.data()) {
            prop_assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn neutral_prior_paths_agree(seed in 0u64..10_000, len in 1usize..7) {
        let inst = instance(seed, len, 4, 2, 1);
        let f = kattn::dual_attention(&inst.h, &PriorMatrix::neutral(len), &inst.heads[0].view()).unwrap();
        prop_assert!(f.o_knw.max_abs_diff(&f.o_sem).unwrap() < 1e-12);
    }

    #[test]
    fn raising_prior_on_positive_score_boosts_that_weight(seed in 0u64..10_000, len in 2usize..7, boost in 0.05f64..3.0) {
        let inst = instance(seed, len, 4, 2, 1);
        let p = inst.heads[0].view();
        let base = kattn::dual_attention(&inst.h, &PriorMatrix::neutral(len), &p).unwrap();
        // pick the first positive raw score
        let found = (0..len).flat_map(|i| (0..len).map(move |j| (i, j))).find(|&(i, j)| base.raw[(i, j)] > 1e-6);
        if let Some((i, j)) = found {
            let mut prior = PriorMatrix::neutral(len);
            prior.k[(i, j)] = 1.0 + boost;
            let f = kattn::dual_attention(&inst.h, &prior, &p).unwrap();
            prop_assert!(f.a_knw[(i, j)] > base.a_knw[(i, j)]);
            for q in (0..len).filter(|&q| q != j) {
                prop_assert!(f.a_knw[(i, q)] < base.a_knw[(i, q)]);
            }
        }
    }
}
