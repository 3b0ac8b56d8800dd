mod common;

use acsa_core::autodiff::{finite_diff_check, Graph, ParamCategory};
use acsa_core::model::{JointModel, ModelVariant, Pass};
use acsa_core::train::{example_loss, l2_penalty_graph};
use common::*;

fn check_variant(variant: ModelVariant, lambda: f64) -> f64 {
    let mut model = JointModel::new(small_config(9, 2, 3, variant), 21).unwrap();
    // Word vectors at the scale of pretrained embeddings, so the Bi-LSTM
    // gradients are large enough for central differences to resolve.
    let table = model.embedding.table;
    model.store_mut().value_mut(table).scale_in_place(10.0);
    let structure = model.clone();
    let ex = example(vec![3, 7, 2, 5], vec![1, 0], vec![vec![0, 0, 1], vec![0, 0, 0]]);
    let report = finite_diff_check(model.store_mut(), None, 1e-5, |g: &mut Graph| {
        let (total, _, _) = example_loss(g, &structure, &ex, 0.6, Pass::Eval)?;
        let pen = l2_penalty_graph(g, lambda)?;
        g.add(total, pen)
    })
    .unwrap();
    for group in &report.groups {
        assert!(
            group.max_rel_error < 1e-4,
            "{variant} group {} rel err {}",
            group.group,
            group.max_rel_error
        );
        assert!(group.max_abs_grad > 0.0, "{variant} group {} has no gradient", group.group);
    }
    report.max_rel_error()
}

#[test]
fn full_variant_gradients() {
    check_variant(ModelVariant::Full, 0.01);
}

#[test]
fn without_share_gradients() {
    check_variant(ModelVariant::WithoutShare, 0.01);
}

#[test]
fn without_cae_gradients() {
    check_variant(ModelVariant::WithoutCae, 0.01);
}

#[test]
fn penalty_gradient_skips_bilstm() {
    let mut model = JointModel::new(small_config(9, 2, 3, ModelVariant::Full), 4).unwrap();
    let report = finite_diff_check(model.store_mut(), None, 1e-5, |g: &mut Graph| l2_penalty_graph(g, 0.01)).unwrap();
    for group in &report.groups {
        if group.category == ParamCategory::Bilstm {
            assert_eq!(group.max_abs_grad, 0.0);
            assert_eq!(group.max_rel_error, 0.0);
        } else {
            assert!(group.max_abs_grad > 0.0);
        }
    }
}
