//! Tape gradients of individual operations against central differences.

use stag_core::backbone::{Backbone, BackboneConfig};
use stag_core::gradcheck::{finite_diff_grad, relative_error};
use stag_core::matrix::Matrix;
use stag_core::params::{Component, ParamId, ParamStore};
use stag_core::tape::{Elision, NodeId, Tape};
use stag_core::{Result, RngStream};

const TOL: f64 = 1e-7;

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `loss = Σ op(θ)·r` for a fixed random column `r`.
fn check<F>(name: &str, rows: usize, cols: usize, op: F)
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let mut rng = RngStream::new(7, name);
    let theta = random(rows, cols, &mut rng);
    let mut store = ParamStore::new();
    let id = store.insert("theta", theta.clone(), Component::Head);
    store.set_frozen(id, false);
    let width = {
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let y = op(&mut t, p).unwrap();
        t.value(y).cols()
    };
    let r = random(width, 1, &mut rng);
    let loss = |tape: &mut Tape<f64>, store: &ParamStore<f64>, id: ParamId| -> Result<NodeId> {
        let p = tape.param(store, id);
        let y = op(tape, p)?;
        let rn = tape.constant(r.clone());
        let z = tape.matmul(y, rn)?;
        Ok(tape.sum(z))
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, &store, id).unwrap();
    tape.backward(l).unwrap();
    let analytic = tape.param_grad(id).unwrap().clone();
    let numeric = finite_diff_grad(
        |th| {
            let mut s = store.clone();
            *s.value_mut(id) = th.clone();
            let mut t = Tape::new();
            let l = loss(&mut t, &s, id)?;
            Ok(t.value(l).get(0, 0))
        },
        &theta,
        1e-6,
    )
    .unwrap();
    let err = relative_error(&analytic, &numeric, 1e-12);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

fn constant(tape: &mut Tape<f64>, rows: usize, cols: usize, label: &str) -> NodeId {
    tape.constant(random(rows, cols, &mut RngStream::new(11, label)))
}

#[test]
fn matmul_both_sides() {
    check("matmul_lhs", 3, 4, |t, p| {
        let b = constant(t, 4, 2, "b");
        t.matmul(p, b)
    });
    check("matmul_rhs", 4, 2, |t, p| {
        let a = constant(t, 3, 4, "a");
        t.matmul(a, p)
    });
    check("matmul_nt", 5, 3, |t, p| {
        let b = constant(t, 4, 3, "b");
        t.matmul_nt(p, b)
    });
    check("matmul_nt_rhs", 4, 3, |t, p| {
        let a = constant(t, 5, 3, "a");
        t.matmul_nt(a, p)
    });
    check("self_product", 4, 4, |t, p| t.matmul(p, p));
}

#[test]
fn elementwise_and_bias() {
    check("add_sub_scale", 3, 3, |t, p| {
        let c = constant(t, 3, 3, "c");
        let a = t.add(p, c)?;
        let s = t.sub(a, p)?;
        let s = t.add(s, p)?;
        Ok(t.scale(s, 0.37))
    });
    check("bias", 1, 4, |t, p| {
        let x = constant(t, 5, 4, "x");
        t.add_row_bias(x, p)
    });
    check("linear_weight", 3, 2, |t, p| {
        let x = constant(t, 4, 3, "x");
        let b = constant(t, 1, 2, "b");
        t.linear(x, p, Some(b))
    });
    check("leaky_relu", 4, 5, |t, p| Ok(t.act(p)));
    check("dropout", 2, 4, |t, p| t.dropout(p, vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0]));
}

#[test]
fn normalisation_and_softmax() {
    check("softmax", 3, 5, |t, p| Ok(t.row_softmax(p)));
    check("layer_norm_x", 4, 6, |t, p| {
        let g = constant(t, 1, 6, "g");
        let b = constant(t, 1, 6, "b");
        t.layer_norm(p, g, b)
    });
    check("layer_norm_gamma", 1, 6, |t, p| {
        let x = constant(t, 4, 6, "x");
        let b = constant(t, 1, 6, "b");
        t.layer_norm(x, p, b)
    });
    check("layer_norm_beta", 1, 6, |t, p| {
        let x = constant(t, 4, 6, "x");
        let g = constant(t, 1, 6, "g");
        t.layer_norm(x, g, p)
    });
}

#[test]
fn pooling_and_indexing() {
    check("group_max", 6, 3, |t, p| t.group_max(p, 3));
    check("row_max_mean", 5, 4, |t, p| {
        let a = t.row_max_pool(p)?;
        let b = t.row_mean_pool(p)?;
        t.concat_cols(&[a, b])
    });
    check("gather", 4, 3, |t, p| t.gather_rows(p, &[0, 3, 3, 1, 0, 2]));
    check("slices", 3, 6, |t, p| {
        let a = t.slice_cols(p, 1, 2)?;
        let b = t.slice_cols(p, 4, 2)?;
        t.concat_cols(&[b, a, b])
    });
    check("cross_entropy", 1, 5, |t, p| t.cross_entropy(p, 3));
}

#[test]
fn whole_block_input_gradient() {
    let cfg = BackboneConfig { d: 8, layers: 1, tokens: 5, heads: 2, mlp_ratio: 2, group_size: 4 };
    let mut store = ParamStore::new();
    let bb = Backbone::build(cfg, &mut store, &mut RngStream::new(3, "bb")).unwrap();
    check("block", 5, 8, |t, p| {
        let pos = constant(t, 5, 8, "pos");
        bb.block(t, &store, 1, p, pos)
    });
}

#[test]
fn elision_does_not_change_gradients() {
    let cfg = BackboneConfig { d: 8, layers: 3, tokens: 5, heads: 2, mlp_ratio: 2, group_size: 4 };
    let mut store = ParamStore::new();
    let bb = Backbone::build(cfg, &mut store, &mut RngStream::new(3, "bb")).unwrap();
    let tunable: Vec<_> = store.iter().filter(|(_, e)| e.component == Component::Block(3)).map(|(id, _)| id).collect();
    for &id in &tunable {
        store.set_frozen(id, false);
    }
    let run = |elision: Elision| {
        let mut t = Tape::new();
        let x = constant(&mut t, 5, 8, "x");
        let pos = constant(&mut t, 5, 8, "pos");
        let y = bb.forward_blocks(&mut t, &store, x, pos).unwrap();
        let l = t.sum(y);
        t.backward_with(l, elision).unwrap();
        let grads: Vec<_> = tunable.iter().map(|&id| t.param_grad(id).unwrap().clone()).collect();
        (grads, t.visit_log().len(), t.total_backward_flops())
    };
    let (g_on, visits_on, flops_on) = run(Elision::Enabled);
    let (g_off, visits_off, flops_off) = run(Elision::Disabled);
    assert_eq!(g_on, g_off);
    assert!(visits_on < visits_off);
    assert!(flops_on < flops_off);
}
