//! Finite-difference oracle over the full network zoo.

use ndgrad::{
    grad_check_dense, grad_check_gru, Activation, DenseNet, GruCell, OutputInit, ParamStore,
    Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_two_by_64_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let net = DenseNet::new(
        &mut store,
        "f",
        &[64, 64, 64, 4],
        Activation::Elu,
        OutputInit::Normal,
        &mut rng,
    );
    let input: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check_dense(&net, &mut store, &input, 1e-5);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gru_random_state_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "g", 12, 16, &mut rng);
    let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check_gru(&cell, &mut store, &x, &h, 1e-5);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn two_backward_passes_are_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut store = ParamStore::new();
    let net = DenseNet::new(
        &mut store,
        "f",
        &[8, 32, 32, 3],
        Activation::Elu,
        OutputInit::Normal,
        &mut rng,
    );
    let input: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = || {
        let mut t = Tape::new();
        let x = t.const_row(&input);
        let y = net.forward(&mut t, &store, x);
        let sq = t.square(y);
        let l = t.sum(sq);
        t.backward(l).unwrap()
    };
    let g1 = run();
    let g2 = run();
    let flat = |g: &ndgrad::Gradients| -> Vec<f64> {
        g.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    };
    let (f1, f2) = (flat(&g1), flat(&g2));
    assert_eq!(f1.len(), f2.len());
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn reported_param_count_is_sum_of_tensor_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut store = ParamStore::new();
    let net = DenseNet::new(
        &mut store,
        "f",
        &[5, 7, 2],
        Activation::Tanh,
        OutputInit::Normal,
        &mut rng,
    );
    let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng);
    let by_ids: usize = net
        .param_ids()
        .iter()
        .chain(cell.param_ids().iter())
        .map(|&id| store.get(id).len())
        .sum();
    assert_eq!(by_ids, store.param_count());
    assert_eq!(net.param_count(&store), 5 * 7 + 7 + 7 * 2 + 2);
    assert_eq!(cell.param_count(&store), 3 * (3 * 4) + 3 * (4 * 4) + 3 * 4);
}

#[test]
fn detached_branch_contributes_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(3.0));
    let mut t = Tape::new();
    let av = t.param(&store, a);
    let bv = t.param(&store, b);
    let bd = t.detach(bv);
    let prod = t.mul(av, bd);
    let loss = t.sum(prod);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(&store, a).unwrap().data(), &[3.0]);
    assert!(g.get(&store, b).is_none());
}
