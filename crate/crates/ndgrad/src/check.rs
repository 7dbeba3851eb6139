//! Finite-difference gradient checking.

use crate::net::{DenseNet, GruCell};
use crate::params::{Gradients, ParamStore};
use crate::tape::Tape;

/// Max over all trainable parameter entries of
/// |autodiff - central difference| / max(|autodiff|, |cd|, 1e-8).
///
/// `f` must recompute the loss from the store's current values; it is called
/// twice per parameter entry with a +/- `eps` perturbation.
pub fn grad_check_fn(
    store: &mut ParamStore,
    autodiff: &Gradients,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    assert!(eps > 0.0 && eps <= 1e-3, "eps must be in (0, 1e-3]");
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let up = f(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let down = f(store);
            store.get_mut(id).data_mut()[j] = orig;
            let cd = (up - down) / (2.0 * eps);
            let ad = autodiff.get(store, id).map_or(0.0, |g| g.data()[j]);
            let rel = (ad - cd).abs() / ad.abs().max(cd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Gradient check for a [`DenseNet`] with an L2 loss on its output.
pub fn grad_check_dense(net: &DenseNet, store: &mut ParamStore, input: &[f64], eps: f64) -> f64 {
    let loss_fn = |store: &ParamStore| {
        let mut t = Tape::new();
        let x = t.const_row(input);
        let y = net.forward(&mut t, store, x);
        let sq = t.square(y);
        let l = t.sum(sq);
        t.value_scalar(l)
    };
    let autodiff = {
        let mut t = Tape::new();
        let x = t.const_row(input);
        let y = net.forward(&mut t, store, x);
        let sq = t.square(y);
        let l = t.sum(sq);
        t.backward(l).unwrap()
    };
    grad_check_fn(store, &autodiff, eps, loss_fn)
}

/// Gradient check for a [`GruCell`] step with an L2 loss on the new hidden
/// state.
pub fn grad_check_gru(
    cell: &GruCell,
    store: &mut ParamStore,
    input: &[f64],
    hidden: &[f64],
    eps: f64,
) -> f64 {
    let loss_fn = |store: &ParamStore| {
        let mut t = Tape::new();
        let x = t.const_row(input);
        let h = t.const_row(hidden);
        let h2 = cell.forward(&mut t, store, x, h);
        let sq = t.square(h2);
        let l = t.sum(sq);
        t.value_scalar(l)
    };
    let autodiff = {
        let mut t = Tape::new();
        let x = t.const_row(input);
        let h = t.const_row(hidden);
        let h2 = cell.forward(&mut t, store, x, h);
        let sq = t.square(h2);
        let l = t.sum(sq);
        t.backward(l).unwrap()
    };
    grad_check_fn(store, &autodiff, eps, loss_fn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, OutputInit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_net_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "lin", &[4, 3], Activation::None, OutputInit::Normal, &mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check_dense(&net, &mut store, &input, 1e-5);
        assert!(err < 1e-8, "linear net error {err}");
    }

    #[test]
    fn three_layer_elu_net_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = DenseNet::new(
            &mut store,
            "f",
            &[6, 16, 16, 16, 2],
            Activation::Elu,
            OutputInit::Normal,
            &mut rng,
        );
        let input: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check_dense(&net, &mut store, &input, 1e-5);
        assert!(err < 1e-4, "elu net error {err}");
    }

    #[test]
    fn gru_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 5, 8, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check_gru(&cell, &mut store, &x, &h, 1e-5);
        assert!(err < 1e-4, "gru error {err}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "f", &[4, 8, 2], Activation::Elu, OutputInit::Normal, &mut rng);
        let input = [0.3, -0.8, 0.1, 0.9];
        let run = |store: &ParamStore| {
            let mut t = Tape::new();
            let x = t.const_row(&input);
            let y = net.forward(&mut t, store, x);
            let sq = t.square(y);
            let l = t.sum(sq);
            t.backward(l).unwrap()
        };
        let g1 = run(&store);
        let g2 = run(&store);
        for ((k1, t1), (k2, t2)) in g1.iter().zip(g2.iter()) {
            assert_eq!(k1, k2);
            assert_eq!(t1.data(), t2.data());
        }
    }
}
