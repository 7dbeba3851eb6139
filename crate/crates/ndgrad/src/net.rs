use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::Tensor;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    None,
}

/// How the last layer's weights are initialized. Heads that should start as
/// the zero function (critic, reward) use `Zero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    Normal,
    Zero,
}

struct Layer {
    w: ParamId,
    b: ParamId,
    act: Activation,
}

/// Fully connected feed-forward net. The final layer is linear.
pub struct DenseNet {
    layers: Vec<Layer>,
    dims: Vec<usize>,
}

fn init_weight<R: Rng>(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    act: Activation,
    rng: &mut R,
) -> ParamId {
    // He-style scaling for ELU, Xavier-style otherwise.
    let std = match act {
        Activation::Elu => (2.0 / rows as f64).sqrt(),
        _ => (1.0 / rows as f64).sqrt(),
    };
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    store.add(name, Tensor::matrix(rows, cols, data))
}

impl DenseNet {
    /// `dims` lists the layer widths including input and output, so
    /// `&[4, 64, 64, 1]` is a two-hidden-layer net from 4 inputs to 1 output.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        out_init: OutputInit,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "DenseNet needs at least input and output dims");
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let last = l == dims.len() - 2;
            let act = if last { Activation::None } else { hidden };
            let w = if last && out_init == OutputInit::Zero {
                store.add(
                    format!("{name}.w{l}"),
                    Tensor::zeros(vec![dims[l], dims[l + 1]]),
                )
            } else {
                init_weight(store, format!("{name}.w{l}"), dims[l], dims[l + 1], act, rng)
            };
            let b = store.add(format!("{name}.b{l}"), Tensor::vector(vec![0.0; dims[l + 1]]));
            layers.push(Layer { w, b, act });
        }
        DenseNet { layers, dims: dims.to_vec() }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Forward over a [B, in] batch (rows are samples).
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        assert_eq!(t.cols(x), self.in_dim(), "DenseNet input width");
        let mut h = x;
        for layer in &self.layers {
            let w = t.param(store, layer.w);
            let b = t.param(store, layer.b);
            let z = t.matmul(h, w);
            let z = t.add_row(z, b);
            h = match layer.act {
                Activation::Elu => t.elu(z),
                Activation::Tanh => t.tanh(z),
                Activation::None => z,
            };
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

/// Gated recurrent unit cell. Gates use logistic squashing, the candidate
/// uses tanh.
pub struct GruCell {
    wz: ParamId,
    wr: ParamId,
    wc: ParamId,
    uz: ParamId,
    ur: ParamId,
    uc: ParamId,
    bz: ParamId,
    br: ParamId,
    bc: ParamId,
    in_dim: usize,
    hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut mk = |suffix: &str, rows: usize, cols: usize, rng: &mut R| {
            init_weight(store, format!("{name}.{suffix}"), rows, cols, Activation::Tanh, rng)
        };
        let wz = mk("wz", in_dim, hidden_dim, rng);
        let wr = mk("wr", in_dim, hidden_dim, rng);
        let wc = mk("wc", in_dim, hidden_dim, rng);
        let uz = mk("uz", hidden_dim, hidden_dim, rng);
        let ur = mk("ur", hidden_dim, hidden_dim, rng);
        let uc = mk("uc", hidden_dim, hidden_dim, rng);
        let bz = store.add(format!("{name}.bz"), Tensor::vector(vec![0.0; hidden_dim]));
        let br = store.add(format!("{name}.br"), Tensor::vector(vec![0.0; hidden_dim]));
        let bc = store.add(format!("{name}.bc"), Tensor::vector(vec![0.0; hidden_dim]));
        GruCell { wz, wr, wc, uz, ur, uc, bz, br, bc, in_dim, hidden_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// One step: `x` is [B, in], `h` is [B, hidden]; returns [B, hidden].
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        assert_eq!(t.cols(x), self.in_dim, "GruCell input width");
        assert_eq!(t.cols(h), self.hidden_dim, "GruCell hidden width");
        let gate = |t: &mut Tape, w: ParamId, u: ParamId, b: ParamId| {
            let wv = t.param(store, w);
            let uv = t.param(store, u);
            let bv = t.param(store, b);
            let xs = t.matmul(x, wv);
            let hs = t.matmul(h, uv);
            let s = t.add(xs, hs);
            t.add_row(s, bv)
        };
        let z_pre = gate(t, self.wz, self.uz, self.bz);
        let z = t.sigmoid(z_pre);
        let r_pre = gate(t, self.wr, self.ur, self.br);
        let r = t.sigmoid(r_pre);

        let wc = t.param(store, self.wc);
        let uc = t.param(store, self.uc);
        let bc = t.param(store, self.bc);
        let xc = t.matmul(x, wc);
        let rh = t.mul(r, h);
        let hc = t.matmul(rh, uc);
        let c_pre = t.add(xc, hc);
        let c_pre = t.add_row(c_pre, bc);
        let c = t.tanh(c_pre);

        // h' = (1 - z) * h + z * c
        let one_minus_z = {
            let nz = t.neg(z);
            t.add_const(nz, 1.0)
        };
        let keep = t.mul(one_minus_z, h);
        let write = t.mul(z, c);
        t.add(keep, write)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wz, self.wr, self.wc, self.uz, self.ur, self.uc, self.bz, self.br, self.bc,
        ]
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_param_count_matches_tensor_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "f", &[4, 8, 3], Activation::Elu, OutputInit::Normal, &mut rng);
        assert_eq!(net.param_count(&store), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(net.param_count(&store), store.param_count());
    }

    #[test]
    fn gru_output_width_and_gate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 5, &mut rng);
        let mut t = Tape::new();
        let x = t.const_row(&[0.2, -0.4, 1.0]);
        let h = t.const_row(&[0.0; 5]);
        let h2 = cell.forward(&mut t, &store, x, h);
        assert_eq!(t.cols(h2), 5);
        assert_eq!(t.rows(h2), 1);
        // with h = 0 the output is z * tanh(...), so it must be in (-1, 1)
        assert!(t.value(h2).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_output_init_is_zero_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "v", &[4, 8, 1], Activation::Elu, OutputInit::Zero, &mut rng);
        let mut t = Tape::new();
        let x = t.const_row(&[1.0, -2.0, 0.5, 3.0]);
        let y = net.forward(&mut t, &store, x);
        assert_eq!(t.value(y), &[0.0]);
    }
}
