//! Parameter storage and the small set of layers the models are built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var, LAYER_NORM_EPS};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    /// Dotted path, e.g. `compressor.block0.self_q`. The first segment is
    /// the parameter group.
    pub name: String,
    pub value: Matrix,
}

impl Param {
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

/// Flat list of every trainable array of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn values(&self) -> impl Iterator<Item = &Matrix> {
        self.params.iter().map(|p| &p.value)
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.iter().any(|g| g == p.group()) {
                out.push(p.group().to_string());
            }
        }
        out
    }

    /// Puts every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.param(p.value.clone())).collect() }
    }
}

/// Parameter leaves of one [`ParamStore`] on one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; zeros for parameters nothing flowed into.
    pub fn grads(&self, g: &Graph) -> Vec<Matrix> {
        self.vars.iter().map(|v| g.grad_or_zeros(*v)).collect()
    }
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), fan_in, fan_out, bound, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), 1, fan_out, bound, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Two affine maps with an activation between them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, true, rng),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.activate(h, self.act);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Splits the model width into `heads` column blocks, attends per head
/// and concatenates. With one head this is plain scaled dot attention.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    mask: Option<&Matrix>,
) -> Var {
    let d = g.value(queries).cols();
    assert!(heads >= 1 && d % heads == 0, "width {d} not divisible into {heads} heads");
    if heads == 1 {
        let w = g.attention_weights(queries, keys, mask);
        return g.matmul(w, values);
    }
    let hd = d / heads;
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = g.slice_cols(queries, h * hd, hd);
            let k = g.slice_cols(keys, h * hd, hd);
            let v = g.slice_cols(values, h * hd, hd);
            let w = g.attention_weights(q, k, mask);
            g.matmul(w, v)
        })
        .collect();
    g.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_init_is_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "x.lin", 16, 4, true, &mut rng);
        let bound = 0.25;
        assert!(store.get(lin.w).as_slice().iter().all(|v| v.abs() <= bound));
        assert!(store.get(lin.b.unwrap()).as_slice().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.groups(), vec!["x".to_string()]);
    }

    #[test]
    fn mlp_zero_weights_and_relu_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", (2, 2, 2), Activation::Relu, &mut rng);
        for p in store.params_mut() {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        let mut g = Graph::no_grad();
        let b = store.bind(&mut g);
        let x = g.constant(Matrix::row_vector(vec![-1.0, 2.0]));
        let y = mlp.forward(&mut g, &b, x);
        assert_eq!(g.value(y).as_slice(), &[0.0, 0.0]);

        *store.get_mut(mlp.fc1.w) = Matrix::identity(2);
        *store.get_mut(mlp.fc2.w) = Matrix::identity(2);
        let mut g = Graph::no_grad();
        let b = store.bind(&mut g);
        let x = g.constant(Matrix::row_vector(vec![-1.0, 2.0]));
        let y = mlp.forward(&mut g, &b, x);
        assert_eq!(g.value(y).as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn multi_head_matches_single_head_when_one_head() {
        let mut g = Graph::no_grad();
        let q = g.constant(Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]]));
        let k = g.constant(Matrix::from_rows(&[[0.5, -0.2, 0.3, 0.0], [0.1, 0.1, -0.4, 0.2]]));
        let one = multi_head_attention(&mut g, q, k, k, 1, None);
        let plain = g.scaled_dot_attention(q, k, k);
        assert_eq!(g.value(one), g.value(plain));
        let two = multi_head_attention(&mut g, q, k, k, 2, None);
        assert_eq!(g.value(two).shape(), (1, 4));
    }
}
