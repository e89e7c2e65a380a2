//! Frame encoder and positional embeddings.
//!
//! Each modality of a [`RawObservation`] gets its own MLP; the embeddings
//! are concatenated and a joint MLP maps them to one `D`-wide
//! [`ObservationToken`]. A final layer norm puts tokens on the same
//! per-dimension scale as the sinusoidal positional embedding that stamps
//! them once they leave the window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Mlp, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObservation {
    /// One fixed-length vector per modality (task features, proprioception).
    pub modalities: Vec<Vec<f64>>,
    /// Episode timestep.
    pub t: usize,
}

impl RawObservation {
    pub fn flat(&self) -> Vec<f64> {
        self.modalities.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.modalities.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationToken {
    pub values: Vec<f64>,
    pub t: usize,
}

impl ObservationToken {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(self.values.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    modality_dims: Vec<usize>,
    per_modality: Vec<Mlp>,
    joint: Mlp,
    out_norm: LayerNorm,
    dim: usize,
}

impl Encoder {
    /// `modality_dims` fixes the input layout; every modality is embedded
    /// to `dim / 2` before the joint MLP maps the concatenation to `dim`.
    pub fn new(store: &mut ParamStore, modality_dims: &[usize], dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let emb = (dim / 2).max(1);
        let per_modality = modality_dims
            .iter()
            .enumerate()
            .map(|(i, &m)| Mlp::new(store, &format!("encoder.mod{i}"), (m, emb, emb), act, rng))
            .collect();
        let joint = Mlp::new(store, "encoder.joint", (emb * modality_dims.len(), dim, dim), act, rng);
        let out_norm = LayerNorm::new(store, "encoder.out_norm", dim);
        Self { modality_dims: modality_dims.to_vec(), per_modality, joint, out_norm, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality_dims(&self) -> &[usize] {
        &self.modality_dims
    }

    fn check(&self, raw: &RawObservation) -> Result<()> {
        let dims: Vec<usize> = raw.modalities.iter().map(Vec::len).collect();
        if dims != self.modality_dims {
            return Err(Error::Config(format!(
                "observation modality dims {dims:?} do not match encoder {:?}",
                self.modality_dims
            )));
        }
        Ok(())
    }

    /// Encodes frames as the rows of one `frames × D` node.
    pub fn encode_frames(&self, g: &mut Graph, p: &Bound, raws: &[&RawObservation]) -> Result<Var> {
        if raws.is_empty() {
            return Err(Error::Contract("encode_frames: no frames".into()));
        }
        for raw in raws {
            self.check(raw)?;
        }
        let inputs: Vec<Var> = (0..self.modality_dims.len())
            .map(|i| {
                let rows: Vec<&[f64]> = raws.iter().map(|r| r.modalities[i].as_slice()).collect();
                g.constant(Matrix::from_rows(&rows))
            })
            .collect();
        self.encode_inputs(g, p, &inputs)
    }

    /// Encodes inputs already on the graph: one `frames × dim_i` node per
    /// modality.
    pub fn encode_inputs(&self, g: &mut Graph, p: &Bound, inputs: &[Var]) -> Result<Var> {
        let dims: Vec<usize> = inputs.iter().map(|v| g.value(*v).cols()).collect();
        if dims != self.modality_dims {
            return Err(Error::Config(format!(
                "observation modality dims {dims:?} do not match encoder {:?}",
                self.modality_dims
            )));
        }
        let embeddings: Vec<Var> = self.per_modality.iter().zip(inputs).map(|(mlp, x)| mlp.forward(g, p, *x)).collect();
        let joint_in = if embeddings.len() == 1 { embeddings[0] } else { g.concat_cols(&embeddings) };
        let token = self.joint.forward(g, p, joint_in);
        Ok(self.out_norm.forward(g, p, token))
    }

    /// Pure, gradient-free encoding of a single frame.
    pub fn encode_frame(&self, raw: &RawObservation, store: &ParamStore) -> Result<ObservationToken> {
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let v = self.encode_frames(&mut g, &p, &[raw])?;
        Ok(ObservationToken { values: g.value(v).as_slice().to_vec(), t: raw.t })
    }
}

/// Fixed sinusoidal embedding: entry `2i` is `sin(τ / 10000^(2i/D))`, entry
/// `2i+1` is `cos` of the same angle.
pub fn positional_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "positional embedding needs an even width, got {dim}");
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// `f_τ = o_τ + PE(τ)` for a token leaving the working window.
pub fn stamp_out_of_window(token: &ObservationToken) -> Vec<f64> {
    let pe = positional_embedding(token.t, token.dim());
    token.values.iter().zip(pe).map(|(o, p)| o + p).collect()
}

/// Graph version of [`stamp_out_of_window`] for a `1 × D` row.
pub fn stamp_var(g: &mut Graph, token: Var, t: usize) -> Var {
    let d = g.value(token).cols();
    let pe = g.constant(Matrix::row_vector(positional_embedding(t, d)));
    g.add(token, pe)
}
