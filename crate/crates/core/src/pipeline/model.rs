use rand::Rng;

use crate::error::Result;
use crate::losses::EmbeddingBatch;
use crate::nn::{Graph, LinearLayer, ParamId, ParamStore, Tensor, Var};

/// `f`: an MLP trunk with ReLU activations, a linear head to the embedding
/// dimension and row normalization.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub trunk: Vec<LinearLayer>,
    pub head: LinearLayer,
    pub input_dim: usize,
    pub embedding_dim: usize,
}

impl Embedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            trunk.push(LinearLayer::new(store, &format!("embed.trunk{i}"), prev, h, rng)?);
            prev = h;
        }
        let head = LinearLayer::new(store, "embed.head", prev, embedding_dim, rng)?;
        Ok(Embedder {
            trunk,
            head,
            input_dim,
            embedding_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(g, store, h)?;
            h = g.relu(h);
        }
        h = self.head.forward(g, store, h)?;
        g.l2_normalize_rows(h)
    }

    /// Embeddings as plain values.
    pub fn embed(&self, store: &ParamStore, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(inputs.clone());
        let e = self.forward(&mut g, store, x)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_batch(&self, store: &ParamStore, inputs: &Tensor, labels: Vec<usize>) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(&self.embed(store, inputs)?, labels)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.trunk.iter().flat_map(LinearLayer::params).collect();
        v.extend(self.head.params());
        v
    }

    pub fn trunk_parameter_count(&self) -> usize {
        self.trunk.iter().map(LinearLayer::parameter_count).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }
}
