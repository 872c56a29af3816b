//! Graph-prompt module: a two-layer mean-aggregation message-passing
//! encoder over a retrieved subgraph followed by a two-layer MLP projector
//! into the language model's embedding space. Together these are the
//! trainable (and trojanable) soft-prompt parameters.
//!
//! Aggregation at each node averages the node itself plus its undirected
//! neighbors, so a single isolated node is its own aggregate. Pooling is
//! the mean over nodes. Node features can be overridden per node id, which
//! is how continuous embedding optimization runs without touching text.

use crate::error::{Error, Result};
use crate::kg::{NodeId, RetrievedSubgraph};
use crate::linalg::Mat;
use crate::scalar::{cast, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Linear pass-through; used by tests that need exact fixtures.
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(&self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output<T: Scalar>(&self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphPromptConfig {
    /// Node-feature dimension (text-encoder output).
    pub d_in: usize,
    /// Language-model embedding dimension (projector output).
    pub d_llm: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct GnnParams<T> {
    pub w1: Mat<T>, // d_in × d_in, applied as W·m per node
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
    pub proj_w1: Mat<T>, // d_llm × d_in
    pub proj_b1: Vec<T>,
    pub proj_w2: Mat<T>, // d_llm × d_llm
    pub proj_b2: Vec<T>,
}

impl<T: Scalar> GnnParams<T> {
    pub fn zeros(cfg: &GraphPromptConfig) -> Self {
        GnnParams {
            w1: Mat::zeros(cfg.d_in, cfg.d_in),
            b1: vec![T::zero(); cfg.d_in],
            w2: Mat::zeros(cfg.d_in, cfg.d_in),
            b2: vec![T::zero(); cfg.d_in],
            proj_w1: Mat::zeros(cfg.d_llm, cfg.d_in),
            proj_b1: vec![T::zero(); cfg.d_llm],
            proj_w2: Mat::zeros(cfg.d_llm, cfg.d_llm),
            proj_b2: vec![T::zero(); cfg.d_llm],
        }
    }

    /// Identity message-passing layers (square) and random projector.
    pub fn identity_gnn(cfg: &GraphPromptConfig) -> Self {
        let mut p = Self::zeros(cfg);
        p.w1 = Mat::from_fn(cfg.d_in, cfg.d_in, |i, j| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        });
        p.w2 = p.w1.clone();
        p.proj_w1 = Mat::from_fn(cfg.d_llm, cfg.d_in, |i, j| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        });
        p.proj_w2 = Mat::from_fn(cfg.d_llm, cfg.d_llm, |i, j| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        });
        p
    }

    pub fn random(cfg: &GraphPromptConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_in = 1.0 / (cfg.d_in as f64).sqrt();
        let s_llm = 1.0 / (cfg.d_llm as f64).sqrt();
        GnnParams {
            w1: Mat::randn(cfg.d_in, cfg.d_in, s_in, &mut rng),
            b1: vec![T::zero(); cfg.d_in],
            w2: Mat::randn(cfg.d_in, cfg.d_in, s_in, &mut rng),
            b2: vec![T::zero(); cfg.d_in],
            proj_w1: Mat::randn(cfg.d_llm, cfg.d_in, s_in, &mut rng),
            proj_b1: vec![T::zero(); cfg.d_llm],
            proj_w2: Mat::randn(cfg.d_llm, cfg.d_llm, s_llm, &mut rng),
            proj_b2: vec![T::zero(); cfg.d_llm],
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        vec![
            ("w1".into(), vec![self.w1.rows(), self.w1.cols()], self.w1.data()),
            ("b1".into(), vec![self.b1.len()], self.b1.as_slice()),
            ("w2".into(), vec![self.w2.rows(), self.w2.cols()], self.w2.data()),
            ("b2".into(), vec![self.b2.len()], self.b2.as_slice()),
            (
                "proj_w1".into(),
                vec![self.proj_w1.rows(), self.proj_w1.cols()],
                self.proj_w1.data(),
            ),
            ("proj_b1".into(), vec![self.proj_b1.len()], self.proj_b1.as_slice()),
            (
                "proj_w2".into(),
                vec![self.proj_w2.rows(), self.proj_w2.cols()],
                self.proj_w2.data(),
            ),
            ("proj_b2".into(), vec![self.proj_b2.len()], self.proj_b2.as_slice()),
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            self.proj_w1.data_mut(),
            &mut self.proj_b1,
            self.proj_w2.data_mut(),
            &mut self.proj_b2,
        ]
    }

    pub fn flat(&self) -> Vec<&[T]> {
        self.named_tensors().into_iter().map(|(_, _, d)| d).collect()
    }

    pub fn add_scaled(&mut self, other: &GnnParams<T>, alpha: T) {
        let others = other.flat();
        for (dst, src) in self.flat_mut().into_iter().zip(others) {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of every parameter as f64 (for alignment losses).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.flat()
            .iter()
            .flat_map(|s| s.iter().map(|v| crate::scalar::to_f64(*v)))
            .collect()
    }
}

/// Replaces one node's input feature during graph encoding.
#[derive(Clone, Debug)]
pub struct NodeEmbeddingOverride<T> {
    pub node: NodeId,
    pub embedding: Vec<T>,
}

/// Where a soft prompt came from; recorded so downstream analyses can
/// distinguish the conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PromptCondition {
    None,
    Zero,
    Random { seed: u64 },
    CleanGraph,
    PoisonedGraph,
}

impl PromptCondition {
    pub fn label(&self) -> &'static str {
        match self {
            PromptCondition::None => "none",
            PromptCondition::Zero => "zero",
            PromptCondition::Random { .. } => "random",
            PromptCondition::CleanGraph => "clean_graph",
            PromptCondition::PoisonedGraph => "poisoned_graph",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SoftPrompt<T> {
    pub vector: Vec<T>,
    pub condition: PromptCondition,
}

/// Caches for the two-layer encoder. Node order is the sorted node-id
/// order; all matrices are node-major.
pub struct GraphCache<T> {
    node_order: Vec<NodeId>,
    neighbor_idx: Vec<Vec<usize>>, // self + undirected neighbors
    m1: Mat<T>,
    h1: Mat<T>,
    m2: Mat<T>,
    h2: Mat<T>,
}

pub struct ProjCache<T> {
    rep: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct GraphPromptModule<T> {
    pub cfg: GraphPromptConfig,
    pub params: GnnParams<T>,
}

impl<T: Scalar> GraphPromptModule<T> {
    pub fn new(cfg: GraphPromptConfig, params: GnnParams<T>) -> Self {
        GraphPromptModule { cfg, params }
    }

    pub fn random(cfg: GraphPromptConfig, seed: u64) -> Self {
        let params = GnnParams::random(&cfg, seed);
        GraphPromptModule { cfg, params }
    }

    /// Two rounds of mean aggregation (self plus undirected neighbors),
    /// each followed by a linear map and the activation, then mean pooling
    /// over nodes. Features come from `features` unless overridden.
    pub fn encode_graph(
        &self,
        sub: &RetrievedSubgraph,
        features: &BTreeMap<NodeId, Vec<T>>,
        overrides: &[NodeEmbeddingOverride<T>],
    ) -> Result<(Vec<T>, GraphCache<T>)> {
        let node_order: Vec<NodeId> = sub.node_ids().cloned().collect();
        if node_order.is_empty() {
            return Err(Error::EmptyInput("subgraph to encode"));
        }
        let n = node_order.len();
        let d = self.cfg.d_in;
        let index: BTreeMap<&str, usize> = node_order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();

        for ov in overrides {
            if !index.contains_key(ov.node.as_str()) {
                return Err(Error::UnknownEntity(ov.node.clone()));
            }
            if ov.embedding.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "node embedding override",
                    expected: d.to_string(),
                    got: ov.embedding.len().to_string(),
                });
            }
        }

        let mut h0 = Mat::zeros(n, d);
        for (i, id) in node_order.iter().enumerate() {
            let feat = features
                .get(id)
                .ok_or_else(|| Error::UnknownEntity(format!("feature for node `{id}`")))?;
            if feat.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "node feature",
                    expected: d.to_string(),
                    got: feat.len().to_string(),
                });
            }
            h0.row_mut(i).copy_from_slice(feat);
        }
        for ov in overrides {
            h0.row_mut(index[ov.node.as_str()]).copy_from_slice(&ov.embedding);
        }

        // Self plus undirected neighbors, deduplicated and sorted.
        let mut neighbor_idx: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for e in sub.edges() {
            let (a, b) = (index[e.src.as_str()], index[e.dst.as_str()]);
            if a != b {
                neighbor_idx[a].push(b);
                neighbor_idx[b].push(a);
            }
        }
        for nbrs in neighbor_idx.iter_mut() {
            nbrs.sort_unstable();
            nbrs.dedup();
        }

        let layer = |h: &Mat<T>, w: &Mat<T>, b: &[T], agg_out: &mut Mat<T>| -> Mat<T> {
            let mut out = Mat::zeros(n, d);
            for i in 0..n {
                let inv = cast::<T>(1.0 / neighbor_idx[i].len() as f64);
                let arow = agg_out.row_mut(i);
                for &j in &neighbor_idx[i] {
                    for (a, &x) in arow.iter_mut().zip(h.row(j).iter()) {
                        *a += x;
                    }
                }
                for a in arow.iter_mut() {
                    *a = *a * inv;
                }
                let orow = out.row_mut(i);
                for r in 0..d {
                    let mut z = b[r];
                    let wrow = w.row(r);
                    for (c, &a) in agg_out.row(i).iter().enumerate() {
                        z += wrow[c] * a;
                    }
                    orow[r] = self.cfg.activation.apply(z);
                }
            }
            out
        };

        let mut m1 = Mat::zeros(n, d);
        let h1 = layer(&h0, &self.params.w1, &self.params.b1, &mut m1);
        let mut m2 = Mat::zeros(n, d);
        let h2 = layer(&h1, &self.params.w2, &self.params.b2, &mut m2);

        let mut pooled = vec![T::zero(); d];
        for i in 0..n {
            for (p, &x) in pooled.iter_mut().zip(h2.row(i).iter()) {
                *p += x;
            }
        }
        let inv = cast::<T>(1.0 / n as f64);
        for p in pooled.iter_mut() {
            *p = *p * inv;
        }

        Ok((
            pooled,
            GraphCache {
                node_order,
                neighbor_idx,
                m1,
                h1,
                m2,
                h2,
            },
        ))
    }

    /// Backward through pooling and both message-passing layers. Returns
    /// per-node input-feature gradients (overridden nodes included) and
    /// accumulates parameter gradients into `grads`.
    pub fn encode_graph_backward(
        &self,
        d_pooled: &[T],
        cache: &GraphCache<T>,
        grads: &mut GnnParams<T>,
    ) -> BTreeMap<NodeId, Vec<T>> {
        let n = cache.node_order.len();
        let d = self.cfg.d_in;
        let inv_n = cast::<T>(1.0 / n as f64);

        let mut d_h2 = Mat::zeros(n, d);
        for i in 0..n {
            for (g, &s) in d_h2.row_mut(i).iter_mut().zip(d_pooled.iter()) {
                *g = s * inv_n;
            }
        }

        let layer_back = |d_h: &Mat<T>,
                          h_out: &Mat<T>,
                          agg: &Mat<T>,
                          w: &Mat<T>,
                          gw: &mut Mat<T>,
                          gb: &mut Vec<T>| -> Mat<T> {
            // dz = d_h ∘ act'(h_out); gw += dz ⊗ agg; d_agg = wᵀ·dz;
            // then distribute d_agg back through the mean aggregation.
            let mut d_prev = Mat::zeros(n, d);
            for i in 0..n {
                let mut dz = vec![T::zero(); d];
                for r in 0..d {
                    dz[r] = d_h.row(i)[r]
                        * self.cfg.activation.derivative_from_output(h_out.row(i)[r]);
                    gb[r] += dz[r];
                    let gw_row = gw.row_mut(r);
                    for (c, &a) in agg.row(i).iter().enumerate() {
                        gw_row[c] += dz[r] * a;
                    }
                }
                let mut d_agg = vec![T::zero(); d];
                for r in 0..d {
                    let wrow = w.row(r);
                    for c in 0..d {
                        d_agg[c] += wrow[c] * dz[r];
                    }
                }
                let inv = cast::<T>(1.0 / cache.neighbor_idx[i].len() as f64);
                for &j in &cache.neighbor_idx[i] {
                    for (g, &s) in d_prev.row_mut(j).iter_mut().zip(d_agg.iter()) {
                        *g = *g + s * inv;
                    }
                }
            }
            d_prev
        };

        let mut gw2 = Mat::zeros(d, d);
        let mut gb2 = vec![T::zero(); d];
        let d_h1 = layer_back(&d_h2, &cache.h2, &cache.m2, &self.params.w2, &mut gw2, &mut gb2);
        let mut gw1 = Mat::zeros(d, d);
        let mut gb1 = vec![T::zero(); d];
        let d_h0 = layer_back(&d_h1, &cache.h1, &cache.m1, &self.params.w1, &mut gw1, &mut gb1);

        grads.w2.add_assign(&gw2);
        for (g, s) in grads.b2.iter_mut().zip(gb2) {
            *g += s;
        }
        grads.w1.add_assign(&gw1);
        for (g, s) in grads.b1.iter_mut().zip(gb1) {
            *g += s;
        }

        cache
            .node_order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), d_h0.row(i).to_vec()))
            .collect()
    }

    /// Two-layer MLP from the pooled representation into the language
    /// model's embedding space: act(W1·rep + b1), then a linear output.
    pub fn project(&self, rep: &[T]) -> Result<(Vec<T>, ProjCache<T>)> {
        if rep.len() != self.cfg.d_in {
            return Err(Error::ShapeMismatch {
                context: "projector input",
                expected: self.cfg.d_in.to_string(),
                got: rep.len().to_string(),
            });
        }
        let dl = self.cfg.d_llm;
        let mut hidden = vec![T::zero(); dl];
        for r in 0..dl {
            let mut z = self.params.proj_b1[r];
            let wrow = self.params.proj_w1.row(r);
            for (c, &x) in rep.iter().enumerate() {
                z += wrow[c] * x;
            }
            hidden[r] = self.cfg.activation.apply(z);
        }
        let mut out = vec![T::zero(); dl];
        for r in 0..dl {
            let mut z = self.params.proj_b2[r];
            let wrow = self.params.proj_w2.row(r);
            for (c, &h) in hidden.iter().enumerate() {
                z += wrow[c] * h;
            }
            out[r] = z;
        }
        Ok((
            out,
            ProjCache {
                rep: rep.to_vec(),
                hidden,
            },
        ))
    }

    /// Backward through the projector; returns d_rep and accumulates
    /// parameter gradients.
    pub fn project_backward(
        &self,
        d_out: &[T],
        cache: &ProjCache<T>,
        grads: &mut GnnParams<T>,
    ) -> Vec<T> {
        let dl = self.cfg.d_llm;
        let din = self.cfg.d_in;
        let mut d_hidden = vec![T::zero(); dl];
        for r in 0..dl {
            grads.proj_b2[r] += d_out[r];
            let grow = grads.proj_w2.row_mut(r);
            let wrow = self.params.proj_w2.row(r);
            for c in 0..dl {
                grow[c] += d_out[r] * cache.hidden[c];
                d_hidden[c] += wrow[c] * d_out[r];
            }
        }
        let mut d_rep = vec![T::zero(); din];
        for r in 0..dl {
            let dz = d_hidden[r] * self.cfg.activation.derivative_from_output(cache.hidden[r]);
            grads.proj_b1[r] += dz;
            let grow = grads.proj_w1.row_mut(r);
            let wrow = self.params.proj_w1.row(r);
            for c in 0..din {
                grow[c] += dz * cache.rep[c];
                d_rep[c] += wrow[c] * dz;
            }
        }
        d_rep
    }
}

/// Builds the non-graph prompt conditions. `None` yields no prompt; `Zero`
/// a zero vector; `Random` a standard-normal vector from its own seed.
/// Graph-derived conditions are produced by `encode_graph` + `project` and
/// are rejected here.
pub fn condition_prompt<T: Scalar>(
    condition: PromptCondition,
    d_llm: usize,
) -> Result<Option<SoftPrompt<T>>> {
    match condition {
        PromptCondition::None => Ok(None),
        PromptCondition::Zero => Ok(Some(SoftPrompt {
            vector: vec![T::zero(); d_llm],
            condition,
        })),
        PromptCondition::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mat::<T>::randn(1, d_llm, 1.0, &mut rng);
            Ok(Some(SoftPrompt {
                vector: m.row(0).to_vec(),
                condition,
            }))
        }
        PromptCondition::CleanGraph | PromptCondition::PoisonedGraph => Err(Error::InvalidConfig(
            "graph-derived prompt conditions are built from a subgraph, not sampled".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{retrieve_subgraph, EdgeRecord, KnowledgeGraph, NodeRecord};
    use crate::testing::{fd_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn demo_graph() -> KnowledgeGraph {
        let nodes = [
            ("a", "alpha thing"),
            ("b", "beta thing"),
            ("c", "gamma thing"),
            ("d", "delta thing"),
        ]
        .map(|(id, attr)| NodeRecord::clean(id, attr));
        let edges = [
            EdgeRecord::new("a", "r", "b"),
            EdgeRecord::new("b", "r", "c"),
            EdgeRecord::new("a", "r", "d"),
        ];
        KnowledgeGraph::from_records(nodes, edges).unwrap()
    }

    fn features_for(
        sub: &RetrievedSubgraph,
        d: usize,
        seed: u64,
    ) -> BTreeMap<NodeId, Vec<T64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sub.node_ids()
            .map(|id| (id.clone(), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    type T64 = f64;

    #[test]
    fn single_node_identity_linear_module_is_the_identity_map() {
        let g = KnowledgeGraph::from_records(
            [NodeRecord::clean("only", "lonely node")],
            [],
        )
        .unwrap();
        let sub = retrieve_subgraph(&g, "only", 1, 4).unwrap();
        let cfg = GraphPromptConfig {
            d_in: 3,
            d_llm: 3,
            activation: Activation::Identity,
        };
        let module = GraphPromptModule::new(cfg.clone(), GnnParams::identity_gnn(&cfg));
        let mut features = BTreeMap::new();
        features.insert("only".to_string(), vec![0.5, -1.0, 2.0]);
        let (pooled, _) = module.encode_graph(&sub, &features, &[]).unwrap();
        assert_eq!(pooled, vec![0.5, -1.0, 2.0]);
        let (prompt, _) = module.project(&pooled).unwrap();
        assert_eq!(prompt, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn identical_features_pool_to_the_shared_feature_under_identity() {
        // With every node carrying the same feature, mean aggregation is a
        // fixed point regardless of topology.
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 2, 10).unwrap();
        let cfg = GraphPromptConfig {
            d_in: 2,
            d_llm: 2,
            activation: Activation::Identity,
        };
        let module = GraphPromptModule::new(cfg.clone(), GnnParams::identity_gnn(&cfg));
        let features: BTreeMap<NodeId, Vec<f64>> = sub
            .node_ids()
            .map(|id| (id.clone(), vec![0.25, -0.75]))
            .collect();
        let (pooled, _) = module.encode_graph(&sub, &features, &[]).unwrap();
        assert!((pooled[0] - 0.25).abs() < 1e-12);
        assert!((pooled[1] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn override_replaces_exactly_one_node_feature() {
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 1, 10).unwrap();
        let cfg = GraphPromptConfig {
            d_in: 4,
            d_llm: 4,
            activation: Activation::Tanh,
        };
        let module = GraphPromptModule::<f64>::random(cfg, 3);
        let features = features_for(&sub, 4, 1);
        let (base, _) = module.encode_graph(&sub, &features, &[]).unwrap();
        let ov = NodeEmbeddingOverride {
            node: "b".to_string(),
            embedding: vec![9.0, -9.0, 9.0, -9.0],
        };
        let (with, _) = module.encode_graph(&sub, &features, &[ov]).unwrap();
        assert_ne!(base, with);
        // Overriding with the original feature restores the base output.
        let same = NodeEmbeddingOverride {
            node: "b".to_string(),
            embedding: features["b"].clone(),
        };
        let (restored, _) = module.encode_graph(&sub, &features, &[same]).unwrap();
        assert_eq!(base, restored);
    }

    #[test]
    fn override_for_absent_node_is_an_error() {
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 0, 10).unwrap();
        let cfg = GraphPromptConfig {
            d_in: 2,
            d_llm: 2,
            activation: Activation::Tanh,
        };
        let module = GraphPromptModule::<f64>::random(cfg, 3);
        let features = features_for(&sub, 2, 1);
        let ov = NodeEmbeddingOverride {
            node: "zz".to_string(),
            embedding: vec![0.0, 0.0],
        };
        assert!(module.encode_graph(&sub, &features, &[ov]).is_err());
    }

    #[test]
    fn dense_adjacency_oracle_matches_encode_graph() {
        // Re-derive the two-layer computation with explicit normalized
        // adjacency matrices and compare.
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 2, 10).unwrap();
        let d = 3;
        let cfg = GraphPromptConfig {
            d_in: d,
            d_llm: 3,
            activation: Activation::Tanh,
        };
        let module = GraphPromptModule::<f64>::random(cfg, 9);
        let features = features_for(&sub, d, 5);
        let (pooled, _) = module.encode_graph(&sub, &features, &[]).unwrap();

        let order: Vec<NodeId> = sub.node_ids().cloned().collect();
        let n = order.len();
        let idx: BTreeMap<&str, usize> =
            order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut adj = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            adj[i][i] = 1.0;
        }
        for e in sub.edges() {
            let (a, b) = (idx[e.src.as_str()], idx[e.dst.as_str()]);
            adj[a][b] = 1.0;
            adj[b][a] = 1.0;
        }
        let mut h: Vec<Vec<f64>> = order.iter().map(|id| features[id].clone()).collect();
        for w in [&module.params.w1, &module.params.w2] {
            let mut next = vec![vec![0.0; d]; n];
            for i in 0..n {
                let deg: f64 = adj[i].iter().sum();
                let mut agg = vec![0.0; d];
                for j in 0..n {
                    if adj[i][j] > 0.0 {
                        for c in 0..d {
                            agg[c] += h[j][c];
                        }
                    }
                }
                for c in 0..d {
                    agg[c] /= deg;
                }
                for r in 0..d {
                    let mut z = 0.0;
                    for c in 0..d {
                        z += w.row(r)[c] * agg[c];
                    }
                    next[i][r] = z.tanh();
                }
            }
            h = next;
        }
        for c in 0..d {
            let want: f64 = h.iter().map(|row| row[c]).sum::<f64>() / n as f64;
            assert!(
                (pooled[c] - want).abs() < 1e-12,
                "component {c}: {} vs oracle {}",
                pooled[c],
                want
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_encode_and_project() {
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 2, 10).unwrap();
        let d = 4;
        let cfg = GraphPromptConfig {
            d_in: d,
            d_llm: 5,
            activation: Activation::Tanh,
        };
        let module = GraphPromptModule::<f64>::random(cfg, 21);
        let features = features_for(&sub, d, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let seed_vec: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Loss = <project(encode(...)), seed_vec>, gradient wrt node b's
        // input feature.
        let loss = |feat_b: &[f64]| {
            let ov = NodeEmbeddingOverride {
                node: "b".to_string(),
                embedding: feat_b.to_vec(),
            };
            let (pooled, _) = module.encode_graph(&sub, &features, &[ov]).unwrap();
            let (out, _) = module.project(&pooled).unwrap();
            out.iter().zip(seed_vec.iter()).map(|(&a, &b)| a * b).sum()
        };
        let x0 = features["b"].clone();
        let numeric = fd_grad(loss, &x0);

        let ov = NodeEmbeddingOverride {
            node: "b".to_string(),
            embedding: x0.clone(),
        };
        let (pooled, gcache) = module.encode_graph(&sub, &features, &[ov]).unwrap();
        let (_, pcache) = module.project(&pooled).unwrap();
        let mut grads = GnnParams::zeros(&module.cfg);
        let d_rep = module.project_backward(&seed_vec, &pcache, &mut grads);
        let d_feats = module.encode_graph_backward(&d_rep, &gcache, &mut grads);
        let analytic = &d_feats["b"];
        let err = relative_error(analytic, &numeric);
        assert!(err < 1e-7, "feature gradient relative error {err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let g = demo_graph();
        let sub = retrieve_subgraph(&g, "a", 2, 10).unwrap();
        let d = 3;
        let cfg = GraphPromptConfig {
            d_in: d,
            d_llm: 4,
            activation: Activation::Tanh,
        };
        let module = GraphPromptModule::<f64>::random(cfg.clone(), 33);
        let features = features_for(&sub, d, 4);
        let seed_vec = vec![0.7, -0.3, 0.2, 0.9];

        let (pooled, gcache) = module.encode_graph(&sub, &features, &[]).unwrap();
        let (_, pcache) = module.project(&pooled).unwrap();
        let mut grads = GnnParams::zeros(&cfg);
        let d_rep = module.project_backward(&seed_vec, &pcache, &mut grads);
        module.encode_graph_backward(&d_rep, &gcache, &mut grads);

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let count = grads.flat().len();
        for _ in 0..30 {
            let t = rng.gen_range(0..count);
            let len = grads.flat()[t].len();
            let j = rng.gen_range(0..len);
            let analytic = grads.flat()[t][j];
            let h = 1e-6;
            let probe = |delta: f64| {
                let mut m = module.clone();
                m.params.flat_mut()[t][j] += delta;
                let (pooled, _) = m.encode_graph(&sub, &features, &[]).unwrap();
                let (out, _) = m.project(&pooled).unwrap();
                out.iter().zip(seed_vec.iter()).map(|(&a, &b)| a * b).sum::<f64>()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let denom: f64 = numeric.abs().max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "tensor {t} coord {j}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn zero_condition_is_a_zero_vector_and_none_is_absent() {
        let zero = condition_prompt::<f64>(PromptCondition::Zero, 6).unwrap().unwrap();
        assert_eq!(zero.vector, vec![0.0; 6]);
        assert!(condition_prompt::<f64>(PromptCondition::None, 6).unwrap().is_none());
    }

    #[test]
    fn random_condition_is_seed_deterministic() {
        let a = condition_prompt::<f64>(PromptCondition::Random { seed: 4 }, 8)
            .unwrap()
            .unwrap();
        let b = condition_prompt::<f64>(PromptCondition::Random { seed: 4 }, 8)
            .unwrap()
            .unwrap();
        let c = condition_prompt::<f64>(PromptCondition::Random { seed: 5 }, 8)
            .unwrap()
            .unwrap();
        assert_eq!(a.vector, b.vector);
        assert_ne!(a.vector, c.vector);
    }

    #[test]
    fn graph_conditions_are_rejected_by_condition_prompt() {
        assert!(condition_prompt::<f64>(PromptCondition::CleanGraph, 4).is_err());
        assert!(condition_prompt::<f64>(PromptCondition::PoisonedGraph, 4).is_err());
    }

    proptest! {
        #[test]
        fn pooled_encoding_is_invariant_to_node_insertion_order(
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()
        ) {
            // Same graph assembled in permuted order: identical output.
            let cfg = GraphPromptConfig { d_in: 2, d_llm: 2, activation: Activation::Tanh };
            let module = GraphPromptModule::<f64>::random(cfg, 2);
            let build = |order: &[usize]| {
                let mut g = KnowledgeGraph::new();
                for &i in order {
                    g.insert_node(NodeRecord::clean(format!("n{i}"), format!("text {i}"))).unwrap();
                }
                for i in 0..3 {
                    g.insert_edge(EdgeRecord::new(format!("n{i}"), "r", format!("n{}", i + 1))).unwrap();
                }
                retrieve_subgraph(&g, "n0", 4, 10).unwrap()
            };
            let sub_a = build(&[0, 1, 2, 3]);
            let sub_b = build(&perm);
            let features: BTreeMap<NodeId, Vec<f64>> = (0..4)
                .map(|i| (format!("n{i}"), vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2]))
                .collect();
            let (pa, _) = module.encode_graph(&sub_a, &features, &[]).unwrap();
            let (pb, _) = module.encode_graph(&sub_b, &features, &[]).unwrap();
            prop_assert_eq!(pa, pb);
        }
    }
}
