//! Network builders and the generic forward/backward tree they produce.
//!
//! A [`Model`] is a tree of [`Node`]s whose leaves are [`Layer`]s. Parameter
//! names are dotted paths (`block1.layer2.conv.weight`), so a flat
//! [`ModelParams`] snapshot can be aggregated, checkpointed and loaded back
//! into any model built from the same [`Arch`].

mod baselines;
pub mod checkpoint;
mod densenet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::gradcheck::Fragment;
use crate::nn::{Cache, Layer, Mode, NamedTensors, ParamStore, Real, Tensor};
use crate::seed;

pub use baselines::{build_baseline, BaselineConfig, BaselineKind};
pub use densenet::{build_proposed, DenseBlock, DenseCache, DenseNetConfig};

/// Everything needed to rebuild a network's layer structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Arch {
    Proposed(DenseNetConfig),
    Baseline(BaselineConfig),
}

impl Arch {
    /// `(rows, width)` of one input example.
    pub fn input_shape(&self) -> (usize, usize) {
        match self {
            Arch::Proposed(c) => (c.rows, c.width),
            Arch::Baseline(c) => (c.rows, c.width),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Arch::Proposed(c) => c.embedding_dim,
            Arch::Baseline(c) => c.classes,
        }
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> &'static str {
        match self {
            Arch::Proposed(_) => "proposed",
            Arch::Baseline(c) => c.kind.id(),
        }
    }

    /// True for the embedding network trained with the triplet loss; the
    /// baselines emit class logits and train with cross-entropy.
    pub fn is_metric(&self) -> bool {
        matches!(self, Arch::Proposed(_))
    }

    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::DescriptorMismatch(format!("unparseable descriptor `{s}`: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T: Real = f64> {
    Layer(Layer<T>),
    Seq(Vec<Node<T>>),
    Dense(DenseBlock<T>),
    /// `body(x) + x`.
    Residual(Vec<Node<T>>),
    Flatten,
}

#[derive(Debug, Clone)]
pub enum NodeCache<T: Real> {
    Layer(Cache<T>),
    Seq(Vec<NodeCache<T>>),
    Dense(DenseCache<T>),
    Residual(Vec<NodeCache<T>>),
    Flatten(Vec<usize>),
}

fn seq_forward<T: Real>(
    nodes: &mut [Node<T>],
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<NodeCache<T>>)> {
    let mut caches = Vec::with_capacity(nodes.len());
    let mut cur: Option<Tensor<T>> = None;
    for node in nodes.iter_mut() {
        let (y, c) = node.forward(cur.as_ref().unwrap_or(x), mode)?;
        caches.push(c);
        cur = Some(y);
    }
    Ok((cur.unwrap_or_else(|| x.clone()), caches))
}

fn seq_backward<T: Real>(
    nodes: &[Node<T>],
    caches: &[NodeCache<T>],
    dy: &Tensor<T>,
    grads: &mut NamedTensors<T>,
) -> Result<Tensor<T>> {
    if nodes.len() != caches.len() {
        return Err(Error::InvalidCache("sequence length changed since forward".into()));
    }
    let mut g = dy.clone();
    for (node, cache) in nodes.iter().zip(caches).rev() {
        g = node.backward(cache, &g, grads)?;
    }
    Ok(g)
}

impl<T: Real> Node<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NodeCache<T>)> {
        match self {
            Node::Layer(l) => {
                let (y, c) = l.forward(&[x], mode)?;
                Ok((y, NodeCache::Layer(c)))
            }
            Node::Seq(nodes) => {
                let (y, c) = seq_forward(nodes, x, mode)?;
                Ok((y, NodeCache::Seq(c)))
            }
            Node::Dense(block) => {
                let (y, c) = block.forward(x, mode)?;
                Ok((y, NodeCache::Dense(c)))
            }
            Node::Residual(body) => {
                let (mut y, c) = seq_forward(body, x, mode)?;
                y.add_assign(x)?;
                Ok((y, NodeCache::Residual(c)))
            }
            Node::Flatten => {
                let n = x.dim(0);
                let rest = x.len() / n;
                let y = x.clone().reshape(vec![n, rest])?;
                Ok((y, NodeCache::Flatten(x.shape().to_vec())))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` under full names and
    /// returns the input gradient.
    pub fn backward(
        &self,
        cache: &NodeCache<T>,
        dy: &Tensor<T>,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Node::Layer(l), NodeCache::Layer(c)) => {
                let (mut dxs, g) = l.backward(c, dy)?;
                for (k, v) in g {
                    grads.insert(format!("{}.{k}", l.name), v);
                }
                Ok(dxs.swap_remove(0))
            }
            (Node::Seq(nodes), NodeCache::Seq(c)) => seq_backward(nodes, c, dy, grads),
            (Node::Dense(block), NodeCache::Dense(c)) => block.backward(c, dy, grads),
            (Node::Residual(body), NodeCache::Residual(c)) => {
                let mut dx = seq_backward(body, c, dy, grads)?;
                dx.add_assign(dy)?;
                Ok(dx)
            }
            (Node::Flatten, NodeCache::Flatten(shape)) => dy.clone().reshape(shape.clone()),
            _ => Err(Error::InvalidCache("cache does not match network node".into())),
        }
    }

    pub fn visit_layers(&self, f: &mut dyn FnMut(&Layer<T>)) {
        match self {
            Node::Layer(l) => f(l),
            Node::Seq(nodes) | Node::Residual(nodes) => {
                nodes.iter().for_each(|n| n.visit_layers(f))
            }
            Node::Dense(block) => block.visit_layers(f),
            Node::Flatten => {}
        }
    }

    pub fn visit_layers_mut(&mut self, f: &mut dyn FnMut(&mut Layer<T>)) {
        match self {
            Node::Layer(l) => f(l),
            Node::Seq(nodes) | Node::Residual(nodes) => {
                nodes.iter_mut().for_each(|n| n.visit_layers_mut(f))
            }
            Node::Dense(block) => block.visit_layers_mut(f),
            Node::Flatten => {}
        }
    }
}

/// Flat, serializable snapshot of a network: trainable parameters plus
/// batchnorm running statistics, both keyed by full dotted names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f64> {
    pub arch: Arch,
    pub params: NamedTensors<T>,
    pub buffers: NamedTensors<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.params)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }

    /// SHA-256 over architecture, names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.descriptor().as_bytes());
        h.update(T::NAME.as_bytes());
        for (name, t) in self.params.iter().chain(&self.buffers) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |m: &NamedTensors<T>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ModelParams {
            arch: self.arch.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Fails unless `other` has the same architecture, names and shapes.
    pub fn ensure_compatible(&self, other: &ModelParams<T>) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::DescriptorMismatch(format!(
                "{} vs {}",
                self.arch.descriptor(),
                other.arch.descriptor()
            )));
        }
        for (a, b) in [(&self.params, &other.params), (&self.buffers, &other.buffers)] {
            if a.len() != b.len()
                || a.iter().zip(b).any(|((ka, va), (kb, vb))| ka != kb || va.shape() != vb.shape())
            {
                return Err(Error::DescriptorMismatch(
                    "parameter names or shapes differ".into(),
                ));
            }
        }
        Ok(())
    }
}

impl<T: Real> ParamStore<T> for ModelParams<T> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.params.visit_params_mut(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f64> {
    pub arch: Arch,
    pub root: Node<T>,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network; deterministic in `seed`.
    pub fn build(arch: &Arch, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, "init", &[]);
        let root = match arch {
            Arch::Proposed(c) => densenet::build_tree(c, &mut rng)?,
            Arch::Baseline(c) => baselines::build_tree(c, &mut rng)?,
        };
        Ok(Self {
            arch: arch.clone(),
            root,
        })
    }

    pub fn from_params(params: &ModelParams<T>) -> Result<Self> {
        let mut m = Self::build(&params.arch, 0)?;
        m.load(params)?;
        Ok(m)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(4, "model input")?;
        let (rows, width) = self.arch.input_shape();
        x.expect_shape(&[x.dim(0), 1, rows, width], "model input")
    }

    /// Runs the network on a `[batch, 1, rows, width]` input.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NodeCache<T>)> {
        self.check_input(x)?;
        self.root.forward(x, mode)
    }

    pub fn backward(
        &self,
        cache: &NodeCache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, NamedTensors<T>)> {
        let mut grads = IndexMap::new();
        let dx = self.root.backward(cache, dy, &mut grads)?;
        // order gradients like the parameters
        let mut ordered = IndexMap::with_capacity(grads.len());
        self.root.visit_layers(&mut |l| {
            for k in l.params.keys() {
                let full = format!("{}.{k}", l.name);
                if let Some(g) = grads.swap_remove(&full) {
                    ordered.insert(full, g);
                }
            }
        });
        Ok((dx, ordered))
    }

    pub fn embed(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x, mode)?.0)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.root.visit_layers(&mut |l| n += l.param_count());
        n
    }

    pub fn params(&self) -> ModelParams<T> {
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        self.root.visit_layers(&mut |l| {
            for (k, v) in &l.params {
                params.insert(format!("{}.{k}", l.name), v.clone());
            }
            for (k, v) in &l.buffers {
                buffers.insert(format!("{}.{k}", l.name), v.clone());
            }
        });
        ModelParams {
            arch: self.arch.clone(),
            params,
            buffers,
        }
    }

    pub fn load(&mut self, p: &ModelParams<T>) -> Result<()> {
        if p.arch != self.arch {
            return Err(Error::DescriptorMismatch(format!(
                "cannot load {} into {}",
                p.arch.descriptor(),
                self.arch.descriptor()
            )));
        }
        let mut problem = None;
        let mut used = 0;
        self.root.visit_layers_mut(&mut |l| {
            let name = l.name.clone();
            for (maps, src) in [(&mut l.params, &p.params), (&mut l.buffers, &p.buffers)] {
                for (k, v) in maps.iter_mut() {
                    let full = format!("{name}.{k}");
                    match src.get(&full) {
                        Some(t) if t.shape() == v.shape() => {
                            *v = t.clone();
                            used += 1;
                        }
                        Some(t) => {
                            problem.get_or_insert(format!(
                                "`{full}` has shape {:?}, expected {:?}",
                                t.shape(),
                                v.shape()
                            ));
                        }
                        None => {
                            problem.get_or_insert(format!("missing tensor `{full}`"));
                        }
                    }
                }
            }
        });
        if let Some(msg) = problem {
            return Err(Error::DescriptorMismatch(msg));
        }
        if used != p.params.len() + p.buffers.len() {
            return Err(Error::DescriptorMismatch("snapshot holds unknown tensors".into()));
        }
        Ok(())
    }
}

impl<T: Real> ParamStore<T> for Model<T> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.root.visit_layers_mut(&mut |l| {
            let name = l.name.clone();
            for (k, v) in l.params.iter_mut() {
                f(&format!("{name}.{k}"), v);
            }
        });
    }
}

impl Fragment for Model<f64> {
    type Cache = NodeCache<f64>;

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, NodeCache<f64>)> {
        self.forward(x, Mode::Train)
    }

    fn backward(&self, cache: &NodeCache<f64>, dy: &Tensor) -> Result<(Tensor, NamedTensors<f64>)> {
        Model::backward(self, cache, dy)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        ParamStore::visit_params_mut(self, f)
    }
}

/// Embeds a batch with the network described by `params`.
pub fn embed<T: Real>(params: &ModelParams<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    Model::from_params(params)?.embed(x, mode)
}
