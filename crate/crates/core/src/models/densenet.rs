use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Node;
use crate::nn::{
    concat_channels, split_channels, Cache, Conv2dSpec, Layer, LayerKind, Mode, NamedTensors,
    Real, Tensor,
};

/// Hyperparameters of the dense-connectivity embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub stem_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub compression: f64,
    pub embedding_dim: usize,
    pub rows: usize,
    pub width: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            blocks: 3,
            layers_per_block: 6,
            growth: 8,
            compression: 0.5,
            embedding_dim: 64,
            rows: 3,
            width: 1024,
        }
    }
}

impl DenseNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.layers_per_block < 1 {
            return bad("layers per block must be at least 1".into());
        }
        if self.blocks < 1 {
            return bad("need at least one dense block".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if self.growth < 1 || self.stem_channels < 1 {
            return bad("growth and stem channels must be positive".into());
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding dimension {} < 2", self.embedding_dim));
        }
        if self.rows < 1 || self.width < 1 {
            return bad("input extent must be positive".into());
        }
        self.schedule().map(|_| ())
    }

    /// Channel count after each dense block and each transition, plus the
    /// width entering each block.
    fn schedule(&self) -> Result<Vec<(usize, usize)>> {
        let stem = Conv2dSpec::new(1, self.stem_channels, (3, 3))
            .stride((1, 2))
            .padding((1, 1));
        let (_, mut width) = stem
            .output_hw(self.rows, self.width)
            .ok_or_else(|| Error::InvalidArchitecture("input narrower than stem kernel".into()))?;
        let mut channels = self.stem_channels;
        let mut out = Vec::new();
        for b in 0..self.blocks {
            out.push((channels, width));
            channels += self.layers_per_block * self.growth;
            if b + 1 < self.blocks {
                channels = (channels as f64 * self.compression).floor() as usize;
                if channels == 0 {
                    return Err(Error::InvalidArchitecture(format!(
                        "transition {} compresses to zero channels",
                        b + 1
                    )));
                }
                if width < 2 {
                    return Err(Error::InvalidArchitecture(format!(
                        "width {width} too small to pool after block {}",
                        b + 1
                    )));
                }
                width /= 2;
            }
        }
        out.push((channels, width));
        Ok(out)
    }

    /// Channels of the final feature map entering global pooling.
    pub fn final_channels(&self) -> Result<usize> {
        Ok(self.schedule()?.last().expect("non-empty").0)
    }
}

/// One dense layer: batchnorm, relu, 3x3 convolution emitting `growth` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseUnit<T: Real> {
    pub bn: Layer<T>,
    pub relu: Layer<T>,
    pub conv: Layer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock<T: Real = f64> {
    pub in_channels: usize,
    pub growth: usize,
    pub units: Vec<DenseUnit<T>>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T: Real> {
    widths: Vec<usize>,
    units: Vec<[Cache<T>; 3]>,
}

impl<T: Real> DenseBlock<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let units = (0..layers)
            .map(|l| {
                let cin = in_channels + l * growth;
                let prefix = format!("{name}.layer{}", l + 1);
                let spec = Conv2dSpec::new(cin, growth, (3, 3)).padding((1, 1));
                DenseUnit {
                    bn: Layer::new(format!("{prefix}.bn"), LayerKind::batchnorm(cin), rng),
                    relu: Layer::new(format!("{prefix}.relu"), LayerKind::Relu, rng),
                    conv: Layer::new(format!("{prefix}.conv"), LayerKind::Conv2d(spec), rng),
                }
            })
            .collect();
        Self {
            in_channels,
            growth,
            units,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.units.len() * self.growth
    }

    /// Layer `l` sees the channel concatenation of the block input and every
    /// earlier layer's output; the block returns the concatenation of all.
    pub fn forward(&mut self, x0: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DenseCache<T>)> {
        x0.expect_rank(4, "dense block input")?;
        if x0.dim(1) != self.in_channels {
            return Err(Error::Shape {
                axis: 1,
                expected: self.in_channels,
                actual: x0.dim(1),
                context: "dense block input channels".into(),
            });
        }
        let mut widths = vec![x0.dim(1)];
        let mut caches = Vec::with_capacity(self.units.len());
        let mut joined = x0.clone();
        for unit in &mut self.units {
            let (a, c0) = unit.bn.forward(&[&joined], mode)?;
            let (b, c1) = unit.relu.forward(&[&a], mode)?;
            let (h, c2) = unit.conv.forward(&[&b], mode)?;
            caches.push([c0, c1, c2]);
            widths.push(h.dim(1));
            joined = concat_channels(&[&joined, &h])?;
        }
        Ok((
            joined,
            DenseCache {
                widths,
                units: caches,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &DenseCache<T>,
        dy: &Tensor<T>,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        if cache.units.len() != self.units.len() {
            return Err(Error::InvalidCache("dense block depth changed".into()));
        }
        let mut g = split_channels(dy, &cache.widths)?;
        for (l, (unit, [c0, c1, c2])) in self.units.iter().zip(&cache.units).enumerate().rev() {
            let dh = &g[l + 1];
            let (mut d, gc) = unit.conv.backward(c2, dh)?;
            let (mut d, _) = unit.relu.backward(c1, &d.swap_remove(0))?;
            let (mut d, gb) = unit.bn.backward(c0, &d.swap_remove(0))?;
            for (layer, lg) in [(&unit.conv, gc), (&unit.bn, gb)] {
                for (k, v) in lg {
                    grads.insert(format!("{}.{k}", layer.name), v);
                }
            }
            let parts = split_channels(&d.swap_remove(0), &cache.widths[..=l])?;
            for (acc, part) in g.iter_mut().zip(&parts) {
                acc.add_assign(part)?;
            }
        }
        Ok(g.swap_remove(0))
    }

    pub fn visit_layers(&self, f: &mut dyn FnMut(&Layer<T>)) {
        for u in &self.units {
            f(&u.bn);
            f(&u.relu);
            f(&u.conv);
        }
    }

    pub fn visit_layers_mut(&mut self, f: &mut dyn FnMut(&mut Layer<T>)) {
        for u in &mut self.units {
            f(&mut u.bn);
            f(&mut u.relu);
            f(&mut u.conv);
        }
    }
}

/// Stem conv (stride 2 along width), dense blocks separated by
/// compressing 1x1 transitions with width pooling, then
/// batchnorm/relu, global average pooling and a linear embedding head.
pub(crate) fn build_tree<T: Real>(c: &DenseNetConfig, rng: &mut impl Rng) -> Result<Node<T>> {
    c.validate()?;
    let schedule = c.schedule()?;
    let mut nodes = Vec::new();
    let stem = Conv2dSpec::new(1, c.stem_channels, (3, 3))
        .stride((1, 2))
        .padding((1, 1));
    nodes.push(Node::Layer(Layer::new("stem.conv", LayerKind::Conv2d(stem), rng)));
    for b in 0..c.blocks {
        let (cin, _) = schedule[b];
        let block = DenseBlock::new(
            &format!("block{}", b + 1),
            cin,
            c.layers_per_block,
            c.growth,
            rng,
        );
        let cout = block.out_channels();
        nodes.push(Node::Dense(block));
        if b + 1 < c.blocks {
            let next = schedule[b + 1].0;
            let t = format!("trans{}", b + 1);
            let spec = Conv2dSpec::new(cout, next, (1, 1));
            nodes.push(Node::Layer(Layer::new(
                format!("{t}.bn"),
                LayerKind::batchnorm(cout),
                rng,
            )));
            nodes.push(Node::Layer(Layer::new(format!("{t}.relu"), LayerKind::Relu, rng)));
            nodes.push(Node::Layer(Layer::new(
                format!("{t}.conv"),
                LayerKind::Conv2d(spec),
                rng,
            )));
            nodes.push(Node::Layer(Layer::new(
                format!("{t}.pool"),
                LayerKind::avgpool((1, 2)),
                rng,
            )));
        }
    }
    let last = schedule.last().expect("non-empty").0;
    nodes.push(Node::Layer(Layer::new("head.bn", LayerKind::batchnorm(last), rng)));
    nodes.push(Node::Layer(Layer::new("head.relu", LayerKind::Relu, rng)));
    nodes.push(Node::Layer(Layer::new("head.pool", LayerKind::GlobalAvgPool, rng)));
    nodes.push(Node::Layer(Layer::new(
        "head.fc",
        LayerKind::linear(last, c.embedding_dim),
        rng,
    )));
    Ok(Node::Seq(nodes))
}

/// Builds the proposed network and returns its initial parameters.
pub fn build_proposed<T: Real>(config: &DenseNetConfig, seed: u64) -> Result<super::ModelParams<T>> {
    Ok(super::Model::build(&super::Arch::Proposed(config.clone()), seed)?.params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random(shape: &[usize], s: u64) -> Tensor {
        let mut r = seed::rng(s, "x", &[]);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn default_channel_schedule() {
        let c = DenseNetConfig::default();
        let s = c.schedule().unwrap();
        // stem 16 + 6 * 8 = 64 enters transition 1
        assert_eq!(s[0], (16, 512));
        assert_eq!(s[1], (32, 256));
        assert_eq!(s[2], (40, 128));
        assert_eq!(s[3], (88, 128));
    }

    #[test]
    fn single_layer_block_is_input_plus_one_unit() {
        let mut rng = seed::rng(1, "init", &[]);
        let mut block: DenseBlock = DenseBlock::new("b", 3, 1, 4, &mut rng);
        let mut unit = block.units[0].clone();
        let x = random(&[2, 3, 3, 5], 2);
        let (y, _) = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 7, 3, 5]);
        let (a, _) = unit.bn.forward(&[&x], Mode::Train).unwrap();
        let (b, _) = unit.relu.forward(&[&a], Mode::Train).unwrap();
        let (h, _) = unit.conv.forward(&[&b], Mode::Train).unwrap();
        assert_eq!(y, concat_channels(&[&x, &h]).unwrap());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let mut rng = seed::rng(1, "init", &[]);
        let mut block: DenseBlock = DenseBlock::new("b", 4, 2, 2, &mut rng);
        let x = Tensor::zeros(&[1, 3, 3, 4]);
        assert!(matches!(
            block.forward(&x, Mode::Train),
            Err(Error::Shape { axis: 1, .. })
        ));
    }

    #[test]
    fn zero_compression_width_is_invalid() {
        let c = DenseNetConfig {
            stem_channels: 1,
            layers_per_block: 1,
            growth: 1,
            compression: 0.4,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidArchitecture(_))));
        let c = DenseNetConfig {
            width: 4,
            blocks: 4,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidArchitecture(_))));
    }
}
