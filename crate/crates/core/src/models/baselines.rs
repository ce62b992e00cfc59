//! Comparison networks: a two-layer perceptron, a small two-conv CNN and a
//! 16-conv residual network. All emit class logits and use batchnorm after
//! every convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, Model, ModelParams, Node};
use crate::nn::{Conv2dSpec, Layer, LayerKind, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Mlp,
    Cnn,
    Resnet,
}

impl BaselineKind {
    pub fn id(self) -> &'static str {
        match self {
            BaselineKind::Mlp => "mlp",
            BaselineKind::Cnn => "cnn",
            BaselineKind::Resnet => "resnet",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BaselineKind::Mlp),
            "cnn" => Ok(BaselineKind::Cnn),
            "resnet" => Ok(BaselineKind::Resnet),
            other => Err(Error::InvalidArchitecture(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub rows: usize,
    pub width: usize,
    pub classes: usize,
    /// Hidden width of the perceptron and of the CNN's dense layer.
    pub hidden: usize,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            rows: 3,
            width: 1024,
            classes: 4,
            hidden: 512,
        }
    }
}

struct Builder<'a, R> {
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn layer<T: Real>(&mut self, name: impl Into<String>, kind: LayerKind) -> Node<T> {
        Node::Layer(Layer::new(name, kind, self.rng))
    }

    /// conv (no bias) -> batchnorm, named `{p}.conv` / `{p}.bn`.
    fn conv_bn<T: Real>(&mut self, p: &str, spec: Conv2dSpec) -> [Node<T>; 2] {
        [
            self.layer(format!("{p}.conv"), LayerKind::Conv2d(spec)),
            self.layer(format!("{p}.bn"), LayerKind::batchnorm(spec.out_channels)),
        ]
    }
}

const RESNET_MAPS: usize = 32;

pub(crate) fn build_tree<T: Real>(c: &BaselineConfig, rng: &mut impl Rng) -> Result<Node<T>> {
    if c.rows < 1 || c.width < 1 || c.classes < 2 || c.hidden < 1 {
        return Err(Error::InvalidArchitecture(format!("degenerate baseline {c:?}")));
    }
    let mut b = Builder { rng };
    let nodes = match c.kind {
        BaselineKind::Mlp => vec![
            Node::Flatten,
            b.layer("fc1", LayerKind::linear(c.rows * c.width, c.hidden)),
            b.layer("fc1.relu", LayerKind::Relu),
            b.layer("fc2", LayerKind::linear(c.hidden, c.classes)),
        ],
        BaselineKind::Cnn => {
            // pool (1,4) then (rows,8): flatten holds 64 * rows' * width/32
            let (pool1, pool2) = ((1, 4), (c.rows, 8));
            let w1 = c.width / pool1.1;
            let w2 = w1 / pool2.1;
            if w2 == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "width {} too small for cnn pooling",
                    c.width
                )));
            }
            let flat = 64 * w2;
            let mut v = Vec::new();
            v.extend(b.conv_bn("conv1", Conv2dSpec::new(1, 16, (3, 3)).padding((1, 1))));
            v.push(b.layer("conv1.relu", LayerKind::Relu));
            v.push(b.layer("conv1.pool", LayerKind::avgpool(pool1)));
            v.extend(b.conv_bn("conv2", Conv2dSpec::new(16, 64, (3, 3)).padding((1, 1))));
            v.push(b.layer("conv2.relu", LayerKind::Relu));
            v.push(b.layer("conv2.pool", LayerKind::avgpool(pool2)));
            v.push(Node::Flatten);
            v.push(b.layer("fc1", LayerKind::linear(flat, c.hidden)));
            v.push(b.layer("fc1.relu", LayerKind::Relu));
            v.push(b.layer("fc2", LayerKind::linear(c.hidden, c.classes)));
            v
        }
        BaselineKind::Resnet => {
            // width: /2 in the first conv, /2 after each of the first three blocks
            if c.width < 16 {
                return Err(Error::InvalidArchitecture(format!(
                    "width {} too small for resnet pooling",
                    c.width
                )));
            }
            let k = RESNET_MAPS;
            let same = Conv2dSpec::new(k, k, (3, 3)).padding((1, 1));
            let mut v = Vec::new();
            for blk in 1..=4 {
                for unit in 1..=2 {
                    let p = format!("block{blk}.unit{unit}");
                    if blk == 1 && unit == 1 {
                        // 1 -> 32 input mapping; channel change leaves no identity path
                        let first = Conv2dSpec::new(1, k, (3, 3))
                            .stride((1, 2))
                            .padding((1, 1));
                        v.extend(b.conv_bn(&format!("{p}.a"), first));
                        v.push(b.layer(format!("{p}.a.relu"), LayerKind::Relu));
                        v.extend(b.conv_bn(&format!("{p}.b"), same));
                        v.push(b.layer(format!("{p}.relu"), LayerKind::Relu));
                    } else {
                        let mut body = Vec::new();
                        body.extend(b.conv_bn(&format!("{p}.a"), same));
                        body.push(b.layer(format!("{p}.a.relu"), LayerKind::Relu));
                        body.extend(b.conv_bn(&format!("{p}.b"), same));
                        v.push(Node::Residual(body));
                        v.push(b.layer(format!("{p}.relu"), LayerKind::Relu));
                    }
                }
                if blk < 4 {
                    v.push(b.layer(format!("block{blk}.pool"), LayerKind::avgpool((1, 2))));
                }
            }
            v.push(b.layer("head.pool", LayerKind::GlobalAvgPool));
            v.push(b.layer("head.fc", LayerKind::linear(k, c.classes)));
            v
        }
    };
    Ok(Node::Seq(nodes))
}

/// Builds a baseline at the default 3x1024 input with 4 classes.
pub fn build_baseline<T: Real>(kind: &str, seed: u64) -> Result<ModelParams<T>> {
    let kind: BaselineKind = kind.parse()?;
    Ok(Model::build(&Arch::Baseline(BaselineConfig::new(kind)), seed)?.params())
}
