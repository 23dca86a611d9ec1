//! Networks with the three taps used by the student objectives: the first
//! hidden activation, the penultimate activation and the scalar logit.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Graph, GraphError, NodeId, Tensor};
use crate::rng::Rng;

const SNAPSHOT_MAGIC: &[u8; 4] = b"SPUN";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input sample shape {got:?} does not match network input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("snapshot: bad magic bytes at offset 0")]
    BadMagic,
    #[error("snapshot: format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("snapshot: truncated at byte offset {0}")]
    Truncated(usize),
    #[error("snapshot: {0} trailing bytes after parameters")]
    TrailingBytes(usize),
    #[error("snapshot: unknown architecture tag {0}")]
    UnknownArchitecture(u8),
}

/// Layer layout of a network. Every architecture ends in a single logit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected ReLU stack `input -> hidden... -> 1`.
    Mlp { input: usize, hidden: Vec<usize> },
    /// `conv(k, c1) -> relu -> maxpool 2x2 -> conv(k, c2) -> relu -> linear`.
    Cnn {
        channels: usize,
        height: usize,
        width: usize,
        conv: [usize; 2],
        kernel: usize,
    },
}

impl Architecture {
    /// Two-layer MLP used for low-dimensional vector data.
    pub fn default_mlp(input: usize) -> Self {
        Architecture::Mlp {
            input,
            hidden: vec![64, 64],
        }
    }

    /// Small CNN used for image-shaped data.
    pub fn default_cnn(channels: usize, height: usize, width: usize) -> Self {
        Architecture::Cnn {
            channels,
            height,
            width,
            conv: [8, 16],
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Architecture::Mlp { input, hidden } => {
                if *input == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(ModelError::Architecture(format!(
                        "mlp needs a positive input size and at least one nonzero hidden layer, got {input} / {hidden:?}"
                    )));
                }
            }
            Architecture::Cnn {
                channels,
                height,
                width,
                conv,
                kernel,
            } => {
                if *channels == 0 || conv.contains(&0) || *kernel == 0 || kernel % 2 == 0 {
                    return Err(ModelError::Architecture(
                        "cnn needs positive channels and an odd kernel".into(),
                    ));
                }
                if *height < 2 || *width < 2 {
                    return Err(ModelError::Architecture(format!(
                        "cnn input {height}x{width} too small to pool"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { input, .. } => vec![*input],
            Architecture::Cnn {
                channels,
                height,
                width,
                ..
            } => vec![*channels, *height, *width],
        }
    }

    /// Width of the penultimate (last-feature) tap.
    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Mlp { hidden, .. } => *hidden.last().expect("validated"),
            Architecture::Cnn {
                height,
                width,
                conv,
                ..
            } => conv[1] * (height / 2) * (width / 2),
        }
    }

    /// Shapes of all parameter tensors in layer order (weight then bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::Mlp { input, hidden } => {
                let mut dims = vec![*input];
                dims.extend(hidden);
                dims.push(1);
                dims.windows(2)
                    .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                    .collect()
            }
            Architecture::Cnn {
                channels,
                conv,
                kernel,
                ..
            } => vec![
                vec![conv[0], *channels, *kernel, *kernel],
                vec![conv[0]],
                vec![conv[1], conv[0], *kernel, *kernel],
                vec![conv[1]],
                vec![self.feature_dim(), 1],
                vec![1],
            ],
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let push = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        match self {
            Architecture::Mlp { input, hidden } => {
                out.push(0);
                push(out, *input);
                push(out, hidden.len());
                for h in hidden {
                    push(out, *h);
                }
            }
            Architecture::Cnn {
                channels,
                height,
                width,
                conv,
                kernel,
            } => {
                out.push(1);
                for v in [*channels, *height, *width, conv[0], conv[1], *kernel] {
                    push(out, v);
                }
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        let arch = match r.u8()? {
            0 => {
                let input = r.u32()? as usize;
                let n = r.u32()? as usize;
                let hidden = (0..n)
                    .map(|_| r.u32().map(|v| v as usize))
                    .collect::<Result<_, _>>()?;
                Architecture::Mlp { input, hidden }
            }
            1 => {
                let mut v = [0usize; 6];
                for slot in &mut v {
                    *slot = r.u32()? as usize;
                }
                Architecture::Cnn {
                    channels: v[0],
                    height: v[1],
                    width: v[2],
                    conv: [v[3], v[4]],
                    kernel: v[5],
                }
            }
            tag => return Err(ModelError::UnknownArchitecture(tag)),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Graph handles for a network's parameters within one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<NodeId>);

/// Graph handles for the three taps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    /// `[n, 1]`
    pub logits: NodeId,
    /// First hidden activation flattened to `[n, d1]`.
    pub first: NodeId,
    /// Penultimate activation `[n, dl]`.
    pub last: NodeId,
}

/// Materialised taps for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TapValues {
    pub logits: Vec<f64>,
    pub first: Tensor,
    pub last: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<Tensor>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Network {
    /// He-style uniform fan-in initialisation for weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self, ModelError> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| {
                if s.len() == 1 {
                    Tensor::zeros(s)
                } else {
                    let fan_in = match arch {
                        Architecture::Mlp { .. } => s[0],
                        Architecture::Cnn { .. } if s.len() == 4 => s[1] * s[2] * s[3],
                        Architecture::Cnn { .. } => s[0],
                    };
                    he_uniform(s, fan_in, rng)
                }
            })
            .collect();
        Ok(Self { arch, params })
    }

    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers the parameters in `g`; frozen networks are bound as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.param(p.clone())
                    } else {
                        g.constant(p.clone())
                    }
                })
                .collect(),
        )
    }

    /// Forward pass over a batch `[n, ...input_shape]`, returning all taps.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: NodeId) -> Result<Taps, ModelError> {
        let expected = self.arch.input_shape();
        let shape = g.shape(input);
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            return Err(ModelError::InputShape {
                expected,
                got: shape.get(1..).unwrap_or_default().to_vec(),
            });
        }
        let n = shape[0];
        let p = &bound.0;
        match &self.arch {
            Architecture::Mlp { hidden, .. } => {
                let mut h = input;
                let mut first = None;
                for layer in 0..hidden.len() {
                    let z = g.matmul(h, p[2 * layer])?;
                    let z = g.add_bias(z, p[2 * layer + 1])?;
                    h = g.relu(z);
                    first.get_or_insert(h);
                }
                let k = hidden.len();
                let z = g.matmul(h, p[2 * k])?;
                let logits = g.add_bias(z, p[2 * k + 1])?;
                Ok(Taps {
                    logits,
                    first: first.expect("at least one hidden layer"),
                    last: h,
                })
            }
            Architecture::Cnn { kernel, .. } => {
                let pad = kernel / 2;
                let c1 = g.conv2d(input, p[0], p[1], pad)?;
                let a1 = g.relu(c1);
                let d1 = g.value(a1).numel() / n;
                let first = g.reshape(a1, vec![n, d1])?;
                let pooled = g.max_pool2(a1)?;
                let c2 = g.conv2d(pooled, p[2], p[3], pad)?;
                let a2 = g.relu(c2);
                let last = g.reshape(a2, vec![n, self.arch.feature_dim()])?;
                let z = g.matmul(last, p[4])?;
                let logits = g.add_bias(z, p[5])?;
                Ok(Taps {
                    logits,
                    first,
                    last,
                })
            }
        }
    }

    /// Taps for a batch, evaluated on a throwaway graph.
    pub fn forward_with_taps(&self, input: &Tensor) -> Result<TapValues, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let taps = self.forward(&mut g, &bound, x)?;
        Ok(TapValues {
            logits: g.value(taps.logits).data().to_vec(),
            first: g.value(taps.first).clone(),
            last: g.value(taps.last).clone(),
        })
    }

    /// Logits for a batch, evaluated in chunks.
    pub fn logits(&self, input: &Tensor) -> Result<Vec<f64>, ModelError> {
        const CHUNK: usize = 512;
        let n = input.shape().first().copied().unwrap_or(0);
        let per: usize = input.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, input.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let x = g.constant(chunk);
            let taps = self.forward(&mut g, &bound, x)?;
            out.extend_from_slice(g.value(taps.logits).data());
        }
        Ok(out)
    }

    /// Serialises to the versioned binary snapshot format: magic, version,
    /// architecture descriptor, then parameters as little-endian `f64` in
    /// layer order.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        self.arch.encode(&mut out);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| ModelError::BadMagic)? != SNAPSHOT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let arch = Architecture::decode(&mut r)?;
        let mut params = Vec::new();
        for shape in arch.param_shapes() {
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { arch, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Two-class distribution `(sigma(z), 1 - sigma(z))` from a scalar logit,
/// ordered `(positive, negative)`.
pub fn predict_prob(logit: f64) -> [f64; 2] {
    [sigmoid(logit), sigmoid(-logit)]
}

/// Graph version of [`predict_prob`]: `[n, 1]` logits to `[n, 2]`.
pub fn prob_node(g: &mut Graph, logits: NodeId) -> Result<NodeId, GraphError> {
    let pos = g.sigmoid(logits);
    let neg_logits = g.neg(logits);
    let neg = g.sigmoid(neg_logits);
    g.concat_last(pos, neg)
}

/// Maps last-layer features into an embedding space of the same width.
pub trait FeatureMap {
    fn map(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError>;
}

/// The identity feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl FeatureMap for Identity {
    fn map(&self, _g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
        Ok(x)
    }
}

/// Predictor head `d -> h -> d` with one ReLU, `h = max(d / 2, 8)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorHead {
    dim: usize,
    params: Vec<Tensor>,
}

impl PredictorHead {
    pub fn hidden_width(dim: usize) -> usize {
        (dim / 2).max(8)
    }

    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let h = Self::hidden_width(dim);
        let params = vec![
            he_uniform(&[dim, h], dim, rng),
            Tensor::zeros(&[h]),
            he_uniform(&[h, dim], h, rng),
            Tensor::zeros(&[dim]),
        ];
        Self { dim, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        let ids: Vec<_> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundHead(ids)
    }
}

/// A [`PredictorHead`] registered in a graph.
#[derive(Clone, Debug)]
pub struct BoundHead(pub Vec<NodeId>);

impl FeatureMap for BoundHead {
    fn map(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
        let h = g.matmul(x, self.0[0])?;
        let h = g.add_bias(h, self.0[1])?;
        let h = g.relu(h);
        let o = g.matmul(h, self.0[2])?;
        g.add_bias(o, self.0[3])
    }
}
