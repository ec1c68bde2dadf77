//! Declarative feed-forward architectures and their parameters.
//!
//! A [`NetworkSpec`] is a list of [`LayerSpec`]s over a fixed `(C, H, W)`
//! input. Convolutions always use a 3×3 kernel with padding 1. The final
//! layer must be an affine map onto the class logits, which is what the
//! last-layer elision in [`crate::interval`] relies on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{self, conv_out_extent, KERNEL};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, stride: usize },
    Affine { out_features: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Affine { .. })
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Image { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    classes: usize,
}

/// The two named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    L,
    XL,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Architecture::L),
            "XL" => Ok(Architecture::XL),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected L or XL)"
            ))),
        }
    }
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, classes: usize) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape,
            layers,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds the L or XL architecture for the given input and class count.
    pub fn architecture(name: &str, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        Self::scaled_architecture(name.parse()?, input_shape, classes, 1)
    }

    /// The named architecture with every width divided by `width_divisor`
    /// (the final class layer is untouched).
    pub fn scaled_architecture(
        arch: Architecture,
        input_shape: [usize; 3],
        classes: usize,
        width_divisor: usize,
    ) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let d = |w: usize| (w / width_divisor).max(1);
        let (convs, affines): (&[(usize, usize)], &[usize]) = match arch {
            Architecture::L => (&[(64, 1), (64, 1), (128, 2), (128, 1), (128, 1)], &[512]),
            Architecture::XL => (
                &[(128, 1), (128, 1), (256, 2), (256, 1), (256, 1)],
                &[512, 512],
            ),
        };
        let mut layers = Vec::new();
        for &(ch, stride) in convs {
            layers.push(LayerSpec::Conv {
                out_channels: d(ch),
                stride,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Flatten);
        for &width in affines {
            layers.push(LayerSpec::Affine {
                out_features: d(width),
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Affine {
            out_features: classes,
        });
        Self::new(input_shape, layers, classes)
    }

    /// A fully connected ReLU network `input → hidden… → classes` on a flat
    /// input of `dim` features. Mostly useful for small experiments.
    pub fn mlp(dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = vec![LayerSpec::Flatten];
        for &h in hidden {
            layers.push(LayerSpec::Affine { out_features: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Affine {
            out_features: classes,
        });
        Self::new([1, 1, dim], layers, classes)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of conv/affine layers.
    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::Affine { out_features }) if *out_features == self.classes => {}
            _ => {
                return Err(Error::Config(format!(
                    "final layer must be Affine({}) onto the class logits",
                    self.classes
                )))
            }
        }
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    stride,
                } => {
                    if out_channels == 0 || !(stride == 1 || stride == 2) {
                        return Err(Error::Config(format!("layer {i}: invalid conv {layer:?}")));
                    }
                }
                LayerSpec::Affine { out_features } if out_features == 0 => {
                    return Err(Error::Config(format!(
                        "layer {i}: affine with zero outputs"
                    )));
                }
                _ => {}
            }
            if layer.has_params() && i + 1 < n && self.layers[i + 1] != LayerSpec::Relu {
                return Err(Error::Config(format!(
                    "layer {i}: every conv/affine except the final one must be followed by ReLU"
                )));
            }
            if *layer == LayerSpec::Relu && (i == 0 || !self.layers[i - 1].has_params()) {
                return Err(Error::Config(format!(
                    "layer {i}: ReLU must follow a conv/affine layer"
                )));
            }
        }
        self.activation_shapes().map(|_| ())
    }

    /// Activation shapes entering each layer, plus the final output shape.
    pub fn activation_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = ActShape::Image { c, h, w };
        let mut shapes = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        stride,
                    },
                    ActShape::Image { h, w, .. },
                ) => ActShape::Image {
                    c: out_channels,
                    h: conv_out_extent(h, stride),
                    w: conv_out_extent(w, stride),
                },
                (LayerSpec::Conv { .. }, ActShape::Flat(_)) => {
                    return Err(Error::Config(format!("layer {i}: conv after flatten")))
                }
                (LayerSpec::Flatten, s) => ActShape::Flat(s.len()),
                (LayerSpec::Affine { out_features }, ActShape::Flat(_)) => {
                    ActShape::Flat(out_features)
                }
                (LayerSpec::Affine { .. }, ActShape::Image { .. }) => {
                    return Err(Error::Config(format!(
                        "layer {i}: affine needs a Flatten first"
                    )))
                }
                (LayerSpec::Relu, s) => s,
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// `(weight shape, bias shape)` for each parameterized layer, in order.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let shapes = self.activation_shapes().expect("validated at construction");
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| match (*layer, shapes[i]) {
                (LayerSpec::Conv { out_channels, .. }, ActShape::Image { c, .. }) => {
                    Some((vec![out_channels, c, KERNEL, KERNEL], vec![out_channels]))
                }
                (LayerSpec::Affine { out_features }, ActShape::Flat(n)) => {
                    Some((vec![out_features, n], vec![out_features]))
                }
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Checks that a batch matches `[B, C, H, W]` for this network.
    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::dim("network input", batch.shape(), &[0, c, h, w]));
        }
        Ok(())
    }
}

/// Line-oriented text form used inside checkpoints and config files:
///
/// ```text
/// input 1 28 28
/// classes 10
/// conv 64 1
/// relu
/// flatten
/// affine 10
/// ```
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        writeln!(f, "input {c} {h} {w}")?;
        writeln!(f, "classes {}", self.classes)?;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    stride,
                } => writeln!(f, "conv {out_channels} {stride}")?,
                LayerSpec::Affine { out_features } => writeln!(f, "affine {out_features}")?,
                LayerSpec::Relu => writeln!(f, "relu")?,
                LayerSpec::Flatten => writeln!(f, "flatten")?,
            }
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Config(format!("bad network line {line:?}"));
        let num = |s: Option<&str>, line: &str| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))
        };
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("input") => {
                    input = Some([
                        num(parts.next(), line)?,
                        num(parts.next(), line)?,
                        num(parts.next(), line)?,
                    ])
                }
                Some("classes") => classes = Some(num(parts.next(), line)?),
                Some("conv") => layers.push(LayerSpec::Conv {
                    out_channels: num(parts.next(), line)?,
                    stride: num(parts.next(), line)?,
                }),
                Some("affine") => layers.push(LayerSpec::Affine {
                    out_features: num(parts.next(), line)?,
                }),
                Some("relu") => layers.push(LayerSpec::Relu),
                Some("flatten") => layers.push(LayerSpec::Flatten),
                _ => return Err(bad(line)),
            }
            if parts.next().is_some() {
                return Err(bad(line));
            }
        }
        let input =
            input.ok_or_else(|| Error::Config("network text lacks an input line".into()))?;
        let classes =
            classes.ok_or_else(|| Error::Config("network text lacks a classes line".into()))?;
        NetworkSpec::new(input, layers, classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights and biases of every parameterized layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamStore {
            layers: spec
                .param_shapes()
                .into_iter()
                .map(|(w, b)| LayerParams {
                    weight: Tensor::zeros(&w),
                    bias: Tensor::zeros(&b),
                })
                .collect(),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero; deterministic per seed.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::zeros(spec);
        for layer in &mut store.layers {
            let fan_in: usize = layer.weight.shape()[1..].iter().product();
            let bound = 1.0 / (fan_in as f32).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        store
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "parameter store has {} layers, network needs {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for ((w, b), p) in shapes.iter().zip(&self.layers) {
            if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                return Err(Error::dim("parameters", p.weight.shape(), w));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Sum of squares of all parameters.
    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.data())
            .map(|&v| v as f64 * v as f64)
            .sum()
    }
}

/// Parameters recorded on a graph, one `(weight, bias)` pair per layer.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    /// Records the parameters as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(graph: &mut Graph, params: &ParamStore, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BoundParams {
            layers: params
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Records the forward pass on `graph` and returns the `[B, K]` logits node.
pub fn forward_graph(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    input: NodeId,
) -> Result<NodeId> {
    spec.check_batch(graph.value(input))?;
    let mut x = input;
    let mut p = params.layers.iter();
    for layer in spec.layers() {
        x = match *layer {
            LayerSpec::Conv { stride, .. } => {
                let &(w, b) = p.next().expect("validated layer count");
                graph.conv2d(x, w, Some(b), stride)?
            }
            LayerSpec::Affine { .. } => {
                let &(w, b) = p.next().expect("validated layer count");
                graph.affine(x, w, Some(b))?
            }
            LayerSpec::Relu => graph.relu(x),
            LayerSpec::Flatten => graph.flatten(x)?,
        };
    }
    Ok(x)
}

/// Logits for a `[B, C, H, W]` batch, without recording gradients.
pub fn forward(spec: &NetworkSpec, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    spec.check_batch(batch)?;
    params.check(spec)?;
    let mut x = batch.clone();
    let mut p = params.layers.iter();
    for layer in spec.layers() {
        x = match *layer {
            LayerSpec::Conv { stride, .. } => {
                let l = p.next().expect("validated layer count");
                kernels::conv2d(&x, &l.weight, Some(&l.bias), stride)?
            }
            LayerSpec::Affine { .. } => {
                let l = p.next().expect("validated layer count");
                kernels::affine(&x, &l.weight, Some(&l.bias))?
            }
            LayerSpec::Relu => kernels::relu(&x),
            LayerSpec::Flatten => {
                let shape = [x.batch(), x.item_len()];
                x.reshape(&shape)?
            }
        };
    }
    Ok(x)
}

/// [`forward`] over a large batch in chunks of `chunk` samples.
pub fn forward_chunked(
    spec: &NetworkSpec,
    params: &ParamStore,
    batch: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    let n = batch.batch();
    let mut out = Vec::with_capacity(n * spec.classes());
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        out.extend(forward(spec, params, &batch.select(&idx)?)?.into_data());
    }
    Tensor::new(vec![n, spec.classes()], out)
}
