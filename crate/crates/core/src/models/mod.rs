//! Shallow CNN, small residual network and small vision transformer.
//!
//! A [`Model`] owns a flat list of named parameter tensors and a layout that
//! knows how to wire them into a graph on a [`Tape`]. Training binds the
//! parameters as gradient-carrying leaves; inference binds them as constants.

mod checkpoint;
mod layers;
mod spec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use layers::{scaled_dot_product, Conv, Dense, EncoderLayer, Norm, ResidualBlock};
pub use spec::{Architecture, CnnParams, Family, ModelSpec, ResNetParams, VitParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Config(String),
    #[error("fusion unsupported for ViT: the patch embedding takes 3-channel images, got {channels}")]
    FusionUnsupported { channels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unsupported family {family}: {detail}")]
    UnsupportedFamily { family: Family, detail: &'static str },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("checkpoint spec mismatch: expected {expected}, found {found}")]
    SpecMismatch { expected: String, found: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    /// `[N, 2]`.
    pub logits: Var,
    /// `[N, F, h, w]` activations of the layer Grad-CAM reads (CNN families).
    pub final_conv: Option<Var>,
    /// Per encoder layer, `[N, heads, tokens, tokens]` (ViT).
    pub attention: Vec<Var>,
}

/// Values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<S: Scalar = f32> {
    pub logits: Tensor<S>,
    pub final_conv_activations: Option<Tensor<S>>,
    pub attention_maps: Vec<Tensor<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    /// Runaway score per sample: the logit margin `z_runaway - z_baseline`.
    pub fn scores(&self) -> Vec<f64> {
        self.logits.data().chunks(2).map(|z| z[1].as_f64() - z[0].as_f64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Cnn { conv1: Conv, conv2: Conv, fc1: Dense, fc2: Dense },
    ResNet { stem: Conv, blocks: Vec<ResidualBlock>, fc1: Dense, fc2: Dense },
    Vit { patch: usize, embed: Dense, class_token: usize, positions: usize, layers: Vec<EncoderLayer>, norm: Norm, head: Dense },
}

/// Collects parameters in registration order while the layout is built.
struct Builder<S: Scalar> {
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<S: Scalar> Builder<S> {
    fn push(&mut self, name: String, value: Tensor<S>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    /// Kaiming-uniform over `fan_in`.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| S::from_f64(dist.sample(rng)));
        self.push(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape.to_vec(), S::from_f64(value)))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Conv {
        let weight = self.kaiming(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        let bias = self.constant(format!("{name}.bias"), &[c_out], 0.0);
        Conv { weight, bias, stride, padding: kernel / 2 }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> Dense {
        let weight = self.kaiming(format!("{name}.weight"), &[d_out, d_in], d_in);
        let bias = self.constant(format!("{name}.bias"), &[d_out], 0.0);
        Dense { weight, bias }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.constant(format!("{name}.gamma"), &[d], 1.0);
        let beta = self.constant(format!("{name}.beta"), &[d], 0.0);
        Norm { gamma, beta }
    }
}

/// A model of any family with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f32> {
    spec: ModelSpec,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

impl<S: Scalar> Model<S> {
    /// Builds the layout and draws initial weights from `spec.init_seed`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::<S> { names: Vec::new(), params: Vec::new(), rng: seed::stream(spec.init_seed) };
        let (h, w) = (spec.image_size.height, spec.image_size.width);
        let layout = match &spec.architecture {
            Architecture::ShallowCnn(p) => {
                let [w1, w2] = p.widths;
                let conv1 = b.conv("conv1", spec.in_channels, w1, p.kernel, 1);
                let conv2 = b.conv("conv2", w1, w2, p.kernel, 1);
                let flat = w2 * (h / 2 / 2) * (w / 2 / 2);
                let fc1 = b.dense("fc1", flat, p.fc_hidden);
                let fc2 = b.dense("fc2", p.fc_hidden, 2);
                Layout::Cnn { conv1, conv2, fc1, fc2 }
            }
            Architecture::MiniResNet(p) => {
                let stem = b.conv("stem", spec.in_channels, p.stem_width, 3, 2);
                let (mut fh, mut fw) = (conv_out(h, 3, 2) / 2, conv_out(w, 3, 2) / 2);
                let mut width = p.stem_width;
                let mut blocks = Vec::with_capacity(p.block_widths.len());
                for (i, &out) in p.block_widths.iter().enumerate() {
                    let stride = if out != width { 2 } else { 1 };
                    let name = format!("block{}", i + 1);
                    let conv1 = b.conv(&format!("{name}.conv1"), width, out, 3, stride);
                    let conv2 = b.conv(&format!("{name}.conv2"), out, out, 3, 1);
                    let projection = (out != width).then(|| b.conv(&format!("{name}.projection"), width, out, 1, stride));
                    blocks.push(ResidualBlock { conv1, conv2, projection });
                    (fh, fw) = (conv_out(fh, 3, stride), conv_out(fw, 3, stride));
                    width = out;
                }
                if fh == 0 || fw == 0 {
                    return Err(ModelError::Config(format!("{h}x{w} image vanishes before pooling")));
                }
                let fc1 = b.dense("fc1", width, p.fc_hidden);
                let fc2 = b.dense("fc2", p.fc_hidden, 2);
                Layout::ResNet { stem, blocks, fc1, fc2 }
            }
            Architecture::MiniVit(p) => {
                let d = p.embed_dim;
                let tokens = spec.vit_tokens().expect("vit spec");
                let embed = b.dense("patch_embed", spec.in_channels * p.patch * p.patch, d);
                let class_token = b.normal("class_token".into(), &[1, d], 0.02);
                let positions = b.normal("positions".into(), &[tokens, d], 0.02);
                let layers = (0..p.depth)
                    .map(|i| {
                        let name = format!("layer{}", i + 1);
                        EncoderLayer {
                            heads: p.heads,
                            norm1: b.norm(&format!("{name}.norm1"), d),
                            qkv: b.dense(&format!("{name}.qkv"), d, 3 * d),
                            proj: b.dense(&format!("{name}.proj"), d, d),
                            norm2: b.norm(&format!("{name}.norm2"), d),
                            mlp1: b.dense(&format!("{name}.mlp1"), d, p.mlp_ratio * d),
                            mlp2: b.dense(&format!("{name}.mlp2"), p.mlp_ratio * d, d),
                        }
                    })
                    .collect();
                let norm = b.norm("norm", d);
                let head = b.dense("head", d, 2);
                Layout::Vit { patch: p.patch, embed, class_token, positions, layers, norm, head }
            }
        };
        Ok(Self { spec, layout, names: b.names, params: b.params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family()
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(ModelError::Config(format!("{} tensors for {} parameters", params.len(), self.params.len())));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(ModelError::Config(format!(
                    "{}: shape {:?} does not match {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Residual blocks of a MiniResNet.
    pub fn residual_blocks(&self) -> Option<&[ResidualBlock]> {
        match &self.layout {
            Layout::ResNet { blocks, .. } => Some(blocks),
            _ => None,
        }
    }

    /// Records parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| Ok(tape.leaf(p.clone(), trainable)?)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = matches!(shape, &[n, c, h, w] if n > 0 && c == self.spec.in_channels
            && h == self.spec.image_size.height && w == self.spec.image_size.width);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op: "model_forward",
                detail: format!(
                    "input {shape:?}, model expects [N, {}, {}, {}]",
                    self.spec.in_channels, self.spec.image_size.height, self.spec.image_size.width
                ),
            }
            .into())
        }
    }

    /// Wires the network onto `tape` for input `x: [N, C, H, W]` with bound `params`.
    pub fn graph(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Graph> {
        self.check_input(tape.shape(x))?;
        if params.len() != self.params.len() {
            return Err(ModelError::Config(format!("{} bound vars for {} parameters", params.len(), self.params.len())));
        }
        let p = params;
        let x = center_input(tape, x)?;
        let graph = match &self.layout {
            Layout::Cnn { conv1, conv2, fc1, fc2 } => {
                let h = conv1.apply(tape, x, p)?;
                let h = tape.relu(h)?;
                let h = tape.max_pool2d(h, 2, 2)?;
                let h = conv2.apply(tape, h, p)?;
                let features = tape.relu(h)?;
                let h = tape.max_pool2d(features, 2, 2)?;
                let h = tape.flatten(h)?;
                let h = fc1.apply(tape, h, p)?;
                let h = tape.relu(h)?;
                let logits = fc2.apply(tape, h, p)?;
                Graph { logits, final_conv: Some(features), attention: Vec::new() }
            }
            Layout::ResNet { stem, blocks, fc1, fc2 } => {
                let h = stem.apply(tape, x, p)?;
                let h = tape.relu(h)?;
                let mut h = tape.max_pool2d(h, 2, 2)?;
                for block in blocks {
                    h = block.apply(tape, h, p)?;
                }
                let features = h;
                let h = tape.global_avg_pool2d(features)?;
                let h = fc1.apply(tape, h, p)?;
                let h = tape.relu(h)?;
                let logits = fc2.apply(tape, h, p)?;
                Graph { logits, final_conv: Some(features), attention: Vec::new() }
            }
            Layout::Vit { patch, embed, class_token, positions, layers, norm, head } => {
                let &[n, c, hh, ww] = tape.shape(x) else { unreachable!("checked above") };
                let (gh, gw, ps) = (hh / patch, ww / patch, *patch);
                let t = tape.reshape(x, &[n, c, gh, ps, gw, ps])?;
                let t = tape.permute(t, &[0, 2, 4, 1, 3, 5])?;
                let t = tape.reshape(t, &[n * gh * gw, c * ps * ps])?;
                let t = embed.apply(tape, t, p)?;
                let d = tape.shape(t)[1];
                let patches = tape.reshape(t, &[n, gh * gw, d])?;
                let cls = tape.expand(p[*class_token], n)?;
                let tokens = tape.concat(&[cls, patches], 1)?;
                let mut h = tape.add_broadcast(tokens, p[*positions])?;
                let mut attention = Vec::with_capacity(layers.len());
                for layer in layers {
                    let (out, attn) = layer.apply(tape, h, p)?;
                    h = out;
                    attention.push(attn);
                }
                let h = norm.apply(tape, h, p)?;
                let cls = tape.narrow(h, 1, 0, 1)?;
                let cls = tape.reshape(cls, &[n, d])?;
                let logits = head.apply(tape, cls, p)?;
                Graph { logits, final_conv: None, attention }
            }
        };
        Ok(graph)
    }

    /// Inference on a `[N, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<ForwardTrace<S>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let g = self.graph(&mut tape, x, &params)?;
        Ok(ForwardTrace {
            logits: tape.value(g.logits).clone(),
            final_conv_activations: g.final_conv.map(|v| tape.value(v).clone()),
            attention_maps: g.attention.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Mean cross-entropy loss of a batch and the gradient of every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor<S>, labels: &[usize]) -> Result<(S, Vec<Tensor<S>>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, true)?;
        let x = tape.constant(batch.clone())?;
        let g = self.graph(&mut tape, x, &params)?;
        let loss = tape.cross_entropy(g.logits, labels)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((value, grads))
    }
}

/// Maps `[0, 1]` inputs to `[-1, 1]`.
fn center_input<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let width = *tape.shape(x).last().expect("4-d input");
    let doubled = tape.scale(x, S::from_f64(2.0))?;
    let shift = tape.constant(Tensor::full([width], S::from_f64(-1.0)))?;
    Ok(tape.add_broadcast(doubled, shift)?)
}
