//! Three-part client models: a shared extractor, variant-specific
//! intermediate layers and a shared classifier.
//!
//! Every variant agrees on the extractor and classifier shapes, so those
//! two groups can be averaged across clients. Only the intermediate
//! stack differs, and it always maps `feature_dim_in -> feature_dim_out`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grad::{GradientSet, Group, GroupMask, Layout};
use crate::rng::{self, tag};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    /// Number of intermediate blocks. Ordering follows the reference
    /// architectures: A deepest, B and E shallowest.
    pub fn depth(self) -> usize {
        match self {
            Variant::A => 6,
            Variant::B => 3,
            Variant::C => 5,
            Variant::D => 4,
            Variant::E => 3,
        }
    }

    fn ordinal(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Model family, selected by configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Dense layers; inputs are flattened.
    Mlp { hidden: usize },
    /// Small convolutional stack for `[C, H, W]` images.
    Conv { channels: usize },
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::Mlp { hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    /// Reinterprets the per-sample shape; the batch dimension is kept.
    Reshape { shape: Vec<usize> },
}

impl Layer {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Dimension {
            op: "layer input",
            left: input.to_vec(),
            right: expected,
        };
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => match *input {
                [c, h, w] if c == in_channels && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => Err(mismatch(vec![in_channels, kernel, kernel])),
            },
            Layer::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
        }
    }

    /// `(suffix, shape, fan_in)` for each trainable tensor.
    fn params(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => vec![
                ("weight", vec![inputs, outputs], inputs),
                ("bias", vec![outputs], inputs),
            ],
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    ("weight", vec![out_channels, in_channels, kernel, kernel], fan_in),
                    ("bias", vec![out_channels], fan_in),
                ]
            }
            Layer::Reshape { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub group: Group,
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub variant: Variant,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub extractor: Vec<Layer>,
    pub intermediate: Vec<Layer>,
    pub classifier: Vec<Layer>,
    pub feature_dim_in: usize,
    pub feature_dim_out: usize,
}

impl ArchSpec {
    /// Validates that the three stacks chain together: the extractor and
    /// intermediate outputs are flat vectors and the classifier emits
    /// `num_classes` logits.
    pub fn from_layers(
        variant: Variant,
        input_shape: Vec<usize>,
        extractor: Vec<Layer>,
        intermediate: Vec<Layer>,
        classifier: Vec<Layer>,
    ) -> Result<Self> {
        let chain = |layers: &[Layer], start: Vec<usize>| {
            layers
                .iter()
                .try_fold(start, |shape, layer| layer.output_shape(&shape))
        };
        let flat = |shape: Vec<usize>, what: &str| match shape.as_slice() {
            [d] => Ok(*d),
            _ => Err(Error::Config(format!(
                "{what} must produce a flat feature vector, got {shape:?}"
            ))),
        };
        let feature_dim_in = flat(chain(&extractor, input_shape.clone())?, "extractor")?;
        let feature_dim_out = flat(chain(&intermediate, vec![feature_dim_in])?, "intermediate")?;
        let num_classes = flat(chain(&classifier, vec![feature_dim_out])?, "classifier")?;
        if num_classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        Ok(Self {
            variant,
            input_shape,
            num_classes,
            extractor,
            intermediate,
            classifier,
            feature_dim_in,
            feature_dim_out,
        })
    }

    pub fn mlp(variant: Variant, input_dim: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        let dense = |inputs, outputs, relu| Layer::Dense {
            inputs,
            outputs,
            relu,
        };
        Self::from_layers(
            variant,
            vec![input_dim],
            vec![dense(input_dim, hidden, true)],
            (0..variant.depth())
                .map(|_| dense(hidden, hidden, true))
                .collect(),
            vec![dense(hidden, num_classes, false)],
        )
    }

    /// Convolutional analog for `[C, H, W]` inputs: a strided conv
    /// extractor, a downsampling block followed by `depth - 1` same-size
    /// blocks, then a dense classifier.
    pub fn conv(variant: Variant, input_shape: &[usize], channels: usize, num_classes: usize) -> Result<Self> {
        let &[in_ch, h, w] = input_shape else {
            return Err(Error::Config(format!(
                "conv models need [C, H, W] inputs, got {input_shape:?}"
            )));
        };
        let conv = |i, o, stride| Layer::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
            relu: true,
        };
        let (h1, w1) = ((h + 1) / 2, (w + 1) / 2);
        let (h2, w2) = ((h1 + 1) / 2, (w1 + 1) / 2);
        let wide = 2 * channels;
        let mut intermediate = vec![
            Layer::Reshape {
                shape: vec![channels, h1, w1],
            },
            conv(channels, wide, 2),
        ];
        intermediate.extend((1..variant.depth()).map(|_| conv(wide, wide, 1)));
        intermediate.push(Layer::Reshape {
            shape: vec![wide * h2 * w2],
        });
        Self::from_layers(
            variant,
            input_shape.to_vec(),
            vec![
                conv(in_ch, channels, 2),
                Layer::Reshape {
                    shape: vec![channels * h1 * w1],
                },
            ],
            intermediate,
            vec![Layer::Dense {
                inputs: wide * h2 * w2,
                outputs: num_classes,
                relu: false,
            }],
        )
    }

    /// Architecture for `kind`; MLP models flatten the per-sample shape.
    pub fn for_kind(kind: &ModelKind, variant: Variant, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        match *kind {
            ModelKind::Mlp { hidden } => {
                Self::mlp(variant, input_shape.iter().product(), hidden, num_classes)
            }
            ModelKind::Conv { channels } => Self::conv(variant, input_shape, channels, num_classes),
        }
    }

    pub fn layers(&self, group: Group) -> &[Layer] {
        match group {
            Group::Extractor => &self.extractor,
            Group::Intermediate => &self.intermediate,
            Group::Classifier => &self.classifier,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for group in Group::ALL {
            for (i, layer) in self.layers(group).iter().enumerate() {
                for (suffix, shape, fan_in) in layer.params() {
                    specs.push(ParamSpec {
                        group,
                        name: format!("{}.{i}.{suffix}", group.prefix()),
                        shape,
                        fan_in,
                    });
                }
            }
        }
        specs
    }

    /// Names and shapes of the extractor and classifier parameters.
    pub fn shell_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.param_specs()
            .into_iter()
            .filter(|p| p.group != Group::Intermediate)
            .map(|p| (p.name, p.shape))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Output of a full forward pass with the features captured at both
/// segment boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCapture<T = f32> {
    pub logits: Tensor<T>,
    pub s_in: Tensor<T>,
    pub s_out: Tensor<T>,
}

/// Result of one local-training forward/backward pass.
#[derive(Clone, Debug)]
pub struct LocalPass<T = f32> {
    pub loss: T,
    pub grads: GradientSet,
    pub s_in: Tensor<T>,
    pub s_out: Tensor<T>,
}

/// Graph leaves for the parameters of a model.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: [Vec<Var>; 3],
}

impl Binding {
    /// Collects the gradient slots of bound parameters into a
    /// [`GradientSet`]; unbound groups are zero.
    pub fn gradients<T: Scalar>(&self, graph: &Graph<T>, layout: &Arc<Layout>) -> GradientSet {
        let mut out = GradientSet::zeros(layout.clone());
        for group in Group::ALL {
            let dst = out.group_mut(group);
            let mut offset = 0;
            for &v in &self.vars[group.index()] {
                let len = graph.value(v).len();
                if let Some(g) = graph.grad(v) {
                    for (d, &s) in dst[offset..offset + len].iter_mut().zip(g) {
                        *d = s.as_f64();
                    }
                }
                offset += len;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel<T = f32> {
    arch: Arc<ArchSpec>,
    layout: Arc<Layout>,
    groups: [Vec<Param<T>>; 3],
}

/// Builds a model with fan-in scaled uniform weights and zero biases.
/// Each tensor draws from its own stream keyed by
/// `(seed, variant, parameter name)`.
pub fn build_model(arch: &ArchSpec, seed: u64) -> SplitModel<f32> {
    SplitModel::build(arch, seed)
}

impl<T: Scalar> SplitModel<T> {
    pub fn build(arch: &ArchSpec, seed: u64) -> Self {
        let mut groups: [Vec<Param<T>>; 3] = Default::default();
        for spec in arch.param_specs() {
            let n: usize = spec.shape.iter().product();
            let values = if spec.name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                let mut rng = rng::stream(
                    seed,
                    &[tag::INIT, arch.variant.ordinal(), rng::name_hash(&spec.name)],
                );
                (0..n)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            };
            let tensor = Tensor::new(spec.shape, values).expect("spec shapes are positive");
            groups[spec.group.index()].push(Param {
                name: spec.name,
                tensor,
            });
        }
        Self::from_groups(arch, groups).expect("parameters built from spec")
    }

    /// Assembles a model from explicit parameters, checking names and
    /// shapes against the architecture.
    pub fn from_groups(arch: &ArchSpec, groups: [Vec<Param<T>>; 3]) -> Result<Self> {
        let specs = arch.param_specs();
        for group in Group::ALL {
            let expected: Vec<_> = specs.iter().filter(|s| s.group == group).collect();
            let got = &groups[group.index()];
            if expected.len() != got.len()
                || expected
                    .iter()
                    .zip(got)
                    .any(|(s, p)| s.name != p.name || s.shape != p.tensor.shape())
            {
                return Err(Error::contract(format!(
                    "{group} parameters do not match the {} architecture",
                    arch.variant
                )));
            }
        }
        let layout = Arc::new(Layout::new(
            specs
                .iter()
                .map(|s| (s.group, s.name.as_str(), s.shape.iter().product())),
        ));
        Ok(Self {
            arch: Arc::new(arch.clone()),
            layout,
            groups,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn params(&self, group: Group) -> &[Param<T>] {
        &self.groups[group.index()]
    }

    pub fn params_mut(&mut self, group: Group) -> &mut [Param<T>] {
        &mut self.groups[group.index()]
    }

    pub fn all_params(&self) -> impl Iterator<Item = &Param<T>> {
        self.groups.iter().flatten()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.all_params().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_len()
    }

    /// Replaces one group's parameters; names and shapes must match.
    pub fn set_group(&mut self, group: Group, params: &[Param<T>]) -> Result<()> {
        let current = &self.groups[group.index()];
        if current.len() != params.len()
            || current
                .iter()
                .zip(params)
                .any(|(c, p)| c.name != p.name || c.tensor.shape() != p.tensor.shape())
        {
            return Err(Error::contract(format!(
                "replacement {group} parameters do not match the model"
            )));
        }
        self.groups[group.index()] = params.to_vec();
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SplitModel<U> {
        SplitModel {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            groups: self.groups.clone().map(|ps| {
                ps.into_iter()
                    .map(|p| Param {
                        name: p.name,
                        tensor: p.tensor.cast(),
                    })
                    .collect()
            }),
        }
    }

    /// Puts the parameters on `graph`: groups in `trainable` as
    /// parameter leaves, the rest as constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: GroupMask) -> Binding {
        let vars = Group::ALL.map(|group| {
            self.groups[group.index()]
                .iter()
                .map(|p| {
                    if trainable.contains(group) {
                        graph.parameter(p.tensor.clone())
                    } else {
                        graph.constant(p.tensor.clone())
                    }
                })
                .collect()
        });
        Binding { vars }
    }

    /// Runs one segment of the model on `graph` starting from `x`.
    pub fn run_segment(&self, graph: &mut Graph<T>, binding: &Binding, group: Group, x: Var) -> Result<Var> {
        let mut params = binding.vars[group.index()].iter().copied();
        let mut h = x;
        for layer in self.arch.layers(group) {
            h = match layer {
                Layer::Dense { relu, .. } => {
                    let (w, b) = (params.next().unwrap(), params.next().unwrap());
                    let y = graph.affine(h, w, b)?;
                    if *relu {
                        graph.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Conv {
                    stride,
                    padding,
                    relu,
                    ..
                } => {
                    let (w, b) = (params.next().unwrap(), params.next().unwrap());
                    let y = graph.conv2d(h, w, b, *stride, *padding)?;
                    if *relu {
                        graph.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Reshape { shape } => {
                    let rows = graph.value(h).rows();
                    let mut full = Vec::with_capacity(shape.len() + 1);
                    full.push(rows);
                    full.extend_from_slice(shape);
                    graph.reshape(h, full)?
                }
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().get(1..) != Some(self.arch.input_shape.as_slice()) {
            let mut expected = vec![x.shape()[0]];
            expected.extend_from_slice(&self.arch.input_shape);
            return Err(Error::Dimension {
                op: "model input",
                left: x.shape().to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    fn check_width(&self, t: &Tensor<T>, width: usize, what: &'static str) -> Result<()> {
        if t.shape().len() != 2 || t.shape()[1] != width {
            return Err(Error::Dimension {
                op: what,
                left: t.shape().to_vec(),
                right: vec![t.shape()[0], width],
            });
        }
        Ok(())
    }

    /// Logits plus the extractor output `s_in` and intermediate output
    /// `s_out`, all detached.
    pub fn forward_full(&self, x: &Tensor<T>) -> Result<ForwardCapture<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let binding = self.bind(&mut g, GroupMask::NONE);
        let input = g.constant(x.clone());
        let s_in = self.run_segment(&mut g, &binding, Group::Extractor, input)?;
        let s_out = self.run_segment(&mut g, &binding, Group::Intermediate, s_in)?;
        let logits = self.run_segment(&mut g, &binding, Group::Classifier, s_out)?;
        Ok(ForwardCapture {
            logits: g.value(logits).detached(),
            s_in: g.value(s_in).detached(),
            s_out: g.value(s_out).detached(),
        })
    }

    fn run_alone(&self, group: Group, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g, GroupMask::NONE);
        let input = g.constant(x.clone());
        let out = self.run_segment(&mut g, &binding, group, input)?;
        Ok(g.value(out).detached())
    }

    /// Extractor alone: `x -> s_in`.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run_alone(Group::Extractor, x)
    }

    /// Intermediate layers alone: `s_in -> s_out`.
    pub fn forward_intermediate(&self, s_in: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(s_in, self.arch.feature_dim_in, "intermediate input")?;
        self.run_alone(Group::Intermediate, s_in)
    }

    /// Classifier alone: `s_out -> logits`.
    pub fn classify(&self, s_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(s_out, self.arch.feature_dim_out, "classifier input")?;
        self.run_alone(Group::Classifier, s_out)
    }

    /// Cross-entropy over all groups for one batch, keeping the features
    /// seen at both boundaries. Parameters are not modified.
    pub fn local_pass(&self, x: &Tensor<T>, labels: &[usize]) -> Result<LocalPass<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let binding = self.bind(&mut g, GroupMask::ALL);
        let input = g.constant(x.clone());
        let s_in = self.run_segment(&mut g, &binding, Group::Extractor, input)?;
        let s_out = self.run_segment(&mut g, &binding, Group::Intermediate, s_in)?;
        let logits = self.run_segment(&mut g, &binding, Group::Classifier, s_out)?;
        let loss = g.cross_entropy(logits, labels)?;
        g.backward(loss)?;
        Ok(LocalPass {
            loss: g.value(loss).values()[0],
            grads: binding.gradients(&g, &self.layout),
            s_in: g.value(s_in).detached(),
            s_out: g.value(s_out).detached(),
        })
    }

    /// MSE between the intermediate output on `s_in` and `target`; only
    /// the intermediate group is on the gradient path.
    pub fn intermediate_pass(&self, s_in: &Tensor<T>, target: &Tensor<T>) -> Result<(GradientSet, T)> {
        self.check_width(s_in, self.arch.feature_dim_in, "intermediate input")?;
        self.check_width(target, self.arch.feature_dim_out, "intermediate target")?;
        let mut g = Graph::new();
        let binding = self.bind(&mut g, GroupMask::INTERMEDIATE);
        let input = g.constant(s_in.clone());
        let pred = self.run_segment(&mut g, &binding, Group::Intermediate, input)?;
        let target = g.constant(target.clone());
        let loss = g.mse(pred, target)?;
        g.backward(loss)?;
        Ok((binding.gradients(&g, &self.layout), g.value(loss).values()[0]))
    }
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("accuracy needs at least one sample"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
