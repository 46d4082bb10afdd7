//! Small VGG- and ResNet-style classifiers with declarative topographic taps.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchMoments, BatchNormMode, RunningStats, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SmallVgg,
    SmallResnet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::SmallVgg => "small_vgg",
            Family::SmallResnet => "small_resnet",
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Family::SmallVgg => vec![32, 64, 128, 256],
            Family::SmallResnet => vec![32, 64, 128],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_vgg" => Ok(Family::SmallVgg),
            "small_resnet" => Ok(Family::SmallResnet),
            _ => Err(Error::invalid(format!("unknown model family `{s}` (expected small_vgg or small_resnet)"))),
        }
    }
}

/// Which convolutional layers carry a layout.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    /// Every conv for VGG; the last conv of each residual block for ResNet.
    #[default]
    Default,
    None,
    Explicit(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub attachment: Attachment,
}

impl ModelSpec {
    pub fn new(family: Family, in_channels: usize, image_size: usize, num_classes: usize) -> Self {
        ModelSpec {
            family,
            widths: family.default_widths(),
            num_classes,
            in_channels,
            image_size,
            attachment: Attachment::Default,
        }
    }

    pub fn small_vgg(in_channels: usize, image_size: usize, num_classes: usize) -> Self {
        Self::new(Family::SmallVgg, in_channels, image_size, num_classes)
    }

    pub fn small_resnet(in_channels: usize, image_size: usize, num_classes: usize) -> Self {
        Self::new(Family::SmallResnet, in_channels, image_size, num_classes)
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_attachment(mut self, attachment: Attachment) -> Self {
        self.attachment = attachment;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvInfo {
    pub id: String,
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Batch norm applied directly to this conv's output.
    pub bn: usize,
}

#[derive(Clone, Debug)]
pub struct BnInfo {
    pub id: String,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: usize,
    conv2: usize,
    shortcut: Option<usize>,
}

#[derive(Clone, Debug)]
enum Body {
    Vgg { stages: Vec<Vec<usize>> },
    Resnet { stem: usize, blocks: Vec<ResBlock> },
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Raw conv outputs (bias added, before normalization and ReLU) of the attached layers.
    pub taps: Vec<(String, Var)>,
    /// Raw outputs of every conv layer, in forward order.
    pub conv_outputs: Vec<(String, Var)>,
    /// Tape leaves for `Model::params`, same order.
    pub param_vars: Vec<Var>,
    /// Batch moments per batch norm, present in training mode.
    pub bn_updates: Vec<(usize, BatchMoments<T>)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    convs: Vec<ConvInfo>,
    bns: Vec<BnInfo>,
    fc_weight: usize,
    fc_bias: usize,
    body: Body,
    attached: Vec<usize>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    convs: Vec<ConvInfo>,
    bns: Vec<BnInfo>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn bn(&mut self, id: String, channels: usize) -> usize {
        let gamma = self.param(format!("{id}.gamma"), Tensor::full([channels], T::one()));
        let beta = self.param(format!("{id}.beta"), Tensor::zeros([channels]));
        self.running.push(RunningStats::new(channels));
        self.bns.push(BnInfo { id, gamma, beta });
        self.bns.len() - 1
    }

    fn conv(&mut self, id: &str, bn_id: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let fan_in = cin * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::randn([cout, cin, kernel, kernel], std, &mut self.rng);
        let weight = self.param(format!("{id}.weight"), w);
        let bias = self.param(format!("{id}.bias"), Tensor::zeros([cout]));
        let bn = self.bn(bn_id.to_string(), cout);
        self.convs.push(ConvInfo {
            id: id.to_string(),
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            bn,
        });
        self.convs.len() - 1
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model: Kaiming-normal conv weights, zero biases,
    /// unit/zero batch-norm affine parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(Error::invalid("model widths must be non-empty and positive"));
        }
        if spec.num_classes < 2 || spec.in_channels == 0 {
            return Err(Error::invalid("model needs at least 2 classes and 1 input channel"));
        }
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            running: Vec::new(),
            convs: Vec::new(),
            bns: Vec::new(),
        };
        let mut size = spec.image_size;
        let body = match spec.family {
            Family::SmallVgg => {
                let mut stages = Vec::new();
                let mut cin = spec.in_channels;
                for (s, &w) in spec.widths.iter().enumerate() {
                    let mut stage = Vec::new();
                    for j in 1..=2 {
                        let id = format!("stage{}.conv{j}", s + 1);
                        let bn = format!("stage{}.bn{j}", s + 1);
                        stage.push(b.conv(&id, &bn, cin, w, 3, 1, 1));
                        cin = w;
                    }
                    if size < 2 {
                        return Err(Error::invalid(format!(
                            "input size {} too small for {} pooling stages",
                            spec.image_size,
                            spec.widths.len()
                        )));
                    }
                    size /= 2;
                    stages.push(stage);
                }
                Body::Vgg { stages }
            }
            Family::SmallResnet => {
                let stem = b.conv("stem.conv", "stem.bn", spec.in_channels, spec.widths[0], 3, 1, 1);
                let mut cin = spec.widths[0];
                let mut blocks = Vec::new();
                for (s, &w) in spec.widths.iter().enumerate() {
                    for k in 1..=2 {
                        let stride = if s > 0 && k == 1 { 2 } else { 1 };
                        let p = format!("stage{}.block{k}", s + 1);
                        let conv1 = b.conv(&format!("{p}.conv1"), &format!("{p}.bn1"), cin, w, 3, stride, 1);
                        let conv2 = b.conv(&format!("{p}.conv2"), &format!("{p}.bn2"), w, w, 3, 1, 1);
                        let shortcut = (stride != 1 || cin != w)
                            .then(|| b.conv(&format!("{p}.shortcut.conv"), &format!("{p}.shortcut.bn"), cin, w, 1, stride, 0));
                        if stride == 2 {
                            if size < 2 {
                                return Err(Error::invalid(format!("input size {} too small", spec.image_size)));
                            }
                            size = size.div_ceil(2);
                        }
                        blocks.push(ResBlock { conv1, conv2, shortcut });
                        cin = w;
                    }
                }
                Body::Resnet { stem, blocks }
            }
        };
        let feat = *spec.widths.last().expect("non-empty widths");
        let fc_std = (1.0 / feat as f64).sqrt();
        let fc_w = Tensor::randn([spec.num_classes, feat], fc_std, &mut b.rng);
        let fc_weight = b.param("fc.weight".into(), fc_w);
        let fc_bias = b.param("fc.bias".into(), Tensor::zeros([spec.num_classes]));

        let attached = resolve_attachment(&spec, &b.convs, &body)?;
        Ok(Model {
            spec,
            params: b.params,
            running: b.running,
            convs: b.convs,
            bns: b.bns,
            fc_weight,
            fc_bias,
            body,
            attached,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn convs(&self) -> &[ConvInfo] {
        &self.convs
    }

    pub fn bns(&self) -> &[BnInfo] {
        &self.bns
    }

    pub fn conv(&self, id: &str) -> Option<&ConvInfo> {
        self.convs.iter().find(|c| c.id == id)
    }

    /// Ids of the layers that carry a layout, in forward order.
    pub fn topo_layer_ids(&self) -> Vec<String> {
        self.attached.iter().map(|&i| self.convs[i].id.clone()).collect()
    }

    /// `(id, C_out)` of each attached layer.
    pub fn topo_layers(&self) -> Vec<(String, usize)> {
        self.attached.iter().map(|&i| (self.convs[i].id.clone(), self.convs[i].out_channels)).collect()
    }

    /// Ids of the layers the default rule would attach, independent of `spec.attachment`.
    pub fn default_attachment_ids(&self) -> Vec<String> {
        default_attachment(&self.body).into_iter().map(|i| self.convs[i].id.clone()).collect()
    }

    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchMoments<T>)]) {
        let momentum = T::lit(BN_MOMENTUM);
        for (idx, m) in updates {
            self.running[*idx].update(&m.mean, &m.var_unbiased, momentum);
        }
    }

    /// Parameters and batch-norm statistics as named tensors, for checkpoints.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (bn, stats) in self.bns.iter().zip(&self.running) {
            let c = stats.mean.len();
            out.push((format!("{}.running_mean", bn.id), Tensor::from_parts(vec![c], stats.mean.clone())));
            out.push((format!("{}.running_var", bn.id), Tensor::from_parts(vec![c], stats.var.clone())));
        }
        out
    }

    /// Restores a [`state`](Self::state) snapshot; names and shapes must match exactly.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: expected {} tensors, found {}",
                expected.len(),
                state.len()
            )));
        }
        for ((en, et), (n, t)) in expected.iter().zip(state) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: expected {en} {:?}, found {n} {:?}",
                    et.shape(),
                    t.shape()
                )));
            }
        }
        let n_params = self.params.len();
        for (p, (_, t)) in self.params.iter_mut().zip(state) {
            p.value = t.clone();
        }
        for (i, stats) in self.running.iter_mut().enumerate() {
            stats.mean = state[n_params + 2 * i].1.data().to_vec();
            stats.var = state[n_params + 2 * i + 1].1.data().to_vec();
        }
        Ok(())
    }

    /// Runs the network on `input` `(B, C, H, W)`.
    ///
    /// Parameters become tape leaves (requiring gradients iff `track_grad`).
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, track_grad: bool) -> Result<ForwardOutput<T>> {
        let [_, c, h, w] = tape.value(input).dims4("model input")?;
        if c != self.spec.in_channels || h != self.spec.image_size || w != self.spec.image_size {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected (B, {}, {s}, {s}), got {:?}",
                    self.spec.in_channels,
                    tape.value(input).shape(),
                    s = self.spec.image_size
                ),
            ));
        }
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), track_grad)).collect();
        self.forward_with_params(tape, input, mode, &param_vars)
    }

    /// [`forward`](Self::forward) with caller-provided parameter variables
    /// (one per entry of [`params`](Self::params), same shapes).
    pub fn forward_with_params(&self, tape: &mut Tape<T>, input: Var, mode: Mode, param_vars: &[Var]) -> Result<ForwardOutput<T>> {
        if param_vars.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} parameter variables, got {}", self.params.len(), param_vars.len())));
        }
        for (p, &v) in self.params.iter().zip(param_vars) {
            if tape.value(v).shape() != p.value.shape() {
                return Err(Error::shape("model parameters", format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), tape.value(v).shape())));
            }
        }
        let mut ctx = Ctx { model: self, tape, pv: param_vars, mode, taps: Vec::new(), bn_updates: Vec::new() };
        let features = match &self.body {
            Body::Vgg { stages } => {
                let mut x = input;
                for stage in stages {
                    for &conv in stage {
                        x = ctx.conv_bn(conv, x)?;
                        x = ctx.tape.relu(x)?;
                    }
                    x = ctx.tape.max_pool2d(x, 2, 2)?;
                }
                x
            }
            Body::Resnet { stem, blocks } => {
                let mut x = ctx.conv_bn(*stem, input)?;
                x = ctx.tape.relu(x)?;
                for block in blocks {
                    let h1 = ctx.conv_bn(block.conv1, x)?;
                    let h1 = ctx.tape.relu(h1)?;
                    let h2 = ctx.conv_bn(block.conv2, h1)?;
                    let sc = match block.shortcut {
                        Some(s) => ctx.conv_bn(s, x)?,
                        None => x,
                    };
                    let sum = ctx.tape.add(h2, sc)?;
                    x = ctx.tape.relu(sum)?;
                }
                x
            }
        };
        let [_, _, fh, fw] = ctx.tape.value(features).dims4("features")?;
        let pooled = if fh == fw && fh > 1 { ctx.tape.avg_pool2d(features, fh, fh)? } else { features };
        let flat = ctx.tape.flatten(pooled)?;
        let logits = ctx.tape.linear(flat, param_vars[self.fc_weight], Some(param_vars[self.fc_bias]))?;
        let Ctx { taps, bn_updates, .. } = ctx;
        let conv_outputs: Vec<(String, Var)> = taps.iter().map(|&(c, v)| (self.convs[c].id.clone(), v)).collect();
        let taps = self
            .attached
            .iter()
            .filter_map(|&i| taps.iter().find(|(c, _)| *c == i).map(|(c, v)| (self.convs[*c].id.clone(), *v)))
            .collect();
        Ok(ForwardOutput { logits, taps, conv_outputs, param_vars: param_vars.to_vec(), bn_updates })
    }
}

struct Ctx<'a, T: Scalar> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    pv: &'a [Var],
    mode: Mode,
    taps: Vec<(usize, Var)>,
    bn_updates: Vec<(usize, BatchMoments<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv_bn(&mut self, conv: usize, x: Var) -> Result<Var> {
        let info = &self.model.convs[conv];
        let y = self.tape.conv2d(x, self.pv[info.weight], Some(self.pv[info.bias]), info.stride, info.padding)?;
        self.taps.push((conv, y));
        let bn = &self.model.bns[info.bn];
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval(&self.model.running[info.bn]),
        };
        let (out, moments) = self.tape.batch_norm2d(y, self.pv[bn.gamma], self.pv[bn.beta], mode, BN_EPS)?;
        if let Some(m) = moments {
            self.bn_updates.push((info.bn, m));
        }
        Ok(out)
    }
}

fn default_attachment(body: &Body) -> Vec<usize> {
    match body {
        Body::Vgg { stages } => stages.iter().flatten().copied().collect(),
        Body::Resnet { blocks, .. } => blocks.iter().map(|b| b.conv2).collect(),
    }
}

fn resolve_attachment(spec: &ModelSpec, convs: &[ConvInfo], body: &Body) -> Result<Vec<usize>> {
    match &spec.attachment {
        Attachment::Default => Ok(default_attachment(body)),
        Attachment::None => Ok(Vec::new()),
        Attachment::Explicit(ids) => {
            let mut out = Vec::new();
            for id in ids {
                let idx = convs
                    .iter()
                    .position(|c| &c.id == id)
                    .ok_or_else(|| Error::invalid(format!("attachment names unknown conv layer `{id}`")))?;
                if !out.contains(&idx) {
                    out.push(idx);
                }
            }
            out.sort_unstable();
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout + 2 * cout
    }

    #[test]
    fn vgg_logit_shape_and_param_count() {
        let model = Model::<f32>::new(ModelSpec::small_vgg(3, 32, 10), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        let out = model.forward(&mut tape, x, Mode::Eval, false).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[2, 10]);
        assert_eq!(out.taps.len(), 8);

        let mut expected = 0;
        let mut cin = 3;
        for w in [32, 64, 128, 256] {
            expected += conv_params(cin, w, 3) + conv_params(w, w, 3);
            cin = w;
        }
        expected += 256 * 10 + 10;
        assert_eq!(model.param_count(), expected);
        assert_eq!(model.param_count(), 1_176_746);
    }

    #[test]
    fn resnet_attaches_end_of_block_convs() {
        let model = Model::<f32>::new(ModelSpec::small_resnet(3, 32, 10), 0).unwrap();
        let ids = model.topo_layer_ids();
        assert_eq!(ids.len(), 6);
        assert!(ids.iter().all(|id| id.ends_with(".conv2")));
        let mut expected = conv_params(3, 32, 3);
        let mut cin = 32;
        for w in [32, 64, 128] {
            expected += conv_params(cin, w, 3) + conv_params(w, w, 3);
            if cin != w {
                expected += conv_params(cin, w, 1);
            }
            expected += 2 * conv_params(w, w, 3);
            cin = w;
        }
        expected += 128 * 10 + 10;
        assert_eq!(model.param_count(), expected);
        assert_eq!(model.param_count(), 697_738);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        let out = model.forward(&mut tape, x, Mode::Train, false).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[1, 10]);
        assert_eq!(out.taps.len(), 6);
        assert_eq!(tape.value(out.taps[5].1).shape(), &[1, 128, 8, 8]);
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let mut model = Model::<f64>::new(ModelSpec::small_vgg(3, 32, 10), 3).unwrap();
        for p in model.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 3, 32, 32], 0.3));
        let out = model.forward(&mut tape, x, Mode::Train, false).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
        let loss = tape.softmax_cross_entropy(out.logits, &[0, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn taps_are_raw_conv_outputs() {
        let model = Model::<f64>::new(ModelSpec::small_vgg(3, 8, 4).with_widths(vec![4, 8]), 1).unwrap();
        let mut tape = Tape::new();
        let input = Tensor::from_fn([2, 3, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let x = tape.constant(input);
        let out = model.forward(&mut tape, x, Mode::Train, false).unwrap();
        let first = model.conv("stage1.conv1").unwrap();
        let w = tape.constant(model.params()[first.weight].value.clone());
        let b = tape.constant(model.params()[first.bias].value.clone());
        let manual = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(out.taps[0].0, "stage1.conv1");
        assert_eq!(tape.value(out.taps[0].1).data(), tape.value(manual).data());
    }

    #[test]
    fn explicit_and_empty_attachment() {
        let spec = ModelSpec::small_vgg(3, 32, 10).with_attachment(Attachment::Explicit(vec!["stage2.conv1".into()]));
        let model = Model::<f32>::new(spec, 0).unwrap();
        assert_eq!(model.topo_layer_ids(), vec!["stage2.conv1".to_string()]);
        let bad = ModelSpec::small_vgg(3, 32, 10).with_attachment(Attachment::Explicit(vec!["nope".into()]));
        assert!(Model::<f32>::new(bad, 0).is_err());
        let none = Model::<f32>::new(ModelSpec::small_vgg(3, 32, 10).with_attachment(Attachment::None), 0).unwrap();
        assert!(none.topo_layer_ids().is_empty());
        assert_eq!(none.default_attachment_ids().len(), 8);
    }

    #[test]
    fn state_round_trip_and_mismatch() {
        let a = Model::<f32>::new(ModelSpec::small_vgg(3, 32, 10), 0).unwrap();
        let mut b = Model::<f32>::new(ModelSpec::small_vgg(3, 32, 10), 1).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        let mut r = Model::<f32>::new(ModelSpec::small_resnet(3, 32, 10), 0).unwrap();
        assert!(matches!(r.load_state(&a.state()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Model::<f32>::new(ModelSpec::small_resnet(3, 32, 10), 7).unwrap();
        let b = Model::<f32>::new(ModelSpec::small_resnet(3, 32, 10), 7).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
