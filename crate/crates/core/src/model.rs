//! The six encoder-decoder architecture variants.
//!
//! All variants share one symmetric trunk: four conv blocks (3x3, relu)
//! each followed by 2x2 max-pooling, a channel-wise dense bottleneck with
//! dropout, and four transposed-convolution decoder stages mirrored from the
//! encoder, ending in a single sigmoid channel. Variants differ in how
//! sensors enter (one combined 6-channel input, two weight-independent
//! twin encoders, or a single sensor) and whether encoder outputs are
//! concatenated into the decoder as skip connections.
//!
//! One structural walk ([`walk`]) drives shape description, parameter
//! enumeration and graph construction, so the three cannot diverge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Ablation variant identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::A,
        ModelVariant::B,
        ModelVariant::C,
        ModelVariant::D,
        ModelVariant::E,
        ModelVariant::F,
    ];

    /// Camera and LiDAR stacked into one 6-channel input.
    pub fn combined_input(&self) -> bool {
        matches!(self, Self::A | Self::B)
    }

    /// Two weight-independent encoders, one per sensor.
    pub fn twin_encoders(&self) -> bool {
        matches!(self, Self::C | Self::D)
    }

    pub fn skip_connections(&self) -> bool {
        matches!(self, Self::A | Self::C | Self::E | Self::F)
    }

    pub fn camera_only(&self) -> bool {
        matches!(self, Self::E)
    }

    pub fn lidar_only(&self) -> bool {
        matches!(self, Self::F)
    }

    pub fn uses_camera(&self) -> bool {
        !self.lidar_only()
    }

    pub fn uses_lidar(&self) -> bool {
        !self.camera_only()
    }

    /// Number of input tensors the model consumes.
    pub fn input_arity(&self) -> usize {
        if self.twin_encoders() {
            2
        } else {
            1
        }
    }

    /// Channel count per input tensor, in input order.
    pub fn input_channels(&self) -> Vec<usize> {
        if self.combined_input() {
            vec![6]
        } else if self.twin_encoders() {
            vec![3, 3]
        } else {
            vec![3]
        }
    }

    /// Encoder branch names, in input order (camera before LiDAR).
    fn encoder_names(&self) -> Vec<&'static str> {
        match self {
            Self::A | Self::B => vec!["enc"],
            Self::C | Self::D => vec!["cam_enc", "lidar_enc"],
            Self::E => vec!["cam_enc"],
            Self::F => vec!["lidar_enc"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            "F" => Ok(Self::F),
            other => Err(Error::InvalidParameter(format!(
                "unknown model variant '{other}' (expected A-F)"
            ))),
        }
    }

    pub fn letter(&self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
            Self::E => 'E',
            Self::F => 'F',
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Spatial and channel widths of one model instantiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleProfile {
    pub input_h: usize,
    pub input_w: usize,
    pub encoder_depths: [usize; 4],
    pub dense_width: usize,
    pub convs_per_block: [usize; 4],
}

impl ScaleProfile {
    /// Benchmark-scale profile: 800x400 input, 16/32/64/128 encoder
    /// channels, two 1024-wide dense layers.
    pub fn full() -> Self {
        Self {
            input_h: 800,
            input_w: 400,
            encoder_depths: [16, 32, 64, 128],
            dense_width: 1024,
            convs_per_block: [2, 2, 3, 3],
        }
    }

    /// Reduced profile for CPU-only runs in minutes.
    pub fn desk() -> Self {
        Self {
            input_h: 160,
            input_w: 80,
            encoder_depths: [4, 8, 16, 32],
            dense_width: 64,
            convs_per_block: [2, 2, 2, 2],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::InvalidParameter(format!(
                "unknown scale profile '{other}' (expected desk or full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        if *self == Self::full() {
            "full"
        } else if *self == Self::desk() {
            "desk"
        } else {
            "custom"
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0
            || !self.input_h.is_multiple_of(16)
            || self.input_w == 0
            || !self.input_w.is_multiple_of(16)
        {
            return Err(Error::InvalidParameter(format!(
                "profile input {}x{} must be divisible by 16 (four 2x pools)",
                self.input_h, self.input_w
            )));
        }
        if self.encoder_depths.contains(&0)
            || self.convs_per_block.contains(&0)
            || self.dense_width == 0
        {
            return Err(Error::InvalidParameter(
                "profile widths and conv counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dims of the encoder output after four poolings.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.input_h / 16, self.input_w / 16)
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Name and output shape (H, W, C) of one layer, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub shape: [usize; 3],
}

// ---------------------------------------------------------------------------
// structural walk
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum ParamKind {
    Conv3x3,
    Dense,
    Tconv2x2,
}

#[derive(Clone)]
struct ParamSpec {
    name: String,
    kind: ParamKind,
    c_in: usize,
    c_out: usize,
}

impl ParamSpec {
    fn kernel_shape(&self) -> Vec<usize> {
        match self.kind {
            ParamKind::Conv3x3 => vec![3, 3, self.c_in, self.c_out],
            ParamKind::Dense => vec![self.c_in, self.c_out],
            ParamKind::Tconv2x2 => vec![2, 2, self.c_in, self.c_out],
        }
    }

    /// Fan-in used for He-uniform initialization. The 2x2-stride-2
    /// transposed convolution feeds each output from a single kernel tap,
    /// so its effective fan-in is the channel count alone.
    fn fan_in(&self) -> usize {
        match self.kind {
            ParamKind::Conv3x3 => 9 * self.c_in,
            ParamKind::Dense | ParamKind::Tconv2x2 => self.c_in,
        }
    }
}

trait Backend {
    type Stream: Clone;
    fn conv(&mut self, name: &str, x: &Self::Stream, c_out: usize) -> Result<Self::Stream>;
    fn pool(&mut self, name: &str, x: &Self::Stream) -> Result<Self::Stream>;
    fn tconv(&mut self, name: &str, x: &Self::Stream, c_out: usize) -> Result<Self::Stream>;
    /// Dense + relu, or dense + sigmoid for the head.
    fn dense(
        &mut self,
        name: &str,
        x: &Self::Stream,
        c_out: usize,
        head: bool,
    ) -> Result<Self::Stream>;
    fn dropout(&mut self, x: &Self::Stream) -> Result<Self::Stream>;
    fn concat(&mut self, name: &str, a: &Self::Stream, b: &Self::Stream) -> Result<Self::Stream>;
}

/// Drive a backend through the whole architecture. `inputs` holds one
/// stream per encoder, camera first.
fn walk<B: Backend>(
    variant: ModelVariant,
    profile: &ScaleProfile,
    inputs: &[B::Stream],
    backend: &mut B,
) -> Result<B::Stream> {
    let names = variant.encoder_names();
    let depths = profile.encoder_depths;
    let convs = profile.convs_per_block;

    let mut pooled = Vec::with_capacity(names.len());
    let mut taps: Vec<Vec<B::Stream>> = Vec::with_capacity(names.len());
    for (e, enc) in names.iter().enumerate() {
        let mut x = inputs[e].clone();
        let mut block_out = Vec::with_capacity(4);
        for b in 1..=4 {
            for j in 1..=convs[b - 1] {
                x = backend.conv(&format!("{enc}.b{b}.conv{j}"), &x, depths[b - 1])?;
            }
            block_out.push(x.clone());
            x = backend.pool(&format!("{enc}.b{b}.pool"), &x)?;
        }
        taps.push(block_out);
        pooled.push(x);
    }

    let mut x = pooled[0].clone();
    if pooled.len() == 2 {
        x = backend.concat("bottleneck.fuse", &x, &pooled[1])?;
    }
    x = backend.dense("bottleneck.dense1", &x, profile.dense_width, false)?;
    x = backend.dropout(&x)?;
    x = backend.dense("bottleneck.dense2", &x, profile.dense_width, false)?;
    x = backend.dropout(&x)?;
    // Bridge back down so the decoder starts at the deepest encoder width.
    x = backend.dense("bottleneck.bridge", &x, depths[3], false)?;

    let dec_depths = [depths[2], depths[1], depths[0], depths[0]];
    for s in 1..=4usize {
        x = backend.tconv(&format!("dec.s{s}.tconv"), &x, dec_depths[s - 1])?;
        if variant.skip_connections() && s <= 3 {
            let b = 5 - s;
            for (e, enc) in names.iter().enumerate() {
                x = backend.concat(&format!("dec.s{s}.skip({enc}.b{b})"), &x, &taps[e][b - 1])?;
            }
        }
        for j in 1..=convs[4 - s] {
            x = backend.conv(&format!("dec.s{s}.conv{j}"), &x, dec_depths[s - 1])?;
        }
    }

    backend.dense("head.dense", &x, 1, true)
}

/// Shape-only backend: computes layer shapes and parameter specs without
/// touching tensor data.
struct ShapeBackend {
    trace: Vec<LayerShape>,
    params: Vec<ParamSpec>,
}

impl ShapeBackend {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            params: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, shape: [usize; 3]) {
        self.trace.push(LayerShape {
            name: name.to_string(),
            shape,
        });
    }

    fn param(&mut self, name: &str, kind: ParamKind, c_in: usize, c_out: usize) {
        self.params.push(ParamSpec {
            name: name.to_string(),
            kind,
            c_in,
            c_out,
        });
    }
}

impl Backend for ShapeBackend {
    type Stream = [usize; 3];

    fn conv(&mut self, name: &str, x: &[usize; 3], c_out: usize) -> Result<[usize; 3]> {
        self.param(name, ParamKind::Conv3x3, x[2], c_out);
        let out = [x[0], x[1], c_out];
        self.record(name, out);
        Ok(out)
    }

    fn pool(&mut self, name: &str, x: &[usize; 3]) -> Result<[usize; 3]> {
        if !x[0].is_multiple_of(2) || !x[1].is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "{name}: cannot pool odd dims {}x{}",
                x[0], x[1]
            )));
        }
        let out = [x[0] / 2, x[1] / 2, x[2]];
        self.record(name, out);
        Ok(out)
    }

    fn tconv(&mut self, name: &str, x: &[usize; 3], c_out: usize) -> Result<[usize; 3]> {
        self.param(name, ParamKind::Tconv2x2, x[2], c_out);
        let out = [x[0] * 2, x[1] * 2, c_out];
        self.record(name, out);
        Ok(out)
    }

    fn dense(&mut self, name: &str, x: &[usize; 3], c_out: usize, _head: bool) -> Result<[usize; 3]> {
        self.param(name, ParamKind::Dense, x[2], c_out);
        let out = [x[0], x[1], c_out];
        self.record(name, out);
        Ok(out)
    }

    fn dropout(&mut self, x: &[usize; 3]) -> Result<[usize; 3]> {
        Ok(*x)
    }

    fn concat(&mut self, name: &str, a: &[usize; 3], b: &[usize; 3]) -> Result<[usize; 3]> {
        if a[0] != b[0] || a[1] != b[1] {
            return Err(Error::ShapeMismatch(format!(
                "{name}: cannot concat {a:?} with {b:?}"
            )));
        }
        let out = [a[0], a[1], a[2] + b[2]];
        self.record(name, out);
        Ok(out)
    }
}

/// Tensor-building backend over an autodiff graph.
struct GraphBackend<'a, 'r> {
    graph: &'a mut Graph,
    params: std::collections::HashMap<String, NodeId>,
    mode: Option<(f64, &'r mut ChaCha8Rng)>,
    trace: Vec<LayerShape>,
}

impl GraphBackend<'_, '_> {
    fn param_node(&self, name: &str) -> Result<NodeId> {
        self.params.get(name).copied().ok_or_else(|| {
            Error::Incompatible(format!("model is missing parameter tensor '{name}'"))
        })
    }

    fn record(&mut self, name: &str, id: NodeId) {
        let shape = self.graph.value(id).shape();
        self.trace.push(LayerShape {
            name: name.to_string(),
            shape: [shape[1], shape[2], shape[3]],
        });
    }
}

impl Backend for GraphBackend<'_, '_> {
    type Stream = NodeId;

    fn conv(&mut self, name: &str, x: &NodeId, _c_out: usize) -> Result<NodeId> {
        let kernel = self.param_node(&format!("{name}.kernel"))?;
        let bias = self.param_node(&format!("{name}.bias"))?;
        let y = self.graph.conv2d(*x, kernel, bias)?;
        let y = self.graph.relu(y);
        self.record(name, y);
        Ok(y)
    }

    fn pool(&mut self, name: &str, x: &NodeId) -> Result<NodeId> {
        let y = self.graph.maxpool2(*x)?;
        self.record(name, y);
        Ok(y)
    }

    fn tconv(&mut self, name: &str, x: &NodeId, _c_out: usize) -> Result<NodeId> {
        let kernel = self.param_node(&format!("{name}.kernel"))?;
        let bias = self.param_node(&format!("{name}.bias"))?;
        let y = self.graph.conv2d_transpose(*x, kernel, bias)?;
        let y = self.graph.relu(y);
        self.record(name, y);
        Ok(y)
    }

    fn dense(&mut self, name: &str, x: &NodeId, _c_out: usize, head: bool) -> Result<NodeId> {
        let weight = self.param_node(&format!("{name}.weight"))?;
        let bias = self.param_node(&format!("{name}.bias"))?;
        let y = self.graph.dense_channelwise(*x, weight, bias)?;
        let y = if head {
            self.graph.sigmoid(y)
        } else {
            self.graph.relu(y)
        };
        self.record(name, y);
        Ok(y)
    }

    fn dropout(&mut self, x: &NodeId) -> Result<NodeId> {
        match &mut self.mode {
            Some((rate, rng)) => self.graph.dropout(*x, *rate, rng, true),
            None => Ok(*x),
        }
    }

    fn concat(&mut self, name: &str, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = self.graph.concat_channels(*a, *b)?;
        self.record(name, y);
        Ok(y)
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// Execution mode of one forward pass.
pub enum ForwardMode<'r> {
    /// Parameters enter the graph as constants; dropout is the identity.
    Inference,
    /// Parameters are differentiable and dropout is active.
    Train {
        dropout: f64,
        rng: &'r mut ChaCha8Rng,
    },
}

/// A built graph plus bookkeeping to read gradients back out.
pub struct ForwardPass {
    pub graph: Graph,
    pub output: NodeId,
    /// Node ids aligned with [`Model::params`].
    pub param_nodes: Vec<NodeId>,
    /// Layer names and output shapes, execution order.
    pub trace: Vec<LayerShape>,
}

impl ForwardPass {
    /// Gradient per parameter after `graph.backward`, zeros where no
    /// contribution reached the parameter.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.param_nodes
            .iter()
            .map(|&id| match self.graph.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.graph.value(id).numel()],
            })
            .collect()
    }
}

/// One architecture variant with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    variant: ModelVariant,
    profile: ScaleProfile,
    params: Vec<Param>,
}

fn param_specs(variant: ModelVariant, profile: &ScaleProfile) -> Result<Vec<ParamSpec>> {
    let mut backend = ShapeBackend::new();
    let inputs: Vec<[usize; 3]> = variant
        .input_channels()
        .into_iter()
        .map(|c| [profile.input_h, profile.input_w, c])
        .collect();
    walk(variant, profile, &inputs, &mut backend)?;
    Ok(backend.params)
}

/// Construct a variant with He-uniform weights and zero biases, drawn
/// deterministically from the seed.
pub fn build_model(variant: ModelVariant, profile: &ScaleProfile, seed: u64) -> Result<Model> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for spec in param_specs(variant, profile)? {
        let shape = spec.kernel_shape();
        let limit = (6.0 / spec.fan_in() as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-limit..limit)).collect();
        params.push(Param {
            name: format!(
                "{}.{}",
                spec.name,
                if spec.kind == ParamKind::Dense { "weight" } else { "kernel" }
            ),
            value: Tensor::new(shape, data)?,
        });
        params.push(Param {
            name: format!("{}.bias", spec.name),
            value: Tensor::zeros(vec![spec.c_out]),
        });
    }
    Ok(Model {
        variant,
        profile: *profile,
        params,
    })
}

impl Model {
    /// Rebuild a model from stored parts, validating parameter names and
    /// shapes against the architecture.
    pub fn from_parts(
        variant: ModelVariant,
        profile: ScaleProfile,
        params: Vec<Param>,
    ) -> Result<Self> {
        profile.validate()?;
        let reference = build_model(variant, &profile, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (expected, got) in reference.params.iter().zip(&params) {
            if expected.name != got.name || expected.value.shape() != got.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    got.name,
                    got.value.shape(),
                    expected.name,
                    expected.value.shape()
                )));
            }
        }
        Ok(Self {
            variant,
            profile,
            params,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn profile(&self) -> &ScaleProfile {
        &self.profile
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total number of parameter elements.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Layer names and output shapes in execution order, computed without
    /// running any tensor work.
    pub fn describe_shapes(&self) -> Vec<LayerShape> {
        let mut backend = ShapeBackend::new();
        let inputs: Vec<[usize; 3]> = self
            .variant
            .input_channels()
            .into_iter()
            .map(|c| [self.profile.input_h, self.profile.input_w, c])
            .collect();
        walk(self.variant, &self.profile, &inputs, &mut backend)
            .expect("a built model always has a consistent plan");
        backend.trace
    }

    /// Number of encoder-to-decoder skip edges per encoder branch.
    pub fn skip_edges_per_encoder(&self) -> usize {
        self.describe_shapes()
            .iter()
            .filter(|l| l.name.contains(".skip("))
            .count()
            / self.variant.encoder_names().len()
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        let channels = self.variant.input_channels();
        if inputs.len() != channels.len() {
            return Err(Error::ShapeMismatch(format!(
                "variant {} expects {} input tensor(s), got {}",
                self.variant,
                channels.len(),
                inputs.len()
            )));
        }
        let mut batch = 0;
        for (i, (input, &c)) in inputs.iter().zip(&channels).enumerate() {
            let (n, h, w, ic) = input.dims4()?;
            if h != self.profile.input_h || w != self.profile.input_w || ic != c {
                return Err(Error::ShapeMismatch(format!(
                    "input {i} has shape {:?}, expected [N, {}, {}, {c}]",
                    input.shape(),
                    self.profile.input_h,
                    self.profile.input_w
                )));
            }
            if i == 0 {
                batch = n;
            } else if n != batch {
                return Err(Error::ShapeMismatch(format!(
                    "input {i} batch {n} differs from first input batch {batch}"
                )));
            }
        }
        Ok(batch)
    }

    /// Run the model on a batch of inputs scaled to [0, 1], producing a
    /// confidence map of shape N x H x W x 1 with values strictly in (0, 1).
    pub fn forward(&self, inputs: &[Tensor], mode: ForwardMode<'_>) -> Result<ForwardPass> {
        self.check_inputs(inputs)?;
        let mut graph = Graph::new();
        let train = matches!(mode, ForwardMode::Train { .. });
        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut map = std::collections::HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let id = if train {
                graph.variable(p.value.clone())
            } else {
                graph.constant(p.value.clone())
            };
            param_nodes.push(id);
            map.insert(p.name.clone(), id);
        }
        let input_nodes: Vec<NodeId> = inputs
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect();

        let mode_state = match mode {
            ForwardMode::Inference => None,
            ForwardMode::Train { dropout, rng } => Some((dropout, rng)),
        };
        let mut backend = GraphBackend {
            graph: &mut graph,
            params: map,
            mode: mode_state,
            trace: Vec::new(),
        };
        let output = walk(self.variant, &self.profile, &input_nodes, &mut backend)?;
        let trace = std::mem::take(&mut backend.trace);
        Ok(ForwardPass {
            graph,
            output,
            param_nodes,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScaleProfile {
        ScaleProfile {
            input_h: 32,
            input_w: 16,
            encoder_depths: [2, 2, 3, 3],
            dense_width: 5,
            convs_per_block: [1, 1, 1, 1],
        }
    }

    fn zeros_inputs(variant: ModelVariant, profile: &ScaleProfile, n: usize) -> Vec<Tensor> {
        variant
            .input_channels()
            .into_iter()
            .map(|c| Tensor::zeros(vec![n, profile.input_h, profile.input_w, c]))
            .collect()
    }

    fn random_inputs(
        variant: ModelVariant,
        profile: &ScaleProfile,
        n: usize,
        seed: u64,
    ) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        variant
            .input_channels()
            .into_iter()
            .map(|c| {
                let shape = vec![n, profile.input_h, profile.input_w, c];
                let numel = shape.iter().product::<usize>();
                let data = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor::new(shape, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn variant_flags_match_the_ablation_table() {
        use ModelVariant::*;
        for (v, camera, lidar, combined, skips) in [
            (A, true, true, true, true),
            (B, true, true, true, false),
            (C, true, true, false, true),
            (D, true, true, false, false),
            (E, true, false, false, true),
            (F, false, true, false, true),
        ] {
            assert_eq!(v.uses_camera(), camera, "variant {v}");
            assert_eq!(v.uses_lidar(), lidar, "variant {v}");
            assert_eq!(v.combined_input(), combined, "variant {v}");
            assert_eq!(v.skip_connections(), skips, "variant {v}");
        }
        assert_eq!(ModelVariant::E.input_channels(), vec![3]);
        assert_eq!(ModelVariant::C.input_channels(), vec![3, 3]);
        assert_eq!(ModelVariant::A.input_channels(), vec![6]);
    }

    #[test]
    fn full_profile_model_a_hits_the_published_shapes() {
        let model = build_model(ModelVariant::A, &ScaleProfile::full(), 0).unwrap();
        let shapes = model.describe_shapes();
        let find = |name: &str| {
            shapes
                .iter()
                .find(|l| l.name == name)
                .unwrap_or_else(|| panic!("missing layer {name}"))
                .shape
        };
        assert_eq!(find("enc.b1.pool"), [400, 200, 16]);
        assert_eq!(find("enc.b2.pool"), [200, 100, 32]);
        assert_eq!(find("enc.b3.pool"), [100, 50, 64]);
        assert_eq!(find("enc.b4.pool"), [50, 25, 128]);
        assert_eq!(find("bottleneck.dense1"), [50, 25, 1024]);
        assert_eq!(find("bottleneck.dense2"), [50, 25, 1024]);
        assert_eq!(find("bottleneck.bridge"), [50, 25, 128]);
        let last = shapes.last().unwrap();
        assert_eq!(last.name, "head.dense");
        assert_eq!(last.shape, [800, 400, 1]);
    }

    #[test]
    fn twin_full_profile_fuses_at_256_channels() {
        let model = build_model(ModelVariant::C, &ScaleProfile::full(), 0).unwrap();
        let shapes = model.describe_shapes();
        let fuse = shapes.iter().find(|l| l.name == "bottleneck.fuse").unwrap();
        assert_eq!(fuse.shape, [50, 25, 256]);
    }

    #[test]
    fn describe_shapes_matches_actual_forward_trace() {
        for variant in ModelVariant::ALL {
            let model = build_model(variant, &tiny(), 7).unwrap();
            let inputs = zeros_inputs(variant, &tiny(), 1);
            let pass = model.forward(&inputs, ForwardMode::Inference).unwrap();
            assert_eq!(pass.trace, model.describe_shapes(), "variant {variant}");
        }
    }

    #[test]
    fn zero_input_zero_bias_model_outputs_exactly_half() {
        for variant in ModelVariant::ALL {
            let model = build_model(variant, &tiny(), 3).unwrap();
            let inputs = zeros_inputs(variant, &tiny(), 1);
            let pass = model.forward(&inputs, ForwardMode::Inference).unwrap();
            assert!(
                pass.graph.value(pass.output).data().iter().all(|&v| v == 0.5),
                "variant {variant}"
            );
        }
    }

    #[test]
    fn output_is_strictly_inside_unit_interval() {
        let model = build_model(ModelVariant::A, &tiny(), 11).unwrap();
        let inputs = random_inputs(ModelVariant::A, &tiny(), 2, 4);
        let pass = model.forward(&inputs, ForwardMode::Inference).unwrap();
        let out = pass.graph.value(pass.output);
        assert_eq!(out.shape(), &[2, 32, 16, 1]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_is_bit_deterministic_for_same_seed() {
        let run = || {
            let model = build_model(ModelVariant::C, &tiny(), 99).unwrap();
            let inputs = random_inputs(ModelVariant::C, &tiny(), 1, 5);
            let pass = model.forward(&inputs, ForwardMode::Inference).unwrap();
            pass.graph
                .value(pass.output)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn skip_edge_counts_per_variant() {
        for variant in ModelVariant::ALL {
            let model = build_model(variant, &tiny(), 0).unwrap();
            let expected = if variant.skip_connections() { 3 } else { 0 };
            assert_eq!(model.skip_edges_per_encoder(), expected, "variant {variant}");
            let total_edges = model
                .describe_shapes()
                .iter()
                .filter(|l| l.name.contains(".skip("))
                .count();
            assert_eq!(
                total_edges,
                expected * variant.encoder_names().len(),
                "variant {variant}"
            );
        }
    }

    #[test]
    fn twin_encoders_have_disjoint_parameters() {
        let model = build_model(ModelVariant::D, &tiny(), 1).unwrap();
        let cam: Vec<&str> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("cam_enc."))
            .map(|p| p.name.as_str())
            .collect();
        let lidar: Vec<&str> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("lidar_enc."))
            .map(|p| p.name.as_str())
            .collect();
        assert!(!cam.is_empty() && !lidar.is_empty());
        assert!(cam.iter().all(|n| !lidar.contains(n)));

        // Updating one encoder leaves the other bit-unchanged.
        let mut mutated = model.clone();
        for p in mutated.params_mut() {
            if p.name.starts_with("cam_enc.") {
                for v in p.value.data_mut() {
                    *v += 1.0;
                }
            }
        }
        for (before, after) in model.params().iter().zip(mutated.params()) {
            if before.name.starts_with("lidar_enc.") {
                assert_eq!(before.value, after.value, "{} changed", before.name);
            }
        }
    }

    #[test]
    fn parameter_count_orderings_and_seed_independence() {
        let profile = tiny();
        let count = |v: ModelVariant, seed: u64| {
            build_model(v, &profile, seed).unwrap().parameter_count()
        };
        // The twin model strictly contains an extra encoder over camera-only.
        assert!(count(ModelVariant::C, 0) > count(ModelVariant::E, 0));
        // Skip concats widen the decoder convs.
        assert!(count(ModelVariant::C, 0) > count(ModelVariant::D, 0));
        assert_eq!(count(ModelVariant::A, 0), count(ModelVariant::A, 12345));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // Desk scale: at toy widths a branch can die outright and starve
        // whole tensors of gradient.
        let profile = ScaleProfile::desk();
        for variant in ModelVariant::ALL {
            let model = build_model(variant, &profile, 2).unwrap();
            let inputs = random_inputs(variant, &profile, 1, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut pass = model
                .forward(&inputs, ForwardMode::Train { dropout: 0.0, rng: &mut rng })
                .unwrap();
            let n = pass.graph.value(pass.output).numel();
            let target = Tensor::new(
                pass.graph.value(pass.output).shape().to_vec(),
                (0..n).map(|i| f64::from(i as u32 % 2)).collect(),
            )
            .unwrap();
            let loss = pass
                .graph
                .bce_loss(pass.output, &target, &vec![true; n])
                .unwrap();
            pass.graph.backward(loss).unwrap();
            for (param, grad) in model.params().iter().zip(pass.param_grads()) {
                assert!(
                    grad.iter().any(|&g| g != 0.0),
                    "variant {variant}: gradient of {} is identically zero",
                    param.name
                );
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_arity_and_channels() {
        let model = build_model(ModelVariant::C, &tiny(), 0).unwrap();
        let one = zeros_inputs(ModelVariant::E, &tiny(), 1);
        assert!(model.forward(&one, ForwardMode::Inference).is_err());

        let model_a = build_model(ModelVariant::A, &tiny(), 0).unwrap();
        let wrong_c = vec![Tensor::zeros(vec![1, 32, 16, 3])];
        assert!(model_a.forward(&wrong_c, ForwardMode::Inference).is_err());

        let mut two = zeros_inputs(ModelVariant::C, &tiny(), 1);
        two[1] = Tensor::zeros(vec![2, 32, 16, 3]);
        assert!(model.forward(&two, ForwardMode::Inference).is_err());
    }

    #[test]
    fn profile_validation() {
        assert!(ScaleProfile::full().validate().is_ok());
        assert!(ScaleProfile::desk().validate().is_ok());
        let bad = ScaleProfile {
            input_h: 100,
            ..ScaleProfile::desk()
        };
        assert!(bad.validate().is_err());
        assert!(build_model(ModelVariant::A, &bad, 0).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(ModelVariant::parse("a").unwrap(), ModelVariant::A);
        assert_eq!(ModelVariant::parse(" F ").unwrap(), ModelVariant::F);
        assert!(ModelVariant::parse("G").is_err());
    }
}
