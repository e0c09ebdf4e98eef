//! U-Net multi-task cascade (UMC) construction.
//!
//! A UMC is one shared encoder feeding `N` decoding pathways. Encoder depth
//! `d` (1 = shallowest) runs a double conv to `filters[d-1]` and a 2×2 max
//! pool; the bottleneck is a double conv to the last ladder entry. Every
//! pathway starts from the bottleneck and runs one decoder block per depth,
//! deepest first:
//!
//! ```text
//! up   = upsample(previous level)             bilinear, or 2×2 transposed conv to filters[d-1]
//! skip = route_skip_inputs(p, d)              encoder skip fused with earlier pathways' skips
//! out  = double_conv(concat(up, skip))        -> filters[d-1] channels
//! ```
//!
//! The block output is also that pathway's outgoing skip at depth `d`, which
//! later pathways consume according to the connectivity mode. A 1×1 head maps
//! the shallowest block to the pathway's output channels. With one pathway
//! and transposed upsampling the result is a standard U-Net.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{
    Add, ConcatChannels, Conv2d, ConvParams, ConvShape, MaxPool2, Mse, Relu, SoftmaxCrossEntropy, TransposedConv2x2,
    UpsampleBilinear2, WeightedSum,
};
use crate::rng::{stream, Rng};
use crate::tensor::Scalar;

pub const INPUT_NAME: &str = "image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    /// Decoders read only encoder skips.
    #[serde(alias = "shared")]
    SharedEncoder,
    /// Encoder skip summed with the previous pathway's skip.
    Causal,
    /// Encoder skip concatenated with every previous pathway's skip.
    Dense,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::SharedEncoder, Connectivity::Causal, Connectivity::Dense];

    pub fn as_str(&self) -> &'static str {
        match self {
            Connectivity::SharedEncoder => "shared-encoder",
            Connectivity::Causal => "causal",
            Connectivity::Dense => "dense",
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-encoder" | "shared" => Ok(Connectivity::SharedEncoder),
            "causal" => Ok(Connectivity::Causal),
            "dense" => Ok(Connectivity::Dense),
            other => Err(Error::invalid(format!("unknown connectivity '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    Bilinear,
    #[serde(alias = "transposed")]
    Transposed2x2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Linear head trained with MSE.
    Regression,
    /// Logit head trained with softmax cross-entropy.
    Classification,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwaySpec {
    pub name: String,
    pub out_channels: usize,
    pub task: Task,
    #[serde(default = "unit_weight")]
    pub loss_weight: f64,
}

impl PathwaySpec {
    pub fn new(name: &str, out_channels: usize, task: Task) -> Self {
        Self {
            name: name.to_string(),
            out_channels,
            task,
            loss_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UmcConfig {
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub connectivity: Connectivity,
    pub upsample_mode: UpsampleMode,
    pub pathways: Vec<PathwaySpec>,
}

pub const STANDARD_FILTERS: [usize; 5] = [32, 64, 128, 256, 512];
pub const TINY_FILTERS: [usize; 5] = [4, 8, 16, 32, 64];

impl UmcConfig {
    /// Single-pathway U-Net with transposed-conv upsampling.
    pub fn unet(in_channels: usize, filters: &[usize], head: PathwaySpec) -> Self {
        Self {
            in_channels,
            filters: filters.to_vec(),
            connectivity: Connectivity::SharedEncoder,
            upsample_mode: UpsampleMode::Transposed2x2,
            pathways: vec![head],
        }
    }

    /// Bilinear UMC over the given pathways.
    pub fn umc(in_channels: usize, filters: &[usize], connectivity: Connectivity, pathways: Vec<PathwaySpec>) -> Self {
        Self {
            in_channels,
            filters: filters.to_vec(),
            connectivity,
            upsample_mode: UpsampleMode::Bilinear,
            pathways,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Number of pooling stages (ladder length − 1).
    pub fn depth(&self) -> usize {
        self.filters.len() - 1
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn pathway(&self, name: &str) -> Option<&PathwaySpec> {
        self.pathways.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.filters.len() < 2 {
            return Err(Error::invalid("filters needs at least two entries (one encoder level and a bottleneck)"));
        }
        if self.filters.contains(&0) {
            return Err(Error::invalid("filter counts must be positive"));
        }
        if self.pathways.is_empty() {
            return Err(Error::invalid("at least one pathway is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.pathways {
            if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::invalid(format!(
                    "pathway name '{}' must be non-empty [A-Za-z0-9_-]",
                    p.name
                )));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(Error::invalid(format!("duplicate pathway name '{}'", p.name)));
            }
            if p.out_channels == 0 {
                return Err(Error::invalid(format!("pathway '{}' has zero output channels", p.name)));
            }
            if !(p.loss_weight >= 0.0 && p.loss_weight.is_finite()) {
                return Err(Error::invalid(format!("pathway '{}' loss weight must be finite and >= 0", p.name)));
            }
        }
        Ok(())
    }
}

/// Where a skip tensor comes from. Pathways and depths are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipSource {
    Encoder { depth: usize },
    Decoder { pathway: usize, depth: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Exactly one source, used as-is.
    Single,
    /// Elementwise sum; channel count unchanged.
    Sum,
    /// Channel concatenation in source order.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipRoute {
    pub fusion: Fusion,
    pub sources: Vec<SkipSource>,
}

impl SkipRoute {
    /// Channel count of the fused skip, given the ladder.
    pub fn channels(&self, filters: &[usize]) -> usize {
        let per = |s: &SkipSource| match *s {
            SkipSource::Encoder { depth } | SkipSource::Decoder { depth, .. } => filters[depth - 1],
        };
        match self.fusion {
            Fusion::Single | Fusion::Sum => per(&self.sources[0]),
            Fusion::Concat => self.sources.iter().map(per).sum(),
        }
    }
}

/// Skip inputs for decoder block (`pathway`, `depth`), both 1-based.
pub fn route_skip_inputs(pathway: usize, depth: usize, connectivity: Connectivity) -> SkipRoute {
    assert!(pathway >= 1 && depth >= 1, "pathway and depth are 1-based");
    let encoder = SkipSource::Encoder { depth };
    match connectivity {
        _ if pathway == 1 => SkipRoute {
            fusion: Fusion::Single,
            sources: vec![encoder],
        },
        Connectivity::SharedEncoder => SkipRoute {
            fusion: Fusion::Single,
            sources: vec![encoder],
        },
        Connectivity::Causal => SkipRoute {
            fusion: Fusion::Sum,
            sources: vec![
                encoder,
                SkipSource::Decoder {
                    pathway: pathway - 1,
                    depth,
                },
            ],
        },
        Connectivity::Dense => SkipRoute {
            fusion: Fusion::Concat,
            sources: std::iter::once(encoder)
                .chain((1..pathway).map(|p| SkipSource::Decoder { pathway: p, depth }))
                .collect(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Transposed2x2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: ConvShape,
}

impl LayerSpec {
    pub fn params(&self) -> usize {
        self.shape.param_count()
    }

    pub fn weight_shape_str(&self) -> String {
        let s = self.shape.weight_shape();
        format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
    }
}

/// Every parameterised layer in build order, from channel arithmetic alone.
pub fn layer_plan(config: &UmcConfig) -> Result<Vec<LayerSpec>> {
    config.validate()?;
    let f = &config.filters;
    let depth = config.depth();
    let mut layers = Vec::new();
    let mut push = |name: String, kind: LayerKind, cin: usize, cout: usize| -> Result<()> {
        let k = match kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            LayerKind::Transposed2x2 => 2,
        };
        layers.push(LayerSpec {
            name,
            kind,
            shape: ConvShape::new(cin, cout, k)?,
        });
        Ok(())
    };

    let mut cin = config.in_channels;
    for d in 1..=depth {
        push(format!("enc{d}.conv1"), LayerKind::Conv3x3, cin, f[d - 1])?;
        push(format!("enc{d}.conv2"), LayerKind::Conv3x3, f[d - 1], f[d - 1])?;
        cin = f[d - 1];
    }
    push("bottleneck.conv1".into(), LayerKind::Conv3x3, cin, f[depth])?;
    push("bottleneck.conv2".into(), LayerKind::Conv3x3, f[depth], f[depth])?;

    for (pi, spec) in config.pathways.iter().enumerate() {
        let p = pi + 1;
        for d in (1..=depth).rev() {
            let prev = f[d];
            let up = match config.upsample_mode {
                UpsampleMode::Bilinear => prev,
                UpsampleMode::Transposed2x2 => {
                    push(format!("{}.dec{d}.up", spec.name), LayerKind::Transposed2x2, prev, f[d - 1])?;
                    f[d - 1]
                }
            };
            let skip = route_skip_inputs(p, d, config.connectivity).channels(f);
            push(format!("{}.dec{d}.conv1", spec.name), LayerKind::Conv3x3, up + skip, f[d - 1])?;
            push(format!("{}.dec{d}.conv2", spec.name), LayerKind::Conv3x3, f[d - 1], f[d - 1])?;
        }
        push(format!("{}.head", spec.name), LayerKind::Conv1x1, f[0], spec.out_channels)?;
    }
    Ok(layers)
}

/// Closed-form trainable parameter count.
pub fn count_params(config: &UmcConfig) -> Result<usize> {
    Ok(layer_plan(config)?.iter().map(LayerSpec::params).sum())
}

/// `n` in millions, three decimals, rounded half up: 7_760_691 → "7.761M".
pub fn format_millions(n: usize) -> String {
    let thousands = (n + 500) / 1000;
    format!("{}.{:03}M", thousands / 1000, thousands % 1000)
}

/// Aligned text table of the layer plan with a total line.
pub fn breakdown_text(config: &UmcConfig) -> Result<String> {
    let layers = layer_plan(config)?;
    let name_w = layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(4);
    let shape_w = layers.iter().map(|l| l.weight_shape_str().len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    writeln!(out, "{:>5}  {:<name_w$}  {:<13}  {:<shape_w$}  {:>10}", "layer", "name", "kind", "shape", "params").unwrap();
    for (i, l) in layers.iter().enumerate() {
        let kind = match l.kind {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Transposed2x2 => "transposed2x2",
        };
        writeln!(
            out,
            "{:>5}  {:<name_w$}  {:<13}  {:<shape_w$}  {:>10}",
            i,
            l.name,
            kind,
            l.weight_shape_str(),
            l.params()
        )
        .unwrap();
    }
    let total: usize = layers.iter().map(LayerSpec::params).sum();
    writeln!(out, "total: {total} ({})", format_millions(total)).unwrap();
    Ok(out)
}

/// CSV `layer,name,shape,params`, one row per layer.
pub fn breakdown_csv(config: &UmcConfig) -> Result<String> {
    let mut out = String::from("layer,name,shape,params\n");
    for (i, l) in layer_plan(config)?.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", l.name, l.weight_shape_str(), l.params()).unwrap();
    }
    Ok(out)
}

/// Loss wiring for one pathway.
#[derive(Clone, Debug)]
pub struct PathwayNodes {
    pub name: String,
    pub task: Task,
    pub output: NodeId,
    pub target_input: String,
    pub loss: NodeId,
}

/// A built UMC: the graph plus the ids needed to drive it.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Scalar = f32> {
    pub config: UmcConfig,
    pub graph: Graph<T>,
    pub input: NodeId,
    pub pathways: Vec<PathwayNodes>,
    /// Joint loss `Σ wᵢ·Lᵢ`.
    pub loss: NodeId,
    /// Encoder skip per depth (index `d - 1`).
    pub encoder_skips: Vec<NodeId>,
    /// Outgoing UMC skip of each decoder block, keyed by 1-based (pathway, depth).
    pub decoder_skips: BTreeMap<(usize, usize), NodeId>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn output_ids(&self) -> Vec<NodeId> {
        self.pathways.iter().map(|p| p.output).collect()
    }

    pub fn pathway(&self, name: &str) -> Option<&PathwayNodes> {
        self.pathways.iter().find(|p| p.name == name)
    }

    pub fn target_name(pathway: &str) -> String {
        format!("target.{pathway}")
    }
}

struct Builder<'a, T: Scalar> {
    graph: Graph<T>,
    channels: Vec<usize>,
    rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn node(&mut self, id: NodeId, channels: usize) -> NodeId {
        if self.channels.len() <= id {
            self.channels.resize(id + 1, 0);
        }
        self.channels[id] = channels;
        id
    }

    fn layer_params(&mut self, name: &str, shape: ConvShape) -> Result<(NodeId, NodeId)> {
        let p: ConvParams<T> = ConvParams::init(shape, self.rng);
        let w = self.graph.param(&format!("{name}.weight"), p.weight)?;
        let b = self.graph.param(&format!("{name}.bias"), p.bias)?;
        Ok((w, b))
    }

    fn conv(&mut self, name: &str, x: NodeId, cout: usize, kernel: usize, relu: bool) -> Result<NodeId> {
        let cin = self.channels[x];
        let (w, b) = self.layer_params(name, ConvShape::new(cin, cout, kernel)?)?;
        let mut y = self.graph.apply(Conv2d { kernel }, &[x, w, b])?;
        self.graph.label(y, name);
        if relu {
            y = self.graph.apply(Relu, &[y])?;
            self.graph.label(y, format!("{name}.relu"));
        }
        Ok(self.node(y, cout))
    }

    fn double_conv(&mut self, name: &str, x: NodeId, cout: usize) -> Result<NodeId> {
        let h = self.conv(&format!("{name}.conv1"), x, cout, 3, true)?;
        self.conv(&format!("{name}.conv2"), h, cout, 3, true)
    }
}

/// Build the UMC graph with Kaiming-initialised parameters drawn from the
/// `INIT` sub-stream of `seed`.
pub fn build<T: Scalar>(config: &UmcConfig, seed: u64) -> Result<ModelGraph<T>> {
    config.validate()?;
    let f = &config.filters;
    let depth = config.depth();
    let mut rng = Rng::derived(seed, stream::INIT);
    let mut b = Builder {
        graph: Graph::new(),
        channels: Vec::new(),
        rng: &mut rng,
    };

    let image = b.graph.input(INPUT_NAME, vec![None, Some(config.in_channels), None, None], false)?;
    b.node(image, config.in_channels);

    let mut x = image;
    let mut encoder_skips = Vec::with_capacity(depth);
    for d in 1..=depth {
        let s = b.double_conv(&format!("enc{d}"), x, f[d - 1])?;
        encoder_skips.push(s);
        let pooled = b.graph.apply(MaxPool2, &[s])?;
        b.graph.label(pooled, format!("enc{d}.pool"));
        x = b.node(pooled, f[d - 1]);
    }
    let bottleneck = b.double_conv("bottleneck", x, f[depth])?;

    let mut decoder_skips = BTreeMap::new();
    let mut heads = Vec::with_capacity(config.pathways.len());
    for (pi, spec) in config.pathways.iter().enumerate() {
        let p = pi + 1;
        let mut level = bottleneck;
        for d in (1..=depth).rev() {
            let block = format!("{}.dec{d}", spec.name);
            let up = match config.upsample_mode {
                UpsampleMode::Bilinear => {
                    let u = b.graph.apply(UpsampleBilinear2, &[level])?;
                    let c = b.channels[level];
                    b.node(u, c)
                }
                UpsampleMode::Transposed2x2 => {
                    let name = format!("{block}.up");
                    let (w, bias) = b.layer_params(&name, ConvShape::new(b.channels[level], f[d - 1], 2)?)?;
                    let u = b.graph.apply(TransposedConv2x2, &[level, w, bias])?;
                    b.node(u, f[d - 1])
                }
            };
            b.graph.label(up, format!("{block}.up"));

            let route = route_skip_inputs(p, d, config.connectivity);
            let skip_ids: Vec<NodeId> = route
                .sources
                .iter()
                .map(|s| match *s {
                    SkipSource::Encoder { depth } => encoder_skips[depth - 1],
                    SkipSource::Decoder { pathway, depth } => decoder_skips[&(pathway, depth)],
                })
                .collect();
            let mut parts = vec![up];
            match route.fusion {
                Fusion::Single => parts.push(skip_ids[0]),
                Fusion::Concat => parts.extend(&skip_ids),
                Fusion::Sum => {
                    let s = b.graph.apply(Add, &skip_ids)?;
                    b.graph.label(s, format!("{block}.skip_sum"));
                    let c = b.channels[skip_ids[0]];
                    parts.push(b.node(s, c));
                }
            }
            let cat = b.graph.apply(ConcatChannels, &parts)?;
            b.graph.label(cat, format!("{block}.concat"));
            let c: usize = parts.iter().map(|&id| b.channels[id]).sum();
            b.node(cat, c);
            level = b.double_conv(&block, cat, f[d - 1])?;
            decoder_skips.insert((p, d), level);
        }
        let head = b.conv(&format!("{}.head", spec.name), level, spec.out_channels, 1, false)?;
        b.graph.mark_output(&spec.name, head);
        heads.push(head);
    }

    let mut pathways = Vec::with_capacity(heads.len());
    let mut losses = Vec::with_capacity(heads.len());
    for (spec, &head) in config.pathways.iter().zip(&heads) {
        let target_input = ModelGraph::<T>::target_name(&spec.name);
        let loss = match spec.task {
            Task::Regression => {
                let t = b
                    .graph
                    .input(&target_input, vec![None, Some(spec.out_channels), None, None], false)?;
                b.graph.apply(Mse, &[head, t])?
            }
            Task::Classification => {
                let t = b.graph.input(&target_input, vec![None, None, None], false)?;
                b.graph.apply(SoftmaxCrossEntropy::default(), &[head, t])?
            }
        };
        b.graph.label(loss, format!("{}.loss", spec.name));
        losses.push(loss);
        pathways.push(PathwayNodes {
            name: spec.name.clone(),
            task: spec.task,
            output: head,
            target_input,
            loss,
        });
    }
    let weights = config.pathways.iter().map(|p| p.loss_weight).collect();
    let loss = b.graph.apply(WeightedSum { weights }, &losses)?;
    b.graph.label(loss, "joint_loss");

    Ok(ModelGraph {
        config: config.clone(),
        graph: b.graph,
        input: image,
        pathways,
        loss,
        encoder_skips,
        decoder_skips,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub node: NodeId,
    pub label: String,
    pub kind: &'static str,
    pub shape: Vec<usize>,
}

/// Validate an input shape `[B, C, H, W]` against `config` and list the shape
/// of every model node (loss nodes excluded).
pub fn shape_check(config: &UmcConfig, input_shape: &[usize]) -> Result<Vec<ShapeRow>> {
    let [b, c, h, w] = input_shape[..] else {
        return Err(Error::shape(format!("input shape must be [B, C, H, W], got {input_shape:?}")));
    };
    config.validate()?;
    if c != config.in_channels {
        return Err(Error::shape(format!("C={c} but the model expects {} input channels", config.in_channels)));
    }
    let m = config.spatial_multiple();
    for (dim, v) in [("H", h), ("W", w)] {
        if v == 0 || v % m != 0 {
            return Err(Error::shape(format!("{dim}={v} not divisible by {m}")));
        }
    }
    if b == 0 {
        return Err(Error::shape("batch must be positive"));
    }
    let model = build::<f32>(config, 0)?;
    let shapes = model
        .graph
        .infer_shapes(&BTreeMap::from([(INPUT_NAME.to_string(), input_shape.to_vec())]))?;
    Ok(model
        .graph
        .nodes()
        .iter()
        .filter(|n| !matches!(n.kind, crate::graph::NodeKind::Param { .. }))
        .filter_map(|n| {
            shapes[n.id].clone().map(|shape| ShapeRow {
                node: n.id,
                label: model.graph.label_of(n.id).unwrap_or(n.kind_name()).to_string(),
                kind: n.kind_name(),
                shape,
            })
        })
        .collect())
}
