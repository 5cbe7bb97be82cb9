//! Symbolic autoencoder construction.
//!
//! A genotype describes one layer module. [`build_plan`] expands it into a full
//! encoder/decoder pair:
//!
//! * encoder: the module (repeated `module_repeats` times, ReLU after every
//!   convolution), then `R` reduction modules. A reduction module is a 1x1
//!   convolution that doubles the channel count followed by a 2x2 max pool with
//!   stride two.
//! * decoder: `R` dilation modules (2x2 stride-2 transposed convolution, then a
//!   1x1 convolution that halves channels), then the module layers in reverse
//!   order with each convolution mapping back to the channel count its encoder
//!   twin consumed. The last convolution therefore projects to the input channel
//!   count; it gets no ReLU and the network ends in `tanh`.
//!
//! All module convolutions are zero padded, so only reduction and dilation
//! modules change spatial dimensions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::genotype::{Genotype, LayerKind, DROPOUT_P};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        TensorShape {
            height,
            width,
            channels,
        }
    }

    pub const fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }

    const fn with_channels(self, channels: usize) -> Self {
        TensorShape { channels, ..self }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for TensorShape {
    type Err = BuildError;

    /// Parses `HxWxC`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BuildError::BadShape(s.to_string());
        let mut dims = s.split('x').map(|d| d.trim().parse::<usize>());
        let (Some(Ok(h)), Some(Ok(w)), Some(Ok(c)), None) =
            (dims.next(), dims.next(), dims.next(), dims.next())
        else {
            return Err(bad());
        };
        if h == 0 || w == 0 || c == 0 {
            return Err(bad());
        }
        Ok(TensorShape::new(h, w, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildConfig {
    pub input_shape: TensorShape,
    pub num_reductions: u32,
    pub module_repeats: usize,
}

impl BuildConfig {
    pub const fn new(input_shape: TensorShape, num_reductions: u32) -> Self {
        BuildConfig {
            input_shape,
            num_reductions,
            module_repeats: 1,
        }
    }
}

impl Default for BuildConfig {
    /// 96x96 RGB input with two reductions.
    fn default() -> Self {
        BuildConfig::new(TensorShape::new(96, 96, 3), 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("a pooled spatial dimension of {shape} would reach zero after {reductions} reductions")]
    SpatialUnderflow { shape: TensorShape, reductions: u32 },
    #[error("input {shape} is not divisible by 2^{reductions}")]
    IndivisibleInput { shape: TensorShape, reductions: u32 },
    #[error("invalid build config: {0}")]
    InvalidConfig(&'static str),
    #[error("bad tensor shape `{0}` (expected HxWxC with positive dims)")]
    BadShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanOp {
    /// Zero-padded square convolution inside a layer module.
    Conv { kernel: usize, filters: usize },
    Dropout2d { p: f64 },
    Relu,
    /// 1x1 convolution of a reduction module.
    ReduceConv1x1 { filters: usize },
    MaxPool2x2s2,
    ConvTranspose2x2s2 { filters: usize },
    /// 1x1 convolution of a dilation module.
    DilateConv1x1 { filters: usize },
    Tanh,
}

impl PlanOp {
    /// Kernel side and output channels for parameterised ops.
    fn conv_geometry(&self) -> Option<(usize, usize)> {
        match *self {
            PlanOp::Conv { kernel, filters } => Some((kernel, filters)),
            PlanOp::ReduceConv1x1 { filters } | PlanOp::DilateConv1x1 { filters } => {
                Some((1, filters))
            }
            PlanOp::ConvTranspose2x2s2 { filters } => Some((2, filters)),
            PlanOp::Dropout2d { .. } | PlanOp::Relu | PlanOp::MaxPool2x2s2 | PlanOp::Tanh => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.conv_geometry().is_some()
    }
}

impl fmt::Display for PlanOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PlanOp::Conv { kernel, filters } => write!(f, "conv{kernel}x{kernel}:{filters}"),
            PlanOp::Dropout2d { p } => write!(f, "dropout2d:{p}"),
            PlanOp::Relu => f.write_str("relu"),
            PlanOp::ReduceConv1x1 { filters } => write!(f, "reduce1x1:{filters}"),
            PlanOp::MaxPool2x2s2 => f.write_str("maxpool2x2s2"),
            PlanOp::ConvTranspose2x2s2 { filters } => write!(f, "convtranspose2x2s2:{filters}"),
            PlanOp::DilateConv1x1 { filters } => write!(f, "dilate1x1:{filters}"),
            PlanOp::Tanh => f.write_str("tanh"),
        }
    }
}

impl FromStr for PlanOp {
    type Err = PlanReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlanReportError::UnknownOp(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((name, arg)) => (name, Some(arg)),
            None => (s, None),
        };
        let count = || arg.and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad);
        Ok(match name {
            "relu" if arg.is_none() => PlanOp::Relu,
            "tanh" if arg.is_none() => PlanOp::Tanh,
            "maxpool2x2s2" if arg.is_none() => PlanOp::MaxPool2x2s2,
            "dropout2d" => PlanOp::Dropout2d {
                p: arg.and_then(|a| a.parse::<f64>().ok()).ok_or_else(bad)?,
            },
            "reduce1x1" => PlanOp::ReduceConv1x1 { filters: count()? },
            "dilate1x1" => PlanOp::DilateConv1x1 { filters: count()? },
            "convtranspose2x2s2" => PlanOp::ConvTranspose2x2s2 { filters: count()? },
            _ => {
                let kernel = name
                    .strip_prefix("conv")
                    .and_then(|k| k.split_once('x'))
                    .filter(|(a, b)| a == b)
                    .and_then(|(a, _)| a.parse::<usize>().ok())
                    .ok_or_else(bad)?;
                PlanOp::Conv {
                    kernel,
                    filters: count()?,
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanNode {
    pub op: PlanOp,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    pub param_count: usize,
}

impl PlanNode {
    fn new(op: PlanOp, in_shape: TensorShape, out_shape: TensorShape) -> Self {
        let param_count = op
            .conv_geometry()
            .map_or(0, |(k, c_out)| conv_params(k, in_shape.channels, c_out));
        PlanNode {
            op,
            in_shape,
            out_shape,
            param_count,
        }
    }
}

/// Weights plus biases of a `k x k` convolution from `c_in` to `c_out` channels.
pub const fn conv_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in * c_out + c_out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Decoder,
}

impl Section {
    pub const fn name(self) -> &'static str {
        match self {
            Section::Encoder => "encoder",
            Section::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub input_shape: TensorShape,
    /// Output of the (repeated) layer module, before the first reduction.
    pub module_output_shape: TensorShape,
    pub encoder: Vec<PlanNode>,
    pub decoder: Vec<PlanNode>,
    pub bottleneck_shape: TensorShape,
    pub total_params: usize,
    /// Bottleneck elements over module-output elements; `(1/2)^R`.
    pub compression_ratio: f64,
}

impl NetworkPlan {
    pub fn encoder_params(&self) -> usize {
        self.encoder.iter().map(|n| n.param_count).sum()
    }

    pub fn decoder_params(&self) -> usize {
        self.decoder.iter().map(|n| n.param_count).sum()
    }

    pub fn output_shape(&self) -> TensorShape {
        self.decoder
            .last()
            .map_or(self.bottleneck_shape, |n| n.out_shape)
    }

    /// Boundary shapes of the shape-changing nodes in one section: the input
    /// shape followed by each output shape, skipping nodes that keep their
    /// input shape.
    pub fn shape_trace(&self, section: Section) -> Vec<TensorShape> {
        let nodes = match section {
            Section::Encoder => &self.encoder,
            Section::Decoder => &self.decoder,
        };
        let mut trace = Vec::with_capacity(nodes.len() + 1);
        if let Some(first) = nodes.first() {
            trace.push(first.in_shape);
        }
        for node in nodes {
            if node.out_shape != node.in_shape {
                trace.push(node.out_shape);
            }
        }
        trace
    }

    /// Tab separated node table, one node per line, preceded by a `#` header.
    pub fn to_report(&self) -> String {
        let mut out = String::from("# section\top\tin_shape\tout_shape\tparams\n");
        for (section, nodes) in [
            (Section::Encoder, &self.encoder),
            (Section::Decoder, &self.decoder),
        ] {
            for node in nodes {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    section.name(),
                    node.op,
                    node.in_shape,
                    node.out_shape,
                    node.param_count
                ));
            }
        }
        out
    }
}

/// Expands `genotype` into an encoder/decoder plan.
pub fn build_plan(genotype: &Genotype, cfg: &BuildConfig) -> Result<NetworkPlan, BuildError> {
    check_config(cfg)?;
    let input = cfg.input_shape;

    let mut encoder = Vec::new();
    // (kernel, in_shape, out_shape) for every module conv, dropout as None
    let mut module_steps: Vec<Option<(usize, TensorShape, TensorShape)>> = Vec::new();
    let mut shape = input;
    for _ in 0..cfg.module_repeats {
        for layer in genotype.layers() {
            match (layer.kind().kernel_size(), layer.filters()) {
                (Some(kernel), Some(filters)) => {
                    let out = shape.with_channels(filters.get());
                    encoder.push(PlanNode::new(
                        PlanOp::Conv {
                            kernel,
                            filters: filters.get(),
                        },
                        shape,
                        out,
                    ));
                    encoder.push(PlanNode::new(PlanOp::Relu, out, out));
                    module_steps.push(Some((kernel, shape, out)));
                    shape = out;
                }
                _ => {
                    debug_assert_eq!(layer.kind(), LayerKind::Dropout2d);
                    encoder.push(PlanNode::new(PlanOp::Dropout2d { p: DROPOUT_P }, shape, shape));
                    module_steps.push(None);
                }
            }
        }
    }
    let module_output_shape = shape;

    for _ in 0..cfg.num_reductions {
        let widened = shape.with_channels(shape.channels * 2);
        encoder.push(PlanNode::new(
            PlanOp::ReduceConv1x1 {
                filters: widened.channels,
            },
            shape,
            widened,
        ));
        encoder.push(PlanNode::new(PlanOp::Relu, widened, widened));
        let pooled = TensorShape::new(widened.height / 2, widened.width / 2, widened.channels);
        encoder.push(PlanNode::new(PlanOp::MaxPool2x2s2, widened, pooled));
        shape = pooled;
    }
    let bottleneck_shape = shape;

    // Decoder without activations first; ReLUs go after every conv but the last.
    let mut body: Vec<PlanNode> = Vec::new();
    for _ in 0..cfg.num_reductions {
        let expanded = TensorShape::new(shape.height * 2, shape.width * 2, shape.channels);
        body.push(PlanNode::new(
            PlanOp::ConvTranspose2x2s2 {
                filters: shape.channels,
            },
            shape,
            expanded,
        ));
        let narrowed = expanded.with_channels(expanded.channels / 2);
        body.push(PlanNode::new(
            PlanOp::DilateConv1x1 {
                filters: narrowed.channels,
            },
            expanded,
            narrowed,
        ));
        shape = narrowed;
    }
    debug_assert_eq!(shape, module_output_shape);
    for step in module_steps.iter().rev() {
        match *step {
            Some((kernel, enc_in, enc_out)) => {
                debug_assert_eq!(shape, enc_out);
                body.push(PlanNode::new(
                    PlanOp::Conv {
                        kernel,
                        filters: enc_in.channels,
                    },
                    enc_out,
                    enc_in,
                ));
                shape = enc_in;
            }
            None => body.push(PlanNode::new(PlanOp::Dropout2d { p: DROPOUT_P }, shape, shape)),
        }
    }
    let last_conv = body.iter().rposition(|n| n.op.is_conv());
    let mut decoder = Vec::with_capacity(body.len() * 2);
    for (i, node) in body.into_iter().enumerate() {
        let out = node.out_shape;
        let activates = matches!(
            node.op,
            PlanOp::Conv { .. } | PlanOp::DilateConv1x1 { .. }
        ) && Some(i) != last_conv;
        decoder.push(node);
        if activates {
            decoder.push(PlanNode::new(PlanOp::Relu, out, out));
        }
    }
    decoder.push(PlanNode::new(PlanOp::Tanh, shape, shape));

    let total_params = encoder
        .iter()
        .chain(decoder.iter())
        .map(|n| n.param_count)
        .sum();
    let compression_ratio =
        bottleneck_shape.elements() as f64 / module_output_shape.elements() as f64;
    Ok(NetworkPlan {
        input_shape: input,
        module_output_shape,
        encoder,
        decoder,
        bottleneck_shape,
        total_params,
        compression_ratio,
    })
}

fn check_config(cfg: &BuildConfig) -> Result<(), BuildError> {
    let shape = cfg.input_shape;
    if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
        return Err(BuildError::InvalidConfig("input dimensions must be positive"));
    }
    if cfg.num_reductions == 0 {
        return Err(BuildError::InvalidConfig("at least one reduction is required"));
    }
    if cfg.module_repeats == 0 {
        return Err(BuildError::InvalidConfig("module_repeats must be at least 1"));
    }
    let reductions = cfg.num_reductions;
    let underflow = BuildError::SpatialUnderflow { shape, reductions };
    let factor = 1usize
        .checked_shl(reductions)
        .filter(|&f| f != 0 && reductions < usize::BITS)
        .ok_or(underflow.clone())?;
    if shape.height < factor || shape.width < factor {
        return Err(underflow);
    }
    if !shape.height.is_multiple_of(factor) || !shape.width.is_multiple_of(factor) {
        return Err(BuildError::IndivisibleInput { shape, reductions });
    }
    Ok(())
}

/// Sum of convolution parameters across the plan.
pub fn param_count(plan: &NetworkPlan) -> usize {
    plan.encoder_params() + plan.decoder_params()
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Validity {
    Valid {
        total_params: usize,
        bottleneck_shape: TensorShape,
    },
    Invalid(BuildError),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid { .. })
    }
}

/// Checks that `genotype` builds under `cfg`. Sequential modules always form a
/// connected network, so failures come only from the input geometry.
pub fn validate(genotype: &Genotype, cfg: &BuildConfig) -> Validity {
    match build_plan(genotype, cfg) {
        Ok(plan) => Validity::Valid {
            total_params: plan.total_params,
            bottleneck_shape: plan.bottleneck_shape,
        },
        Err(e) => Validity::Invalid(e),
    }
}

/// One parsed line of [`NetworkPlan::to_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub section: Section,
    pub op: PlanOp,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanReportError {
    #[error("line {0}: expected 5 tab separated fields")]
    FieldCount(usize),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("line {0}: bad section")]
    BadSection(usize),
    #[error("line {0}: bad shape")]
    BadShape(usize),
    #[error("line {0}: bad parameter count")]
    BadParams(usize),
}

/// Parses a node table written by [`NetworkPlan::to_report`]. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_plan_report(text: &str) -> Result<Vec<ReportRow>, PlanReportError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [section, op, in_shape, out_shape, params] = fields[..] else {
            return Err(PlanReportError::FieldCount(lineno));
        };
        let section = match section {
            "encoder" => Section::Encoder,
            "decoder" => Section::Decoder,
            _ => return Err(PlanReportError::BadSection(lineno)),
        };
        rows.push(ReportRow {
            section,
            op: op.parse()?,
            in_shape: in_shape
                .parse()
                .map_err(|_| PlanReportError::BadShape(lineno))?,
            out_shape: out_shape
                .parse()
                .map_err(|_| PlanReportError::BadShape(lineno))?,
            params: params
                .parse()
                .map_err(|_| PlanReportError::BadParams(lineno))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn plan(g: &str, shape: (usize, usize, usize), r: u32) -> Result<NetworkPlan, BuildError> {
        let cfg = BuildConfig::new(TensorShape::new(shape.0, shape.1, shape.2), r);
        build_plan(&g.parse().unwrap(), &cfg)
    }

    fn shapes(nodes: &[PlanNode]) -> Vec<TensorShape> {
        nodes.iter().map(|n| n.out_shape).collect()
    }

    #[test]
    fn single_conv_two_reductions() {
        let p = plan("5x5conv2d:64", (96, 96, 3), 2).unwrap();
        assert_eq!(
            shapes(&p.encoder),
            vec![
                TensorShape::new(96, 96, 64), // conv
                TensorShape::new(96, 96, 64), // relu
                TensorShape::new(96, 96, 128),
                TensorShape::new(96, 96, 128),
                TensorShape::new(48, 48, 128),
                TensorShape::new(48, 48, 256),
                TensorShape::new(48, 48, 256),
                TensorShape::new(24, 24, 256),
            ]
        );
        assert_eq!(p.bottleneck_shape, TensorShape::new(24, 24, 256));
        assert_eq!(p.compression_ratio, 0.25);
        assert_eq!(p.output_shape(), TensorShape::new(96, 96, 3));
        assert_eq!(p.decoder.last().unwrap().op, PlanOp::Tanh);
        // last conv projects to 3 channels and is not followed by relu
        let n = p.decoder.len();
        assert_eq!(
            p.decoder[n - 2].op,
            PlanOp::Conv {
                kernel: 5,
                filters: 3
            }
        );
    }

    #[test]
    fn three_reductions_keep_one_eighth() {
        let p = plan("3x3conv2d:32", (96, 96, 3), 3).unwrap();
        assert_eq!(p.bottleneck_shape, TensorShape::new(12, 12, 256));
        assert_eq!(p.compression_ratio, 0.125);
        assert_eq!(
            p.bottleneck_shape.elements() * 8,
            p.module_output_shape.elements()
        );
    }

    #[test]
    fn each_reduction_keeps_half_the_elements() {
        let p = plan("1x1conv2d:8", (64, 32, 3), 4).unwrap();
        for pool in p.encoder.iter().filter(|n| n.op == PlanOp::MaxPool2x2s2) {
            assert_eq!(pool.out_shape.elements() * 4, pool.in_shape.elements());
        }
        for pair in p.encoder.windows(3) {
            if let [reduce, _, pool] = pair {
                if matches!(reduce.op, PlanOp::ReduceConv1x1 { .. }) {
                    assert_eq!(pool.out_shape.elements() * 2, reduce.in_shape.elements());
                }
            }
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(
            plan("3x3conv2d:8", (2, 2, 3), 2),
            Err(BuildError::SpatialUnderflow { .. })
        ));
        assert!(matches!(
            plan("3x3conv2d:8", (100, 100, 3), 5),
            Err(BuildError::IndivisibleInput { .. })
        ));
        assert!(plan("3x3conv2d:8", (96, 96, 3), 5).is_ok());
        assert!(matches!(
            plan("3x3conv2d:8", (96, 96, 3), 0),
            Err(BuildError::InvalidConfig(_))
        ));
        assert!(matches!(
            plan("3x3conv2d:8", (96, 96, 3), 200),
            Err(BuildError::SpatialUnderflow { .. })
        ));
    }

    #[test]
    fn conv_param_formula() {
        assert_eq!(conv_params(3, 3, 16), 448);
        let p = plan("3x3conv2d:16", (8, 8, 3), 1).unwrap();
        assert_eq!(p.encoder[0].param_count, 448);
        assert_eq!(param_count(&p), p.total_params);
        assert_eq!(p.total_params, p.encoder_params() + p.decoder_params());
        assert!(p.encoder_params() > 0 && p.decoder_params() > 0);
    }

    #[test]
    fn dropout_only_module() {
        let text = ["dropout2d"; 10].join(",");
        let p = plan(&text, (96, 96, 3), 2).unwrap();
        assert!(p
            .encoder
            .iter()
            .filter(|n| matches!(n.op, PlanOp::Dropout2d { .. }))
            .all(|n| n.param_count == 0 && n.in_shape == n.out_shape));
        assert_eq!(p.module_output_shape, TensorShape::new(96, 96, 3));
        assert_eq!(p.output_shape(), TensorShape::new(96, 96, 3));
        // final conv is the last dilation's 1x1 back to 3 channels
        let last_conv = p.decoder.iter().rev().find(|n| n.op.is_conv()).unwrap();
        assert_eq!(last_conv.op, PlanOp::DilateConv1x1 { filters: 3 });
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let p = plan("5x5conv2d:16,dropout2d,3x3conv2d:64,1x1conv2d:8", (32, 32, 3), 2).unwrap();
        let mut dec = p.shape_trace(Section::Decoder);
        dec.reverse();
        assert_eq!(dec, p.shape_trace(Section::Encoder));
    }

    #[test]
    fn repeated_modules_chain_channels() {
        let g: Genotype = "3x3conv2d:16".parse().unwrap();
        let cfg = BuildConfig {
            module_repeats: 2,
            ..BuildConfig::new(TensorShape::new(16, 16, 3), 1)
        };
        let p = build_plan(&g, &cfg).unwrap();
        assert_eq!(p.encoder[2].in_shape.channels, 16);
        assert_eq!(p.encoder[2].param_count, conv_params(3, 16, 16));
        assert_eq!(p.output_shape(), cfg.input_shape);
    }

    #[test]
    fn report_roundtrip() {
        let p = plan("7x7conv2d:32,dropout2d", (96, 96, 3), 2).unwrap();
        let report = p.to_report();
        assert!(report.starts_with("# section\top"));
        assert!(report.contains("encoder\tconv7x7:32\t96x96x3\t96x96x32\t4736\n"));
        let rows = parse_plan_report(&report).unwrap();
        assert_eq!(rows.len(), p.encoder.len() + p.decoder.len());
        for (row, node) in rows.iter().zip(p.encoder.iter().chain(p.decoder.iter())) {
            assert_eq!(row.op, node.op);
            assert_eq!(row.in_shape, node.in_shape);
            assert_eq!(row.out_shape, node.out_shape);
            assert_eq!(row.params, node.param_count);
        }
        assert!(parse_plan_report("encoder\tconv3x5:8\t1x1x1\t1x1x1\t0").is_err());
        assert!(parse_plan_report("encoder\trelu\t1x1x1").is_err());
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("96x96x3".parse::<TensorShape>().unwrap(), TensorShape::new(96, 96, 3));
        assert!("96x96".parse::<TensorShape>().is_err());
        assert!("0x96x3".parse::<TensorShape>().is_err());
    }

    #[test]
    fn validate_reports() {
        let g: Genotype = "dropout2d".parse().unwrap();
        assert!(validate(&g, &BuildConfig::default()).is_valid());
        let bad = BuildConfig::new(TensorShape::new(100, 100, 3), 5);
        assert!(matches!(
            validate(&g, &bad),
            Validity::Invalid(BuildError::IndivisibleInput { .. })
        ));
    }
}
