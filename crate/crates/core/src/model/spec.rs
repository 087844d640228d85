//! Declarative architecture description, loss weights and the named presets.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::engine::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Conv encoder, single dense decode step, no step correlation (L7).
    Arc1,
    /// Conv encoder, dense step + deconvolution decoder, step correlation on.
    Arc2,
    /// One hidden dense layer per channel, CorrNet style.
    DenseBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Arc1 => "arc1",
            Variant::Arc2 => "arc2",
            Variant::DenseBaseline => "dense-baseline",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "arc1" => Some(Variant::Arc1),
            "arc2" => Some(Variant::Arc2),
            "dense-baseline" => Some(Variant::DenseBaseline),
            _ => None,
        }
    }
}

/// conv (stride 1) → activation → optional 2×2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pad: usize,
    pub pool: bool,
}

/// ×2 upsample → transposed convolution → activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvStage {
    pub filters: usize,
    pub kernel: (usize, usize),
}

/// Per-view deconvolution decoder: a dense layer fills a `seed` volume which
/// the stages grow back to the view's spatial extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeconvPath {
    pub seed: [usize; 3],
    pub stages: Vec<DeconvStage>,
}

impl DeconvPath {
    pub fn output_shape(&self) -> [usize; 3] {
        let [mut c, mut h, mut w] = self.seed;
        for s in &self.stages {
            c = s.filters;
            h = 2 * h + s.kernel.0 - 1;
            w = 2 * w + s.kernel.1 - 1;
        }
        [c, h, w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    /// Per-view sample shape: `[C, H, W]` images or `[D]` vectors.
    pub view_shapes: [Vec<usize>; 2],
    pub conv_stack: Vec<ConvStage>,
    pub dense_widths: Vec<usize>,
    pub joint_dim: usize,
    pub k_encode: usize,
    pub k_decode: usize,
    pub decoder_width: usize,
    pub use_l7: bool,
    pub use_deconv_decoder: bool,
    pub deconv_paths: Option<[DeconvPath; 2]>,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub joint_activation: Activation,
    pub output_activation: Activation,
    /// Reuse the transposed first encoder dense weight as the decoder output
    /// weight when the shapes line up.
    pub tied_weights: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub corr_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// λ on the joint-representation correlation (L6).
    pub lambda_final: f64,
    /// λ_k per encoder step (L7).
    pub lambda_encode: Vec<f64>,
    /// λ on the decoder dense-step correlation (L7, arc2).
    pub lambda_decode: f64,
}

pub const PRESETS: [&str; 5] = [
    "mnist-arc1",
    "mnist-arc2",
    "synthetic-arc1",
    "synthetic-arc2",
    "dense-baseline",
];

pub const MNIST_VIEW: [usize; 3] = [1, 28, 14];
pub const SYNTH_DIMS: (usize, usize) = (273, 112);

fn mnist_conv() -> Vec<ConvStage> {
    vec![
        ConvStage {
            filters: 16,
            kernel: 3,
            pad: 1,
            pool: true,
        },
        ConvStage {
            filters: 32,
            kernel: 3,
            pad: 1,
            pool: true,
        },
    ]
}

fn mnist_deconv() -> DeconvPath {
    // 32×6×2 → up 12×4 → (2,3) → 13×6 → up 26×12 → 3×3 → 28×14
    DeconvPath {
        seed: [32, 6, 2],
        stages: vec![
            DeconvStage {
                filters: 16,
                kernel: (2, 3),
            },
            DeconvStage {
                filters: 1,
                kernel: (3, 3),
            },
        ],
    }
}

/// Builds a named preset.
pub fn build_preset(name: &str) -> Result<(ArchitectureSpec, LossWeights)> {
    let mnist_views = [MNIST_VIEW.to_vec(), MNIST_VIEW.to_vec()];
    let synth_views = [vec![SYNTH_DIMS.0], vec![SYNTH_DIMS.1]];
    let base = ArchitectureSpec {
        variant: Variant::Arc1,
        view_shapes: mnist_views,
        conv_stack: mnist_conv(),
        dense_widths: vec![300, 100],
        joint_dim: 50,
        k_encode: 2,
        k_decode: 1,
        decoder_width: 300,
        use_l7: false,
        use_deconv_decoder: false,
        deconv_paths: None,
        dropout_rate: 0.5,
        activation: Activation::Relu,
        joint_activation: Activation::Identity,
        output_activation: Activation::Sigmoid,
        tied_weights: true,
        bn_momentum: 0.9,
        bn_epsilon: 1e-5,
        corr_epsilon: 1e-8,
    };
    let arc1_weights = LossWeights {
        lambda_final: 0.02,
        lambda_encode: vec![0.005, 0.01],
        lambda_decode: 0.005,
    };
    let arc2_weights = arc1_weights.clone();
    let arc2 = |spec: ArchitectureSpec| ArchitectureSpec {
        variant: Variant::Arc2,
        use_l7: true,
        use_deconv_decoder: true,
        ..spec
    };
    let synth = ArchitectureSpec {
        view_shapes: synth_views,
        conv_stack: Vec::new(),
        dense_widths: vec![300, 150],
        joint_dim: 112,
        output_activation: Activation::Identity,
        ..base.clone()
    };
    let out = match name {
        "mnist-arc1" => (base, arc1_weights),
        "mnist-arc2" => (
            arc2(ArchitectureSpec {
                deconv_paths: Some([mnist_deconv(), mnist_deconv()]),
                ..base
            }),
            arc2_weights,
        ),
        "synthetic-arc1" => (synth, arc1_weights),
        "synthetic-arc2" => (
            arc2(ArchitectureSpec {
                // 273 = 1×21×13 and 112 = 1×14×8 after one up/deconv stage.
                deconv_paths: Some([
                    DeconvPath {
                        seed: [8, 10, 6],
                        stages: vec![DeconvStage {
                            filters: 1,
                            kernel: (2, 2),
                        }],
                    },
                    DeconvPath {
                        seed: [8, 6, 3],
                        stages: vec![DeconvStage {
                            filters: 1,
                            kernel: (3, 3),
                        }],
                    },
                ]),
                ..synth
            }),
            arc2_weights,
        ),
        "dense-baseline" => (
            ArchitectureSpec {
                variant: Variant::DenseBaseline,
                conv_stack: Vec::new(),
                dense_widths: vec![500],
                k_encode: 1,
                decoder_width: 500,
                ..base
            },
            LossWeights {
                lambda_final: 0.02,
                lambda_encode: vec![0.0],
                lambda_decode: 0.0,
            },
        ),
        other => {
            return Err(Error::Usage(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    out.0.validate(&out.1)?;
    Ok(out)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl ArchitectureSpec {
    pub fn view_dim(&self, view: usize) -> usize {
        numel(&self.view_shapes[view])
    }

    /// Per-view shape `[C, H, W]` the conv stack sees.
    pub fn image_shape(&self, view: usize) -> [usize; 3] {
        match self.view_shapes[view].as_slice() {
            [c, h, w] => [*c, *h, *w],
            [d] => [1, 1, *d],
            [h, w] => [1, *h, *w],
            _ => [1, 1, self.view_dim(view)],
        }
    }

    /// Flattened width of the conv stack output for a view.
    pub fn conv_output_dim(&self, view: usize) -> Result<usize> {
        let [mut c, mut h, mut w] = self.image_shape(view);
        if self.conv_stack.is_empty() {
            return Ok(c * h * w);
        }
        for s in &self.conv_stack {
            if s.kernel > h + 2 * s.pad || s.kernel > w + 2 * s.pad {
                return Err(Error::Config(format!(
                    "conv kernel {} does not fit a {h}x{w} map",
                    s.kernel
                )));
            }
            h = h + 2 * s.pad + 1 - s.kernel;
            w = w + 2 * s.pad + 1 - s.kernel;
            c = s.filters;
            if s.pool {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("cannot pool a {h}x{w} map")));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(c * h * w)
    }

    /// Whether the decoder output weight of `view` is the transposed first
    /// encoder weight.
    pub fn ties_output(&self) -> bool {
        self.tied_weights
            && self.conv_stack.is_empty()
            && !self.use_deconv_decoder
            && self.dense_widths.first() == Some(&self.decoder_width)
    }

    pub fn validate(&self, weights: &LossWeights) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dense_widths.len() != self.k_encode {
            return bad(format!(
                "dense_widths has {} entries but k_encode = {}",
                self.dense_widths.len(),
                self.k_encode
            ));
        }
        if self.k_encode == 0 || self.dense_widths.contains(&0) {
            return bad("at least one non-empty encoder dense step is required".into());
        }
        if self.k_decode != 1 {
            return bad(format!("k_decode = {} unsupported (only 1)", self.k_decode));
        }
        if self.joint_dim == 0 || self.decoder_width == 0 {
            return bad("joint_dim and decoder_width must be positive".into());
        }
        match self.variant {
            Variant::Arc1 | Variant::DenseBaseline if self.use_l7 || self.use_deconv_decoder => {
                return bad(format!(
                    "{} excludes the L7 term and the deconvolution decoder",
                    self.variant.name()
                ))
            }
            Variant::Arc2 if !(self.use_l7 && self.use_deconv_decoder) => {
                return bad("arc2 requires use_l7 and use_deconv_decoder".into())
            }
            _ => {}
        }
        if self.variant == Variant::DenseBaseline && !self.conv_stack.is_empty() {
            return bad("dense-baseline has no conv stack".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("bn_momentum {} outside (0, 1)", self.bn_momentum));
        }
        if self.bn_epsilon <= 0.0 || self.corr_epsilon < 0.0 {
            return bad("epsilons must be positive".into());
        }
        for v in 0..2 {
            if self.view_shapes[v].is_empty() || self.view_shapes[v].contains(&0) {
                return bad(format!("view {v} has an empty shape"));
            }
            self.conv_output_dim(v)?;
        }
        if self.use_deconv_decoder {
            let Some(paths) = &self.deconv_paths else {
                return bad("use_deconv_decoder needs deconv paths for both views".into());
            };
            for (v, p) in paths.iter().enumerate() {
                if p.stages.is_empty() || p.seed.contains(&0) {
                    return bad(format!("deconv path {v} is empty"));
                }
                let out = p.output_shape();
                if numel(&out) != self.view_dim(v) {
                    return bad(format!(
                        "deconv path {v} produces {out:?}, which does not fill view shape {:?}",
                        self.view_shapes[v]
                    ));
                }
            }
        }
        let ws = std::iter::once(weights.lambda_final)
            .chain(weights.lambda_encode.iter().copied())
            .chain(std::iter::once(weights.lambda_decode));
        for w in ws {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("loss weight {w} must be finite and >= 0"));
            }
        }
        if self.use_l7 && weights.lambda_encode.len() != self.k_encode {
            return bad(format!(
                "lambda_encode has {} entries but k_encode = {}",
                weights.lambda_encode.len(),
                self.k_encode
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- canonical text

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_conv(stack: &[ConvStage]) -> String {
    if stack.is_empty() {
        return "none".into();
    }
    stack
        .iter()
        .map(|s| {
            format!(
                "{}:{}:{}:{}",
                s.filters,
                s.kernel,
                s.pad,
                if s.pool { "pool" } else { "nopool" }
            )
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_deconv(p: &DeconvPath) -> String {
    let stages = p
        .stages
        .iter()
        .map(|s| format!("{}:{}x{}", s.filters, s.kernel.0, s.kernel.1))
        .collect::<Vec<_>>()
        .join(",");
    format!("{}|{stages}", join(&p.seed, "x"))
}

/// Keys accepted by [`apply_override`], in canonical order.
pub const SPEC_KEYS: [&str; 24] = [
    "variant",
    "view_x",
    "view_y",
    "conv_stack",
    "dense_widths",
    "joint_dim",
    "k_encode",
    "k_decode",
    "decoder_width",
    "use_l7",
    "use_deconv_decoder",
    "deconv_x",
    "deconv_y",
    "dropout_rate",
    "activation",
    "joint_activation",
    "output_activation",
    "tied_weights",
    "bn_momentum",
    "bn_epsilon",
    "corr_epsilon",
    "lambda_final",
    "lambda_encode",
    "lambda_decode",
];

/// Serializes spec and weights as `key = value` lines in a fixed order.
pub fn canonical_text(spec: &ArchitectureSpec, weights: &LossWeights) -> String {
    let deconv = |v: usize| {
        spec.deconv_paths
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| fmt_deconv(&p[v]))
    };
    let values = [
        spec.variant.name().to_string(),
        join(&spec.view_shapes[0], "x"),
        join(&spec.view_shapes[1], "x"),
        fmt_conv(&spec.conv_stack),
        join(&spec.dense_widths, ","),
        spec.joint_dim.to_string(),
        spec.k_encode.to_string(),
        spec.k_decode.to_string(),
        spec.decoder_width.to_string(),
        spec.use_l7.to_string(),
        spec.use_deconv_decoder.to_string(),
        deconv(0),
        deconv(1),
        fmt_f64(spec.dropout_rate),
        spec.activation.name().into(),
        spec.joint_activation.name().into(),
        spec.output_activation.name().into(),
        spec.tied_weights.to_string(),
        fmt_f64(spec.bn_momentum),
        fmt_f64(spec.bn_epsilon),
        fmt_f64(spec.corr_epsilon),
        fmt_f64(weights.lambda_final),
        weights
            .lambda_encode
            .iter()
            .map(|v| fmt_f64(*v))
            .collect::<Vec<_>>()
            .join(","),
        fmt_f64(weights.lambda_decode),
    ];
    let mut out = String::new();
    for (k, v) in SPEC_KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Hex SHA-256 of the canonical text.
pub fn digest(spec: &ArchitectureSpec, weights: &LossWeights) -> String {
    let hash = Sha256::digest(canonical_text(spec, weights).as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_err(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| parse_err(key, v))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| parse_err(key, v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(parse_err(key, v)),
    }
}

fn parse_list<T>(key: &str, v: &str, sep: char, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() || v == "none" || v == "[]" {
        return Ok(Vec::new());
    }
    v.trim_start_matches('[')
        .trim_end_matches(']')
        .split(sep)
        .map(|p| f(key, p.trim()))
        .collect()
}

fn parse_activation(key: &str, v: &str) -> Result<Activation> {
    Activation::parse(v.trim()).ok_or_else(|| parse_err(key, v))
}

fn parse_conv(key: &str, v: &str) -> Result<Vec<ConvStage>> {
    parse_list(key, v, ',', |key, part| {
        let f: Vec<&str> = part.split(':').collect();
        if f.len() != 4 {
            return Err(parse_err(key, part));
        }
        Ok(ConvStage {
            filters: parse_usize(key, f[0])?,
            kernel: parse_usize(key, f[1])?,
            pad: parse_usize(key, f[2])?,
            pool: match f[3] {
                "pool" => true,
                "nopool" => false,
                _ => return Err(parse_err(key, part)),
            },
        })
    })
}

fn parse_deconv(key: &str, v: &str) -> Result<Option<DeconvPath>> {
    let v = v.trim();
    if v == "none" {
        return Ok(None);
    }
    let (seed, stages) = v.split_once('|').ok_or_else(|| parse_err(key, v))?;
    let seed = parse_list(key, seed, 'x', parse_usize)?;
    let seed: [usize; 3] = seed.try_into().map_err(|_| parse_err(key, v))?;
    let stages = parse_list(key, stages, ',', |key, part| {
        let (f, k) = part.split_once(':').ok_or_else(|| parse_err(key, part))?;
        let (kh, kw) = k.split_once('x').ok_or_else(|| parse_err(key, part))?;
        Ok(DeconvStage {
            filters: parse_usize(key, f)?,
            kernel: (parse_usize(key, kh)?, parse_usize(key, kw)?),
        })
    })?;
    Ok(Some(DeconvPath { seed, stages }))
}

/// Sets one field from its canonical `key = value` form. Unknown keys are
/// rejected.
pub fn apply_override(
    spec: &mut ArchitectureSpec,
    weights: &mut LossWeights,
    key: &str,
    value: &str,
) -> Result<()> {
    match key {
        "variant" => spec.variant = Variant::parse(value.trim()).ok_or_else(|| parse_err(key, value))?,
        "view_x" => spec.view_shapes[0] = parse_list(key, value, 'x', parse_usize)?,
        "view_y" => spec.view_shapes[1] = parse_list(key, value, 'x', parse_usize)?,
        "conv_stack" => spec.conv_stack = parse_conv(key, value)?,
        "dense_widths" => spec.dense_widths = parse_list(key, value, ',', parse_usize)?,
        "joint_dim" => spec.joint_dim = parse_usize(key, value)?,
        "k_encode" => spec.k_encode = parse_usize(key, value)?,
        "k_decode" => spec.k_decode = parse_usize(key, value)?,
        "decoder_width" => spec.decoder_width = parse_usize(key, value)?,
        "use_l7" => spec.use_l7 = parse_bool(key, value)?,
        "use_deconv_decoder" => spec.use_deconv_decoder = parse_bool(key, value)?,
        "deconv_x" | "deconv_y" => {
            let v = usize::from(key == "deconv_y");
            let parsed = parse_deconv(key, value)?;
            match (parsed, spec.deconv_paths.as_mut()) {
                (Some(p), Some(paths)) => paths[v] = p,
                (Some(p), None) => {
                    let mut paths = [p.clone(), p];
                    paths[1 - v] = DeconvPath {
                        seed: [1, 1, 1],
                        stages: Vec::new(),
                    };
                    spec.deconv_paths = Some(paths);
                }
                (None, _) => spec.deconv_paths = None,
            }
        }
        "dropout_rate" => spec.dropout_rate = parse_f64(key, value)?,
        "activation" => spec.activation = parse_activation(key, value)?,
        "joint_activation" => spec.joint_activation = parse_activation(key, value)?,
        "output_activation" => spec.output_activation = parse_activation(key, value)?,
        "tied_weights" => spec.tied_weights = parse_bool(key, value)?,
        "bn_momentum" => spec.bn_momentum = parse_f64(key, value)?,
        "bn_epsilon" => spec.bn_epsilon = parse_f64(key, value)?,
        "corr_epsilon" => spec.corr_epsilon = parse_f64(key, value)?,
        "lambda_final" => weights.lambda_final = parse_f64(key, value)?,
        "lambda_encode" => weights.lambda_encode = parse_list(key, value, ',', parse_f64)?,
        "lambda_decode" => weights.lambda_decode = parse_f64(key, value)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown architecture field {key:?}"
            )))
        }
    }
    Ok(())
}

/// Inverse of [`canonical_text`].
pub fn parse_canonical(text: &str) -> Result<(ArchitectureSpec, LossWeights)> {
    let (mut spec, mut weights) = build_preset("mnist-arc1")?;
    spec.deconv_paths = None;
    let mut seen = Vec::new();
    let mut deconv = [None, None];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "deconv_x" => deconv[0] = parse_deconv(k, v)?,
            "deconv_y" => deconv[1] = parse_deconv(k, v)?,
            _ => apply_override(&mut spec, &mut weights, k, v)?,
        }
        seen.push(k.to_string());
    }
    if let Some(missing) = SPEC_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
        return Err(Error::Config(format!("architecture text lacks {missing}")));
    }
    spec.deconv_paths = match deconv {
        [Some(a), Some(b)] => Some([a, b]),
        _ => None,
    };
    spec.validate(&weights)?;
    Ok((spec, weights))
}
