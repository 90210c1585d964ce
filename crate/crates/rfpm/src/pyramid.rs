//! Three-column feature pyramids with residual downsampling and repair masks.
//!
//! Columns are built left to right. The left (base) column never receives a
//! repair mask, so its features are identical whether or not the other
//! columns exist. At a mask level the downsampled map is kept pre-activation,
//! gated by a sigmoid attention mask and shifted by an additive bias mask
//! (both computed from the previous column's map at the same level), fused by
//! a 3x3 convolution and only then activated.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{Node, Tape, LEAKY_SLOPE};
use crate::error::{Result, RfpmError};
use crate::params::{ParamNodes, ParamStore};

/// Input images are RGB.
pub const IMG_CHANNELS: usize = 3;

/// Per-level channel widths of the small default pyramid.
pub const TOY_CHANNELS: [usize; 4] = [8, 16, 24, 32];

/// Downsampling block choice for one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsamplerKind {
    /// Stride-2 3x3 convolution (weighted feature downsampling).
    Wfd,
    /// 2x2 max pooling followed by a 1x1 convolution.
    Mp,
    /// Residual combination of the two branches.
    Rfd,
}

impl DownsamplerKind {
    pub fn from_char(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'W' => Ok(Self::Wfd),
            'M' => Ok(Self::Mp),
            'R' => Ok(Self::Rfd),
            other => Err(RfpmError::Config(format!(
                "unknown downsampler kind '{other}' (expected W, M or R)"
            ))),
        }
    }

    pub fn as_char(&self) -> char {
        match self {
            Self::Wfd => 'W',
            Self::Mp => 'M',
            Self::Rfd => 'R',
        }
    }
}

/// One pyramid column: per-level output channels and downsampler kinds.
///
/// Entry `i` describes the step from level `i` to level `i+1`; level 0 is
/// the input image itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidColumnSpec {
    pub channels: Vec<usize>,
    pub kinds: Vec<DownsamplerKind>,
}

impl PyramidColumnSpec {
    /// Uniform-kind column.
    pub fn uniform(kind: DownsamplerKind, channels: &[usize]) -> Self {
        Self {
            channels: channels.to_vec(),
            kinds: vec![kind; channels.len()],
        }
    }

    /// Number of feature levels above the input image.
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.kinds.len() {
            return Err(RfpmError::Config(format!(
                "column has {} channel entries but {} kinds",
                self.channels.len(),
                self.kinds.len()
            )));
        }
        if self.channels.len() < 2 {
            return Err(RfpmError::Config(
                "a pyramid column needs at least 2 levels".into(),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(RfpmError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Declarative description of the multi-column pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfpmConfig {
    /// 1 to 3 columns; column 0 is the base (left) column.
    pub columns: Vec<PyramidColumnSpec>,
    /// Levels at which masks flow left -> middle and middle -> right.
    pub mask_levels: BTreeSet<usize>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl RfpmConfig {
    /// `kinds` is a slash-separated column string such as `"W/R/W"`;
    /// every column uses the small default channel schedule.
    pub fn toy(kinds: &str, mask_levels: &[usize], seed: u64) -> Result<Self> {
        Self::with_channels(kinds, &TOY_CHANNELS, mask_levels, seed)
    }

    pub fn with_channels(
        kinds: &str,
        channels: &[usize],
        mask_levels: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let columns = parse_kinds(kinds)?
            .into_iter()
            .map(|k| PyramidColumnSpec::uniform(k, channels))
            .collect();
        let cfg = Self {
            columns,
            mask_levels: mask_levels.iter().copied().collect(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named channel schedules. `toy` is the default; `irr-pwc` and `raft`
    /// mirror the channel widths of the larger estimators as presets only.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy" => Self::toy("W/R/W", &[1, 2], seed),
            "irr-pwc" => {
                let base = PyramidColumnSpec::uniform(
                    DownsamplerKind::Wfd,
                    &[16, 32, 64, 96, 128, 196],
                );
                let side = [16, 32, 64, 88, 112, 136];
                let cfg = Self {
                    columns: vec![
                        base,
                        PyramidColumnSpec::uniform(DownsamplerKind::Rfd, &side),
                        PyramidColumnSpec::uniform(DownsamplerKind::Wfd, &side),
                    ],
                    mask_levels: [1, 2, 3].into_iter().collect(),
                    seed,
                };
                cfg.validate()?;
                Ok(cfg)
            }
            "raft" => Self::with_channels("W/R/W", &[64, 96, 128], &[1, 2], seed),
            other => Err(RfpmError::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn levels(&self) -> usize {
        self.columns.first().map(|c| c.levels()).unwrap_or(0)
    }

    /// Kind string such as `"W/R/W"` (first kind of each column).
    pub fn kinds_string(&self) -> String {
        self.columns
            .iter()
            .map(|c| c.kinds.first().map(|k| k.as_char()).unwrap_or('?').to_string())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() || self.columns.len() > 3 {
            return Err(RfpmError::Config(format!(
                "need 1 to 3 pyramid columns, got {}",
                self.columns.len()
            )));
        }
        for col in &self.columns {
            col.validate()?;
        }
        let levels = self.levels();
        if self.columns.iter().any(|c| c.levels() != levels) {
            return Err(RfpmError::Config(
                "all columns must share the same level count".into(),
            ));
        }
        for &l in &self.mask_levels {
            if l == 0 || l > levels {
                return Err(RfpmError::Config(format!(
                    "mask level {l} outside 1..={levels}"
                )));
            }
        }
        Ok(())
    }
}

fn parse_kinds(kinds: &str) -> Result<Vec<DownsamplerKind>> {
    let parts: Vec<&str> = kinds.split('/').collect();
    if parts.is_empty() || parts.len() > 3 {
        return Err(RfpmError::Config(format!(
            "column string '{kinds}' must have 1 to 3 entries"
        )));
    }
    parts
        .iter()
        .map(|p| {
            let mut chars = p.trim().chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => DownsamplerKind::from_char(c),
                _ => Err(RfpmError::Config(format!(
                    "column entry '{p}' must be a single letter"
                ))),
            }
        })
        .collect()
}

/// One column's feature maps; `levels[0]` is the input image, level `l`
/// sits at `1/2^l` of the input resolution.
pub struct FeaturePyramid {
    pub levels: Vec<Node>,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &Node {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

// ---------------------------------------------------------------------------
// downsampling blocks
// ---------------------------------------------------------------------------

fn check_kernel(weight: &Node, k: usize, what: &str) -> Result<()> {
    let s = weight.shape();
    if s.len() != 4 || s[2] != k || s[3] != k {
        return Err(RfpmError::Shape(format!(
            "{what} expects a {k}x{k} kernel, got shape {s:?}"
        )));
    }
    Ok(())
}

fn wfd_raw(input: &Node, weight: &Node, bias: &Node) -> Result<Node> {
    check_kernel(weight, 3, "wfd_down")?;
    input.conv2d(weight, bias, 2, 1)
}

fn mp_raw(input: &Node, weight: &Node, bias: &Node) -> Result<Node> {
    check_kernel(weight, 1, "mp_down")?;
    input.max_pool2x2()?.conv2d(weight, bias, 1, 0)
}

fn rfd_raw(
    input: &Node,
    k1_weight: &Node,
    k1_bias: &Node,
    k3_weight: &Node,
    k3_bias: &Node,
) -> Result<Node> {
    let mp = mp_raw(input, k1_weight, k1_bias)?;
    let wfd = wfd_raw(input, k3_weight, k3_bias)?;
    mp.add(&wfd)
}

/// Stride-2 3x3 convolution downsampling followed by leaky-relu.
pub fn wfd_down(input: &Node, weight: &Node, bias: &Node) -> Result<Node> {
    wfd_raw(input, weight, bias)?.leaky_relu(LEAKY_SLOPE)
}

/// 2x2 max pooling, 1x1 channel-mapping convolution, leaky-relu.
pub fn mp_down(input: &Node, weight: &Node, bias: &Node) -> Result<Node> {
    mp_raw(input, weight, bias)?.leaky_relu(LEAKY_SLOPE)
}

/// Residual downsampling: the max-pool branch plus the convolution branch,
/// activated after the sum.
pub fn rfd_down(
    input: &Node,
    k1_weight: &Node,
    k1_bias: &Node,
    k3_weight: &Node,
    k3_bias: &Node,
) -> Result<Node> {
    rfd_raw(input, k1_weight, k1_bias, k3_weight, k3_bias)?.leaky_relu(LEAKY_SLOPE)
}

/// Sigmoid attention mask (B,1,H,W) and additive bias mask (B,C_target,H,W)
/// computed from a source-column feature map by 1x1 convolutions.
pub fn make_repair_masks(
    source: &Node,
    att_weight: &Node,
    att_bias: &Node,
    bias_weight: &Node,
    bias_bias: &Node,
) -> Result<(Node, Node)> {
    check_kernel(att_weight, 1, "repair attention")?;
    check_kernel(bias_weight, 1, "repair bias")?;
    if att_weight.shape()[0] != 1 {
        return Err(RfpmError::Shape(format!(
            "attention conv must output 1 channel, got {}",
            att_weight.shape()[0]
        )));
    }
    let attention = source.conv2d(att_weight, att_bias, 1, 0)?.sigmoid();
    let bias = source.conv2d(bias_weight, bias_bias, 1, 0)?;
    Ok((attention, bias))
}

/// Gates a pre-activation map with the attention mask, adds the bias mask,
/// fuses with a stride-1 3x3 convolution and activates.
pub fn apply_repair(
    raw_target: &Node,
    attention: &Node,
    bias: &Node,
    fuse_weight: &Node,
    fuse_bias: &Node,
) -> Result<Node> {
    check_kernel(fuse_weight, 3, "repair fuse")?;
    raw_target
        .mul(attention)?
        .add(bias)?
        .conv2d(fuse_weight, fuse_bias, 1, 1)?
        .leaky_relu(LEAKY_SLOPE)
}

// ---------------------------------------------------------------------------
// parameter initialization and the full builder
// ---------------------------------------------------------------------------

/// Registers all pyramid and repair-mask parameters for `config`.
///
/// Weights are uniform in `±sqrt(1/(in_channels*kh*kw))`, drawn in a fixed
/// order (columns outer, levels inner, then masks) from `rng`.
pub fn init_pyramid_params<R: Rng>(
    config: &RfpmConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    use crate::autodiff::Conv2dParams;
    for (c, col) in config.columns.iter().enumerate() {
        let mut in_c = IMG_CHANNELS;
        for (i, (&out_c, kind)) in col.channels.iter().zip(&col.kinds).enumerate() {
            let lvl = i + 1;
            let prefix = format!("pyr.c{c}.l{lvl}");
            match kind {
                DownsamplerKind::Wfd => {
                    store.insert_conv(&format!("{prefix}.k3"), Conv2dParams::init(out_c, in_c, 3, 2, 1, rng))?;
                }
                DownsamplerKind::Mp => {
                    store.insert_conv(&format!("{prefix}.k1"), Conv2dParams::init(out_c, in_c, 1, 1, 0, rng))?;
                }
                DownsamplerKind::Rfd => {
                    store.insert_conv(&format!("{prefix}.k1"), Conv2dParams::init(out_c, in_c, 1, 1, 0, rng))?;
                    store.insert_conv(&format!("{prefix}.k3"), Conv2dParams::init(out_c, in_c, 3, 2, 1, rng))?;
                }
            }
            in_c = out_c;
        }
    }
    for c in 1..config.columns.len() {
        for &lvl in &config.mask_levels {
            let src_c = config.columns[c - 1].channels[lvl - 1];
            let tgt_c = config.columns[c].channels[lvl - 1];
            let prefix = format!("mask.c{c}.l{lvl}");
            store.insert_conv(&format!("{prefix}.att"), Conv2dParams::init(1, src_c, 1, 1, 0, rng))?;
            store.insert_conv(&format!("{prefix}.bias"), Conv2dParams::init(tgt_c, src_c, 1, 1, 0, rng))?;
            store.insert_conv(&format!("{prefix}.fuse"), Conv2dParams::init(tgt_c, tgt_c, 3, 1, 1, rng))?;
        }
    }
    Ok(())
}

/// Builds every column's pyramid for one image (or one image per column
/// when chromatic variants differ).
///
/// `images` must hold either a single (B,3,H,W) node shared by all columns
/// or exactly one node per column; H and W must be divisible by
/// `2^levels`.
pub fn build_rfpm(
    images: &[Node],
    config: &RfpmConfig,
    params: &ParamNodes,
) -> Result<Vec<FeaturePyramid>> {
    config.validate()?;
    let ncols = config.columns.len();
    if images.is_empty() || (images.len() != 1 && images.len() != ncols) {
        return Err(RfpmError::Config(format!(
            "build_rfpm needs 1 or {ncols} images, got {}",
            images.len()
        )));
    }
    let levels = config.levels();
    let div = 1usize << levels;
    for img in images {
        let s = img.shape();
        if s.len() != 4 || s[1] != IMG_CHANNELS {
            return Err(RfpmError::Shape(format!(
                "pyramid input must be (B,{IMG_CHANNELS},H,W), got {s:?}"
            )));
        }
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(RfpmError::Shape(format!(
                "input {}x{} not divisible by 2^{levels}; pad beforehand",
                s[2], s[3]
            )));
        }
    }
    let mut columns: Vec<Vec<Node>> = (0..ncols)
        .map(|c| vec![images[if images.len() == 1 { 0 } else { c }].clone()])
        .collect();
    for lvl in 1..=levels {
        for c in 0..ncols {
            let prev = columns[c][lvl - 1].clone();
            let prefix = format!("pyr.c{c}.l{lvl}");
            let raw = match config.columns[c].kinds[lvl - 1] {
                DownsamplerKind::Wfd => {
                    let (w, b) = params.conv(&format!("{prefix}.k3"))?;
                    wfd_raw(&prev, &w, &b)?
                }
                DownsamplerKind::Mp => {
                    let (w, b) = params.conv(&format!("{prefix}.k1"))?;
                    mp_raw(&prev, &w, &b)?
                }
                DownsamplerKind::Rfd => {
                    let (w1, b1) = params.conv(&format!("{prefix}.k1"))?;
                    let (w3, b3) = params.conv(&format!("{prefix}.k3"))?;
                    rfd_raw(&prev, &w1, &b1, &w3, &b3)?
                }
            };
            let out = if c > 0 && config.mask_levels.contains(&lvl) {
                let source = columns[c - 1][lvl].clone();
                let mask_prefix = format!("mask.c{c}.l{lvl}");
                let (aw, ab) = params.conv(&format!("{mask_prefix}.att"))?;
                let (bw, bb) = params.conv(&format!("{mask_prefix}.bias"))?;
                let (fw, fb) = params.conv(&format!("{mask_prefix}.fuse"))?;
                let (attention, bias) = make_repair_masks(&source, &aw, &ab, &bw, &bb)?;
                apply_repair(&raw, &attention, &bias, &fw, &fb)?
            } else {
                raw.leaky_relu(LEAKY_SLOPE)?
            };
            columns[c].push(out);
        }
    }
    Ok(columns
        .into_iter()
        .map(|levels| FeaturePyramid { levels })
        .collect())
}

/// Channel concatenation of one level across columns, left to right.
/// A single column fuses to itself.
pub fn fuse_level(pyramids: &[FeaturePyramid], level: usize) -> Result<Node> {
    if pyramids.is_empty() {
        return Err(RfpmError::Config("fuse_level with no pyramids".into()));
    }
    for p in pyramids {
        if level >= p.num_levels() {
            return Err(RfpmError::Shape(format!(
                "level {level} out of range for a {}-level pyramid",
                p.num_levels()
            )));
        }
    }
    if pyramids.len() == 1 {
        return Ok(pyramids[0].level(level).clone());
    }
    let nodes: Vec<Node> = pyramids.iter().map(|p| p.level(level).clone()).collect();
    let tape = tape_of(&nodes[0]);
    tape.concat_channels(&nodes)
}

fn tape_of(node: &Node) -> Tape {
    node.tape_handle()
}
