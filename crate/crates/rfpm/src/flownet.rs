//! Shared-weight coarse-to-fine iterative-refinement flow estimator.
//!
//! Both frames run through the same pyramid parameters. At each prediction
//! level the current flow warps the frame-t+1 features, a windowed
//! correlation scores the match, and a small shared decoder (three 3x3
//! convolutions) turns cost volume + adapted features + flow into a flow
//! delta. Moving one level finer upsamples the flow and doubles it.
//!
//! Fused feature maps change channel width per level and per column count,
//! so a per-column, per-level 1x1 adapter maps each column to a fixed width
//! before the shared decoder; adapter outputs are summed. This keeps the
//! decoder weights identical across levels and across 1- and 3-column
//! models, which is what makes checkpoint transfer between them possible.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dParams, Node, LEAKY_SLOPE};
use crate::config::{rfpm_from_kv, rfpm_to_kv, KvConfig};
use crate::error::{Result, RfpmError};
use crate::matching::cost_volume;
use crate::metrics_io::atomic_write;
use crate::params::{ParamNodes, ParamStore};
use crate::pyramid::{build_rfpm, fuse_level, init_pyramid_params, FeaturePyramid, RfpmConfig};
use crate::tensor::Tensor;

/// Width every column is adapted to before entering the shared decoder.
pub const ADAPT_CHANNELS: usize = 32;

/// Hidden width of the decoder convolutions.
pub const DECODER_HIDDEN: usize = 32;

/// The three shared stride-1 3x3 decoder convolutions.
///
/// Input channels are cost-volume channels + adapted features + 2 flow
/// channels; the last convolution outputs exactly 2 channels (the delta).
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub conv3: Conv2dParams,
}

impl DecoderParams {
    pub fn init<R: Rng>(corr_radius: usize, rng: &mut R) -> Self {
        let k = 2 * corr_radius + 1;
        let in_c = k * k + ADAPT_CHANNELS + 2;
        Self {
            conv1: Conv2dParams::init(DECODER_HIDDEN, in_c, 3, 1, 1, rng),
            conv2: Conv2dParams::init(DECODER_HIDDEN, DECODER_HIDDEN, 3, 1, 1, rng),
            conv3: Conv2dParams::init(2, DECODER_HIDDEN, 3, 1, 1, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv3.weight.shape()[0] != 2 {
            return Err(RfpmError::Config(
                "decoder must output exactly 2 channels".into(),
            ));
        }
        Ok(())
    }
}

/// Full estimator description: pyramid, correlation window and the
/// coarse-to-fine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub rfpm: RfpmConfig,
    /// Correlation displacement radius in pixels.
    pub corr_radius: usize,
    /// Divide correlation dot products by the channel count.
    pub corr_normalize: bool,
    /// Prediction levels, coarsest first, consecutive (for example `3,2,1`).
    pub pred_levels: Vec<usize>,
    /// Refinement iterations per level.
    pub iters_per_level: usize,
}

impl EstimatorConfig {
    pub fn new(rfpm: RfpmConfig) -> Self {
        let coarsest = rfpm.levels().min(3);
        Self {
            rfpm,
            corr_radius: crate::matching::DEFAULT_CORR_RADIUS,
            corr_normalize: true,
            pred_levels: (1..=coarsest).rev().collect(),
            iters_per_level: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rfpm.validate()?;
        if self.pred_levels.is_empty() {
            return Err(RfpmError::Config("no prediction levels".into()));
        }
        let levels = self.rfpm.levels();
        for (i, &l) in self.pred_levels.iter().enumerate() {
            if l == 0 || l > levels {
                return Err(RfpmError::Config(format!(
                    "prediction level {l} outside 1..={levels}"
                )));
            }
            if i > 0 && self.pred_levels[i - 1] != l + 1 {
                return Err(RfpmError::Config(
                    "prediction levels must be consecutive, coarse to fine".into(),
                ));
            }
        }
        if self.iters_per_level == 0 {
            return Err(RfpmError::Config(
                "iters_per_level must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Finest prediction level (the last entry).
    pub fn finest_level(&self) -> usize {
        *self.pred_levels.last().unwrap()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        rfpm_to_kv(&self.rfpm, &mut kv);
        kv.set("corr_radius", self.corr_radius);
        kv.set("corr_normalize", self.corr_normalize);
        kv.set(
            "pred_levels",
            self.pred_levels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("iters_per_level", self.iters_per_level);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let rfpm = rfpm_from_kv(kv)?;
        let mut cfg = Self::new(rfpm);
        cfg.corr_radius = kv.get_or("corr_radius", cfg.corr_radius)?;
        cfg.corr_normalize = kv.get_or("corr_normalize", cfg.corr_normalize)?;
        if let Some(levels) = kv.get_list::<usize>("pred_levels")? {
            cfg.pred_levels = levels;
        }
        cfg.iters_per_level = kv.get_or("iters_per_level", cfg.iters_per_level)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Initializes every model parameter (pyramid, masks, adapters, decoder)
/// from the config's seed.
pub fn init_model_params(config: &EstimatorConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rfpm.seed);
    init_pyramid_params(&config.rfpm, &mut store, &mut rng)?;
    for (c, col) in config.rfpm.columns.iter().enumerate() {
        for &lvl in &config.pred_levels {
            let in_c = col.channels[lvl - 1];
            store.insert_conv(
                &format!("dec.adapt.c{c}.l{lvl}"),
                Conv2dParams::init(ADAPT_CHANNELS, in_c, 1, 1, 0, &mut rng),
            )?;
        }
    }
    let dec = DecoderParams::init(config.corr_radius, &mut rng);
    dec.validate()?;
    store.insert_conv("dec.conv1", dec.conv1)?;
    store.insert_conv("dec.conv2", dec.conv2)?;
    store.insert_conv("dec.conv3", dec.conv3)?;
    Ok(store)
}

/// Bilinear 2x upsampling of a flow field with pixel-unit rescaling.
pub fn upscale_flow(flow: &Node) -> Result<Node> {
    Ok(flow.upsample2x()?.scale(2.0))
}

/// Upsamples a finest-level prediction back to full resolution.
pub fn flow_to_full_res(flow: &Node, level: usize) -> Result<Node> {
    let mut cur = flow.clone();
    for _ in 0..level {
        cur = upscale_flow(&cur)?;
    }
    Ok(cur)
}

/// Estimates flow from frame pairs.
///
/// `frames` holds one `(I_t, I_t1)` pair per pyramid column (chromatic
/// variants), or a single pair shared by all columns. Returns one flow per
/// prediction level in level-l pixel units, finest last.
pub fn estimate(
    frames: &[(Node, Node)],
    params: &ParamNodes,
    config: &EstimatorConfig,
) -> Result<Vec<Node>> {
    config.validate()?;
    if frames.is_empty() {
        return Err(RfpmError::Config("estimate with no frames".into()));
    }
    let imgs_t: Vec<Node> = frames.iter().map(|(a, _)| a.clone()).collect();
    let imgs_t1: Vec<Node> = frames.iter().map(|(_, b)| b.clone()).collect();
    let pyrs_t = build_rfpm(&imgs_t, &config.rfpm, params)?;
    let pyrs_t1 = build_rfpm(&imgs_t1, &config.rfpm, params)?;
    estimate_from_pyramids(&pyrs_t, &pyrs_t1, params, config)
}

/// Single shared image pair convenience wrapper.
pub fn estimate_pair(
    img_t: &Node,
    img_t1: &Node,
    params: &ParamNodes,
    config: &EstimatorConfig,
) -> Result<Vec<Node>> {
    estimate(&[(img_t.clone(), img_t1.clone())], params, config)
}

fn estimate_from_pyramids(
    pyrs_t: &[FeaturePyramid],
    pyrs_t1: &[FeaturePyramid],
    params: &ParamNodes,
    config: &EstimatorConfig,
) -> Result<Vec<Node>> {
    let tape = pyrs_t[0].level(0).tape_handle();
    let (dw1, db1) = params.conv("dec.conv1")?;
    let (dw2, db2) = params.conv("dec.conv2")?;
    let (dw3, db3) = params.conv("dec.conv3")?;

    let coarsest = config.pred_levels[0];
    let cshape = pyrs_t[0].level(coarsest).shape();
    let mut flow = tape.leaf(Tensor::zeros(&[cshape[0], 2, cshape[2], cshape[3]]));

    let mut outputs = Vec::with_capacity(config.pred_levels.len());
    for (i, &lvl) in config.pred_levels.iter().enumerate() {
        let fused_t = fuse_level(pyrs_t, lvl)?;
        let fused_t1 = fuse_level(pyrs_t1, lvl)?;
        // per-column adapters summed into a fixed-width feature map
        let mut feat: Option<Node> = None;
        for c in 0..pyrs_t.len() {
            let (aw, ab) = params.conv(&format!("dec.adapt.c{c}.l{lvl}"))?;
            let a = pyrs_t[c].level(lvl).conv2d(&aw, &ab, 1, 0)?;
            feat = Some(match feat {
                None => a,
                Some(acc) => acc.add(&a)?,
            });
        }
        let feat = feat.unwrap().leaky_relu(LEAKY_SLOPE)?;
        for _ in 0..config.iters_per_level {
            let cv = cost_volume(
                &fused_t,
                &fused_t1,
                &flow,
                config.corr_radius,
                config.corr_normalize,
            )?;
            let dec_in = tape.concat_channels(&[cv, feat.clone(), flow.clone()])?;
            let h1 = dec_in.conv2d(&dw1, &db1, 1, 1)?.leaky_relu(LEAKY_SLOPE)?;
            let h2 = h1.conv2d(&dw2, &db2, 1, 1)?.leaky_relu(LEAKY_SLOPE)?;
            let delta = h2.conv2d(&dw3, &db3, 1, 1)?;
            flow = flow.add(&delta)?;
        }
        outputs.push(flow.clone());
        if i + 1 < config.pred_levels.len() {
            flow = upscale_flow(&flow)?;
        }
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".cfg");
    path.with_file_name(name)
}

/// Writes a flat binary container of named tensors plus a text sidecar
/// (`<path>.cfg`) holding the estimator config.
///
/// Layout: u32 tensor count, then per tensor (sorted by name): u32 name
/// length, UTF-8 name, u32 rank, u32 dims, raw little-endian f64 values.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &EstimatorConfig) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)?;
    atomic_write(&sidecar_path(path), config.to_kv().to_text().as_bytes())
}

fn read_u32(bytes: &[u8], off: &mut usize) -> Result<u32> {
    if *off + 4 > bytes.len() {
        return Err(RfpmError::Load("checkpoint truncated".into()));
    }
    let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
    *off += 4;
    Ok(v)
}

/// Reads the raw tensor container without validating against a config.
pub fn read_checkpoint_tensors(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let mut off = 0usize;
    let count = read_u32(&bytes, &mut off)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&bytes, &mut off)? as usize;
        if off + name_len > bytes.len() {
            return Err(RfpmError::Load("checkpoint truncated in name".into()));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| RfpmError::Load("checkpoint name is not UTF-8".into()))?
            .to_string();
        off += name_len;
        let rank = read_u32(&bytes, &mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&bytes, &mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + numel * 8 > bytes.len() {
            return Err(RfpmError::Load(format!(
                "checkpoint truncated in tensor {name}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        store.insert(&name, Tensor::new(&shape, data)?)?;
    }
    if off != bytes.len() {
        return Err(RfpmError::Load("trailing bytes in checkpoint".into()));
    }
    Ok(store)
}

/// Loads a full model: the tensor container plus the config sidecar.
/// Validates that names and shapes agree exactly with a fresh
/// initialization of the sidecar config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, EstimatorConfig)> {
    let sidecar = sidecar_path(path);
    let cfg_text = fs::read_to_string(&sidecar).map_err(|e| {
        RfpmError::Load(format!("cannot read sidecar {}: {e}", sidecar.display()))
    })?;
    let config = EstimatorConfig::from_kv(&KvConfig::parse(&cfg_text)?)?;
    let store = read_checkpoint_tensors(path)?;
    let reference = init_model_params(&config)?;
    if store.len() != reference.len() {
        return Err(RfpmError::Load(format!(
            "checkpoint has {} tensors, config expects {}",
            store.len(),
            reference.len()
        )));
    }
    for (name, tensor) in reference.iter() {
        let loaded = store
            .get(name)
            .map_err(|_| RfpmError::Load(format!("checkpoint missing parameter {name}")))?;
        if loaded.shape() != tensor.shape() {
            return Err(RfpmError::Load(format!(
                "parameter {name}: checkpoint shape {:?} != expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
    }
    Ok((store, config))
}

/// Copies checkpoint tensors into an existing (larger) model. Every
/// checkpoint name must exist in the target with a matching shape; names
/// absent from the checkpoint keep their current values.
pub fn load_checkpoint_into(target: &mut ParamStore, path: &Path) -> Result<usize> {
    let loaded = read_checkpoint_tensors(path)?;
    for (name, tensor) in loaded.iter() {
        if !target.contains(name) {
            return Err(RfpmError::Load(format!(
                "checkpoint parameter {name} does not exist in the target model"
            )));
        }
        let dst = target.get(name)?;
        if dst.shape() != tensor.shape() {
            return Err(RfpmError::Load(format!(
                "parameter {name}: checkpoint shape {:?} != target {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
    }
    let n = loaded.len();
    for (name, tensor) in loaded.iter() {
        target.set(name, tensor.clone())?;
    }
    Ok(n)
}
