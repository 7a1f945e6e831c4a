//! Full U-shaped assembly: stem, four selective-scan stages with three
//! stride-2 downsamplers between them, then a convolutional decoder that
//! refuses each encoder scale through gated fusion and emits class logits
//! at input resolution.

use rand::Rng;

use crate::agf::{agf_forward, AgfParams};
use crate::autodiff::{Tape, VarId};
use crate::blocks::{
    block_forward, pointwise, register_downsample, same3, stem_forward, Activation, BlockConfig,
    BlockParams, ConvParams, NormParams, StemParams,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Architecture hyperparameters. `patch` is the training crop size; forward
/// accepts any spatial dims divisible by 16 (stem plus three downsamplers).
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub d_state: usize,
    pub patch: [usize; 3],
    pub activation: Activation,
    pub precision: Precision,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            num_classes: 4,
            channels: [48, 96, 192, 384],
            blocks_per_stage: 2,
            heads: 4,
            d_state: 16,
            patch: [32, 32, 32],
            activation: Activation::Relu,
            precision: Precision::F32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 {
            return Err(Error::config(format!(
                "network expects the 4 stacked modalities, got in_channels {}",
                self.in_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.channels[0] != 48 {
            return Err(Error::config(format!(
                "stem embeds 48 channels, channel schedule starts at {}",
                self.channels[0]
            )));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 || c % 4 != 0 {
                return Err(Error::config(format!(
                    "stage {} width {c} must divide into {} heads and 4 fusion groups",
                    i + 1,
                    self.heads
                )));
            }
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage must be at least 1".to_string()));
        }
        if self.d_state == 0 {
            return Err(Error::config("d_state must be at least 1".to_string()));
        }
        for &p in &self.patch {
            if p == 0 || p % 16 != 0 {
                return Err(Error::config(format!(
                    "patch dim {p} not divisible by 16 (stem plus three downsamplers)"
                )));
            }
        }
        Ok(())
    }

    fn block_cfg(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels[stage],
            heads: self.heads,
            d_state: self.d_state,
            activation: self.activation,
        }
    }
}

/// One decoder scale: channel-halving projection after the upsample, gated
/// fusion with the encoder skip, then two conv+IN+ReLU refinements. The 3^3
/// convs are bias-free because the following instance norm would cancel any
/// bias anyway.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub proj: ConvParams,
    pub fuse: AgfParams,
    pub conv1: ConvParams,
    pub norm1: NormParams,
    pub conv2: ConvParams,
    pub norm2: NormParams,
}

impl DecoderStage {
    fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        c_hi: usize,
        c_lo: usize,
    ) -> Result<Self> {
        Ok(DecoderStage {
            proj: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.proj"),
                c_lo,
                c_hi,
                1,
                pointwise(),
                true,
            )?,
            fuse: AgfParams::register(store, rng, &format!("{prefix}.agf"), c_lo)?,
            conv1: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.conv1"),
                c_lo,
                c_lo,
                3,
                same3(),
                false,
            )?,
            norm1: NormParams::register(store, &format!("{prefix}.norm1"), c_lo)?,
            conv2: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.conv2"),
                c_lo,
                c_lo,
                3,
                same3(),
                false,
            )?,
            norm2: NormParams::register(store, &format!("{prefix}.norm2"), c_lo)?,
        })
    }
}

pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: StemParams,
    pub stages: Vec<Vec<BlockParams>>,
    pub downs: Vec<ConvParams>,
    /// Deep to shallow: decoder[0] fuses the stage-3 skip, decoder[2] stage-1.
    pub decoder: Vec<DecoderStage>,
    pub head: ConvParams,
}

impl Network {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &NetworkConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = StemParams::register(store, rng, "stem", cfg.in_channels, cfg.channels[0])?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                blocks.push(BlockParams::register(
                    store,
                    rng,
                    &format!("stage{}.block{b}", s + 1),
                    &cfg.block_cfg(s),
                )?);
            }
            stages.push(blocks);
        }
        let mut downs = Vec::with_capacity(3);
        for s in 0..3 {
            downs.push(register_downsample(
                store,
                rng,
                &format!("down{}", s + 1),
                cfg.channels[s],
                cfg.channels[s + 1],
            )?);
        }
        let mut decoder = Vec::with_capacity(3);
        for s in (0..3).rev() {
            decoder.push(DecoderStage::register(
                store,
                rng,
                &format!("dec{}", s + 1),
                cfg.channels[s + 1],
                cfg.channels[s],
            )?);
        }
        let head = ConvParams::register(
            store,
            rng,
            "head",
            cfg.num_classes,
            cfg.channels[0],
            1,
            pointwise(),
            true,
        )?;
        Ok(Network { cfg: cfg.clone(), stem, stages, downs, decoder, head })
    }

    /// Runs the stem and the four stages, returning each stage's output.
    /// The last entry is the deepest feature the decoder starts from.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<[VarId; 4]> {
        let shape = tape.value(x).shape();
        if shape[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "network",
                format!("expected {} input channels, got {}", self.cfg.in_channels, shape[1]),
            ));
        }
        for &dim in &shape[2..] {
            if dim == 0 || dim % 16 != 0 {
                return Err(Error::shape(
                    "network",
                    format!("spatial dim {dim} not divisible by 16"),
                ));
            }
        }
        let mut cur = stem_forward(tape, store, &self.stem, x)?;
        let mut outs = [cur; 4];
        for s in 0..4 {
            let cfg = self.cfg.block_cfg(s);
            for block in &self.stages[s] {
                cur = block_forward(tape, store, block, &cfg, cur)?;
            }
            outs[s] = cur;
            if s < 3 {
                cur = self.downs[s].forward(tape, store, cur)?;
            }
        }
        Ok(outs)
    }

    /// Full pass to class logits at input resolution.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<VarId> {
        let skips = self.encode(tape, store, x)?;
        let mut cur = skips[3];
        for (i, dec) in self.decoder.iter().enumerate() {
            let up = tape.upsample_trilinear_2x(cur)?;
            let proj = dec.proj.forward(tape, store, up)?;
            let fused = agf_forward(tape, store, &dec.fuse, skips[2 - i], proj)?;
            let c1 = dec.conv1.forward(tape, store, fused)?;
            let n1 = dec.norm1.instance_norm(tape, store, c1)?;
            let a1 = tape.relu(n1)?;
            let c2 = dec.conv2.forward(tape, store, a1)?;
            let n2 = dec.norm2.instance_norm(tape, store, c2)?;
            cur = tape.relu(n2)?;
        }
        let up = tape.upsample_trilinear_2x(cur)?;
        self.head.forward(tape, store, up)
    }
}

/// Per-module scalar counts (two dotted name segments per row) plus the
/// grand total. Every leaf lands in exactly one row, so the rows sum to
/// the total by construction; tests re-derive both from scratch.
pub fn parameter_report<T: Scalar>(store: &ParamStore<T>) -> (Vec<(String, usize)>, usize) {
    (store.count_by_prefix(2), store.total_scalars())
}
