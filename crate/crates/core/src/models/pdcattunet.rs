//! Causal attention U-Net with a d-vector conditioned transformer-style
//! bottleneck.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::embedding::DVECTOR_DIM;
use crate::error::{PseError, Result};
use crate::nn::{
    max_pool_freq, upsample_freq, BatchNorm, CausalConv1d, Conv2d, LayerNorm, Linear, Mode, MultiHeadAttention, PRelu,
    VarStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdcattunetConfig {
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    /// `(freq, time)`, shared by every 2-D convolution in the blocks.
    pub kernel: (usize, usize),
    pub bottleneck_hidden: usize,
    /// Time kernel of the bottleneck 1-D convolutions.
    pub bottleneck_kernel: usize,
    pub num_heads: usize,
    pub num_bottleneck_blocks: usize,
    pub pool_factor: usize,
    pub dvector_dim: usize,
    pub bins: usize,
}

impl Default for PdcattunetConfig {
    fn default() -> Self {
        Self {
            encoder_filters: vec![32, 64, 128, 128, 128, 128],
            decoder_filters: vec![128, 128, 128, 64, 32, 16],
            kernel: (3, 2),
            bottleneck_hidden: 128,
            bottleneck_kernel: 3,
            num_heads: 4,
            num_bottleneck_blocks: 2,
            pool_factor: 2,
            dvector_dim: DVECTOR_DIM,
            bins: 256,
        }
    }
}

impl PdcattunetConfig {
    pub fn small() -> Self {
        Self {
            encoder_filters: vec![8, 16, 32, 32],
            decoder_filters: vec![32, 16, 8, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_filters.len();
        if n == 0 || self.decoder_filters.len() != n {
            return Err(PseError::Config("pdcattunet needs equally many (non-zero) encoder and decoder stages".into()));
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|&c| c == 0) {
            return Err(PseError::Config("pdcattunet filter counts must be positive".into()));
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 == 0 || self.bottleneck_kernel == 0 {
            return Err(PseError::Config("pdcattunet frequency kernel must be odd and time kernels non-zero".into()));
        }
        if self.pool_factor < 2 {
            return Err(PseError::Config("pool factor must be at least 2".into()));
        }
        let total = self.pool_factor.pow(n as u32);
        if self.bins % total != 0 {
            return Err(PseError::Config(format!("{} bins not divisible by pool factor^{n} = {total}", self.bins)));
        }
        for bins in self.attention_dims() {
            if self.num_heads == 0 || bins % self.num_heads != 0 {
                return Err(PseError::Config(format!("attention dim {bins} not divisible by {} heads", self.num_heads)));
            }
        }
        if self.bottleneck_hidden % self.num_heads != 0 {
            return Err(PseError::Config(format!(
                "bottleneck hidden {} not divisible by {} heads",
                self.bottleneck_hidden, self.num_heads
            )));
        }
        Ok(())
    }

    /// Frequency size at every attention site, encoder then decoder.
    fn attention_dims(&self) -> Vec<usize> {
        let n = self.encoder_filters.len() as u32;
        let enc = (1..=n).map(|i| self.bins / self.pool_factor.pow(i));
        let dec = (0..n).rev().map(|i| self.bins / self.pool_factor.pow(i));
        enc.chain(dec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Max-pools the frequency axis.
    Encoder,
    /// Nearest-neighbour upsamples the frequency axis.
    Decoder,
}

struct ConvUnit {
    conv: Conv2d,
    act: PRelu,
    bn: BatchNorm,
}

impl ConvUnit {
    fn new(vs: &mut VarStore, name: &str, c_in: usize, c_out: usize, kernel: (usize, usize)) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(vs, &format!("{name}.conv"), c_in, c_out, kernel)?,
            act: PRelu::new(vs, &format!("{name}.act"), c_out)?,
            bn: BatchNorm::new(vs, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.act.forward(&y, 1)?;
        self.bn.forward(&y, mode)
    }
}

/// Conv block, frequency resampling, a 3-channel conv block read as Q/K/V,
/// causal attention over time, then a conv block over the attention output
/// stacked onto the resampled first-block output.
pub struct AttentionConvBlock {
    kind: BlockKind,
    factor: usize,
    first: ConvUnit,
    qkv: ConvUnit,
    attn: MultiHeadAttention,
    norm: LayerNorm,
    last: ConvUnit,
}

impl AttentionConvBlock {
    /// `attn_dim` is the frequency size after resampling.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        factor: usize,
        attn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            factor,
            first: ConvUnit::new(vs, &format!("{name}.first"), c_in, c_out, kernel)?,
            qkv: ConvUnit::new(vs, &format!("{name}.qkv"), c_out, 3, kernel)?,
            attn: MultiHeadAttention::new(vs, &format!("{name}.attn"), attn_dim, heads)?,
            norm: LayerNorm::new(vs, &format!("{name}.norm"), attn_dim)?,
            last: ConvUnit::new(vs, &format!("{name}.last"), c_out + 1, c_out, kernel)?,
        })
    }

    /// `[B, C_in, T, F]` -> `[B, C_out, T, F / factor]` (encoder) or
    /// `[B, C_out, T, F * factor]` (decoder).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.first.forward(x, mode)?;
        let h = match self.kind {
            BlockKind::Encoder => max_pool_freq(&h, self.factor)?,
            BlockKind::Decoder => upsample_freq(&h, self.factor)?,
        };
        let qkv = self.qkv.forward(&h, mode)?;
        let pick = |c: usize| -> Result<Tensor> { Ok(qkv.narrow(1, c, 1)?.squeeze(1)?.contiguous()?) };
        let a = self.attn.forward(&pick(0)?, &pick(1)?, &pick(2)?)?;
        let a = self.norm.forward(&a)?.unsqueeze(1)?;
        self.last.forward(&Tensor::cat(&[&a, &h], 1)?, mode)
    }
}

/// Sequence block on `[B, T, H]`.
pub struct BottleneckBlock {
    conv1: CausalConv1d,
    act1: PRelu,
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    conv2: CausalConv1d,
    act2: PRelu,
    norm3: LayerNorm,
}

impl BottleneckBlock {
    pub fn new(vs: &mut VarStore, name: &str, hidden: usize, heads: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: CausalConv1d::new(vs, &format!("{name}.conv1"), hidden, hidden, kernel)?,
            act1: PRelu::new(vs, &format!("{name}.act1"), hidden)?,
            norm1: LayerNorm::new(vs, &format!("{name}.norm1"), hidden)?,
            attn: MultiHeadAttention::new(vs, &format!("{name}.attn"), hidden, heads)?,
            norm2: LayerNorm::new(vs, &format!("{name}.norm2"), hidden)?,
            conv2: CausalConv1d::new(vs, &format!("{name}.conv2"), hidden, hidden, kernel)?,
            act2: PRelu::new(vs, &format!("{name}.act2"), hidden)?,
            norm3: LayerNorm::new(vs, &format!("{name}.norm3"), hidden)?,
        })
    }

    fn conv(conv: &CausalConv1d, x: &Tensor) -> Result<Tensor> {
        Ok(conv.forward(&x.transpose(1, 2)?.contiguous()?)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.act1.forward(&Self::conv(&self.conv1, x)?, 2)?)?;
        let z = (self.norm2.forward(&self.attn.forward(&y, &y, &y)?)? + &y)?;
        let w = self.act2.forward(&Self::conv(&self.conv2, &z)?, 2)?;
        self.norm3.forward(&(w + x)?)
    }
}

pub struct Pdcattunet {
    cfg: PdcattunetConfig,
    encoder: Vec<AttentionConvBlock>,
    proj_in: Linear,
    bottleneck: Vec<BottleneckBlock>,
    proj_out: Linear,
    decoder: Vec<AttentionConvBlock>,
    head: Conv2d,
}

impl Pdcattunet {
    pub fn new(vs: &mut VarStore, cfg: &PdcattunetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.encoder_filters.len();
        let dims = cfg.attention_dims();
        let mut encoder = Vec::with_capacity(n);
        let mut c_in = 2;
        for (i, &c_out) in cfg.encoder_filters.iter().enumerate() {
            encoder.push(AttentionConvBlock::new(
                vs,
                &format!("enc{i}"),
                BlockKind::Encoder,
                c_in,
                c_out,
                cfg.kernel,
                cfg.pool_factor,
                dims[i],
                cfg.num_heads,
            )?);
            c_in = c_out;
        }

        let c_last = cfg.encoder_filters[n - 1];
        let flat = c_last * (cfg.bins / cfg.pool_factor.pow(n as u32));
        let proj_in = Linear::new(vs, "bottleneck.proj_in", flat + cfg.dvector_dim, cfg.bottleneck_hidden)?;
        let bottleneck = (0..cfg.num_bottleneck_blocks)
            .map(|i| {
                BottleneckBlock::new(vs, &format!("bottleneck.block{i}"), cfg.bottleneck_hidden, cfg.num_heads, cfg.bottleneck_kernel)
            })
            .collect::<Result<Vec<_>>>()?;
        let proj_out = Linear::new(vs, "bottleneck.proj_out", cfg.bottleneck_hidden, flat)?;

        let mut decoder = Vec::with_capacity(n);
        let mut prev = c_last;
        for (i, &c_out) in cfg.decoder_filters.iter().enumerate() {
            let skip = cfg.encoder_filters[n - 1 - i];
            decoder.push(AttentionConvBlock::new(
                vs,
                &format!("dec{i}"),
                BlockKind::Decoder,
                prev + skip,
                c_out,
                cfg.kernel,
                cfg.pool_factor,
                dims[n + i],
                cfg.num_heads,
            )?);
            prev = c_out;
        }
        let head = Conv2d::new(vs, "head", prev, 2, (1, 1))?;
        Ok(Self { cfg: cfg.clone(), encoder, proj_in, bottleneck, proj_out, decoder, head })
    }

    /// `features [B, 2, T, F]`, `dvec [B, D]` -> mask `[B, 2, T, F]`.
    pub fn forward(&self, features: &Tensor, dvec: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, _, t, _) = features.dims4()?;
        let mut x = features.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(&x, mode)?;
            skips.push(x.clone());
        }

        let (_, c, _, f) = x.dims4()?;
        let flat = x.permute((0, 2, 1, 3))?.reshape((b, t, c * f))?;
        let d = dvec.unsqueeze(1)?.broadcast_as((b, t, self.cfg.dvector_dim))?.contiguous()?;
        let mut h = self.proj_in.forward(&Tensor::cat(&[&flat, &d], 2)?)?;
        for block in &self.bottleneck {
            h = block.forward(&h)?;
        }
        x = self.proj_out.forward(&h)?.reshape((b, t, c, f))?.permute((0, 2, 1, 3))?.contiguous()?;

        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = block.forward(&Tensor::cat(&[&x, skip], 1)?, mode)?;
        }
        self.head.forward(&x)
    }
}
