//! The hierarchical VAE: encoder, decoder with nine latent blocks, and the
//! compress / decompress entry points.
//!
//! Stage `s` runs at resolution `H / 2^(s+2)`, so stage 0 is `H/4` and stage 3
//! is `H/32`. The encoder walks stages 0 to 3, the decoder walks 3 to 0.
//!
//! Feature taps, in order:
//!
//! | tap | point                               | stage |
//! |-----|-------------------------------------|-------|
//! | F1  | stem output                         | 0     |
//! | F2  | first wavelet down output           | 1     |
//! | F3  | second wavelet down output          | 2     |
//! | F4  | third wavelet down output           | 3     |
//! | F5  | input of the first wavelet up       | 3     |
//! | F6  | input of the second wavelet up      | 2     |
//! | F7  | input of the third wavelet up       | 1     |
//! | F8  | input of the final 1x1 + shuffle    | 0     |
//!
//! Latent symbols are coded latent by latent in decoding order (z1 first),
//! and within a latent in NCHW raster order.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BConvNeXt, CrossAttention, LambdaEmbedNet, LambdaEmbedding, ATTENTION_HEADS};
use crate::entropy::{Bitstream, RansDecoder, RansEncoder, TableCache};
use crate::error::{dim_err, Error, Result};
use crate::latent::{host_f64, LatentBlock, LatentInput, LatentMode, LatentRecord, Variant};
use crate::nn::{depth_to_space, pointwise, space_to_depth};
use crate::params::{Init, ParamStore};
use crate::wavelet::{WaveletDown, WaveletUp};

pub const STAGES: usize = 4;
pub const NUM_LATENTS: usize = 9;
pub const NUM_TAPS: usize = 8;
/// Input sides must be multiples of this.
pub const ALIGN: usize = 32;
const STEM_FACTOR: usize = 4;

/// Missing fields in a serialized config take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Channel widths from the highest-resolution stage (`H/4`) to the
    /// lowest (`H/32`).
    pub stage_widths: [usize; STAGES],
    /// Latent blocks per stage from the lowest resolution to the highest.
    pub latents_per_stage: [usize; STAGES],
    pub latent_channels: usize,
    pub d_lambda: usize,
    pub enc_blocks: usize,
    /// B-ConvNeXt blocks after each latent block.
    pub dec_blocks: usize,
    /// B-ConvNeXt blocks inside each posterior branch.
    pub posterior_blocks: usize,
    pub variant: Variant,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stage_widths: [96, 144, 192, 240],
            latents_per_stage: [1, 2, 3, 3],
            latent_channels: 16,
            d_lambda: 256,
            enc_blocks: 2,
            dec_blocks: 1,
            posterior_blocks: 3,
            variant: Variant::Student,
        }
    }
}

impl ArchConfig {
    /// A small configuration for tests and CPU-scale experiments.
    pub fn toy() -> Self {
        Self {
            stage_widths: [16, 24, 32, 40],
            latents_per_stage: [1, 2, 3, 3],
            latent_channels: 4,
            d_lambda: 32,
            enc_blocks: 1,
            dec_blocks: 1,
            posterior_blocks: 1,
            variant: Variant::Student,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.latents_per_stage.iter().sum();
        if total != NUM_LATENTS {
            return Err(Error::Config(format!(
                "latents_per_stage must sum to {NUM_LATENTS}, got {total}"
            )));
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w == 0 || w % ATTENTION_HEADS != 0) {
            return Err(Error::Config(format!("stage width {w} is not a positive multiple of 4")));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        if self.d_lambda == 0 || self.d_lambda % 2 != 0 {
            return Err(Error::Config(format!("d_lambda must be even, got {}", self.d_lambda)));
        }
        Ok(())
    }

    /// Stage of each latent block in decoding order.
    pub fn latent_stages(&self) -> Vec<usize> {
        self.latents_per_stage
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(STAGES - 1 - i, n))
            .collect()
    }

    /// Channel count of each feature tap, F1 to F8.
    pub fn tap_channels(&self) -> [usize; NUM_TAPS] {
        let w = self.stage_widths;
        [w[0], w[1], w[2], w[3], w[3], w[2], w[1], w[0]]
    }

    /// Spatial downsampling factor of each feature tap.
    pub fn tap_strides(&self) -> [usize; NUM_TAPS] {
        [4, 8, 16, 32, 32, 16, 8, 4]
    }
}

#[derive(Debug, Clone)]
pub struct CodecOutput {
    pub reconstruction: Tensor,
    /// Nine records in decoding order.
    pub records: Vec<LatentRecord>,
    /// Bits per batch item, `(b,)`.
    pub total_rate_bits: Tensor,
    /// F1 to F8.
    pub features: Vec<Tensor>,
}

/// Result of [`Codec::compress_detailed`].
#[derive(Debug, Clone)]
pub struct Compressed {
    pub bitstream: Bitstream,
    /// The test-mode reconstruction, cropped and clamped like
    /// [`Codec::decompress`] output.
    pub reconstruction: Tensor,
    /// Ideal code length of all symbols under the coding PMFs.
    pub ideal_bits: f64,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    latents: Vec<(LatentBlock, Vec<BConvNeXt>)>,
}

pub struct Codec {
    config: ArchConfig,
    store: ParamStore,
    lambda_net: LambdaEmbedNet,
    stem_w: Tensor,
    stem_b: Tensor,
    enc_stages: Vec<Vec<BConvNeXt>>,
    downs: Vec<WaveletDown>,
    start: Tensor,
    /// Indexed by stage.
    dec_stages: Vec<DecoderStage>,
    /// `ups[s]` maps stage `s + 1` to stage `s`.
    ups: Vec<WaveletUp>,
    attn: Vec<CrossAttention>,
    head_w: Tensor,
    head_b: Tensor,
}

type LatentSource<'a> =
    dyn FnMut(usize, &LatentBlock, &Tensor, &LambdaEmbedding) -> Result<(Tensor, LatentRecord)> + 'a;

impl Codec {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ArchConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let w = config.stage_widths;
        let d = config.d_lambda;

        let lambda_net = LambdaEmbedNet::new(&mut root.sub("lambda_embed"), d)?;
        let patch = 3 * STEM_FACTOR * STEM_FACTOR;
        let stem_w = root.param("stem.weight", &[w[0], patch], Init::FanIn(patch))?;
        let stem_b = root.param("stem.bias", &[w[0]], Init::Zeros)?;

        let mut enc_stages = Vec::with_capacity(STAGES);
        let mut downs = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            if s > 0 {
                downs.push(WaveletDown::new(&mut root.sub(format!("encoder.down{s}")), w[s - 1], w[s])?);
            }
            let blocks = (0..config.enc_blocks)
                .map(|i| BConvNeXt::new(&mut root.sub(format!("encoder.stage{s}.{i}")), w[s], d))
                .collect::<Result<Vec<_>>>()?;
            enc_stages.push(blocks);
        }

        let start = root.param("decoder.start", &[1, w[STAGES - 1], 1, 1], Init::Normal(0.02))?;
        let stages = config.latent_stages();
        let mut dec_stages: Vec<DecoderStage> = (0..STAGES).map(|_| DecoderStage { latents: vec![] }).collect();
        for (i, &s) in stages.iter().enumerate() {
            let index = i + 1;
            let mut scope = root.sub(format!("decoder.z{index}"));
            let block = LatentBlock::new(
                &mut scope.sub("latent"),
                index,
                config.variant,
                w[s],
                config.latent_channels,
                config.posterior_blocks,
                d,
            )?;
            let post = (0..config.dec_blocks)
                .map(|j| BConvNeXt::new(&mut scope.sub(format!("block{j}")), w[s], d))
                .collect::<Result<Vec<_>>>()?;
            dec_stages[s].latents.push((block, post));
        }

        let mut ups = Vec::with_capacity(STAGES - 1);
        let mut attn = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES - 1 {
            ups.push(WaveletUp::new(&mut root.sub(format!("decoder.up{s}")), w[s + 1], w[s])?);
            attn.push(CrossAttention::new(&mut root.sub(format!("decoder.attn{s}")), w[s], w[s + 1])?);
        }
        let head_w = root.param("head.weight", &[patch, w[0]], Init::FanIn(w[0]))?;
        let head_b = root.param("head.bias", &[patch], Init::Const(0.5))?;

        Ok(Self {
            config,
            store,
            lambda_net,
            stem_w,
            stem_b,
            enc_stages,
            downs,
            start,
            dec_stages,
            ups,
            attn,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn embed_lambda(&self, lambda: f64) -> Result<LambdaEmbedding> {
        self.lambda_net.embed(lambda)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(dim_err!("expected 3 colour channels, got {c}"));
        }
        if h == 0 || w == 0 || h % ALIGN != 0 || w % ALIGN != 0 {
            return Err(dim_err!("image {h}x{w} is not a non-empty multiple of {ALIGN}"));
        }
        Ok((b, h, w))
    }

    /// Encoder features per stage plus taps F1 to F4.
    fn encode_features(&self, x: &Tensor, e: &LambdaEmbedding) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let x = x.to_dtype(self.dtype())?;
        let mut h = pointwise(&space_to_depth(&x, STEM_FACTOR)?, &self.stem_w, Some(&self.stem_b))?;
        let mut taps = Vec::with_capacity(4);
        let mut feats = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            if s > 0 {
                h = self.downs[s - 1].forward(&h)?;
            }
            taps.push(h.clone());
            for blk in &self.enc_stages[s] {
                h = blk.forward(&h, e)?;
            }
            feats.push(h.clone());
        }
        Ok((feats, taps))
    }

    /// The top-down decoder. `source` supplies each latent value.
    fn run_decoder(
        &self,
        batch: usize,
        height: usize,
        width: usize,
        e: &LambdaEmbedding,
        source: &mut LatentSource<'_>,
    ) -> Result<(Tensor, Vec<LatentRecord>, Vec<Tensor>)> {
        let low = STAGES - 1;
        let w3 = self.config.stage_widths[low];
        let mut d = self
            .start
            .broadcast_as((batch, w3, height / ALIGN, width / ALIGN))?
            .contiguous()?;
        let mut records = Vec::with_capacity(NUM_LATENTS);
        let mut taps = Vec::with_capacity(4);
        for s in (0..STAGES).rev() {
            if s < low {
                taps.push(d.clone());
                let up = self.ups[s].forward(&d)?;
                d = self.attn[s].forward(&up, &d)?;
            }
            for (block, post) in &self.dec_stages[s].latents {
                let (mut out, record) = source(s, block, &d, e)?;
                for blk in post {
                    out = blk.forward(&out, e)?;
                }
                d = out;
                records.push(record);
            }
        }
        taps.push(d.clone());
        let rgb = pointwise(&d, &self.head_w, Some(&self.head_b))?;
        Ok((depth_to_space(&rgb, STEM_FACTOR)?, records, taps))
    }

    /// Full forward pass on `(b, 3, H, W)` with `H`, `W` multiples of 32.
    pub fn forward(&self, x: &Tensor, lambda: f64, mode: LatentMode, rng: &mut impl Rng) -> Result<CodecOutput> {
        let (b, h, w) = self.check_input(x)?;
        let e = self.embed_lambda(lambda)?;
        let (enc, mut features) = self.encode_features(x, &e)?;
        let mut source = |s: usize, block: &LatentBlock, dec: &Tensor, e: &LambdaEmbedding| {
            block.forward(dec, LatentInput::Encode { enc: &enc[s], mode }, e, &mut *rng)
        };
        let (reconstruction, records, dec_taps) = self.run_decoder(b, h, w, &e, &mut source)?;
        features.extend(dec_taps);
        let mut total = records[0].rate_bits.clone();
        for r in &records[1..] {
            total = (total + &r.rate_bits)?;
        }
        Ok(CodecOutput {
            reconstruction,
            records,
            total_rate_bits: total,
            features,
        })
    }

    /// Forward pass with the training distribution of this variant.
    pub fn forward_train(&self, x: &Tensor, lambda: f64, rng: &mut impl Rng) -> Result<CodecOutput> {
        let mode = match self.variant() {
            Variant::Student => LatentMode::Train,
            Variant::Teacher => LatentMode::Teacher,
        };
        self.forward(x, lambda, mode, rng)
    }

    /// Test-mode forward pass (quantised latents). Student only.
    pub fn forward_test(&self, x: &Tensor, lambda: f64) -> Result<CodecOutput> {
        self.require_student()?;
        // Test mode draws no randomness.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, lambda, LatentMode::Test, &mut rng)
    }

    fn require_student(&self) -> Result<()> {
        if self.variant() != Variant::Student {
            return Err(Error::Variant("only the student variant can be entropy coded".into()));
        }
        Ok(())
    }

    /// Compresses one `(1, 3, H, W)` image with values in `[0, 1]`.
    pub fn compress(&self, x: &Tensor, lambda: f64) -> Result<Bitstream> {
        Ok(self.compress_detailed(x, lambda)?.bitstream)
    }

    pub fn compress_detailed(&self, x: &Tensor, lambda: f64) -> Result<Compressed> {
        self.require_student()?;
        let (b, c, h, w) = x.dims4()?;
        if b != 1 || c != 3 {
            return Err(dim_err!("compress takes one RGB image, got shape {:?}", x.dims()));
        }
        let (width, height) = match (u16::try_from(w), u16::try_from(h)) {
            (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
            _ => return Err(dim_err!("image {w}x{h} cannot be stored in the header")),
        };
        let lambda = lambda as f32;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        let out = self.forward_test(&pad_to_alignment(x)?, lambda as f64)?;

        let mut enc = RansEncoder::new();
        let mut cache = TableCache::new();
        let mut ideal_bits = 0.0;
        for record in &out.records {
            let symbols = record.symbols.as_ref().expect("test mode records carry symbols");
            let sigma = host_f64(&record.prior.sigma_hat)?;
            for (&s, &sig) in symbols.iter().zip(&sigma) {
                enc.push(s as i64, cache.get(sig)?)?;
                ideal_bits += crate::latent::symbol_bits(sig, s as i64);
            }
        }
        let bitstream = Bitstream {
            lambda,
            width,
            height,
            payload: enc.finish(),
        };
        Ok(Compressed {
            bitstream,
            reconstruction: finish_image(&out.reconstruction, h, w)?,
            ideal_bits,
        })
    }

    /// Reconstructs the image from a bitstream, using the prior branches and
    /// the decoded symbols only.
    pub fn decompress(&self, bitstream: &Bitstream) -> Result<Tensor> {
        self.require_student()?;
        let (h, w) = (bitstream.height as usize, bitstream.width as usize);
        let (ph, pw) = (h.div_ceil(ALIGN) * ALIGN, w.div_ceil(ALIGN) * ALIGN);
        let e = self.embed_lambda(bitstream.lambda as f64)?;
        let mut dec = RansDecoder::new(&bitstream.payload)?;
        let mut cache = TableCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut source = |_: usize, block: &LatentBlock, d: &Tensor, e: &LambdaEmbedding| {
            let prior = block.prior(d)?;
            let sigma = host_f64(&prior.sigma_hat)?;
            let symbols = sigma
                .iter()
                .map(|&s| Ok(dec.decode(cache.get(s)?)? as i32))
                .collect::<Result<Vec<_>>>()?;
            block.forward(d, LatentInput::Symbols(symbols), e, &mut rng)
        };
        let (recon, _, _) = self.run_decoder(1, ph, pw, &e, &mut source)?;
        dec.finish()?;
        finish_image(&recon, h, w)
    }
}

/// Replicate-pads the bottom and right edges up to multiples of 32.
pub fn pad_to_alignment(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(ALIGN) * ALIGN - h, w.div_ceil(ALIGN) * ALIGN - w);
    let mut out = x.clone();
    if ph > 0 {
        out = out.pad_with_same(2, 0, ph)?;
    }
    if pw > 0 {
        out = out.pad_with_same(3, 0, pw)?;
    }
    Ok(out)
}

fn finish_image(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?.clamp(0.0, 1.0)?)
}
