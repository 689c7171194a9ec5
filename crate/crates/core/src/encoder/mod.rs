//! Two parallel four-scale windowed-attention streams (RGB and depth).

pub mod blocks;
pub mod config;
pub mod windows;

pub use blocks::{window_attention, EncoderBlock, PatchEmbed, PatchMerge};
pub use config::{FeVariant, FlVariant, GridSpec, ModelConfig, NUM_SCALES};

use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Rgb,
    Depth,
    Fused,
}

/// Token grid emitted at one scale by one stream.
#[derive(Debug, Clone, Copy)]
pub struct ScaleFeature<'g> {
    pub scale: usize,
    pub stream: StreamKind,
    /// `[gh, gw, C]`
    pub tokens: Var<'g>,
}

/// One hierarchical stream: patch embedding, then per scale a stack of
/// W-MSA/SW-MSA block pairs, with patch merging between scales.
#[derive(Debug, Clone)]
pub struct Stream {
    pub kind: StreamKind,
    pub channels: usize,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<EncoderBlock>>,
    pub merges: Vec<PatchMerge>,
}

impl Stream {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig, kind: StreamKind) -> Result<Self> {
        let channels = match kind {
            StreamKind::Rgb => 3,
            StreamKind::Depth => 1,
            StreamKind::Fused => return Err(Error::config("encoder streams are RGB or depth")),
        };
        let embed = PatchEmbed::new(pb, config.patch_size, config.embed_dims[0])?;
        let mut stages = Vec::with_capacity(NUM_SCALES);
        let mut merges = Vec::with_capacity(NUM_SCALES - 1);
        for s in 0..NUM_SCALES {
            let spec = config.grid_spec(s + 1);
            let dim = config.embed_dims[s];
            let mut stage_pb = pb.scoped(&format!("s{}", s + 1));
            let mut blocks = Vec::with_capacity(2 * config.depths[s]);
            for b in 0..2 * config.depths[s] {
                let shifted = b % 2 == 1;
                blocks.push(EncoderBlock::new(
                    &mut stage_pb,
                    &format!("b{b}"),
                    dim,
                    config.num_heads[s],
                    spec,
                    shifted,
                    config.mlp_ratio,
                )?);
            }
            stages.push(blocks);
            if s + 1 < NUM_SCALES {
                merges.push(PatchMerge::new(&mut stage_pb, "merge", dim)?);
            }
        }
        Ok(Self {
            kind,
            channels,
            embed,
            stages,
            merges,
        })
    }

    /// Returns the four scale features `f_1..f_4` for `image` (`[H, W, ch]`).
    pub fn forward<'g>(&self, image: &Var<'g>) -> Result<Vec<ScaleFeature<'g>>> {
        let ch = image.shape().last().copied().unwrap_or(0);
        if ch != self.channels {
            return Err(Error::config(format!(
                "{:?} stream expects {} channels, got {ch}",
                self.kind, self.channels
            )));
        }
        let mut x = self.embed.forward(image)?;
        let mut out = Vec::with_capacity(NUM_SCALES);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x)?;
            }
            out.push(ScaleFeature {
                scale: s + 1,
                stream: self.kind,
                tokens: x,
            });
            if let Some(merge) = self.merges.get(s) {
                x = merge.forward(&x)?;
            }
        }
        Ok(out)
    }
}

/// RGB and depth streams with independent parameters.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub rgb: Stream,
    pub depth: Stream,
    image_size: (usize, usize),
}

impl DualEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rgb: Stream::new(&mut pb.scoped("enc_rgb"), config, StreamKind::Rgb)?,
            depth: Stream::new(&mut pb.scoped("enc_depth"), config, StreamKind::Depth)?,
            image_size: (config.image_height, config.image_width),
        })
    }

    /// Encodes an RGB `[H, W, 3]` / depth `[H, W, 1]` pair into
    /// `(f^R_1..4, f^D_1..4)`.
    pub fn encode_dual<'g>(
        &self,
        rgb: &Var<'g>,
        depth: &Var<'g>,
    ) -> Result<(Vec<ScaleFeature<'g>>, Vec<ScaleFeature<'g>>)> {
        let (h, w) = self.image_size;
        for (name, img, ch) in [("rgb", rgb, 3), ("depth", depth, 1)] {
            if img.shape() != [h, w, ch] {
                return Err(Error::config(format!(
                    "{name} image {:?} does not match configured [{h}, {w}, {ch}]",
                    img.shape()
                )));
            }
        }
        Ok((self.rgb.forward(rgb)?, self.depth.forward(depth)?))
    }
}
