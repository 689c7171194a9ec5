use std::sync::Arc;

use super::config::GridSpec;
use super::windows::{partition_var, reverse_var, shifted_window_mask};
use crate::error::{Error, Result};
use crate::numerics::{attention, AttentionParams, LayerNorm, Linear, Mlp, ParamBuilder, Tensor, Var};

/// Non-overlapping `patch × patch` pixel patches projected to `dim` channels.
///
/// Single-channel (depth) images are replicated to three channels first so
/// both streams share one stem layout.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder<'_>, patch_size: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, "embed", patch_size * patch_size * 3, dim, true)?,
            patch_size,
        })
    }

    /// `image` is `[H, W, ch]` with `ch` 1 or 3; returns `[H/p, W/p, dim]`.
    pub fn forward<'g>(&self, image: &Var<'g>) -> Result<Var<'g>> {
        let shape = image.shape();
        let [h, w, ch] = shape[..] else {
            return Err(Error::config(format!("image must be [H, W, ch], got {shape:?}")));
        };
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
        }
        let rgb = match ch {
            3 => *image,
            1 => {
                let idx: Arc<[usize]> = (0..h * w).flat_map(|i| [i, i, i]).collect();
                image.gather_rows(1, idx, &[h, w, 3])?
            }
            _ => return Err(Error::config(format!("images need 1 or 3 channels, got {ch}"))),
        };
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(h * w);
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((ty * p + py) * w + tx * p + px);
                    }
                }
            }
        }
        let patches = rgb.gather_rows(3, idx.into(), &[gh, gw, p * p * 3])?;
        self.proj.forward(&patches)
    }
}

/// One attention sublayer followed by an MLP, both with pre-norm residuals.
/// `shifted` selects SW-MSA (rolled windows plus region mask) over W-MSA.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub spec: GridSpec,
    pub shifted: bool,
    mask: Option<Tensor>,
}

impl EncoderBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: GridSpec,
        shifted: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let mask = if shifted && spec.shift > 0 {
            Some(shifted_window_mask(spec.height, spec.width, spec.window, spec.shift)?)
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNorm::new(&mut pb, "norm1", dim)?,
            attn: AttentionParams::new(&mut pb, "attn", dim, heads, spec.window_patches())?,
            norm2: LayerNorm::new(&mut pb, "norm2", dim)?,
            mlp: Mlp::new(&mut pb, "mlp", dim, mlp_ratio, dim)?,
            spec,
            shifted,
            mask,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.norm1.forward(x)?;
        let attended = window_attention(&h, &h, &self.attn, self.spec, self.shifted, self.mask.as_ref())?;
        let x = x.add(&attended)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        x.add(&m)
    }
}

/// Attention restricted to (optionally shifted) windows of a `[gh, gw, C]`
/// grid; returns a grid of the same shape.
pub fn window_attention<'g>(
    q_grid: &Var<'g>,
    kv_grid: &Var<'g>,
    attn: &AttentionParams,
    spec: GridSpec,
    shifted: bool,
    mask: Option<&Tensor>,
) -> Result<Var<'g>> {
    let expect = [spec.height, spec.width, attn.dim];
    if q_grid.shape() != expect {
        return Err(Error::dim(format!(
            "window attention expects grid {expect:?}, got {:?}",
            q_grid.shape()
        )));
    }
    let roll = shifted && spec.shift > 0;
    let qw = partition_var(q_grid, spec, roll)?;
    let out = if q_grid.id() == kv_grid.id() {
        attention(&qw, &qw, attn, mask)?
    } else {
        let kw = partition_var(kv_grid, spec, roll)?;
        attention(&qw, &kw, attn, mask)?
    };
    reverse_var(&out, spec, roll)
}

/// 2×2 neighbourhood concatenation, LayerNorm over 4C, projection to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(Self {
            norm: LayerNorm::new(&mut pb, "norm", 4 * dim)?,
            reduction: Linear::new(&mut pb, "reduction", 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let [gh, gw, c] = shape[..] else {
            return Err(Error::dim(format!("patch merge expects [gh, gw, C], got {shape:?}")));
        };
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::dim(format!("patch merge needs an even grid, got {gh}x{gw}")));
        }
        let mut idx = Vec::with_capacity(gh * gw);
        for y in 0..gh / 2 {
            for xx in 0..gw / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((2 * y + dy) * gw + 2 * xx + dx);
                }
            }
        }
        let merged = x.gather_rows(c, idx.into(), &[gh / 2, gw / 2, 4 * c])?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}
