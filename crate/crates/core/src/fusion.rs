//! RGB/depth fusion: FL at encoder scales 1–4 and FE at scale 5.

use std::str::FromStr;

use crate::encoder::windows::shifted_window_mask;
use crate::encoder::{window_attention, FeVariant, FlVariant, GridSpec, ModelConfig, ScaleFeature, NUM_SCALES};
use crate::error::{Error, Result};
use crate::numerics::{AttentionParams, LayerNorm, Mlp, ParamBuilder, Tensor, Var};

/// Fused token grid; scales 1–4 come from FL, scale 5 from FE.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeature<'g> {
    pub scale: usize,
    /// `[gh, gw, C_f]`
    pub tokens: Var<'g>,
}

fn check_pair(r: &Var<'_>, d: &Var<'_>) -> Result<()> {
    if r.shape() != d.shape() {
        return Err(Error::dim(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            r.shape(),
            d.shape()
        )));
    }
    if r.shape().len() != 3 {
        return Err(Error::dim(format!("fusion expects [gh, gw, C], got {:?}", r.shape())));
    }
    Ok(())
}

/// `x + Attn(LN(x))` over (optionally shifted) windows.
#[derive(Debug, Clone)]
pub struct AttnSublayer {
    pub norm: LayerNorm,
    pub attn: AttentionParams,
    pub spec: GridSpec,
    pub shifted: bool,
    mask: Option<Tensor>,
}

impl AttnSublayer {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        spec: GridSpec,
        shifted: bool,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let mask = if shifted && spec.shift > 0 {
            Some(shifted_window_mask(spec.height, spec.width, spec.window, spec.shift)?)
        } else {
            None
        };
        Ok(Self {
            norm: LayerNorm::new(&mut pb, "norm", dim)?,
            attn: AttentionParams::new(&mut pb, "attn", dim, heads, spec.window_patches())?,
            spec,
            shifted,
            mask,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.norm.forward(x)?;
        x.add(&window_attention(&h, &h, &self.attn, self.spec, self.shifted, self.mask.as_ref())?)
    }

    /// The attention term alone, without the residual.
    pub fn attend<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.norm.forward(x)?;
        window_attention(&h, &h, &self.attn, self.spec, self.shifted, self.mask.as_ref())
    }
}

/// Lightweight fusion at one encoder scale.
#[derive(Debug, Clone)]
pub struct FlFusion {
    pub variant: FlVariant,
    pub scale: usize,
    pub wmsa: Option<AttnSublayer>,
}

impl FlFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig, scale: usize, variant: FlVariant) -> Result<Self> {
        if !(1..=NUM_SCALES).contains(&scale) {
            return Err(Error::config(format!("FL scale must be 1..=4, got {scale}")));
        }
        let wmsa = match variant {
            FlVariant::Full | FlVariant::WmsaOnly => Some(AttnSublayer::new(
                &mut pb.scoped(&format!("fl{scale}")),
                "wmsa",
                config.embed_dims[scale - 1],
                config.num_heads[scale - 1],
                config.grid_spec(scale),
                false,
            )?),
            FlVariant::AddOnly | FlVariant::Mul => None,
        };
        Ok(Self { variant, scale, wmsa })
    }

    pub fn forward<'g>(&self, r: &ScaleFeature<'g>, d: &ScaleFeature<'g>) -> Result<FusedFeature<'g>> {
        if r.scale != self.scale || d.scale != self.scale {
            return Err(Error::dim(format!(
                "FL at scale {} received scales {} and {}",
                self.scale, r.scale, d.scale
            )));
        }
        let tokens = self.fuse(&r.tokens, &d.tokens)?;
        Ok(FusedFeature { scale: self.scale, tokens })
    }

    pub fn fuse<'g>(&self, r: &Var<'g>, d: &Var<'g>) -> Result<Var<'g>> {
        check_pair(r, d)?;
        match (self.variant, &self.wmsa) {
            (FlVariant::Mul, _) => r.mul(d),
            (FlVariant::AddOnly, _) => r.add(d),
            (FlVariant::Full, Some(w)) => w.forward(&r.add(d)?),
            (FlVariant::WmsaOnly, Some(w)) => w.attend(&r.add(d)?),
            _ => unreachable!("attention variants always hold a sublayer"),
        }
    }
}

/// Query source of a cross-attention path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMix {
    Mul,
    Add,
}

/// FE path whose first attention takes queries from a mix of RGB and
/// depth and keys/values from RGB only; optionally followed by SW-MSA.
#[derive(Debug, Clone)]
pub struct CrossPath {
    pub mix: QueryMix,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub cross: AttentionParams,
    pub spec: GridSpec,
    pub swmsa: Option<AttnSublayer>,
}

impl CrossPath {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        config: &ModelConfig,
        mix: QueryMix,
        with_swmsa: bool,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let c = config.embed_dims[NUM_SCALES - 1];
        let heads = config.num_heads[NUM_SCALES - 1];
        let spec = config.grid_spec(NUM_SCALES);
        Ok(Self {
            mix,
            norm_q: LayerNorm::new(&mut pb, "norm_q", c)?,
            norm_kv: LayerNorm::new(&mut pb, "norm_kv", c)?,
            cross: AttentionParams::new(&mut pb, "cross", c, heads, spec.window_patches())?,
            spec,
            swmsa: if with_swmsa {
                Some(AttnSublayer::new(&mut pb, "swmsa", c, heads, spec, true)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'g>(&self, r: &Var<'g>, d: &Var<'g>) -> Result<Var<'g>> {
        self.forward_with(r, d, false)
    }

    /// `detach_query` cuts the gradient through the query source, leaving
    /// only the key/value route from `r`.
    pub fn forward_with<'g>(&self, r: &Var<'g>, d: &Var<'g>, detach_query: bool) -> Result<Var<'g>> {
        check_pair(r, d)?;
        let mut q_src = match self.mix {
            QueryMix::Mul => r.mul(d)?,
            QueryMix::Add => r.add(d)?,
        };
        if detach_query {
            q_src = q_src.detach();
        }
        let q = self.norm_q.forward(&q_src)?;
        let kv = self.norm_kv.forward(r)?;
        let a1 = q_src.add(&window_attention(&q, &kv, &self.cross, self.spec, false, None)?)?;
        match &self.swmsa {
            Some(sw) => sw.forward(&a1),
            None => Ok(a1),
        }
    }
}

/// Concatenation path: W-MSA then (optionally) SW-MSA over `concat(fR, fD)`.
#[derive(Debug, Clone)]
pub struct ConcatPath {
    pub wmsa: AttnSublayer,
    pub swmsa: Option<AttnSublayer>,
}

impl ConcatPath {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, config: &ModelConfig, with_swmsa: bool) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let c2 = 2 * config.embed_dims[NUM_SCALES - 1];
        let heads = config.num_heads[NUM_SCALES - 1];
        let spec = config.grid_spec(NUM_SCALES);
        Ok(Self {
            wmsa: AttnSublayer::new(&mut pb, "wmsa", c2, heads, spec, false)?,
            swmsa: if with_swmsa {
                Some(AttnSublayer::new(&mut pb, "swmsa", c2, heads, spec, true)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'g>(&self, r: &Var<'g>, d: &Var<'g>) -> Result<Var<'g>> {
        check_pair(r, d)?;
        let a1 = self.wmsa.forward(&Var::concat_last(&[*r, *d])?)?;
        match &self.swmsa {
            Some(sw) => sw.forward(&a1),
            None => Ok(a1),
        }
    }
}

/// Enhanced fusion producing the scale-5 feature from the scale-4 pair.
#[derive(Debug, Clone)]
pub struct FeFusion {
    pub variant: FeVariant,
    pub concat: Option<ConcatPath>,
    pub mul: Option<CrossPath>,
    pub add: Option<CrossPath>,
    pub merge: Option<Mlp>,
}

impl FeFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig, variant: FeVariant) -> Result<Self> {
        let mut pb = pb.scoped("fe");
        let c4 = config.embed_dims[NUM_SCALES - 1];
        let (concat, mul, add, merge) = match variant {
            FeVariant::Full | FeVariant::NoSwmsa => {
                let sw = variant == FeVariant::Full;
                (
                    Some(ConcatPath::new(&mut pb, "concat", config, sw)?),
                    Some(CrossPath::new(&mut pb, "mul", config, QueryMix::Mul, sw)?),
                    Some(CrossPath::new(&mut pb, "add", config, QueryMix::Add, sw)?),
                    Some(Mlp::new(&mut pb, "merge", 4 * c4, config.fe_mlp_ratio, 2 * c4)?),
                )
            }
            FeVariant::ConcatOnly => (Some(ConcatPath::new(&mut pb, "concat", config, true)?), None, None, None),
            FeVariant::MulOnly => (None, Some(CrossPath::new(&mut pb, "mul", config, QueryMix::Mul, true)?), None, None),
            FeVariant::AddOnly => (None, None, Some(CrossPath::new(&mut pb, "add", config, QueryMix::Add, true)?), None),
            FeVariant::PlainConcat => (None, None, None, None),
        };
        Ok(Self {
            variant,
            concat,
            mul,
            add,
            merge,
        })
    }

    pub fn forward<'g>(&self, r: &ScaleFeature<'g>, d: &ScaleFeature<'g>) -> Result<FusedFeature<'g>> {
        if r.scale != NUM_SCALES || d.scale != NUM_SCALES {
            return Err(Error::dim(format!(
                "FE expects scale-4 features, got scales {} and {}",
                r.scale, d.scale
            )));
        }
        Ok(FusedFeature {
            scale: NUM_SCALES + 1,
            tokens: self.fuse(&r.tokens, &d.tokens)?,
        })
    }

    pub fn fuse<'g>(&self, r: &Var<'g>, d: &Var<'g>) -> Result<Var<'g>> {
        check_pair(r, d)?;
        let mut parts = Vec::with_capacity(3);
        if let Some(p) = &self.concat {
            parts.push(p.forward(r, d)?);
        }
        if let Some(p) = &self.mul {
            parts.push(p.forward(r, d)?);
        }
        if let Some(p) = &self.add {
            parts.push(p.forward(r, d)?);
        }
        match (&self.merge, parts.len()) {
            (Some(mlp), _) => mlp.forward(&Var::concat_last(&parts)?),
            (None, 0) => Var::concat_last(&[*r, *d]),
            (None, _) => Ok(parts[0]),
        }
    }
}

/// Named fusion ablation, as accepted by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Fl(FlVariant),
    Fe(FeVariant),
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fl-full" => Self::Fl(FlVariant::Full),
            "fl-add-only" => Self::Fl(FlVariant::AddOnly),
            "fl-wmsa-only" => Self::Fl(FlVariant::WmsaOnly),
            "fl-mul" => Self::Fl(FlVariant::Mul),
            "fe-full" => Self::Fe(FeVariant::Full),
            "fe-concat-only" => Self::Fe(FeVariant::ConcatOnly),
            "fe-mul-only" => Self::Fe(FeVariant::MulOnly),
            "fe-add-only" => Self::Fe(FeVariant::AddOnly),
            "fe-no-swmsa" => Self::Fe(FeVariant::NoSwmsa),
            "fe-plain-concat" => Self::Fe(FeVariant::PlainConcat),
            other => return Err(Error::config(format!("unknown fusion variant '{other}'"))),
        })
    }
}

impl FusionKind {
    pub const ALL: [&'static str; 10] = [
        "fl-full",
        "fl-add-only",
        "fl-wmsa-only",
        "fl-mul",
        "fe-full",
        "fe-concat-only",
        "fe-mul-only",
        "fe-add-only",
        "fe-no-swmsa",
        "fe-plain-concat",
    ];

    /// Applies this variant to a model configuration.
    pub fn apply(self, config: &mut ModelConfig) {
        match self {
            Self::Fl(v) => config.fl_variant = v,
            Self::Fe(v) => config.fe_variant = v,
        }
    }
}

/// A fusion module of either slot.
#[derive(Debug, Clone)]
pub enum FusionModule {
    /// FL modules for scales 1–4.
    Fl(Vec<FlFusion>),
    Fe(FeFusion),
}

impl FusionModule {
    /// Output for a pair of same-shape grids. FL variants use the module
    /// matching the inputs' scale.
    pub fn fuse<'g>(&self, r: &ScaleFeature<'g>, d: &ScaleFeature<'g>) -> Result<FusedFeature<'g>> {
        match self {
            Self::Fl(mods) => {
                let m = mods
                    .iter()
                    .find(|m| m.scale == r.scale)
                    .ok_or_else(|| Error::dim(format!("no FL module for scale {}", r.scale)))?;
                m.forward(r, d)
            }
            Self::Fe(fe) => fe.forward(r, d),
        }
    }
}

pub fn build_fusion_variant(pb: &mut ParamBuilder<'_>, config: &ModelConfig, kind: &str) -> Result<FusionModule> {
    Ok(match kind.parse::<FusionKind>()? {
        FusionKind::Fl(v) => FusionModule::Fl(
            (1..=NUM_SCALES)
                .map(|s| FlFusion::new(pb, config, s, v))
                .collect::<Result<_>>()?,
        ),
        FusionKind::Fe(v) => FusionModule::Fe(FeFusion::new(pb, config, v)?),
    })
}
