//! Full network: dual encoder, FL/FE fusion, multi-scale decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoded, Decoder, NUM_NUTRIENTS};
use crate::encoder::{DualEncoder, ModelConfig, NUM_SCALES};
use crate::error::Result;
use crate::fusion::{FeFusion, FlFusion, FusedFeature};
use crate::numerics::{Graph, ParamBuilder, ParamSet, Tensor, Var};

#[derive(Debug, Clone)]
pub struct NuNet {
    pub config: ModelConfig,
    pub encoder: DualEncoder,
    pub fl: Vec<FlFusion>,
    pub fe: FeFusion,
    pub decoder: Decoder,
}

/// Plain-number result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub final_estimate: [f64; NUM_NUTRIENTS],
    /// Scales 5..=9 (only scale 5 in single-scale mode).
    pub per_scale: Vec<[f64; NUM_NUTRIENTS]>,
}

fn to_array(t: &Tensor) -> [f64; NUM_NUTRIENTS] {
    std::array::from_fn(|j| t.data()[j])
}

impl NuNet {
    /// Builds the network and its freshly initialized parameters from
    /// `config.init_seed`.
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let model = Self::build(&mut ParamBuilder::new(&mut params, &mut rng), config)?;
        Ok((model, params))
    }

    pub fn build(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = DualEncoder::new(pb, config)?;
        let fl = if config.multi_scale {
            (1..=NUM_SCALES)
                .map(|s| FlFusion::new(pb, config, s, config.fl_variant))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let fe = FeFusion::new(pb, config, config.fe_variant)?;
        let decoder = Decoder::new(pb, config)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            fl,
            fe,
            decoder,
        })
    }

    /// `rgb` is `[H, W, 3]`, `depth` `[H, W, 1]`.
    pub fn forward<'g>(&self, rgb: &Var<'g>, depth: &Var<'g>) -> Result<Decoded<'g>> {
        let (fr, fd) = self.encoder.encode_dual(rgb, depth)?;
        let fused: Vec<FusedFeature<'g>> = self
            .fl
            .iter()
            .zip(fr.iter().zip(&fd))
            .map(|(m, (r, d))| m.forward(r, d))
            .collect::<Result<_>>()?;
        let f5 = self.fe.forward(&fr[NUM_SCALES - 1], &fd[NUM_SCALES - 1])?;
        self.decoder.decode(&fused, &f5)
    }

    pub fn predict(&self, params: &ParamSet, rgb: &Tensor, depth: &Tensor) -> Result<Prediction> {
        let g = Graph::new(params);
        let out = self.forward(&g.constant(rgb.clone()), &g.constant(depth.clone()))?;
        Ok(Prediction {
            final_estimate: to_array(&out.final_estimate.to_tensor()),
            per_scale: out.per_scale.iter().map(|o| to_array(&o.estimate.to_tensor())).collect(),
        })
    }
}
