//! Multi-scale decoder: linear heads on pooled features, U-Net blocks at
//! scales 6–9, and the summed final estimate.

use std::sync::Arc;

use crate::encoder::{ModelConfig, NUM_SCALES};
use crate::error::{Error, Result};
use crate::fusion::FusedFeature;
use crate::model::Prediction;
use crate::numerics::{Linear, ParamBuilder, ParamId, Tensor, Var, ZERO_ROW};

/// Number of predicted quantities.
pub const NUM_NUTRIENTS: usize = 5;

/// Output order of every nutrition vector.
pub const NUTRIENTS: [&str; NUM_NUTRIENTS] = ["calorie", "mass", "fat", "carb", "protein"];

/// First and last decoder scale.
pub const FIRST_DECODER_SCALE: usize = 5;
pub const LAST_DECODER_SCALE: usize = 9;

/// Encoder scale whose fused feature enters decoder scale `s` (6..=9).
pub fn skip_source(scale: usize) -> usize {
    10 - scale
}

/// Global average pool then one linear map to the five outputs.
#[derive(Debug, Clone)]
pub struct Heads {
    pub proj: Linear,
    pub output_scale: Tensor,
}

impl Heads {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, output_scale: [f64; NUM_NUTRIENTS]) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, name, dim, NUM_NUTRIENTS, true)?,
            output_scale: Tensor::new(vec![NUM_NUTRIENTS], output_scale.to_vec())?,
        })
    }

    /// `feature` is `[gh, gw, C]` (or any `[..., C]`); returns `[5]`.
    pub fn forward<'g>(&self, feature: &Var<'g>) -> Result<Var<'g>> {
        self.proj.forward(&feature.mean_rows()?)?.mul_const(&self.output_scale)
    }
}

/// 3×3 same-padded convolution as an im2col gather plus a linear map.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

fn im2col_index(h: usize, w: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(h * w * 9);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    idx.push(if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        ZERO_ROW
                    } else {
                        yy as usize * w + xx as usize
                    });
                }
            }
        }
    }
    idx.into()
}

impl Conv3x3 {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(pb, name, 9 * in_dim, out_dim, true)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(Error::dim(format!("conv expects [h, w, {}], got {s:?}", self.in_dim)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let cols = x.gather_rows(c, im2col_index(h, w), &[h, w, 9 * c])?;
        self.lin.forward(&cols)
    }
}

/// Nearest-neighbour resize of a `[h, w, c]` grid to `[th, tw, c]`.
pub fn upsample_nearest<'g>(x: &Var<'g>, th: usize, tw: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let [h, w, c] = s[..] else {
        return Err(Error::dim(format!("upsample expects [h, w, c], got {s:?}")));
    };
    if h == th && w == tw {
        return Ok(*x);
    }
    let mut idx = Vec::with_capacity(th * tw);
    for y in 0..th {
        for xx in 0..tw {
            idx.push((y * h / th) * w + xx * w / tw);
        }
    }
    x.gather_rows(c, idx.into(), &[th, tw, c])
}

/// Two-level convolutional block: conv, pool, conv, upsample, skip concat,
/// conv, output conv. Grids too small to pool skip the pool/upsample pair.
#[derive(Debug, Clone)]
pub struct UnetBlock {
    pub conv_a: Conv3x3,
    pub conv_b: Conv3x3,
    pub conv_c: Conv3x3,
    pub conv_d: Conv3x3,
}

impl UnetBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, width: usize, out_dim: usize) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(Self {
            conv_a: Conv3x3::new(&mut pb, "conv_a", in_dim, width)?,
            conv_b: Conv3x3::new(&mut pb, "conv_b", width, width)?,
            conv_c: Conv3x3::new(&mut pb, "conv_c", 2 * width, width)?,
            conv_d: Conv3x3::new(&mut pb, "conv_d", width, out_dim)?,
        })
    }

    pub fn pools(h: usize, w: usize) -> bool {
        h >= 4 && w >= 4 && h % 2 == 0 && w % 2 == 0
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::dim(format!("U-Net block expects a non-empty [h, w, c] grid, got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let a = self.conv_a.forward(x)?.gelu();
        let b = if Self::pools(h, w) {
            let down = self.conv_b.forward(&a.avg_pool2()?)?.gelu();
            upsample_nearest(&down, h, w)?
        } else {
            self.conv_b.forward(&a)?.gelu()
        };
        let c = self.conv_c.forward(&Var::concat_last(&[a, b])?)?.gelu();
        self.conv_d.forward(&c)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaleOutput<'g> {
    pub scale: usize,
    /// `[5]`
    pub estimate: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct Decoded<'g> {
    /// `[5]`, the sum of every per-scale estimate.
    pub final_estimate: Var<'g>,
    pub per_scale: Vec<ScaleOutput<'g>>,
}

/// One decoder stage at scales 6..=9.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub scale: usize,
    pub skip_scale: usize,
    pub block: UnetBlock,
    pub heads: Heads,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub head5: Heads,
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        let mut pb = pb.scoped("dec");
        let head5 = Heads::new(&mut pb, "head5", config.fe_out_dim(), config.output_scale)?;
        let mut stages = Vec::new();
        if config.multi_scale {
            let mut prev = config.fe_out_dim();
            for (k, scale) in (FIRST_DECODER_SCALE + 1..=LAST_DECODER_SCALE).enumerate() {
                let skip_scale = skip_source(scale);
                let out = config.decoder_dims[k];
                let in_dim = config.embed_dims[skip_scale - 1] + prev;
                stages.push(DecoderStage {
                    scale,
                    skip_scale,
                    block: UnetBlock::new(&mut pb, &format!("block{scale}"), in_dim, out, out)?,
                    heads: Heads::new(&mut pb, &format!("head{scale}"), out, config.output_scale)?,
                });
                prev = out;
            }
        }
        Ok(Self { head5, stages })
    }

    /// Parameters of the heads at scales 6..=9.
    pub fn late_head_params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.heads.proj.param_ids()).collect()
    }

    /// `fl` holds the FL features of scales 1..=4 (empty in single-scale
    /// mode); `f5` is the FE output.
    pub fn decode<'g>(&self, fl: &[FusedFeature<'g>], f5: &FusedFeature<'g>) -> Result<Decoded<'g>> {
        if f5.scale != FIRST_DECODER_SCALE {
            return Err(Error::Contract(format!("decoder needs the scale-5 feature, got scale {}", f5.scale)));
        }
        let first = self.head5.forward(&f5.tokens)?;
        let mut per_scale = vec![ScaleOutput {
            scale: FIRST_DECODER_SCALE,
            estimate: first,
        }];
        let mut final_estimate = first;
        let mut prev = f5.tokens;
        for stage in &self.stages {
            let skip = fl
                .iter()
                .find(|f| f.scale == stage.skip_scale)
                .ok_or_else(|| Error::Contract(format!("decoder scale {} is missing fused scale {}", stage.scale, stage.skip_scale)))?;
            let s = skip.tokens.shape();
            let up = upsample_nearest(&prev, s[0], s[1])?;
            let feat = stage.block.forward(&Var::concat_last(&[skip.tokens, up])?)?;
            let estimate = stage.heads.forward(&feat)?;
            final_estimate = final_estimate.add(&estimate)?;
            per_scale.push(ScaleOutput {
                scale: stage.scale,
                estimate,
            });
            prev = feat;
        }
        debug_assert!(self.stages.is_empty() || fl.len() == NUM_SCALES);
        Ok(Decoded {
            final_estimate,
            per_scale,
        })
    }
}

/// Percentage of each scale's estimate in the final estimate; rows follow
/// `per_scale`, columns follow [`NUTRIENTS`].
pub fn scale_contribution(
    per_scale: &[[f64; NUM_NUTRIENTS]],
    final_estimate: &[f64; NUM_NUTRIENTS],
) -> Result<Vec<[f64; NUM_NUTRIENTS]>> {
    for (j, f) in final_estimate.iter().enumerate() {
        if *f == 0.0 || !f.is_finite() {
            return Err(Error::Division {
                nutrient: NUTRIENTS[j].to_string(),
            });
        }
    }
    Ok(per_scale
        .iter()
        .map(|row| std::array::from_fn(|j| 100.0 * row[j] / final_estimate[j]))
        .collect())
}

/// Contribution of summed per-scale estimates over many samples, relative
/// to the summed final estimates.
pub fn aggregate_contribution(predictions: &[Prediction]) -> Result<Vec<[f64; NUM_NUTRIENTS]>> {
    let Some(first) = predictions.first() else {
        return Err(Error::Contract("contribution needs at least one prediction".into()));
    };
    let scales = first.per_scale.len();
    let mut per_scale = vec![[0.0; NUM_NUTRIENTS]; scales];
    let mut total = [0.0; NUM_NUTRIENTS];
    for p in predictions {
        if p.per_scale.len() != scales {
            return Err(Error::Contract("predictions disagree on the number of scales".into()));
        }
        for (acc, row) in per_scale.iter_mut().zip(&p.per_scale) {
            for j in 0..NUM_NUTRIENTS {
                acc[j] += row[j];
            }
        }
        for j in 0..NUM_NUTRIENTS {
            total[j] += p.final_estimate[j];
        }
    }
    scale_contribution(&per_scale, &total)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, Graph, ParamSet};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn build<T>(f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> (ParamSet, T) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = f(&mut ParamBuilder::new(&mut ps, &mut rng)).unwrap();
        (ps, m)
    }

    #[test]
    fn heads_zero_and_hand_weights() {
        let (mut ps, h) = build(|pb| Heads::new(pb, "h", 2, [1.0, 2.0, 1.0, 1.0, 1.0]));
        ps.value_mut(h.proj.weight).data_mut().fill(0.0);
        let g = Graph::new(&ps);
        let x = g.constant(random(&[3, 3, 2], 0));
        assert!(h.forward(&x).unwrap().to_tensor().data().iter().all(|&v| v == 0.0));
        drop(g);

        // constant feature (1.5, -2): out_j = 1.5 w0j − 2 w1j + b_j, times scale
        *ps.value_mut(h.proj.weight) = Tensor::new(vec![2, 5], vec![1., 0., 2., 0., -1., 0., 1., 1., 0.5, 0.]).unwrap();
        *ps.value_mut(h.proj.bias.unwrap()) = Tensor::new(vec![5], vec![0., 0., 0., 1., 0.]).unwrap();
        let g = Graph::new(&ps);
        let feat = Tensor::from_fn(&[2, 2, 2], |i| if i % 2 == 0 { 1.5 } else { -2.0 });
        let out = h.forward(&g.constant(feat)).unwrap().to_tensor();
        assert_eq!(out.data(), &[1.5, -4.0, 1.0, 0.0, -1.5]);
    }

    #[test]
    fn heads_gradcheck() {
        let (mut ps, h) = build(|pb| Heads::new(pb, "h", 3, [1.0, 0.5, 2.0, 1.0, 1.0]));
        let x = random(&[2, 2, 3], 4);
        let w = random(&[5], 5);
        let rep = grad_check(&mut ps, 1e-5, |g| h.forward(&g.constant(x.clone()))?.mul_const(&w).map(|v| v.sum_all())).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (ps, conv) = build(|pb| Conv3x3::new(pb, "c", 2, 3));
        let x = random(&[3, 4, 2], 1);
        let g = Graph::new(&ps);
        let out = conv.forward(&g.constant(x.clone())).unwrap().to_tensor();
        let wt = ps.value(conv.lin.weight);
        let b = ps.value(conv.lin.bias.unwrap());
        for y in 0..3isize {
            for xx in 0..4isize {
                for o in 0..3 {
                    let mut acc = b.data()[o];
                    for (k, (dy, dx)) in (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).enumerate() {
                        let (yy, xs) = (y + dy, xx + dx);
                        if (0..3).contains(&yy) && (0..4).contains(&xs) {
                            for c in 0..2 {
                                acc += x.get(&[yy as usize, xs as usize, c]) * wt.get(&[k * 2 + c, o]);
                            }
                        }
                    }
                    assert!((out.get(&[y as usize, xx as usize, o]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_nearest() {
        let g = Graph::default();
        let x = g.constant(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
        let up = upsample_nearest(&x, 4, 4).unwrap().to_tensor();
        assert_eq!(up.data(), &[0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
        let one = g.constant(Tensor::from_fn(&[1, 1, 2], |i| i as f64 + 5.0));
        assert_eq!(upsample_nearest(&one, 2, 2).unwrap().to_tensor().data(), &[5., 6., 5., 6., 5., 6., 5., 6.]);
    }

    #[test]
    fn unet_shapes_zero_weights_and_gradcheck() {
        for (h, w) in [(8, 8), (2, 2), (1, 1), (4, 6)] {
            let (mut ps, blk) = build(|pb| UnetBlock::new(pb, "u", 3, 4, 2));
            let g = Graph::new(&ps);
            let out = blk.forward(&g.constant(random(&[h, w, 3], 2))).unwrap();
            assert_eq!(out.shape(), vec![h, w, 2]);
            drop(g);
            ps.value_mut(blk.conv_d.lin.weight).data_mut().fill(0.0);
            *ps.value_mut(blk.conv_d.lin.bias.unwrap()) = Tensor::new(vec![2], vec![0.25, -1.0]).unwrap();
            let g = Graph::new(&ps);
            let out = blk.forward(&g.constant(random(&[h, w, 3], 3))).unwrap().to_tensor();
            for px in out.data().chunks(2) {
                assert_eq!(px, &[0.25, -1.0]);
            }
        }
        let (mut ps, blk) = build(|pb| UnetBlock::new(pb, "u", 2, 2, 2));
        let x = random(&[4, 4, 2], 4);
        let wts = random(&[4, 4, 2], 5);
        let rep = grad_check(&mut ps, 1e-5, |g| blk.forward(&g.constant(x.clone()))?.mul_const(&wts).map(|v| v.sum_all())).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    fn fused<'g>(g: &'g Graph<'g>, config: &ModelConfig) -> (Vec<FusedFeature<'g>>, FusedFeature<'g>) {
        let fl = (1..=4)
            .map(|s| {
                let (gh, gw) = config.grid(s);
                FusedFeature {
                    scale: s,
                    tokens: g.constant(random(&[gh, gw, config.embed_dims[s - 1]], s as u64)),
                }
            })
            .collect();
        let (gh, gw) = config.grid(4);
        let f5 = FusedFeature {
            scale: 5,
            tokens: g.constant(random(&[gh, gw, config.fe_out_dim()], 9)),
        };
        (fl, f5)
    }

    #[test]
    fn wiring_and_exact_sum() {
        assert_eq!((6..=9).map(skip_source).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        let config = ModelConfig::default();
        let (ps, dec) = build(|pb| Decoder::new(pb, &config));
        assert_eq!(dec.stages.iter().map(|s| s.skip_scale).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        let g = Graph::new(&ps);
        let (fl, f5) = fused(&g, &config);
        let out = dec.decode(&fl, &f5).unwrap();
        assert_eq!(out.per_scale.iter().map(|o| o.scale).collect::<Vec<_>>(), vec![5, 6, 7, 8, 9]);
        let mut acc = out.per_scale[0].estimate.to_tensor().into_data();
        for o in &out.per_scale[1..] {
            for (a, b) in acc.iter_mut().zip(o.estimate.to_tensor().data()) {
                *a += b;
            }
        }
        assert_eq!(out.final_estimate.to_tensor().data(), &acc[..]);

        // decoder scale s only sees f_{10-s}: perturbing f1 leaves scales 5..8 unchanged
        let mut fl2 = fl.clone();
        fl2[0].tokens = g.constant(random(&[16, 16, 16], 99));
        let out2 = dec.decode(&fl2, &f5).unwrap();
        for k in 0..4 {
            assert_eq!(out.per_scale[k].estimate.to_tensor(), out2.per_scale[k].estimate.to_tensor());
        }
        assert!(out.per_scale[4].estimate.to_tensor().max_abs_diff(&out2.per_scale[4].estimate.to_tensor()) > 0.0);

        assert!(matches!(dec.decode(&fl[1..], &f5), Err(Error::Contract(_))));
        assert!(matches!(dec.decode(&fl, &fl[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_late_heads_leave_scale5() {
        let config = ModelConfig::default();
        let (mut ps, dec) = build(|pb| Decoder::new(pb, &config));
        for id in dec.late_head_params() {
            ps.value_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::new(&ps);
        let (fl, f5) = fused(&g, &config);
        let out = dec.decode(&fl, &f5).unwrap();
        assert_eq!(out.final_estimate.to_tensor(), out.per_scale[0].estimate.to_tensor());
    }

    #[test]
    fn single_scale_uses_only_head5() {
        let config = ModelConfig {
            multi_scale: false,
            ..ModelConfig::default()
        };
        let (ps, dec) = build(|pb| Decoder::new(pb, &config));
        assert!(dec.stages.is_empty());
        let g = Graph::new(&ps);
        let (_, f5) = fused(&g, &config);
        let out = dec.decode(&[], &f5).unwrap();
        assert_eq!(out.per_scale.len(), 1);
        assert_eq!(out.final_estimate.to_tensor(), dec.head5.forward(&f5.tokens).unwrap().to_tensor());
    }

    #[test]
    fn contribution_single_scale_and_zero_error() {
        let rows = [[5.0, 1.0, 2.0, 3.0, 4.0], [0.0; 5]];
        let c = scale_contribution(&rows, &rows[0]).unwrap();
        assert_eq!(c[0], [100.0; 5]);
        assert_eq!(c[1], [0.0; 5]);
        let err = scale_contribution(&rows, &[1.0, 1.0, 0.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Division { ref nutrient } if nutrient == "fat"));
    }

    #[test]
    fn aggregate_contribution_sums_before_dividing() {
        let p = |a: f64, b: f64| Prediction {
            final_estimate: [a + b; 5],
            per_scale: vec![[a; 5], [b; 5]],
        };
        let c = aggregate_contribution(&[p(3.0, 1.0), p(5.0, -1.0)]).unwrap();
        assert_eq!(c[0], [100.0; 5]);
        assert_eq!(c[1], [0.0; 5]);
        let c = aggregate_contribution(&[p(6.0, -2.0)]).unwrap();
        assert_eq!(c[0], [150.0; 5]);
        assert_eq!(c[1], [-50.0; 5]);
        assert!(matches!(aggregate_contribution(&[]), Err(Error::Contract(_))));
    }
}
