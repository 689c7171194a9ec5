//! Finite-difference checks over every differentiable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Heads, UnetBlock};
use crate::encoder::windows::shifted_window_mask;
use crate::encoder::{FeVariant, ModelConfig, NUM_SCALES};
use crate::error::Result;
use crate::fusion::{ConcatPath, CrossPath, FeFusion, FlFusion, QueryMix};
use crate::model::NuNet;
use crate::numerics::{
    attention, grad_check_sampled, AttentionParams, GradCheckReport, Graph, LayerNorm, Linear, Mlp, ParamBuilder,
    ParamId, ParamSet, Tensor, Var, LAYER_NORM_EPS,
};
use crate::training::sample_loss;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Adds `U(-0.2, 0.2)` to every parameter so no gradient vanishes by symmetry.
fn jitter(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for v in ps.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

struct Case {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn build<T>(&mut self, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> Result<T> {
        let mut init = ChaCha8Rng::seed_from_u64(self.rng.gen());
        let m = f(&mut ParamBuilder::new(&mut self.params, &mut init))?;
        jitter(&mut self.params, &mut self.rng);
        Ok(m)
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = uniform(shape, &mut self.rng, 1.0);
        self.params.add(name, t)
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor {
        uniform(shape, &mut self.rng, 1.0)
    }

    fn check<F>(mut self, per_tensor: usize, f: F) -> Result<GradCheckReport>
    where
        F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
    {
        grad_check_sampled(&mut self.params, GRADCHECK_EPS, per_tensor, f)
    }
}

fn weighted<'g>(out: Result<Var<'g>>, w: &Tensor) -> Result<Var<'g>> {
    Ok(out?.mul_const(w)?.sum_all())
}

fn scale4(config: &ModelConfig) -> [usize; 3] {
    let (h, w) = config.grid(NUM_SCALES);
    [h, w, config.embed_dims[NUM_SCALES - 1]]
}

/// Elements checked per tensor in the full-model entry.
pub const FULL_MODEL_PER_TENSOR: usize = 6;

/// Runs every check. Fusion and full-model entries use `config` shapes;
/// `per_tensor` caps the elements checked in each parameter tensor, and
/// `seed` fixes inputs, weights and jitter.
pub fn run_suite(config: &ModelConfig, per_tensor: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    config.validate()?;
    let tiny = config.clone();
    let s4 = scale4(&tiny);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| out.push(SuiteEntry { name, report });
    let all = per_tensor;

    {
        let mut c = Case::new(seed);
        let m = c.build(|pb| Linear::new(pb, "linear", 3, 4, true))?;
        let x = c.input("x", &[2, 3])?;
        let w = c.weights(&[2, 4]);
        push("linear", c.check(all, |g| weighted(m.forward(&g.param(x)), &w))?);
    }
    {
        let mut c = Case::new(seed + 1);
        let m = c.build(|pb| LayerNorm::new(pb, "ln", 5))?;
        let x = c.input("x", &[3, 5])?;
        let w = c.weights(&[3, 5]);
        assert_eq!(m.eps, LAYER_NORM_EPS);
        push("layer_norm", c.check(all, |g| weighted(m.forward(&g.param(x)), &w))?);
    }
    {
        let mut c = Case::new(seed + 2);
        let x = c.input("x", &[2, 3, 4])?;
        let w = c.weights(&[2, 3, 4]);
        push("softmax", c.check(all, |g| weighted(g.param(x).scale(2.0).softmax(), &w))?);
    }
    {
        let mut c = Case::new(seed + 3);
        let m = c.build(|pb| AttentionParams::new(pb, "attn", 4, 2, 4))?;
        let x = c.input("x", &[2, 4, 4])?;
        let mask = shifted_window_mask(4, 2, 2, 1)?;
        let w = c.weights(&[2, 4, 4]);
        push(
            "attention",
            c.check(all, |g| {
                let v = g.param(x);
                weighted(attention(&v, &v, &m, Some(&mask)), &w)
            })?,
        );
    }
    for (name, mix) in [("cross_attention_mul", QueryMix::Mul), ("cross_attention_add", QueryMix::Add)] {
        let mut c = Case::new(seed + 4);
        let m = c.build(|pb| CrossPath::new(pb, "cross", &tiny, mix, false))?;
        let (r, d) = (c.input("r", &s4)?, c.input("d", &s4)?);
        let w = c.weights(&s4);
        push(name, c.check(all, |g| weighted(m.forward(&g.param(r), &g.param(d)), &w))?);
    }
    {
        let mut c = Case::new(seed + 5);
        let m = c.build(|pb| Mlp::new(pb, "mlp", 4, 2.0, 3))?;
        let x = c.input("x", &[2, 2, 4])?;
        let w = c.weights(&[2, 2, 3]);
        push("mlp", c.check(all, |g| weighted(m.forward(&g.param(x)), &w))?);
    }
    {
        let mut c = Case::new(seed + 6);
        let m = c.build(|pb| FlFusion::new(pb, &tiny, 3, tiny.fl_variant))?;
        let (gh, gw) = tiny.grid(3);
        let shape = [gh, gw, tiny.embed_dims[2]];
        let (r, d) = (c.input("r", &shape)?, c.input("d", &shape)?);
        let w = c.weights(&shape);
        push("fl", c.check(all, |g| weighted(m.fuse(&g.param(r), &g.param(d)), &w))?);
    }
    {
        let mut c = Case::new(seed + 7);
        let m = c.build(|pb| ConcatPath::new(pb, "concat", &tiny, true))?;
        let (r, d) = (c.input("r", &s4)?, c.input("d", &s4)?);
        let w = c.weights(&[s4[0], s4[1], 2 * s4[2]]);
        push("fe_concat_path", c.check(all, |g| weighted(m.forward(&g.param(r), &g.param(d)), &w))?);
    }
    for (name, mix) in [("fe_mul_path", QueryMix::Mul), ("fe_add_path", QueryMix::Add)] {
        let mut c = Case::new(seed + 8);
        let m = c.build(|pb| CrossPath::new(pb, "path", &tiny, mix, true))?;
        let (r, d) = (c.input("r", &s4)?, c.input("d", &s4)?);
        let w = c.weights(&s4);
        push(name, c.check(all, |g| weighted(m.forward(&g.param(r), &g.param(d)), &w))?);
    }
    {
        let mut c = Case::new(seed + 9);
        let m = c.build(|pb| FeFusion::new(pb, &tiny, FeVariant::Full))?;
        let (r, d) = (c.input("r", &s4)?, c.input("d", &s4)?);
        let w = c.weights(&[s4[0], s4[1], tiny.fe_out_dim()]);
        push("fe_merge", c.check(all.min(64), |g| weighted(m.fuse(&g.param(r), &g.param(d)), &w))?);
    }
    {
        let mut c = Case::new(seed + 10);
        let m = c.build(|pb| UnetBlock::new(pb, "unet", 3, 2, 2))?;
        let x = c.input("x", &[4, 4, 3])?;
        let w = c.weights(&[4, 4, 2]);
        push("unet_block", c.check(all, |g| weighted(m.forward(&g.param(x)), &w))?);
    }
    {
        let mut c = Case::new(seed + 11);
        let m = c.build(|pb| Heads::new(pb, "heads", 3, [1.0, 2.0, 0.5, 1.0, 1.5]))?;
        let x = c.input("x", &[2, 2, 3])?;
        let w = c.weights(&[5]);
        push("heads", c.check(all, |g| weighted(m.forward(&g.param(x)), &w))?);
    }
    {
        let mut c = Case::new(seed + 12);
        let net = c.build(|pb| NuNet::build(pb, &tiny))?;
        let rgb = uniform(&[tiny.image_height, tiny.image_width, 3], &mut c.rng, 1.0);
        let depth = uniform(&[tiny.image_height, tiny.image_width, 1], &mut c.rng, 1.0);
        let w = c.weights(&[5]);
        push(
            "full_model",
            c.check(all.min(FULL_MODEL_PER_TENSOR), |g| {
                let out = net.forward(&g.constant(rgb.clone()), &g.constant(depth.clone()))?;
                weighted(Ok(out.final_estimate), &w)
            })?,
        );
    }
    {
        let mut c = Case::new(seed + 13);
        let p = c.input("pred", &[5])?;
        let truth = [3.0, 0.5, 10.0, 0.0, 2.0];
        push("loss", c.check(all, |g| sample_loss(&g.param(p), &truth, 2))?);
    }
    Ok(out)
}
