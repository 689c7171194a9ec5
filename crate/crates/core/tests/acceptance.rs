//! Acceptance suite: one pass/fail line per criterion, tolerances pinned below.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nunet::checkpoint;
use nunet::data::{load_dataset, synth_generate, Split, SynthConfig};
use nunet::decoder::{aggregate_contribution, skip_source, Decoder, FIRST_DECODER_SCALE, NUM_NUTRIENTS};
use nunet::encoder::windows::{
    cyclic_shift, partition_var, shifted_window_mask, window_partition, window_reverse, MASK_VALUE,
};
use nunet::encoder::{window_attention, FeVariant, FlVariant, GridSpec, ModelConfig};
use nunet::fusion::{FeFusion, FlFusion, FusedFeature};
use nunet::gradsuite::run_suite;
use nunet::numerics::{attention_with_weights, AttentionParams, Graph, ParamBuilder, ParamSet, Tensor};
use nunet::training::{
    ablate, dataset_loss, eval_policy, evaluate, label_scale, loss, mape_mean, predict_all, prepare, train,
    TrainConfig, ABLATION_VARIANTS,
};
use nunet::{NuNet, Result};

const MAPE_MEAN_TARGET: f64 = 15.65;
const MAPE_MEAN_TOL: f64 = 0.005;
const GRAD_TOL: f64 = 1e-3;
const CROSS_REGION_MAX: f64 = 1e-8;
const OVERFIT_RATIO_MAX: f64 = 0.10;
const CONTRIB_TOL: f64 = 1e-6;

type Outcome = Result<(bool, String)>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> Result<(ParamSet, T)> {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut ps, &mut rng))?;
    Ok((ps, m))
}

fn jitter(ps: &mut ParamSet, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.value_mut(id).data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn metric_oracle() -> Outcome {
    let got = mape_mean(&[12.80, 8.72, 19.67, 18.66, 18.42]);
    Ok(((got - MAPE_MEAN_TARGET).abs() <= MAPE_MEAN_TOL, format!("mean MAPE {got:.4}")))
}

fn loss_oracle() -> Outcome {
    let hand = loss(&[[109.0, 1.0]], &[[99.0, 0.0]])?;
    let y = [[3.0, 0.0, 7.5, 1.0, 2.0], [10.0, 4.0, 0.5, 0.0, 9.0]];
    let perfect = loss(&y, &y)?;
    Ok((hand == 1.1 && perfect == 0.0, format!("hand example {hand:?}, perfect {perfect:?}")))
}

fn gradient_suite() -> Outcome {
    let entries = run_suite(&ModelConfig::tiny(), usize::MAX, 0)?;
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("suite is non-empty");
    let ok = entries.len() == 16 && entries.iter().all(|e| e.report.max_rel_error < GRAD_TOL && e.report.checked > 0);
    Ok((
        ok,
        format!("{} modules, worst {} at {:.2e}", entries.len(), worst.name, worst.report.max_rel_error),
    ))
}

/// Brute-force oracle: two tokens of a rolled window may attend iff the
/// roll did not wrap between them, i.e. their offset is the same before
/// and after rolling on both axes.
fn same_region(rolled: [(usize, usize); 2], original: [(usize, usize); 2]) -> bool {
    let d = |a: usize, b: usize| a as isize - b as isize;
    d(rolled[0].0, rolled[1].0) == d(original[0].0, original[1].0)
        && d(rolled[0].1, rolled[1].1) == d(original[0].1, original[1].1)
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut round_trips = true;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ws = r.gen_range(1..=4);
        let (gh, gw) = (ws * r.gen_range(1..=3), ws * r.gen_range(1..=3));
        let t = random(&[gh, gw, r.gen_range(1..=3)], &mut r);
        round_trips &= window_reverse(&window_partition(&t, ws)?, gh, gw)? == t;
        let (dy, dx) = (r.gen_range(-5..=5), r.gen_range(-5..=5));
        round_trips &= cyclic_shift(&cyclic_shift(&t, dy, dx)?, -dy, -dx)? == t;
    }

    let mut worst: f64 = 0.0;
    let mut mask_agrees = true;
    for (gh, gw, ws, shift) in [(4, 4, 2, 1), (8, 8, 4, 2), (8, 8, 2, 1), (6, 6, 3, 1), (8, 4, 4, 2), (8, 8, 4, 1)] {
        let spec = GridSpec { height: gh, width: gw, window: ws, shift };
        let np = ws * ws;
        let (mut ps, attn) = build(gh as u64, |pb| AttentionParams::new(pb, "a", 4, 2, np))?;
        jitter(&mut ps, 1, 3.0);
        let mask = shifted_window_mask(gh, gw, ws, shift)?;
        let g = Graph::new(&ps);
        let x = g.constant(random(&[gh, gw, 4], &mut rng));
        let w = partition_var(&x, spec, true)?;
        let (_, probs) = attention_with_weights(&w, &w, &attn, Some(&mask))?;
        let probs = probs.to_tensor();
        let nwx = gw / ws;
        let rolled = |win: usize, p: usize| ((win / nwx) * ws + p / ws, (win % nwx) * ws + p % ws);
        let origin = |win: usize, p: usize| {
            let (y, x) = rolled(win, p);
            ((y + shift) % gh, (x + shift) % gw)
        };
        for win in 0..spec.num_windows() {
            for i in 0..np {
                for j in 0..np {
                    let allowed = same_region([rolled(win, i), rolled(win, j)], [origin(win, i), origin(win, j)]);
                    mask_agrees &= allowed == (mask.get(&[win, i, j]) != MASK_VALUE);
                    if !allowed {
                        for h in 0..2 {
                            worst = worst.max(probs.get(&[win, h, i, j]));
                        }
                    }
                }
            }
        }
    }

    let config = ModelConfig::default();
    let (ps, dec) = build(3, |pb| Decoder::new(pb, &config))?;
    let g = Graph::new(&ps);
    let fl: Vec<FusedFeature> = (1..=4)
        .map(|s| {
            let (gh, gw) = config.grid(s);
            FusedFeature {
                scale: s,
                tokens: g.constant(random(&[gh, gw, config.embed_dims[s - 1]], &mut rng)),
            }
        })
        .collect();
    let (gh, gw) = config.grid(4);
    let f5 = FusedFeature {
        scale: 5,
        tokens: g.constant(random(&[gh, gw, config.fe_out_dim()], &mut rng)),
    };
    let base = dec.decode(&fl, &f5)?;
    let mut wiring = dec.stages.iter().all(|st| st.skip_scale == skip_source(st.scale) && st.skip_scale == 10 - st.scale);
    for k in 1..=4 {
        let mut perturbed = fl.clone();
        perturbed[k - 1].tokens = g.constant(random(&perturbed[k - 1].tokens.shape(), &mut rng));
        let out = dec.decode(&perturbed, &f5)?;
        let first_changed = base
            .per_scale
            .iter()
            .zip(&out.per_scale)
            .find(|(a, b)| a.estimate.to_tensor() != b.estimate.to_tensor())
            .map(|(a, _)| a.scale);
        wiring &= first_changed == Some(10 - k);
    }
    Ok((
        round_trips && mask_agrees && worst < CROSS_REGION_MAX && wiring,
        format!(
            "round trips {round_trips}, mask matches oracle {mask_agrees}, max cross-region weight {worst:.1e}, wiring {wiring}"
        ),
    ))
}

fn degeneracy_reductions() -> Outcome {
    let config = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut fl_sum = true;
    for scale in 1..=4 {
        let (mut ps, m) = build(scale as u64, |pb| FlFusion::new(pb, &config, scale, FlVariant::Full))?;
        jitter(&mut ps, 2, 0.3);
        for (id, p) in ps.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            if p.contains(".out.") {
                ps.value_mut(id).data_mut().fill(0.0);
            }
        }
        let (gh, gw) = config.grid(scale);
        let shape = [gh, gw, config.embed_dims[scale - 1]];
        let (r, d) = (random(&shape, &mut rng), random(&shape, &mut rng));
        let g = Graph::new(&ps);
        let out = m.fuse(&g.constant(r.clone()), &g.constant(d.clone()))?.to_tensor();
        let sum = Tensor::new(shape.to_vec(), r.data().iter().zip(d.data()).map(|(a, b)| a + b).collect())?;
        fl_sum &= bits(&out) == bits(&sum);
    }

    let (mut ps, net) = build(7, |pb| NuNet::build(pb, &config))?;
    jitter(&mut ps, 3, 0.05);
    for id in net.decoder.late_head_params() {
        ps.value_mut(id).data_mut().fill(0.0);
    }
    let p = net.predict(&ps, &random(&[64, 64, 3], &mut rng), &random(&[64, 64, 1], &mut rng))?;
    let heads = p.per_scale.len() == 5
        && p.final_estimate.map(f64::to_bits) == p.per_scale[0].map(f64::to_bits)
        && p.per_scale[1..].iter().all(|row| row.iter().all(|&v| v == 0.0));

    let (mut ps, fe) = build(11, |pb| FeFusion::new(pb, &config, FeVariant::AddOnly))?;
    jitter(&mut ps, 4, 0.3);
    let path = fe.add.as_ref().expect("add-only variant has the add path");
    let (gh, gw) = config.grid(4);
    let shape = [gh, gw, config.embed_dims[3]];
    let r = random(&shape, &mut rng);
    let g = Graph::new(&ps);
    let rv = g.constant(r);
    let out = fe.fuse(&rv, &g.constant(Tensor::zeros(&shape)))?.to_tensor();
    let attended = window_attention(
        &path.norm_q.forward(&rv)?,
        &path.norm_kv.forward(&rv)?,
        &path.cross,
        path.spec,
        false,
        None,
    )?;
    let a1 = rv.add(&attended)?;
    let expect = path.swmsa.as_ref().expect("full path keeps SW-MSA").forward(&a1)?.to_tensor();
    let add_path = bits(&out) == bits(&expect);

    Ok((
        fl_sum && heads && add_path,
        format!("FL sum {fl_sum}, late heads {heads}, zero-depth add path {add_path}"),
    ))
}

fn learnability() -> Outcome {
    let dir = tempfile::tempdir()?;
    synth_generate(40, 1, &SynthConfig::default(), dir.path())?;
    let train_set = load_dataset(dir.path(), Split::Train)?;
    let test_set = load_dataset(dir.path(), Split::Test)?;
    let mut config = ModelConfig::default();
    config.output_scale = label_scale(&train_set);
    let (net, mut params) = NuNet::new(&config)?;
    let policy = eval_policy(&net);
    let train_ready = prepare(&train_set, &policy)?;
    let test_ready = prepare(&test_set, &policy)?;
    let initial = dataset_loss(&net, &params, &train_ready)?;
    let tc = TrainConfig {
        batch_size: 8,
        epochs: 1000,
        learning_rate: 1e-3,
        lr_decay: 0.97,
        max_steps: Some(300),
        eval_every: 0,
        augment: false,
        seed: 3,
        ..TrainConfig::default()
    };
    let outcome = train(&net, &mut params, &train_set, &[], &tc, None)?;
    let fin = dataset_loss(&net, &params, &train_ready)?;
    let ratio = fin / initial;

    let full = evaluate(&net, &params, &test_ready)?;
    let mut ablated = test_ready.clone();
    for s in &mut ablated {
        s.input.depth.data_mut().fill(0.0);
    }
    let no_depth = evaluate(&net, &params, &ablated)?;
    let (m_full, m_abl) = (full.mape[1], no_depth.mape[1]);
    Ok((
        train_set.len() == 32 && outcome.steps == 300 && ratio <= OVERFIT_RATIO_MAX && m_abl > m_full,
        format!(
            "{} samples, {} steps, loss {initial:.4} -> {fin:.4} (ratio {ratio:.4}), mass MAPE full {m_full:.3} vs depth-zeroed {m_abl:.3}",
            train_set.len(),
            outcome.steps
        ),
    ))
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir()?;
    synth_generate(10, 2, &SynthConfig::default(), dir.path())?;
    let train_set = load_dataset(dir.path(), Split::Train)?;
    let test_set = load_dataset(dir.path(), Split::Test)?;
    let mut base = ModelConfig::default();
    base.output_scale = label_scale(&train_set);
    let test_ready = prepare(&test_set, &nunet::data::AugmentPolicy::eval(base.image_height, base.image_width))?;
    let tc = TrainConfig {
        batch_size: 8,
        epochs: 1,
        max_steps: Some(1),
        seed: 1,
        ..TrainConfig::default()
    };
    let variants: Vec<String> = ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect();
    let out = tempfile::tempdir()?;
    let rows = ablate(&base, &tc, &train_set, &test_ready, &variants, Some(out.path()))?;
    let params = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.params).unwrap_or(0);
    let (full, no_sw, plain) = (params("multi-scale"), params("fe-no-swmsa"), params("fe-plain-concat"));
    let complete = rows.len() == ABLATION_VARIANTS.len()
        && rows.iter().all(|r| r.final_train_loss.is_finite() && r.mean_mape.is_finite());
    let csv_rows = std::fs::read_to_string(out.path().join("ablate.csv"))?.lines().count();
    Ok((
        complete && csv_rows == rows.len() + 1 && full > no_sw && no_sw > plain,
        format!("{} variants, params fe-full {full} > fe-no-swmsa {no_sw} > fe-plain-concat {plain}", rows.len()),
    ))
}

fn contribution() -> Outcome {
    let dir = tempfile::tempdir()?;
    synth_generate(6, 4, &SynthConfig::default(), dir.path())?;
    let samples = load_dataset(dir.path(), Split::Train)?;
    let mut worst: f64 = 0.0;
    let mut saw_negative = false;
    for seed in 0..3u64 {
        let config = ModelConfig {
            init_seed: seed,
            output_scale: label_scale(&samples),
            ..ModelConfig::default()
        };
        let (net, mut params) = NuNet::new(&config)?;
        if seed == 2 {
            let last = net.decoder.stages.last().expect("multi-scale decoder");
            let id = last.heads.proj.bias.expect("heads carry a bias");
            params.value_mut(id).data_mut().fill(-0.5);
        }
        let path = dir.path().join(format!("m{seed}.ckpt"));
        checkpoint::save(&path, &config, &params)?;
        let (net2, mut loaded) = NuNet::new(&net.config)?;
        checkpoint::load_into(&path, &config, &mut loaded)?;
        let preds = predict_all(&net2, &loaded, &prepare(&samples, &eval_policy(&net2))?)?;
        let table = aggregate_contribution(&preds)?;
        for j in 0..NUM_NUTRIENTS {
            let sum: f64 = table.iter().map(|row| row[j]).sum();
            worst = worst.max((sum - 100.0).abs());
        }
        saw_negative |= table.iter().flatten().any(|&v| v < 0.0);
        assert_eq!(table.len(), 10 - FIRST_DECODER_SCALE);
    }
    Ok((
        worst <= CONTRIB_TOL && saw_negative,
        format!("max |column sum - 100| {worst:.1e}, negative entries kept {saw_negative}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("metric oracle", Duration::from_secs(1), metric_oracle),
        ("loss oracle", Duration::from_secs(1), loss_oracle),
        ("gradient suite", Duration::from_secs(5 * 60), gradient_suite),
        ("structural invariants", Duration::from_secs(60), structural_invariants),
        ("degeneracy reductions", Duration::from_secs(60), degeneracy_reductions),
        ("end-to-end learnability", Duration::from_secs(15 * 60), learnability),
        ("ablation harness", Duration::from_secs(60 * 60), ablation_harness),
        ("contribution diagnostic", Duration::from_secs(60 * 60), contribution),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok((ok, detail)) => (ok, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let ok = ok && elapsed < limit;
        failed += usize::from(!ok);
        println!(
            "criterion {}: {} {name}: {detail} [{:.2}s, limit {}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
