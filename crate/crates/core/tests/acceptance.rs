//! Acceptance criteria 1 to 10. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! `cargo test --release -p coma-core --test acceptance -- --nocapture`

// `ensure!` negates arbitrary float comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use coma::agents::{parse_bodypart_lines, parse_correction, parse_local_edits, parse_steps, AgentError, Limb};
use coma::editops::{blend, edit_bodypart, edit_inbetween};
use coma::evalmetrics::{fid, mas, r_precision, EmbeddingKind, EmbeddingSet};
use coma::motiondata::{synthetic_motion, Part};
use coma::orchestrator::{check_trace, Op, WorkflowTrace};
use coma::spamgen::{
    cfg_logits, gamma, mask_count, BasePlan, GenConfig, GenModel, HashEmbedder, Kind, ResPlan, Sample, Sublayer,
    TextBundle, TextEmbedder,
};
use coma::spamvq::{quantize_residual, Codebook, LatentSeq, RvqConfig, RvqModel, TokenGrid};
use coma::trajedit::{
    apply_trajectory, parse_curve_spec, profile_from_spec, read_back_profile, resample_uniform, sample_curve, PolyLine,
    DEFAULT_SAMPLES,
};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(t0: Instant, limit: Duration) -> Outcome {
    let e = t0.elapsed();
    if e < limit {
        Ok(format!("{:.2}s", e.as_secs_f64()))
    } else {
        Err(format!("took {:.2}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
    }
}

// ---------------------------------------------------------------- 1

fn rvq_identity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d, k, layers) = (1000, 16, 32, 3);
    let books: Vec<Codebook> = (0..layers).map(|_| Codebook::random(k, d, &mut rng)).collect();
    // Normal draws use the full mantissa; uniform f32 draws sit on a fixed
    // grid where every subtraction is exact and the check would be vacuous.
    let vectors: Vec<f32> = (0..n * d)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    let seq = LatentSeq {
        part: Part::LU,
        n,
        d,
        vectors,
    };
    let q = quantize_residual(&seq, &books, layers).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..n * d {
        let mut rebuilt = q.residual[i] as f64;
        for codes in &q.layer_codes {
            rebuilt += codes[i] as f64;
        }
        worst = worst.max((rebuilt - seq.vectors[i] as f64).abs());
        // The running sum is kept too; it must agree with the layer codes.
        worst = worst.max(((q.sum[i] + q.residual[i]) as f64 - seq.vectors[i] as f64).abs());
    }
    ensure!(worst < 1e-5, "max abs error {worst:e}");
    let time = within(t0, Duration::from_secs(5))?;
    Ok(format!("max abs error {worst:.2e} over {n} latents, {time}"))
}

// ---------------------------------------------------------------- 2

/// Central differences of `loss` at up to `limit` coordinates of `theta`,
/// compared with `analytic`. Returns the worst relative error.
fn fd_compare(
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> Option<f64>,
) -> Result<(f64, usize), String> {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for &c in coords {
        let mut p = theta.to_vec();
        p[c] = theta[c] + h;
        let up = loss(&p);
        p[c] = theta[c] - h;
        let down = loss(&p);
        let (Some(up), Some(down)) = (up, down) else {
            // The perturbation crossed a quantization boundary.
            skipped += 1;
            continue;
        };
        let fd = (up - down) / (2.0 * h);
        let a = analytic[c];
        let err = (a - fd).abs();
        let scale = a.abs().max(fd.abs());
        if err > 1e-3 * scale + 1e-8 {
            return Err(format!("coordinate {c}: analytic {a:e} vs finite difference {fd:e}"));
        }
        if scale > 1e-6 {
            worst = worst.max(err / scale);
        }
    }
    Ok((worst, skipped))
}

fn pick(total: usize, limit: usize, seed: u64) -> Vec<usize> {
    if total <= limit {
        return (0..total).collect();
    }
    let mut v = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, limit).into_vec();
    v.sort_unstable();
    v
}

fn toy_gen() -> GenModel {
    GenModel::new(
        GenConfig {
            layers: 1,
            heads: 1,
            model_dim: 3,
            ff_dim: 3,
            text_dim: 4,
            max_len: 3,
            codes: 4,
            quant_layers: 2,
            ..GenConfig::desk()
        },
        11,
    )
    .unwrap()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut notes = Vec::new();

    // Reconstruction plus commitment loss of the tokenizer. Latents are held
    // fixed so the loss is smooth in the decoder parameters; the latent
    // gradient of the commitment term is checked separately.
    let cfg = RvqConfig {
        num_layers: 2,
        codes_per_book: 4,
        code_dim: 2,
        width: 4,
        downscale: 2,
        beta: 0.25,
        ..RvqConfig::desk()
    };
    let mut rvq = RvqModel::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    // Codes seeded from another clip, so residuals are not trivially zero.
    rvq.init_codebooks(&[synthetic_motion(5, 8).unwrap()], &mut ChaCha8Rng::seed_from_u64(2))
        .map_err(|e| e.to_string())?;
    let frames = 16;
    let clip = synthetic_motion(4, frames).unwrap();
    let latents: Vec<_> = {
        let mut tape = coma::nn::Tape::new();
        Part::ALL
            .iter()
            .map(|&p| {
                let pm = coma::motiondata::slice_part(&clip, p, rvq.scheme()).unwrap();
                let x = tape.constant(coma::nn::Tensor::from_vec(
                    frames,
                    pm.dim,
                    (0..frames * pm.dim).map(|i| pm.get(i / pm.dim, i % pm.dim) as f64).collect(),
                ));
                let y = rvq.encoder_forward(&mut tape, p, x);
                tape.value(y).clone()
            })
            .collect()
    };
    let layers = cfg.num_layers;
    let (_, dec, with_beta, assign) = rvq.latent_loss(&clip, &latents, layers).map_err(|e| e.to_string())?;
    let theta = rvq.params.flatten();
    let analytic = dec.flatten();
    let mut probe = rvq.clone();
    // Encoder weights do not move the loss at fixed latents; probe the decoder.
    let mut decoder = Vec::new();
    let mut off = 0;
    for (_, name, t) in rvq.params.iter() {
        if name.starts_with("dec.") {
            decoder.extend(off..off + t.data.len());
        }
        off += t.data.len();
    }
    let coords: Vec<usize> = pick(decoder.len(), 200, 3).into_iter().map(|i| decoder[i]).collect();
    let (w, _) = fd_compare(&theta, &analytic, &coords, 1e-6, |p| {
        probe.params.set_flat(p);
        Some(probe.latent_loss(&clip, &latents, layers).unwrap().0.total)
    })?;
    notes.push(format!("rvq decoder {w:.1e}"));

    // Commitment term: the straight-through part is the same with beta = 0,
    // so the difference isolates d(beta * commit)/d(latent).
    let mut no_beta = rvq.clone();
    no_beta.cfg.beta = 0.0;
    let (_, _, straight, _) = no_beta.latent_loss(&clip, &latents, layers).map_err(|e| e.to_string())?;
    let flat = |ts: &[coma::nn::Tensor]| ts.iter().flat_map(|t| t.data.clone()).collect::<Vec<f64>>();
    let lat0 = flat(&latents);
    let analytic: Vec<f64> = flat(&with_beta).iter().zip(flat(&straight)).map(|(a, b)| a - b).collect();
    let shapes: Vec<(usize, usize)> = latents.iter().map(|t| t.shape()).collect();
    let unflat = |p: &[f64]| {
        let mut off = 0;
        shapes
            .iter()
            .map(|&(r, c)| {
                let t = coma::nn::Tensor::from_vec(r, c, p[off..off + r * c].to_vec());
                off += r * c;
                t
            })
            .collect::<Vec<_>>()
    };
    let (w, skipped) = fd_compare(&lat0, &analytic, &pick(lat0.len(), 200, 4), 1e-3, |p| {
        let (l, _, _, a) = rvq.latent_loss(&clip, &unflat(p), layers).unwrap();
        let same = a.iter().zip(&assign).all(|(x, y)| x.iter().zip(y).all(|(u, v)| u.1 == v.1));
        // Recon is unchanged while assignments hold; only commit moves.
        same.then_some(cfg.beta * l.commit)
    })?;
    ensure!(skipped < 20, "{skipped} latent probes crossed a code boundary");
    notes.push(format!("rvq commitment {w:.1e}"));

    // Masked-token loss of the base transformer and full-layer loss of the
    // residual transformer.
    let g = toy_gen();
    let emb = HashEmbedder::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut grid = TokenGrid::masked(2, 3, 4);
    for v in grid.data.iter_mut() {
        *v = rng.gen_range(0..4);
    }
    let sample = Sample {
        grid,
        text: TextBundle::global(emb.embed("a person waves").unwrap()),
    };
    let plan = BasePlan {
        masked: vec![0, 4, 5, 9, 11],
        drop_text: false,
    };
    let base_n = g.base.scalar_count();
    let res_n = g.res.scalar_count();
    ensure!(base_n <= 200 && res_n <= 200, "toy shapes too large: {base_n}, {res_n}");
    let (_, grads, _) = g.base_sample_grad(&sample, &plan).map_err(|e| e.to_string())?;
    let theta = g.base.flatten();
    let mut probe = g.clone();
    let (w, _) = fd_compare(&theta, &grads.flatten(), &pick(base_n, 200, 0), 1e-5, |p| {
        probe.store_mut(Kind::Base).set_flat(p);
        Some(probe.base_sample_grad(&sample, &plan).unwrap().0)
    })?;
    notes.push(format!("base {w:.1e} ({base_n} params)"));

    let plan = ResPlan { j: 1, drop_text: false };
    let (_, grads) = g.res_sample_grad(&sample, &plan).map_err(|e| e.to_string())?;
    let theta = g.res.flatten();
    let mut probe = g.clone();
    let (w, _) = fd_compare(&theta, &grads.flatten(), &pick(res_n, 200, 0), 1e-5, |p| {
        probe.store_mut(Kind::Residual).set_flat(p);
        Some(probe.res_sample_grad(&sample, &plan).unwrap().0)
    })?;
    notes.push(format!("residual {w:.1e} ({res_n} params)"));

    let time = within(t0, Duration::from_secs(30))?;
    Ok(format!("worst relative error: {}; {time}", notes.join(", ")))
}

// ---------------------------------------------------------------- 3

fn desk_overfit() -> Outcome {
    let t0 = Instant::now();
    let clips: Vec<_> = (0..8).map(|s| synthetic_motion(s, 64).unwrap()).collect();
    let mut rvq = RvqModel::new(RvqConfig::desk(), 0).map_err(|e| e.to_string())?;
    let mut opt = rvq.new_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut l1 = f64::INFINITY;
    let mut rvq_steps = 0;
    while rvq_steps < 2000 {
        rvq.train_step(&clips, &mut opt, &mut rng).map_err(|e| e.to_string())?;
        rvq_steps += 1;
        if rvq_steps % 100 == 0 {
            l1 = rvq.reconstruction_l1(&clips).map_err(|e| e.to_string())?;
            if l1 < 0.05 {
                break;
            }
        }
    }
    ensure!(l1 < 0.05, "RVQ mean L1 {l1:.4} after {rvq_steps} steps");

    let emb = HashEmbedder::new(GenConfig::desk().text_dim);
    let samples: Vec<Sample> = clips
        .iter()
        .map(|m| Sample {
            grid: rvq.tokenize(m).unwrap(),
            text: TextBundle::global(emb.embed(m.text.as_deref().unwrap_or("")).unwrap()),
        })
        .collect();
    let mut gen = GenModel::new(GenConfig::desk(), 0).map_err(|e| e.to_string())?;
    let (mut ob, _) = gen.optimizers();
    let mut acc = 0.0;
    let mut gen_steps = 0;
    while gen_steps < 2000 {
        gen.train_base_step(&samples, &mut ob, &mut rng).map_err(|e| e.to_string())?;
        gen_steps += 1;
        if gen_steps % 100 == 0 {
            acc = gen
                .masked_accuracy(&samples, 4, &mut ChaCha8Rng::seed_from_u64(99))
                .map_err(|e| e.to_string())?;
            if acc >= 0.95 {
                break;
            }
        }
    }
    ensure!(acc >= 0.95, "masked accuracy {acc:.3} after {gen_steps} steps");
    let time = within(t0, Duration::from_secs(600))?;
    Ok(format!(
        "RVQ L1 {l1:.4} at step {rvq_steps}; base accuracy {acc:.3} at step {gen_steps}; {time}"
    ))
}

// ---------------------------------------------------------------- 4

fn schedule_and_cfg() -> Outcome {
    let g0 = gamma(0.0).map_err(|e| e.to_string())?;
    let g1 = gamma(1.0).map_err(|e| e.to_string())?;
    let gh = gamma(0.5).map_err(|e| e.to_string())?;
    ensure!(g0 == 1.0, "gamma(0) = {g0}");
    ensure!(g1 == 0.0, "gamma(1) = {g1}");
    ensure!((gh - 2f64.sqrt() / 2.0).abs() <= 1e-9, "gamma(0.5) = {gh}");
    let mc = mask_count(100, 0.5);
    ensure!(mc == 71, "mask_count(100, 0.5) = {mc}");

    let (_, g) = tiny_models(4);
    let emb = HashEmbedder::new(TEXT_DIM);
    let text = TextBundle::global(emb.embed("a person jumps").unwrap());
    let tokens: Vec<u32> = (0..4 * 6).map(|i| if i % 3 == 0 { 8 } else { (i % 8) as u32 }).collect();
    let cond = g.base_forward(&tokens, &text).map_err(|e| e.to_string())?;
    let uncond = g.base_forward(&tokens, &TextBundle::unconditional()).map_err(|e| e.to_string())?;
    ensure!(cond != uncond, "text has no effect, the identity would be vacuous");
    let mixed = cfg_logits(&cond, &uncond, 0.0).map_err(|e| e.to_string())?;
    let bitwise = mixed.data.iter().zip(&cond.data).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(bitwise && mixed.data.len() == cond.data.len(), "cfg_logits(s=0) differs from conditional logits");
    Ok(format!("gamma(0.5) = {gh:.12}, mask_count = 71, cfg(s=0) bitwise identical"))
}

// ---------------------------------------------------------------- 5

fn locality() -> Outcome {
    let (_, base) = tiny_models(6);
    let emb = HashEmbedder::new(TEXT_DIM);
    let text = TextBundle::global(emb.embed("a person spins").unwrap());
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut probes = 0;
    for (kept, disabled) in [(Sublayer::Spatial, Sublayer::Temporal), (Sublayer::Temporal, Sublayer::Spatial)] {
        for kind in [Kind::Base, Kind::Residual] {
            let mut g = base.clone();
            g.disable_sublayer(kind, disabled);
            for _ in 0..8 {
                let (p0, t0) = (rng.gen_range(0..4), rng.gen_range(0..n));
                let tokens: Vec<u32> = (0..4 * n).map(|_| rng.gen_range(0..8)).collect();
                let mut bumped = tokens.clone();
                bumped[p0 * n + t0] = (tokens[p0 * n + t0] + 1 + rng.gen_range(0..7)) % 8;
                let (a, b) = match kind {
                    Kind::Base => (g.base_forward(&tokens, &text), g.base_forward(&bumped, &text)),
                    Kind::Residual => {
                        let mut ga = TokenGrid::masked(2, n, 8);
                        ga.layer_mut(0).copy_from_slice(&tokens);
                        ga.layer_mut(1).fill(0);
                        let mut gb = ga.clone();
                        gb.layer_mut(0).copy_from_slice(&bumped);
                        (g.residual_forward(&ga, 1, &text), g.residual_forward(&gb, 1, &text))
                    }
                };
                let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
                let mut moved_inside = false;
                for p in 0..4 {
                    for t in 0..n {
                        let same = a.at(p, t).iter().zip(b.at(p, t)).all(|(x, y)| x.to_bits() == y.to_bits());
                        let inside = match kept {
                            Sublayer::Spatial => t == t0,
                            Sublayer::Temporal => p == p0,
                        };
                        if inside {
                            moved_inside |= !same && (p, t) != (p0, t0);
                        } else {
                            ensure!(same, "{kept:?} only ({kind:?}): change at ({p0},{t0}) leaked to ({p},{t})");
                        }
                    }
                }
                ensure!(moved_inside, "{kept:?} only ({kind:?}): no mixing within the group at ({p0},{t0})");
                probes += 1;
            }
        }
    }
    Ok(format!("{probes} perturbations, zero cross-leak, in-group mixing present"))
}

// ---------------------------------------------------------------- 6

fn edit_immutability() -> Outcome {
    let (_, g) = tiny_models(7);
    let emb = HashEmbedder::new(TEXT_DIM);
    let text = TextBundle::global(emb.embed("a person kicks").unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let random_grid = |rng: &mut ChaCha8Rng, n: usize| {
        let mut grid = TokenGrid::masked(2, n, 8);
        for v in grid.data.iter_mut() {
            *v = rng.gen_range(0..8);
        }
        grid
    };
    for i in 0..500 {
        let n = rng.gen_range(1..=12);
        let grid = random_grid(&mut rng, n);
        let seed = rng.gen();
        if i % 2 == 0 {
            let alpha = rng.gen_range(0..=n);
            let beta = rng.gen_range(alpha..=n);
            let out = edit_inbetween(&grid, alpha, beta, &text, &g, seed).map_err(|e| e.to_string())?;
            for l in 0..2 {
                for p in 0..4 {
                    for t in (0..alpha).chain(beta..n) {
                        ensure!(out.get(l, p, t) == grid.get(l, p, t), "in-between {alpha}..{beta} changed ({l},{p},{t})");
                    }
                }
            }
        } else {
            let parts: Vec<Part> = Part::ALL.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
            let parts = if parts.is_empty() { vec![Part::ALL[rng.gen_range(0..4)]] } else { parts };
            let out = edit_bodypart(&grid, &parts, &text, 0.0, &g, seed).map_err(|e| e.to_string())?;
            for l in 0..2 {
                for p in Part::ALL.iter().filter(|p| !parts.contains(p)) {
                    for t in 0..n {
                        let pi = p.index();
                        ensure!(out.get(l, pi, t) == grid.get(l, pi, t), "body-part {parts:?} changed ({l},{p},{t})");
                    }
                }
            }
        }
    }
    for _ in 0..20 {
        let (na, nb) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = random_grid(&mut rng, na);
        let b = random_grid(&mut rng, nb);
        let n_trans = rng.gen_range(0..=5);
        let n_ctx = rng.gen_range(0..=na.min(nb));
        let out = blend(&a, &b, n_trans, n_ctx, &text, &g, rng.gen()).map_err(|e| e.to_string())?;
        ensure!(out.n == na + n_trans + nb, "blend length {} != {na}+{n_trans}+{nb}", out.n);
        ensure!(out.slice_steps(0..na) == a && out.slice_steps(na + n_trans..out.n) == b, "blend altered its inputs");
    }
    Ok("500 edits preserved untouched regions; 20 blends have length nA+n_trans+nB".into())
}

// ---------------------------------------------------------------- 7

fn dispersion(p: &PolyLine) -> f64 {
    let d: Vec<f64> = p
        .points
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / mean
}

fn trajectory() -> Outcome {
    let text = std::fs::read_to_string(fixtures_dir().join("heart.dsl")).map_err(|e| e.to_string())?;
    let spec = parse_curve_spec(&text).map_err(|e| e.to_string())?;
    let (ta, tb) = spec.t_range();
    let (a, b) = (spec.eval(ta).map_err(|e| e.to_string())?, spec.eval(tb).map_err(|e| e.to_string())?);
    let gap = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    ensure!(gap < 1e-9, "endpoint gap {gap:e}");
    let raw = sample_curve(&spec, DEFAULT_SAMPLES).map_err(|e| e.to_string())?;
    ensure!(raw.is_closed(1e-9), "sampled heart is not closed");
    let even = resample_uniform(&raw, 196).map_err(|e| e.to_string())?;
    ensure!(even.points.len() == 196, "{} resampled points", even.points.len());
    let disp = dispersion(&even);
    ensure!(disp < 0.01, "spacing dispersion {disp:.4}");

    let m = synthetic_motion(9, 196).unwrap();
    let profile = profile_from_spec(&text, 196, 0.05).map_err(|e| e.to_string())?;
    let out = apply_trajectory(&m, &profile).map_err(|e| e.to_string())?;
    ensure!(out.len() == m.len() && out.dim() == m.dim(), "shape changed");
    for t in 0..m.len() {
        let same = out.frame(t)[1..].iter().zip(&m.frame(t)[1..]).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "frame {t}: a column other than 0 changed");
    }
    let back = read_back_profile(&out);
    ensure!(back.len() == profile.heading_delta.len(), "read-back length {}", back.len());
    let worst = back.iter().zip(&profile.heading_delta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure!(worst < 1e-6, "read-back error {worst:e}");
    Ok(format!("gap {gap:.1e}, dispersion {:.3}%, read-back error {worst:.1e}", 100.0 * disp))
}

// ---------------------------------------------------------------- 8

#[derive(serde::Deserialize)]
struct StepCase {
    name: String,
    input: String,
    expected: Option<Vec<String>>,
}

const LOCAL_EDITS_EXAMPLE: &str = r#"<LOCAL_EDITS_JSON>
[
  {
    "body part": "left arm",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "right arm",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "left leg",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "right leg",
    "description": "[specific movement or 'none']"
  }
]
</LOCAL_EDITS_JSON>"#;

const CORRECTION_EXAMPLE: &str = "    Left arm:   None\n    \n    Right arm:  None\n    \n    Lower body: a person kneels down\n";

const BODYPART_EXAMPLE: &str = "    Right arm: the right arm swings forward.\n    \n    Left arm: the left arm swings back.\n    \n    Right leg: the right leg steps.\n    \n    Left leg: the left leg pushes off.\n";

fn parsers() -> Outcome {
    let cases: Vec<StepCase> =
        serde_json::from_str(include_str!("data/parse_steps_corpus.json")).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 20, "corpus has {} cases", cases.len());
    for c in &cases {
        let got = parse_steps(&c.input, "o").ok().map(|v| v.into_iter().map(|s| s.prompt).collect::<Vec<_>>());
        ensure!(got == c.expected, "parse_steps case {}: {got:?}", c.name);
    }

    let edits = parse_local_edits(LOCAL_EDITS_EXAMPLE).map_err(|e| e.to_string())?;
    ensure!(edits[0].limb == Limb::LeftArm && edits[3].limb == Limb::RightLeg, "limb order");
    let good = [
        r#"{"body part":"left arm","description":"x"}"#,
        r#"{"body part":"right arm","description":"none"}"#,
        r#"{"body part":"left leg","description":"none"}"#,
        r#"{"body part":"right leg","description":"none"}"#,
    ];
    let full = format!("[{}]", good.join(","));
    let bad_edits = [
        good.join(","),
        format!("[{}", good.join(",")),
        format!("[{}]", good[..3].join(",")),
        format!("[{},{}]", good.join(","), good[0]),
        full.replace("left arm", "tail"),
        full.replace(r#""body part""#, r#""part""#),
        full.replace(r#""description":"x""#, r#""description":3"#),
        "[1,2,3,4]".to_string(),
        "{}".to_string(),
        String::new(),
    ];
    for (i, b) in bad_edits.iter().enumerate() {
        let r = parse_local_edits(&format!("<LOCAL_EDITS_JSON>{b}</LOCAL_EDITS_JSON>"));
        ensure!(matches!(r, Err(AgentError::Parse { .. })), "local edits variant {i} accepted: {r:?}");
    }

    let c = parse_correction(CORRECTION_EXAMPLE).map_err(|e| e.to_string())?;
    ensure!(
        c.left_arm.is_none() && c.right_arm.is_none() && c.lower_body.as_deref() == Some("a person kneels down"),
        "correction example: {c:?}"
    );
    let (lines, _) = parse_bodypart_lines(BODYPART_EXAMPLE).map_err(|e| e.to_string())?;
    ensure!(lines.left_leg == "the left leg pushes off.", "body-part example: {lines:?}");
    let bad_reviews = [
        "",
        "Looks fine to me.",
        "LeftArm: raise",
        "Left arm raise higher",
        "Upper body: None",
        "Left leg: bend",
        "Right-arm - wave",
        "arm: none",
        "Lower: kneel",
        "Body: None\nArms: None",
    ];
    for (i, b) in bad_reviews.iter().enumerate() {
        ensure!(matches!(parse_correction(b), Err(AgentError::Parse { .. })), "review variant {i} accepted");
    }
    Ok("20 step cases match; examples accepted; 10 + 10 malformed variants rejected".into())
}

// ---------------------------------------------------------------- 9

fn rounds_of(trace: &WorkflowTrace, seg: usize) -> usize {
    trace
        .events
        .iter()
        .filter(|e| e.op == Op::Render && e.segment == Some(seg))
        .count()
}

fn workflow() -> Outcome {
    let t0 = Instant::now();
    let models = tiny_models(3);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (prompt, transcript) = henry();
    let (out, left) = run_scripted(&prompt, &transcript, &config(2, dir.path()), &models).map_err(|e| e.to_string())?;
    ensure!(left == 0, "henry: {left} transcript entries unused");
    check_trace(&out.trace, 2).map_err(|e| format!("henry: {e}"))?;
    // Segment 1 is corrected once and accepted in round 2.
    ensure!(rounds_of(&out.trace, 1) == 2, "henry: segment 1 review rounds {}", rounds_of(&out.trace, 1));

    let mut checked = vec!["henry".to_string()];
    for name in scenario_names() {
        let s = load_scenario(&name);
        let d = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (out, left) = run_scripted(&s.prompt, &s.transcript, &config(s.k, d.path()), &models)
            .map_err(|e| format!("{name}: {e}"))?;
        ensure!(left == 0, "{name}: {left} transcript entries unused");
        check_trace(&out.trace, s.k).map_err(|e| format!("{name}: {e}"))?;
        for (i, seg) in out.segments.iter().enumerate() {
            let r = rounds_of(&out.trace, i);
            ensure!(r <= s.k, "{name}: segment {i} ran {r} rounds with K = {}", s.k);
            // Rounds stop early only on an empty instruction.
            let last = out
                .trace
                .events
                .iter()
                .rfind(|e| e.op == Op::Instruct && e.segment == Some(i))
                .and_then(|e| e.count);
            if r < s.k {
                ensure!(last == Some(0), "{name}: segment {i} stopped at round {r} without an empty instruction");
            }
            ensure!(seg.round == r, "{name}: segment {i} reports round {}", seg.round);
        }
        if name == "cap_reached" {
            ensure!(
                out.segments.iter().enumerate().all(|(i, _)| rounds_of(&out.trace, i) == s.k),
                "cap_reached: loop did not run to K"
            );
        }
        checked.push(name);
    }
    ensure!(checked.len() == 6, "expected Henry plus 5 scenarios, got {checked:?}");
    let time = within(t0, Duration::from_secs(10))?;
    Ok(format!("{} accepted; {time}", checked.join(", ")))
}

// ---------------------------------------------------------------- 10

fn gaussian(rows: usize, dim: usize, shift: f64, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * dim)
        .map(|i| Distribution::<f64>::sample(&StandardNormal, &mut rng) + if i % dim == 0 { shift } else { 0.0 })
        .collect();
    EmbeddingSet::new(rows, dim, data, EmbeddingKind::Motion).unwrap()
}

fn metrics() -> Outcome {
    let a = gaussian(5000, 4, 0.0, 1);
    let self_fid = fid(&a, &a).map_err(|e| e.to_string())?;
    ensure!(self_fid.abs() < 1e-6, "fid(a, a) = {self_fid:e}");
    let b = gaussian(5000, 4, 3.0, 2);
    let shifted = fid(&a, &b).map_err(|e| e.to_string())?;
    ensure!((shifted - 9.0).abs() <= 0.05 * 9.0, "shifted fid {shifted:.4}, expected 9 within 5%");

    let m = 2000;
    let motion = gaussian(m, 8, 0.0, 3);
    let aligned = EmbeddingSet { kind: EmbeddingKind::Text, ..motion.clone() };
    let r_self = r_precision(&motion, &aligned, 32, &[1], 5).map_err(|e| e.to_string())?[0];
    ensure!(r_self == 1.0, "self-aligned R@1 = {r_self}");
    let text = gaussian(m, 8, 0.0, 4);
    let r_rand = r_precision(&motion, &text, 32, &[1], 6).map_err(|e| e.to_string())?[0];
    let p = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / m as f64).sqrt();
    ensure!((r_rand - p).abs() <= 3.0 * sigma, "random R@1 {r_rand:.4}, expected {p:.4} within {:.4}", 3.0 * sigma);

    let v = [0.3, -1.2, 2.0];
    let same = mas(&v, &v).map_err(|e| e.to_string())?;
    let ortho = mas(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]).map_err(|e| e.to_string())?;
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let opp = mas(&v, &neg).map_err(|e| e.to_string())?;
    ensure!((same - 100.0).abs() < 1e-9 && ortho.abs() < 1e-9 && (opp + 100.0).abs() < 1e-9, "mas {same} {ortho} {opp}");
    Ok(format!("fid(a,a) {self_fid:.1e}; shifted {shifted:.3}; R@1 self 1.0, random {r_rand:.4}; mas 100/0/-100"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("RVQ identity", rvq_identity),
        ("gradient correctness", gradients),
        ("desk-scale overfit", desk_overfit),
        ("schedule and CFG identities", schedule_and_cfg),
        ("factorized-attention locality", locality),
        ("editing immutability", edit_immutability),
        ("trajectory", trajectory),
        ("parser conformance", parsers),
        ("workflow conformance", workflow),
        ("metrics", metrics),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
