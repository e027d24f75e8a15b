//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidattn::attention::{cross_attention, sparse_causal_attention, ProjectionSet};
use vidattn::cli::{cache_paths, cmd_edit, cmd_eval, cmd_inspect, cmd_invert, write_frames, JobConfig};
use vidattn::control::{blend_rows, blending_mask, cross_blender, spatial_blender};
use vidattn::metrics::{frame_acc_embeddings, tem_con_embeddings, to_tsv, EvalReport, ToyEmbedder};
use vidattn::pipeline::{edit_inverted, edit_video, invert_window, reconstruct, Backends, Inversion, PixelCodec, WindowPlan};
use vidattn::prompt::{EditSpec, SpanPair};
use vidattn::scheduler::{ddim_invert_step, ddim_sample_step, sample};
use vidattn::{build_schedule, AttentionMap, ConstantDenoiser, LatentVideo, MapKey, MapKind, NoiseSchedule};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let den = ConstantDenoiser::new(0.37);
    let codec = PixelCodec::identity();
    let b = Backends { denoiser: &den, codec: &codec };
    let prompt = job(1, false, false).source_prompt;
    let mut worst: f64 = 0.0;
    for steps in [1, 5, 30] {
        let sched = build_schedule(steps, 8.5e-4, 1.2e-2).map_err(|e| e.to_string())?;
        for k in [1, 8] {
            let frames = random_frames(steps as u64 * 10 + k as u64, k, 8);
            let r = reconstruct(&frames, &prompt, &sched, b).map_err(|e| e.to_string())?;
            ensure(r.latent_error < 1e-5, || format!("T={steps} K={k}: error {:.3e}", r.latent_error))?;
            worst = worst.max(r.latent_error);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("max-abs error {worst:.2e} over T in {{1,5,30}}, K in {{1,8}} in {elapsed:.2?}"))
}

fn step_oracle() -> Outcome {
    let scalar = |v: f64| LatentVideo::filled(1, 1, 1, 1, v);
    let sched = NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.64, 0.25]).map_err(|e| e.to_string())?;
    // (z_t, eps, expected z_{t-1}) by hand from sqrt(0.64)(z - sqrt(0.75) eps)/sqrt(0.25) + sqrt(0.36) eps
    let cases = [
        (1.0, 0.5, 1.6 * (1.0 - 0.75f64.sqrt() * 0.5) + 0.3),
        (0.0, 1.0, -1.6 * 0.75f64.sqrt() + 0.6),
        (-2.0, 0.0, -3.2),
    ];
    let mut worst: f64 = 0.0;
    for (z, eps, expect) in cases {
        let got = ddim_sample_step(&scalar(z), &scalar(eps), 2, &sched).map_err(|e| e.to_string())?.data()[[0, 0, 0, 0]];
        let back = ddim_invert_step(&scalar(expect), &scalar(eps), 2, &sched).map_err(|e| e.to_string())?.data()[[0, 0, 0, 0]];
        worst = worst.max((got - expect).abs()).max((back - z).abs());
    }
    let headline = ddim_sample_step(&scalar(1.0), &scalar(0.5), 2, &sched).map_err(|e| e.to_string())?.data()[[0, 0, 0, 0]];
    ensure((headline - 1.20718).abs() < 1e-5, || format!("1.0 -> {headline}"))?;
    ensure(worst < 1e-5, || format!("max error {worst:.3e}"))?;
    Ok(format!("1.0 -> {headline:.5}; sample and invert within {worst:.1e}"))
}

fn brute_attention(q_in: &Array2<f64>, ctx: &Array2<f64>, p: &ProjectionSet) -> (Array3<f64>, Array2<f64>) {
    let proj = |x: &Array2<f64>, w: &Array2<f64>| {
        Array2::from_shape_fn((x.nrows(), w.ncols()), |(i, c)| (0..x.ncols()).map(|r| x[[i, r]] * w[[r, c]]).sum())
    };
    let (q, k, v) = (proj(q_in, &p.w_q), proj(ctx, &p.w_k), proj(ctx, &p.w_v));
    let d = p.head_dim;
    let mut maps = Array3::zeros((p.heads, q.nrows(), k.nrows()));
    let mut mixed = Array2::zeros((q.nrows(), p.heads * d));
    for h in 0..p.heads {
        for i in 0..q.nrows() {
            let e: Vec<f64> = (0..k.nrows())
                .map(|j| ((0..d).map(|c| q[[i, h * d + c]] * k[[j, h * d + c]]).sum::<f64>() / (d as f64).sqrt()).exp())
                .collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.nrows() {
                maps[[h, i, j]] = e[j] / z;
                for c in 0..d {
                    mixed[[i, h * d + c]] += e[j] / z * v[[j, h * d + c]];
                }
            }
        }
    }
    let out = proj(&mixed, &p.w_o);
    (maps, out)
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (gh, gw) = (rng.random_range(1..4), rng.random_range(1..4));
        let n = gh * gw;
        let heads = rng.random_range(1..4);
        let mut rand = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        let (feats, emb, anchor, prev) = (rand(n, 6), rand(1 + case % 7, 5), rand(n, 6), rand(n, 6));
        let pc = ProjectionSet::random(&mut ChaCha8Rng::seed_from_u64(case as u64), 6, 5, 4, heads, 3);
        let ps = ProjectionSet::random(&mut ChaCha8Rng::seed_from_u64(case as u64 + 1000), 6, 6, 6, heads, 2);
        let ck = MapKey { t: 1, layer: 1, kind: MapKind::Cross, frame: 0 };
        let sk = MapKey { t: 1, layer: 0, kind: MapKind::SpatialTemporal, frame: 1 };
        let (out, map) = cross_attention(feats.view(), (gh, gw), emb.view(), &pc, ck, None).map_err(|e| e.to_string())?;
        let (bm, bo) = brute_attention(&feats, &emb, &pc);
        worst = worst.max(diff(&map, &bm)).max((&out - &bo).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        let (out, map) = sparse_causal_attention(feats.view(), anchor.view(), prev.view(), (gh, gw), &ps, sk, None)
            .map_err(|e| e.to_string())?;
        let ctx = ndarray::concatenate(Axis(0), &[anchor.view(), prev.view()]).unwrap();
        let (bm, bo) = brute_attention(&feats, &ctx, &ps);
        worst = worst.max(diff(&map, &bm)).max((&out - &bo).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    ensure(worst < 1e-6, || format!("max error {worst:.3e}"))?;
    Ok(format!("100 cross + 100 sparse-causal cases, max error {worst:.2e}"))
}

fn diff(map: &AttentionMap, oracle: &Array3<f64>) -> f64 {
    map.weights.iter().zip(oracle.iter()).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

fn random_map(rng: &mut ChaCha8Rng, key: MapKey, grid: (usize, usize), heads: usize, keys: usize) -> AttentionMap {
    let mut w = Array3::from_shape_simple_fn((heads, grid.0 * grid.1, keys), || rng.random_range(0.001f32..1.0));
    for mut row in w.lanes_mut(Axis(2)) {
        let total: f32 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    AttentionMap::new(key, grid, w).unwrap()
}

fn cross_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let specs = [
        EditSpec::new(vec![SpanPair { source: 2..3, edit: 2..3 }], true, true, 6, 6),
        EditSpec::new(vec![SpanPair { source: 1..2, edit: 1..2 }, SpanPair { source: 4..6, edit: 4..6 }], true, true, 7, 7),
        EditSpec::new(vec![SpanPair { source: 2..3, edit: 2..5 }], true, false, 6, 8),
    ];
    let mut checked = 0usize;
    for spec in specs {
        let spec = spec.map_err(|e| e.to_string())?;
        for t in 1..=30 {
            for layer in [1, 3] {
                for frame in 0..3 {
                    let key = MapKey { t, layer, kind: MapKind::Cross, frame };
                    let grid = if layer == 1 { (4, 4) } else { (2, 2) };
                    let src = random_map(&mut rng, key, grid, 2, spec.source_len());
                    let probe = random_map(&mut rng, key, grid, 2, spec.edit_len());
                    let out = cross_blender(&src, &probe, &spec).map_err(|e| e.to_string())?;
                    for j in 0..spec.edit_len() {
                        let col = out.weights.slice(s![.., .., j]);
                        let (reference, rj) = match spec.source_token_for(j) {
                            Some(sj) => (&src, sj),
                            None => (&probe, j),
                        };
                        let expect = reference.weights.slice(s![.., .., rj]);
                        ensure(col.iter().zip(expect.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                            format!("t={t} layer={layer} frame={frame} token {j} differs")
                        })?;
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} token columns bit-identical across 30 steps"))
}

fn spatial_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = EditSpec::new(vec![SpanPair { source: 2..3, edit: 2..3 }], true, true, 6, 6).map_err(|e| e.to_string())?;
    let mut masked_rows = 0usize;
    for trial in 0..200 {
        let grid = [(2, 2), (4, 4), (3, 5)][trial % 3];
        let q = grid.0 * grid.1;
        let cross: Vec<AttentionMap> = [(4usize, 4usize), (2, 2)]
            .iter()
            .enumerate()
            .map(|(i, &g)| random_map(&mut rng, MapKey { t: 1, layer: 2 * i + 1, kind: MapKind::Cross, frame: 0 }, g, 2, 6))
            .collect();
        let sk = MapKey { t: 1, layer: 0, kind: MapKind::SpatialTemporal, frame: 0 };
        let s_src = random_map(&mut rng, sk, grid, 2, 2 * q);
        let s_edit = random_map(&mut rng, sk, grid, 2, 2 * q);
        let mask = blending_mask(&cross, &spec, grid).map_err(|e| e.to_string())?;
        ensure(mask == blending_mask(&cross, &spec, grid).unwrap(), || "mask not deterministic".into())?;
        let out = spatial_blender(&cross, &s_src, &s_edit, &spec).map_err(|e| e.to_string())?;
        ensure(out == blend_rows(&mask, &s_src, &s_edit).unwrap(), || "blender disagrees with its mask".into())?;
        for qi in 0..q {
            let row = out.weights.slice(s![.., qi, ..]);
            let is_src = row == s_src.weights.slice(s![.., qi, ..]);
            let is_edit = row == s_edit.weights.slice(s![.., qi, ..]);
            ensure(is_src != is_edit, || format!("trial {trial} row {qi} matches neither or both inputs"))?;
            ensure(is_edit == mask.bits[qi], || format!("trial {trial} row {qi} does not follow the mask"))?;
            masked_rows += is_edit as usize;
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let c = cli_config(dir.path(), 4, 6);
    cmd_invert(&c, 0, None).map_err(|e| e.to_string())?;
    let (_, store) = cache_paths(c.io.cache.as_ref().unwrap(), 0);
    let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
    let out = dir.path().join("inspect");
    let summary = cmd_inspect(&store, SOURCE, "boat", &taus, &out).map_err(|e| e.to_string())?;
    let mut files = 0;
    for pair in taus.windows(2) {
        let loose_dir = out.join(format!("tau_{:.2}", pair[0]));
        for entry in fs::read_dir(&loose_dir).map_err(|e| e.to_string())? {
            let name = entry.map_err(|e| e.to_string())?.file_name();
            let loose = image::open(loose_dir.join(&name)).unwrap().to_luma8();
            let strict = image::open(out.join(format!("tau_{:.2}", pair[1])).join(&name)).unwrap().to_luma8();
            ensure(loose.iter().chain(strict.iter()).all(|&v| v == 0 || v == 255), || "non-binary mask".into())?;
            ensure(strict.iter().zip(loose.iter()).all(|(s, l)| *s == 0 || *l == 255), || {
                format!("{name:?}: mask at tau {} not within tau {}", pair[1], pair[0])
            })?;
            files += 1;
        }
    }
    let coverage: Vec<String> = summary.coverage.iter().map(|(t, c)| format!("{t}:{c:.2}")).collect();
    Ok(format!(
        "200 random blends ({masked_rows} masked rows); {files} inspect mask pairs nested, coverage {}",
        coverage.join(" ")
    ))
}

fn ablation() -> Outcome {
    let frames = moving_square(8, 8);
    let den = toy(3);
    let codec = PixelCodec::identity();
    let b = Backends { denoiser: &den, codec: &codec };
    let base = job(30, true, true);
    let inv = invert_window(&frames, 0, &base.source_prompt, &base.schedule, b).map_err(|e| e.to_string())?;
    let run = |cross: bool, spatial: bool| {
        let j = job(30, cross, spatial);
        edit_inverted(Inversion { noise: inv.noise.clone(), store: inv.store.clone() }, &j, &den)
    };
    let (identity, _) = run(false, false).map_err(|e| e.to_string())?;
    let probe = sample(&inv.noise, &base.edit_prompt, &den, &base.schedule, None).map_err(|e| e.to_string())?;
    ensure(identity.bit_eq(probe.clean()), || "identity controller departs from the probe trajectory".into())?;
    let (cross_only, _) = run(true, false).map_err(|e| e.to_string())?;
    let (both, diag) = run(true, true).map_err(|e| e.to_string())?;
    let partial = diag.mask_coverage.iter().any(|m| m.coverage > 0.0 && m.coverage < 1.0);
    ensure(partial, || "every mask degenerate".into())?;
    let d_c = cross_only.distance(&identity);
    let d_cs = both.distance(&identity);
    let d_s = both.distance(&cross_only);
    ensure(d_c > 0.0, || "cross blending left latents unchanged".into())?;
    ensure(d_cs > 0.0 && d_s > 0.0, || "spatial blending left latents unchanged".into())?;
    Ok(format!("identity bit-exact; d(C, id) = {d_c:.4}, d(C+S, id) = {d_cs:.4}, d(C+S, C) = {d_s:.4}"))
}

fn window_independence() -> Outcome {
    let start = Instant::now();
    let frames = random_frames(64, 64, 8);
    let den = toy(3);
    let codec = PixelCodec::identity();
    let b = Backends { denoiser: &den, codec: &codec };
    let j = job(30, true, true);
    let (long, diag) = edit_video(&frames, &j, b, WindowPlan::default()).map_err(|e| e.to_string())?;
    let (short, _) = edit_video(&frames[..8], &j, b, WindowPlan::default()).map_err(|e| e.to_string())?;
    ensure(long.len() == 64 && diag.len() == 8, || format!("{} frames in {} windows", long.len(), diag.len()))?;
    let offsets: Vec<usize> = diag.iter().map(|d| d.frame_offset).collect();
    ensure(offsets == (0..64).step_by(8).collect::<Vec<_>>(), || format!("window offsets {offsets:?}"))?;
    ensure(long[..8] == short[..], || "frames 1-8 differ".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("64 frames in 8 windows, frames 1-8 bit-identical, {elapsed:.2?}"))
}

fn metrics() -> Outcome {
    let e = ToyEmbedder::default();
    let frame = &random_frames(5, 1, 16)[0];
    let same = vec![frame.clone(); 6];
    let report = EvalReport::evaluate("same", &same, SOURCE, EDIT, &e).map_err(|e| e.to_string())?;
    ensure(report.tsv_row().starts_with("same\t1.0000\t"), || report.tsv_row())?;
    let src = vec![1.0, 0.0, 0.0];
    let edit = vec![0.0, 1.0, 0.0];
    let mut frames = vec![vec![0.1, 0.9, 0.2]; 6];
    frames.push(vec![0.9, 0.1, 0.0]);
    frames.push(vec![0.5, 0.5, 0.7]);
    let acc = frame_acc_embeddings(&frames, &src, &edit).map_err(|e| e.to_string())?;
    let fixture = EvalReport {
        name: "fixture".into(),
        embedder: "fixed".into(),
        tem_con: Some(tem_con_embeddings(&frames).unwrap()),
        frame_acc: acc,
        frames: vec![],
    };
    ensure(to_tsv(&[fixture]).lines().nth(1).unwrap().ends_with("\t0.7500"), || format!("frame_acc {acc}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for set in 0..1000 {
        let n = rng.random_range(2..10);
        let dim = rng.random_range(2..12);
        let embs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tc = tem_con_embeddings(&embs).map_err(|e| e.to_string())?;
        let fa = frame_acc_embeddings(&embs, &s, &t).map_err(|e| e.to_string())?;
        ensure((-1.0..=1.0).contains(&tc) && (0.0..=1.0).contains(&fa), || format!("set {set}: out of bounds"))?;
        let per_vector: Vec<Vec<f64>> = embs
            .iter()
            .map(|v| {
                let k = rng.random_range(0.01..100.0);
                v.iter().map(|x| x * k).collect()
            })
            .collect();
        let tc2 = tem_con_embeddings(&per_vector).unwrap();
        let fa2 = frame_acc_embeddings(&per_vector, &s, &t).unwrap();
        ensure((tc - tc2).abs() < 1e-12 && fa == fa2, || format!("set {set}: not scale invariant"))?;
        let mut reversed = embs.clone();
        reversed.reverse();
        ensure(frame_acc_embeddings(&reversed, &s, &t).unwrap() == fa, || format!("set {set}: order dependent"))?;
        let wins = embs
            .iter()
            .filter(|f| {
                let cos = |a: &[f64], b: &[f64]| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                cos(f, &t) > cos(f, &s)
            })
            .count();
        ensure(fa == wins as f64 / n as f64, || format!("set {set}: frame_acc {fa} vs {wins}/{n}"))?;
    }
    Ok("identical frames 1.0000, 6 of 8 winners 0.7500, 1000 random sets within bounds and invariant".into())
}

fn cli_config(dir: &std::path::Path, frames: usize, steps: usize) -> JobConfig {
    let input = dir.join("in");
    write_frames(&input, &moving_square(frames, 8)).unwrap();
    let mut c = JobConfig::new(SOURCE, EDIT, &["boat->kayak"]);
    c.seed = 17;
    c.schedule.steps = steps;
    c.io.input = Some(input);
    c.io.output = Some(dir.join("out"));
    c.io.cache = Some(dir.join("cache"));
    c
}

fn determinism() -> Outcome {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let c = cli_config(dir.path(), 12, 30);
        cmd_invert(&c, 0, None).map_err(|e| e.to_string())?;
        cmd_edit(&c, 0).map_err(|e| e.to_string())?;
        let out = c.io.output.clone().unwrap();
        let tsv = cmd_eval(std::slice::from_ref(&out), SOURCE, EDIT, &ToyEmbedder { seed: c.seed }).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in [out, c.io.cache.clone().unwrap()] {
            for entry in fs::read_dir(&sub).map_err(|e| e.to_string())? {
                let p = entry.map_err(|e| e.to_string())?.path();
                files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
        files.push(("report.tsv".into(), tsv.into_bytes()));
        files.sort();
        runs.push(files);
    }
    let names: BTreeSet<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure(runs[0] == runs[1], || "runs differ".into())?;
    Ok(format!("{} files (frames, stores, latents, diagnostics, report) bit-identical", names.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("scheduler round trip", round_trip),
        ("step-function oracle", step_oracle),
        ("attention oracle", attention_oracle),
        ("cross blender exactness", cross_exactness),
        ("spatial blender partition", spatial_partition),
        ("ablation behaviour", ablation),
        ("window independence", window_independence),
        ("metrics correctness", metrics),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
