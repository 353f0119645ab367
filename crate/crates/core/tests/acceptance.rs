//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero on any unexpected failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use floeberg::autodiff::{
    compare_with_central_differences, relative_error, value_and_grad, Parameter, Tape, Tensor, Var,
};
use floeberg::icechart::{
    eggcode_to_label, label_to_eggcode, parse_chart, ChartEntry, ChartTable, EggCode, RegionalLabel,
    StageEntry,
};
use floeberg::regionloss::{batch_region_loss, batch_region_loss_on_tape, ImageRegions};
use floeberg::synthgen::{gen_scene, scene_seeds, voronoi_map, SynthConfig};
use floeberg::trainer::{cosine_lr, sgdm_step, Mode, OptimizerState, TrainConfig, Trainer};
use floeberg::unet::{forward, init_params, predict, UNetConfig};
use floeberg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// A clause that cannot be met by any implementation, with the check
    /// that the observed failure stays within the analysed limit.
    known_limit: Option<(String, bool)>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail, known_limit: None }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_label(r: &mut ChaCha8Rng) -> RegionalLabel {
    let e: [f64; 4] = std::array::from_fn(|_| -r.random_range(1e-12f64..1.0).ln());
    let s: f64 = e.iter().sum();
    let mut v = e.map(|x| x / s);
    v[3] = (1.0 - v[0] - v[1] - v[2]).max(0.0);
    RegionalLabel::new(v).expect("normalised label")
}

fn random_probs(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut d = vec![0.0; b * 4 * hw];
    for img in 0..b {
        for p in 0..hw {
            let e: [f64; 4] = std::array::from_fn(|_| r.random_range(-3.0f64..3.0).exp());
            let s: f64 = e.iter().sum();
            for k in 0..4 {
                d[(img * 4 + k) * hw + p] = e[k] / s;
            }
        }
    }
    Tensor::new(&[b, 4, h, w], d).unwrap()
}

struct Instance {
    maps: Vec<Vec<i32>>,
    lands: Vec<Vec<u8>>,
    chart: ChartTable,
    n_poly: usize,
}

fn random_instance(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Instance {
    let n_poly = r.random_range(1..=10usize.min(h * w));
    let mut chart = ChartTable::new();
    for id in 0..n_poly as u32 {
        let e = if r.random_bool(0.2) {
            ChartEntry::Excluded
        } else {
            ChartEntry::Coded(label_to_eggcode(&random_label(r)))
        };
        chart.insert(id, e).unwrap();
    }
    let mut maps = Vec::new();
    let mut lands = Vec::new();
    for _ in 0..b {
        let mut map = voronoi_map(h, w, n_poly, r.random()).unwrap();
        for v in &mut map {
            if r.random_bool(0.05) {
                *v = -1;
            }
        }
        let drowned = r.random_range(0..n_poly) as i32;
        let land: Vec<u8> = map
            .iter()
            .map(|&p| (p == drowned || r.random_bool(0.15)) as u8)
            .collect();
        maps.push(map);
        lands.push(land);
    }
    Instance { maps, lands, chart, n_poly }
}

/// Straight double loop over images and polygons.
fn brute_force_loss(probs: &Tensor, inst: &Instance, h: usize, w: usize) -> f64 {
    let d = probs.data();
    let hw = h * w;
    let mut total = 0.0;
    for (b, (map, land)) in inst.maps.iter().zip(&inst.lands).enumerate() {
        for id in 0..inst.n_poly {
            let Some(ChartEntry::Coded(e)) = inst.chart.get(id as u32) else { continue };
            let g = eggcode_to_label(e).conc();
            let mut sums = [0.0; 4];
            let mut n = 0usize;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    if map[p] == id as i32 && land[p] == 0 {
                        n += 1;
                        for (k, s) in sums.iter_mut().enumerate() {
                            *s += d[(b * 4 + k) * hw + p];
                        }
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let mut ce = 0.0;
            for k in 0..4 {
                ce -= g[k] * (sums[k] / n as f64).clamp(1e-7, 1.0).ln();
            }
            total += ce / 4.0;
        }
    }
    total
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = r.random_range(1..=2);
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let inst = random_instance(&mut r, b, h, w);
        let probs = random_probs(&mut r, b, h, w);
        let images: Vec<ImageRegions<'_>> = inst
            .maps
            .iter()
            .zip(&inst.lands)
            .map(|(m, l)| ImageRegions { polygon_map: m, land_mask: l, chart: &inst.chart })
            .collect();
        let got = batch_region_loss(&probs, &images).unwrap();
        worst = worst.max((got - brute_force_loss(&probs, &inst, h, w)).abs());
    }
    let el = t0.elapsed();
    Outcome::new(
        worst <= 1e-12 && el < Duration::from_secs(30),
        format!("50 instances, max |diff| {worst:.2e}, {el:.1?}"),
    )
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Random linear read-out so every output coordinate reaches the loss.
fn project(t: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let c = t.constant(weights.clone());
    let m = t.mul(v, c)?;
    Ok(t.sum_all(m))
}

fn check<F>(f: F, x: &Tensor) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, g) = value_and_grad(&f, x).unwrap();
    let coords: Vec<usize> = (0..x.len()).collect();
    compare_with_central_differences(&f, x, &g, &coords, 1e-5, 1e-4)
        .unwrap()
        .max_rel_error
}

/// Uniform values in `lo..hi` kept at least `gap` away from zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(gap..1.0);
        if r.random_bool(0.5) { v } else { -v }
    })
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(202);
    let mut per_op: Vec<(&str, f64)> = Vec::new();
    let instances = 20;
    let mut record = |name: &'static str, err: f64| match per_op.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => per_op.push((name, err)),
    };
    for _ in 0..instances {
        let (b, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
        let k = if r.random_bool(0.5) { 3 } else { 1 };

        let x = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut r, &[cout], -1.0, 1.0);
        let ro = rand_tensor(&mut r, &[b, cout, h, w], -1.0, 1.0);
        let (xc, wc, bc) = (x.clone(), wt.clone(), bias.clone());
        let e1 = check(|t, v| { let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone())); let y = t.conv2d(v, w, b)?; project(t, y, &ro) }, &x);
        let e2 = check(|t, v| { let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone())); let y = t.conv2d(x, v, b)?; project(t, y, &ro) }, &wt);
        let e3 = check(|t, v| { let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone())); let y = t.conv2d(x, w, v)?; project(t, y, &ro) }, &bias);
        record("conv2d", e1.max(e2).max(e3));

        let wt = rand_tensor(&mut r, &[cin, cout, 2, 2], -1.0, 1.0);
        let ro = rand_tensor(&mut r, &[b, cout, 2 * h, 2 * w], -1.0, 1.0);
        let wc = wt.clone();
        let e1 = check(|t, v| { let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone())); let y = t.conv_transpose2x2(v, w, b)?; project(t, y, &ro) }, &x);
        let e2 = check(|t, v| { let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone())); let y = t.conv_transpose2x2(x, v, b)?; project(t, y, &ro) }, &wt);
        let e3 = check(|t, v| { let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone())); let y = t.conv_transpose2x2(x, w, v)?; project(t, y, &ro) }, &bias);
        record("conv_transpose2x2", e1.max(e2).max(e3));

        // distinct values so no window max sits within h of another
        let mut vals: Vec<f64> = (0..x.len()).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let xp = Tensor::new(x.shape(), vals).unwrap();
        let ro = rand_tensor(&mut r, &[b, cin, h / 2, w / 2], -1.0, 1.0);
        record("maxpool2x2", check(|t, v| { let y = t.maxpool2x2(v)?; project(t, y, &ro) }, &xp));

        let xr = away_from_zero(&mut r, &[b, cin, h, w], 1e-3);
        let ro = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        record("relu", check(|t, v| { let y = t.relu(v); project(t, y, &ro) }, &xr));

        let other = rand_tensor(&mut r, &[b, cout, h, w], -1.0, 1.0);
        let ro = rand_tensor(&mut r, &[b, cin + cout, h, w], -1.0, 1.0);
        let oc = other.clone();
        let e1 = check(|t, v| { let o = t.constant(oc.clone()); let y = t.concat_channels(v, o)?; project(t, y, &ro) }, &x);
        let e2 = check(|t, v| { let a = t.constant(xc.clone()); let y = t.concat_channels(a, v)?; project(t, y, &ro) }, &other);
        record("concat_channels", e1.max(e2));

        let xs = rand_tensor(&mut r, &[b, 4, h, w], -2.0, 2.0);
        let ro = rand_tensor(&mut r, &[b, 4, h, w], -1.0, 1.0);
        record("softmax_channels", check(|t, v| { let y = t.softmax_channels(v)?; project(t, y, &ro) }, &xs));

        let ro = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        let e1 = check(|t, v| project(t, v, &ro), &x);
        let e2 = check(|t, v| { let a = t.constant(xc.clone()); let y = t.mul(a, v)?; Ok(t.sum_all(y)) }, &ro);
        record("mul", e1.max(e2));
        record("sum_all", check(|t, v| { let s = t.sum_all(v); let c = t.constant(Tensor::scalar(1.7)); t.mul(s, c) }, &x));

        let ro2 = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        record("add_scalars", check(|t, v| { let a = project(t, v, &ro)?; let c = project(t, v, &ro2)?; t.add_scalars(&[a, c, a]) }, &x));

        let xm = rand_tensor(&mut r, &[b, 4, h, w], 0.05, 1.0);
        let image = r.random_range(0..b);
        let mut pixels: Vec<u32> = (0..(h * w) as u32).filter(|_| r.random_bool(0.6)).collect();
        if pixels.is_empty() {
            pixels.push(0);
        }
        let ro4 = rand_tensor(&mut r, &[4], -1.0, 1.0);
        record("masked_mean", check(|t, v| { let m = t.masked_mean(v, image, &pixels)?; project(t, m, &ro4) }, &xm));

        let p = rand_tensor(&mut r, &[4], 0.05, 0.95);
        let target = random_label(&mut r).conc();
        record("soft_cross_entropy", check(|t, v| t.soft_cross_entropy(v, &target), &p));

        let picks: Vec<u32> = (0..xm.len() as u32).filter(|_| r.random_bool(0.3)).chain([0]).collect();
        let xq = rand_tensor(&mut r, xm.shape(), 0.05, 0.95);
        record("picked_nll", check(|t, v| t.picked_nll(v, &picks), &xq));
    }
    let ops_ok = per_op.iter().all(|(_, e)| *e < 1e-4);

    // Whole network plus regional loss, checked on sampled parameters.
    let cfg = UNetConfig { seed: 9, ..UNetConfig::default() };
    let mut params = init_params(&cfg).unwrap();
    let x = rand_tensor(&mut r, &[1, 7, 16, 16], -1.0, 1.0);
    let inst = random_instance(&mut r, 1, 16, 16);
    let regions = [ImageRegions { polygon_map: &inst.maps[0], land_mask: &inst.lands[0], chart: &inst.chart }];
    let loss_of = |p: &floeberg::unet::UNetParams| -> f64 {
        batch_region_loss(&predict(p, x.clone()).unwrap(), &regions).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = forward(&mut tape, &params, xv).unwrap();
    let (loss, _) = batch_region_loss_on_tape(&mut tape, fwd.probs, &regions).unwrap();
    let grads = tape.backward(loss).unwrap();
    params.zero_grad();
    let mut refs: Vec<&mut Parameter> = params.params.iter_mut().collect();
    grads.accumulate_into(&mut refs, &fwd.param_vars);
    let sizes: Vec<usize> = params.params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut e2e = 0.0f64;
    for _ in 0..20 {
        let mut flat = r.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let analytic = params.params[k].grad.data()[flat];
        let orig = params.params[k].value.data()[flat];
        params.params[k].value.data_mut()[flat] = orig + h;
        let up = loss_of(&params);
        params.params[k].value.data_mut()[flat] = orig - h;
        let down = loss_of(&params);
        params.params[k].value.data_mut()[flat] = orig;
        e2e = e2e.max(relative_error(analytic, (up - down) / (2.0 * h)));
    }
    let el = t0.elapsed();
    let worst_op = per_op.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Outcome::new(
        ops_ok && e2e < 1e-3 && el < Duration::from_secs(120),
        format!(
            "{} ops x {instances} instances, worst {} {:.2e}; U-Net+loss 20 coords max {e2e:.2e}; {el:.1?}",
            per_op.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

fn criterion_3() -> Outcome {
    let chart = parse_chart("polygon_id,ct,ca,cb,cc,sa,sb,sc\n7,9,2,7,0,3,2,0\n").unwrap();
    let worked = chart.get(7).unwrap().label().unwrap().conc();
    let worked_ok = worked == [0.1, 0.0, 0.7, 0.2];

    let mut sum_err = 0.0f64;
    let mut codes = 0usize;
    for ct in 0..=10u8 {
        for ca in 0..=ct {
            for cb in 0..=ct - ca {
                let cc = ct - ca - cb;
                for s in 0..64u8 {
                    let st = [s % 4, (s / 4) % 4, s / 16].map(|v| StageEntry::new(v).unwrap());
                    let e = EggCode::new(ct, [ca, cb, cc], st).unwrap();
                    let l = eggcode_to_label(&e).conc();
                    sum_err = sum_err.max((l.iter().sum::<f64>() - 1.0).abs());
                    codes += 1;
                }
            }
        }
    }

    let mut r = rng(303);
    let mut max_err = 0.0f64;
    let mut over = 0;
    for _ in 0..1000 {
        let l = random_label(&mut r);
        let back = eggcode_to_label(&label_to_eggcode(&l)).conc();
        sum_err = sum_err.max((back.iter().sum::<f64>() - 1.0).abs());
        let e = (0..4).map(|k| (back[k] - l.get(k)).abs()).fold(0.0, f64::max);
        max_err = max_err.max(e);
        over += (e > 0.05 + 1e-12) as usize;
    }
    let pass = worked_ok && sum_err <= 1e-12 && over == 0;
    let mut out = Outcome::new(
        pass,
        format!(
            "worked example {worked:?}; sums over {codes} egg codes + 1000 round trips within {sum_err:.1e}; \
             round trip max error {max_err:.4} ({over}/1000 above 0.05)"
        ),
    );
    if worked_ok && sum_err <= 1e-12 && over > 0 {
        out.known_limit = Some((
            "tenths that sum to ten cannot keep every component within 0.05 (e.g. 0.04,0.04,0.04,0.88); \
             largest remainder is minimax with tight bound 0.075"
                .into(),
            max_err <= 0.075 + 1e-12,
        ));
    }
    out
}

fn criterion_4() -> Outcome {
    let start = cosine_lr(0.0, 50.0, 0.001, 0.0);
    let end = cosine_lr(50.0, 50.0, 0.001, 0.0);
    let end_min = cosine_lr(50.0, 50.0, 0.001, 2e-5);
    let mut p = vec![Parameter::new(Tensor::scalar(1.0))];
    p[0].grad = Tensor::scalar(0.1);
    let mut st = OptimizerState::zeros_like(&p);
    sgdm_step(&mut p, &mut st, 0.001, 0.9, 0.01).unwrap();
    let w = p[0].value.item();
    let v = st.velocity[0].item();
    Outcome::new(
        start == 0.001 && end == 0.0 && end_min == 2e-5 && (w - 0.99989).abs() <= 1e-15 && (v - 0.11).abs() <= 1e-15,
        format!("lr(0)={start}, lr(T0)={end} / {end_min}; w={w}, v={v}"),
    )
}

fn synth_scenes(preset: &str, master: u64, n: usize) -> Vec<floeberg::scene_io::Scene> {
    let cfg = SynthConfig::preset(preset).unwrap();
    scene_seeds(master, n).into_iter().map(|s| gen_scene(&cfg, s).unwrap()).collect()
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let scenes = synth_scenes("separable-v1", 5005, 48);
    let cfg = TrainConfig {
        batch_size: 8,
        patch_size: 64,
        iterations_per_epoch: 100,
        epochs: 3,
        restart_t0_epochs: 3,
        seed: 5,
        mode: Mode::Weak,
        ..TrainConfig::default()
    };
    let iters = cfg.epochs * cfg.iterations_per_epoch;
    let mut t = Trainer::with_split(&scenes[..40], &scenes[40..], cfg).unwrap();
    t.run().unwrap();
    let rep = t.history().epochs.last().unwrap().validation.clone().unwrap();
    let acc = rep.pixel_accuracy.unwrap_or(0.0);
    let r2_ok = rep.r2.iter().flatten().all(|&r| r >= 0.8) && rep.r2.iter().any(|r| r.is_some());
    let el = t0.elapsed();
    Outcome::new(
        acc >= 0.90 && r2_ok && el <= Duration::from_secs(15 * 60),
        format!(
            "40+8 scenes 128x128, {iters} iterations: val accuracy {acc:.4}, R2 {:?}, {el:.1?}",
            rep.r2.map(|r| r.map(|v| (v * 1e4).round() / 1e4))
        ),
    )
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let scenes = synth_scenes("mixed-v1", 6000 + seed, 20);
        let mut r2 = Vec::new();
        for mode in [Mode::Weak, Mode::Baseline] {
            let cfg = TrainConfig {
                batch_size: 8,
                patch_size: 64,
                iterations_per_epoch: 60,
                epochs: 1,
                restart_t0_epochs: 1,
                seed,
                mode,
                ..TrainConfig::default()
            };
            let mut t = Trainer::with_split(&scenes[..16], &scenes[16..], cfg).unwrap();
            t.run().unwrap();
            r2.push(t.history().epochs.last().unwrap().validation.as_ref().unwrap().r2);
        }
        let better = |k: usize| matches!((r2[0][k], r2[1][k]), (Some(w), Some(b)) if w >= b);
        let win = better(1) && better(2);
        wins += win as usize;
        let f = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{x:.3}"));
        lines.push(format!(
            "seed {seed}: young {}/{} fyi {}/{}",
            f(r2[0][1]),
            f(r2[1][1]),
            f(r2[0][2]),
            f(r2[1][2])
        ));
    }
    let el = t0.elapsed();
    Outcome::new(
        wins >= 4 && el <= Duration::from_secs(3600),
        format!("weak>=baseline in {wins}/5 seeds (weak/baseline R2: {}); {el:.1?}", lines.join("; ")),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_floeberg"))
}

fn run_ok(cmd: &mut Command) -> bool {
    cmd.output().map(|o| o.status.success()).unwrap_or(false)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = run_ok(bin().args(["gen", "--preset", "mixed-v1", "--scenes", "3", "--seed", "11", "--height", "64", "--width", "64", "--out"]).arg(&data));
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let ok = run_ok(
            bin()
                .args(["train", "--deterministic", "--seed", "3", "--epochs", "2", "--iters", "4", "--batch", "4", "--patch", "32", "--val-scenes", "1", "--data"])
                .arg(&data)
                .arg("--out")
                .arg(&out),
        );
        let read = |f: &str| std::fs::read(out.join(f)).unwrap_or_default();
        outputs.push((ok, read("history.csv"), read("model.ckpt")));
    }
    let same_hist = outputs[0].1 == outputs[1].1 && !outputs[0].1.is_empty();
    let same_ck = outputs[0].2 == outputs[1].2 && !outputs[0].2.is_empty();
    Outcome::new(
        gen && outputs.iter().all(|o| o.0) && same_hist && same_ck,
        format!(
            "two --deterministic runs: history identical {same_hist}, checkpoint identical {same_ck} ({} bytes)",
            outputs[0].2.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("map.ppm");
    let ok = run_ok(
        bin()
            .args(["render", "--height", "4", "--width", "5", "--input"])
            .arg(fixtures.join("palette_classes.u8"))
            .arg("--out")
            .arg(&out),
    );
    let got = std::fs::read(&out).unwrap_or_default();
    let golden = std::fs::read(fixtures.join("palette.ppm")).unwrap();
    Outcome::new(ok && got == golden, format!("{} bytes vs golden {} bytes", got.len(), golden.len()))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 loss oracle", criterion_1),
        ("2 gradient checks", criterion_2),
        ("3 egg-code fidelity", criterion_3),
        ("4 schedule/optimizer", criterion_4),
        ("5 weak supervision end-to-end", criterion_5),
        ("6 weak vs baseline", criterion_6),
        ("7 determinism", criterion_7),
        ("8 rendering", criterion_8),
    ];
    let mut unexpected = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name}: {}", o.detail);
        if !o.pass {
            match &o.known_limit {
                Some((why, within)) => {
                    println!("     known limit: {why}; observed failure within analysed bound: {within}");
                    if !within {
                        unexpected += 1;
                    }
                }
                None => unexpected += 1,
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criterion/criteria failed unexpectedly");
        std::process::exit(1);
    }
}
