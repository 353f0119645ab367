//! Synthetic scenes with hidden per-pixel truth.
//!
//! Class regions come from smoothed random fields, chart polygons from a
//! Voronoi partition, and each polygon's egg code is computed from the true
//! class fractions over its sea pixels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icechart::{label_to_eggcode, ChartEntry, ChartTable, RegionalLabel};
use crate::scene_io::{save_scene, Scene, SceneMeta, NUM_CHANNELS};
use crate::NUM_CLASSES;

/// Sensor channels drawn from class-conditional normals (hh, hv, amsr_h, amsr_v).
pub const SENSOR_CHANNELS: usize = 4;

pub const MIN_DIM: usize = 32;

pub const PRESETS: [&str; 2] = ["separable-v1", "mixed-v1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub preset: String,
    pub height: usize,
    pub width: usize,
    pub n_polygon_sites: usize,
    /// Box-blur radius applied (three passes) to the per-class noise fields.
    pub smoothing_radius: usize,
    pub class_priors: [f64; NUM_CLASSES],
    /// `class_means[class][channel]` for the sensor channels.
    pub class_means: [[f64; SENSOR_CHANNELS]; NUM_CLASSES],
    pub channel_std: [f64; SENSOR_CHANNELS],
    pub land_fraction: f64,
    /// Latitude/longitude extent spanned by the scene, in degrees.
    pub lat_span: f64,
    pub lon_span: f64,
}

const BASE_MEANS: [[f64; SENSOR_CHANNELS]; NUM_CLASSES] = [
    [-25.0, -32.0, 180.0, 200.0],
    [-20.0, -27.0, 195.0, 212.0],
    [-14.0, -21.0, 210.0, 224.0],
    [-8.0, -15.0, 225.0, 236.0],
];

impl SynthConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = SynthConfig {
            preset: name.to_string(),
            height: 128,
            width: 128,
            n_polygon_sites: 24,
            smoothing_radius: 12,
            class_priors: [0.25; NUM_CLASSES],
            class_means: BASE_MEANS,
            channel_std: [2.0; SENSOR_CHANNELS],
            land_fraction: 0.08,
            lat_span: 1.0,
            lon_span: 3.0,
        };
        match name {
            "separable-v1" => Ok(base),
            "mixed-v1" => Ok(SynthConfig {
                n_polygon_sites: 32,
                smoothing_radius: 6,
                channel_std: [4.0; SENSOR_CHANNELS],
                ..base
            }),
            _ => Err(Error::arg(format!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_DIM || self.width < MIN_DIM {
            return Err(Error::arg(format!("scene dims must be at least {MIN_DIM}")));
        }
        if self.n_polygon_sites == 0 || self.n_polygon_sites > self.height * self.width {
            return Err(Error::arg("n_polygon_sites must be in 1..=H*W"));
        }
        if self.class_priors.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::arg("class priors must be non-negative and sum to 1"));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::arg("channel stds must be positive"));
        }
        if !(0.0..1.0).contains(&self.land_fraction) {
            return Err(Error::arg("land fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Nearest-site partition for explicit `(row, col)` sites; ties go to the
/// smallest site index.
pub fn voronoi_from_sites(height: usize, width: usize, sites: &[(usize, usize)]) -> Vec<i32> {
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let mut best = (usize::MAX, 0usize);
            for (k, &(r, c)) in sites.iter().enumerate() {
                let d = r.abs_diff(i).pow(2) + c.abs_diff(j).pow(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            out.push(best.1 as i32);
        }
    }
    out
}

/// Voronoi polygon ids `0..n_sites` from distinct seeded sites.
pub fn voronoi_map(height: usize, width: usize, n_sites: usize, seed: u64) -> Result<Vec<i32>> {
    if n_sites == 0 || n_sites > height * width {
        return Err(Error::arg("n_sites must be in 1..=H*W"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, height * width, n_sites);
    let sites: Vec<_> = picks.iter().map(|p| (p / width, p % width)).collect();
    Ok(voronoi_from_sites(height, width, &sites))
}

/// One horizontal then vertical box-blur pass with edge clamping.
fn box_blur(field: &mut [f64], height: usize, width: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut line = Vec::new();
    let blur_line = |src: &[f64], dst: &mut Vec<f64>| {
        let n = src.len() as isize;
        let at = |k: isize| src[k.clamp(0, n - 1) as usize];
        dst.clear();
        let mut acc: f64 = (-r..=r).map(at).sum();
        for k in 0..n {
            dst.push(acc / norm);
            acc += at(k + r + 1) - at(k - r);
        }
    };
    for i in 0..height {
        let row = &mut field[i * width..(i + 1) * width];
        blur_line(row, &mut line);
        row.copy_from_slice(&line);
    }
    let mut col = vec![0.0; height];
    for j in 0..width {
        for i in 0..height {
            col[i] = field[i * width + j];
        }
        blur_line(&col, &mut line);
        for i in 0..height {
            field[i * width + j] = line[i];
        }
    }
}

/// Seeded smooth noise with zero mean and unit variance.
fn smooth_noise(height: usize, width: usize, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..height * width).map(|_| StandardNormal.sample(rng)).collect();
    for _ in 0..3 {
        box_blur(&mut f, height, width, radius);
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut f {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    f
}

fn argmax_classes(fields: &[Vec<f64>], bias: &[f64; NUM_CLASSES], out: &mut [u8]) {
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if fields[k][p] + bias[k] > fields[best][p] + bias[best] {
                best = k;
            }
        }
        *o = best as u8;
    }
}

/// Spatially coherent class map whose class frequencies track the priors.
///
/// Each class gets its own smoothed noise field; a per-class offset is
/// tuned so the per-pixel argmax hits the prior frequencies.
pub fn class_field(height: usize, width: usize, cfg: &SynthConfig, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| smooth_noise(height, width, cfg.smoothing_radius, &mut rng))
        .collect();
    let mut bias = [0.0; NUM_CLASSES];
    for (b, &p) in bias.iter_mut().zip(&cfg.class_priors) {
        if p == 0.0 {
            *b = f64::NEG_INFINITY;
        }
    }
    let mut out = vec![0u8; height * width];
    let n = (height * width) as f64;
    let mut step = 1.0;
    for _ in 0..60 {
        argmax_classes(&fields, &bias, &mut out);
        let mut freq = [0.0; NUM_CLASSES];
        for &c in &out {
            freq[c as usize] += 1.0 / n;
        }
        for k in 0..NUM_CLASSES {
            if bias[k].is_finite() {
                bias[k] += step * (cfg.class_priors[k] - freq[k]);
            }
        }
        step *= 0.95;
    }
    argmax_classes(&fields, &bias, &mut out);
    out
}

/// Land mask: the `fraction` of pixels closest to one randomly chosen
/// border, with a smooth noisy coastline.
fn land_blob(height: usize, width: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let hw = height * width;
    let n_land = (fraction * hw as f64).floor() as usize;
    let mut mask = vec![0u8; hw];
    if n_land == 0 {
        return mask;
    }
    let side = rng.random_range(0..4);
    let noise = smooth_noise(height, width, (height.min(width) / 8).max(1), rng);
    let mut score: Vec<(f64, usize)> = (0..hw)
        .map(|p| {
            let (i, j) = (p / width, p % width);
            let d = match side {
                0 => i as f64 / height as f64,
                1 => (height - 1 - i) as f64 / height as f64,
                2 => j as f64 / width as f64,
                _ => (width - 1 - j) as f64 / width as f64,
            };
            (d + 0.05 * noise[p], p)
        })
        .collect();
    score.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, p) in &score[..n_land] {
        mask[p] = 1;
    }
    mask
}

/// True per-class fractions over the sea pixels of each polygon.
///
/// Returns `None` for polygons without sea pixels.
pub fn polygon_truth_fractions(
    polygon_map: &[i32],
    land_mask: &[u8],
    truth: &[u8],
    n_polygons: usize,
) -> Vec<Option<[f64; NUM_CLASSES]>> {
    let mut counts = vec![[0usize; NUM_CLASSES]; n_polygons];
    for ((&id, &land), &t) in polygon_map.iter().zip(land_mask).zip(truth) {
        if id >= 0 && land == 0 && (t as usize) < NUM_CLASSES {
            counts[id as usize][t as usize] += 1;
        }
    }
    counts
        .iter()
        .map(|c| {
            let n: usize = c.iter().sum();
            (n > 0).then(|| c.map(|v| v as f64 / n as f64))
        })
        .collect()
}

/// Generates one scene as a pure function of `(cfg, seed)`.
pub fn gen_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let mut meta_rng = stream(0);
    let month: u8 = meta_rng.random_range(1..=12);
    let center_lat = meta_rng.random_range(55.0..80.0);
    let center_lon = meta_rng.random_range(-80.0..-10.0);

    let polygon_map = voronoi_map(h, w, cfg.n_polygon_sites, stream(1).random())?;
    let classes = class_field(h, w, cfg, stream(2).random());
    let land_mask = land_blob(h, w, cfg.land_fraction, &mut stream(3));

    let mut channels = vec![0f32; NUM_CHANNELS * hw];
    let mut noise_rng = stream(4);
    for c in 0..SENSOR_CHANNELS {
        let dists: Vec<Normal<f64>> = (0..NUM_CLASSES)
            .map(|k| Normal::new(cfg.class_means[k][c], cfg.channel_std[c]).expect("std > 0"))
            .collect();
        for p in 0..hw {
            channels[c * hw + p] = dists[classes[p] as usize].sample(&mut noise_rng) as f32;
        }
    }
    for p in 0..hw {
        let (i, j) = ((p / w) as f64, (p % w) as f64);
        let lat = center_lat + cfg.lat_span * (0.5 - i / (h - 1) as f64);
        let lon = center_lon + cfg.lon_span * (j / (w - 1) as f64 - 0.5);
        channels[4 * hw + p] = lat as f32;
        channels[5 * hw + p] = lon as f32;
        channels[6 * hw + p] = month as f32;
    }

    let truth: Vec<u8> = classes
        .iter()
        .zip(&land_mask)
        .map(|(&c, &l)| if l == 1 { 255 } else { c })
        .collect();
    let fractions = polygon_truth_fractions(&polygon_map, &land_mask, &truth, cfg.n_polygon_sites);
    let mut chart = ChartTable::new();
    for (id, frac) in fractions.iter().enumerate() {
        let entry = match frac {
            Some(f) => ChartEntry::Coded(label_to_eggcode(&RegionalLabel::new(*f)?)),
            None => ChartEntry::Excluded,
        };
        chart.insert(id as u32, entry)?;
    }

    Ok(Scene {
        meta: SceneMeta {
            scene_id: format!("{}_{seed:016x}", cfg.preset),
            month,
            center_lat,
            center_lon,
        },
        height: h,
        width: w,
        channels,
        polygon_map,
        land_mask,
        chart,
        truth: Some(truth),
    })
}

/// Per-scene seeds derived from `master`, pairwise distinct.
pub fn scene_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mut seeds: Vec<u64> = Vec::with_capacity(n);
    while seeds.len() < n {
        let s: u64 = rng.random();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Writes `n_scenes` scene directories plus `index.txt` under `out`.
pub fn gen_dataset(cfg: &SynthConfig, n_scenes: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut names = Vec::with_capacity(n_scenes);
    for (i, s) in scene_seeds(seed, n_scenes).into_iter().enumerate() {
        let mut scene = gen_scene(cfg, s)?;
        let name = scene_name(i);
        scene.meta.scene_id = name.clone();
        save_scene(&scene, &out.join(&name))?;
        names.push(name);
    }
    let index: String = names.iter().map(|n| format!("{n}\n")).collect();
    let index_path = out.join("index.txt");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(names)
}

/// Scene directories listed in `root/index.txt`, in order.
pub fn read_index(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let path = root.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| root.join(l))
        .collect())
}
