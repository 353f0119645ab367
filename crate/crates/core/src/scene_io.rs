//! Scene container and its on-disk directory format.
//!
//! A scene directory holds:
//!
//! - `manifest.json`: `version` (1), `height`, `width`, ordered `channels`,
//!   `month`, `scene_id`, `center_lat`, `center_lon`
//! - `<channel>.f32`: one row-major little-endian `f32` plane per channel
//! - `polygons.i32`: row-major little-endian `i32`, `-1` where no polygon
//! - `land.u8`: one byte per pixel, 1 = land
//! - `chart.csv`: chart table in the ice chart CSV format
//! - `truth.u8` (optional): per-pixel class 0–3, 255 where unknown

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icechart::{parse_chart, ChartEntry, ChartTable};

pub const FORMAT_VERSION: u32 = 1;

/// Channel order: SAR HH and HV, AMSR2 36.5 GHz H and V, latitude,
/// longitude, acquisition month.
pub const CHANNEL_NAMES: [&str; 7] = ["hh", "hv", "amsr_h", "amsr_v", "lat", "lon", "month"];

pub const NUM_CHANNELS: usize = CHANNEL_NAMES.len();

/// Index of the month plane within [`CHANNEL_NAMES`].
pub const MONTH_CHANNEL: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub month: u8,
    pub center_lat: f64,
    pub center_lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub height: usize,
    pub width: usize,
    /// `NUM_CHANNELS` planes of `height * width`, channel-major.
    pub channels: Vec<f32>,
    pub polygon_map: Vec<i32>,
    pub land_mask: Vec<u8>,
    pub chart: ChartTable,
    pub truth: Option<Vec<u8>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    height: usize,
    width: usize,
    channels: Vec<String>,
    month: u8,
    scene_id: String,
    center_lat: f64,
    center_lon: f64,
}

impl Scene {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.pixels();
        &self.channels[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.pixels();
        &mut self.channels[c * hw..(c + 1) * hw]
    }

    /// Checks every structural invariant of the container.
    pub fn validate(&self) -> Result<()> {
        let hw = self.pixels();
        if self.height == 0 || self.width == 0 {
            return Err(Error::format("scene has zero size"));
        }
        if !(1..=12).contains(&self.meta.month) {
            return Err(Error::format(format!("month {} outside 1..=12", self.meta.month)));
        }
        if self.channels.len() != NUM_CHANNELS * hw {
            return Err(Error::format("channel data size mismatch"));
        }
        if self.polygon_map.len() != hw {
            return Err(Error::format("plane size mismatch: polygons"));
        }
        if self.land_mask.len() != hw {
            return Err(Error::format("plane size mismatch: land"));
        }
        if let Some(v) = self.land_mask.iter().find(|&&v| v > 1) {
            return Err(Error::format(format!("land mask value {v} is not 0/1")));
        }
        if let Some(t) = &self.truth {
            if t.len() != hw {
                return Err(Error::format("plane size mismatch: truth"));
            }
            if let Some(v) = t.iter().find(|&&v| v > 3 && v != 255) {
                return Err(Error::format(format!("truth value {v} invalid")));
            }
        }
        let mut seen: Vec<i32> = self.polygon_map.clone();
        seen.sort_unstable();
        seen.dedup();
        for id in seen {
            if id < -1 {
                return Err(Error::format(format!("invalid polygon id {id}")));
            }
            if id >= 0 && !self.chart.contains(id as u32) {
                return Err(Error::format(format!("unreferenced polygon {id}")));
            }
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(format!("missing plane file {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_plane<T, const N: usize>(
    dir: &Path,
    file: &str,
    name: &str,
    count: usize,
    decode: fn([u8; N]) -> T,
) -> Result<Vec<T>> {
    let bytes = read_file(&dir.join(file))?;
    if bytes.len() != count * N {
        return Err(Error::format(format!("plane size mismatch: {name}")));
    }
    Ok(bytes
        .chunks_exact(N)
        .map(|c| decode(c.try_into().expect("chunk size")))
        .collect())
}

/// Writes `s` as a scene directory, creating it if needed.
pub fn save_scene(s: &Scene, dir: &Path) -> Result<()> {
    s.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        height: s.height,
        width: s.width,
        channels: CHANNEL_NAMES.iter().map(|c| c.to_string()).collect(),
        month: s.meta.month,
        scene_id: s.meta.scene_id.clone(),
        center_lat: s.meta.center_lat,
        center_lon: s.meta.center_lon,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest encoding: {e}")))?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let bytes: Vec<u8> = s.channel(c).iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(format!("{name}.f32")), &bytes)?;
    }
    let poly: Vec<u8> = s.polygon_map.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join("polygons.i32"), &poly)?;
    write_file(&dir.join("land.u8"), &s.land_mask)?;
    write_file(&dir.join("chart.csv"), s.chart.to_csv().as_bytes())?;
    let truth_path = dir.join("truth.u8");
    match &s.truth {
        Some(t) => write_file(&truth_path, t)?,
        None if truth_path.exists() => {
            fs::remove_file(&truth_path).map_err(|e| Error::io(&truth_path, e))?
        }
        None => {}
    }
    Ok(())
}

/// Reads and validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest_path = dir.join("manifest.json");
    let text = read_file(&manifest_path)?;
    let m: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::format(format!("{}: bad manifest: {e}", manifest_path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported scene version {} (expected {FORMAT_VERSION})",
            m.version
        )));
    }
    if m.channels != CHANNEL_NAMES {
        return Err(Error::format(format!(
            "unexpected channel list {:?}",
            m.channels
        )));
    }
    let hw = m.height * m.width;
    let mut channels = Vec::with_capacity(NUM_CHANNELS * hw);
    for name in CHANNEL_NAMES {
        channels.extend(read_plane(dir, &format!("{name}.f32"), name, hw, f32::from_le_bytes)?);
    }
    let polygon_map = read_plane(dir, "polygons.i32", "polygons", hw, i32::from_le_bytes)?;
    let land_mask = read_plane(dir, "land.u8", "land", hw, |[b]: [u8; 1]| b)?;
    let chart_path = dir.join("chart.csv");
    let chart_text = String::from_utf8(read_file(&chart_path)?)
        .map_err(|_| Error::format("chart.csv is not UTF-8"))?;
    let chart = parse_chart(&chart_text)?;
    let truth = if dir.join("truth.u8").exists() {
        Some(read_plane(dir, "truth.u8", "truth", hw, |[b]: [u8; 1]| b)?)
    } else {
        None
    };
    let scene = Scene {
        meta: SceneMeta {
            scene_id: m.scene_id,
            month: m.month,
            center_lat: m.center_lat,
            center_lon: m.center_lon,
        },
        height: m.height,
        width: m.width,
        channels,
        polygon_map,
        land_mask,
        chart,
        truth,
    };
    scene.validate()?;
    Ok(scene)
}

/// Most frequent value; ties go to the smallest value.
fn block_majority<T: Ord + Copy>(values: impl Iterator<Item = T>) -> T {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(T, usize)> = None;
    for (v, n) in counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((v, n));
        }
    }
    best.expect("non-empty block").0
}

/// Reduces resolution by an integer factor.
///
/// The bottom/right remainder is cropped first. Channels take the block
/// mean, land the block "any", polygon ids and truth the block majority.
pub fn downscale_scene(s: &Scene, ratio: usize) -> Result<Scene> {
    if ratio == 0 {
        return Err(Error::arg("downscale ratio must be positive"));
    }
    if ratio == 1 {
        return Ok(s.clone());
    }
    let (h, w) = (s.height / ratio, s.width / ratio);
    if h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "scene {}x{} smaller than ratio {ratio}",
            s.height, s.width
        )));
    }
    let block = |i: usize, j: usize| {
        (0..ratio).flat_map(move |a| (0..ratio).map(move |b| (i * ratio + a) * s.width + j * ratio + b))
    };
    let area = (ratio * ratio) as f64;
    let mut channels = Vec::with_capacity(NUM_CHANNELS * h * w);
    for c in 0..NUM_CHANNELS {
        let plane = s.channel(c);
        for i in 0..h {
            for j in 0..w {
                let sum: f64 = block(i, j).map(|p| plane[p] as f64).sum();
                channels.push((sum / area) as f32);
            }
        }
    }
    let mut polygon_map = Vec::with_capacity(h * w);
    let mut land_mask = Vec::with_capacity(h * w);
    let mut truth = s.truth.as_ref().map(|_| Vec::with_capacity(h * w));
    for i in 0..h {
        for j in 0..w {
            polygon_map.push(block_majority(block(i, j).map(|p| s.polygon_map[p])));
            land_mask.push(block(i, j).any(|p| s.land_mask[p] == 1) as u8);
            if let (Some(out), Some(t)) = (truth.as_mut(), s.truth.as_ref()) {
                out.push(block_majority(block(i, j).map(|p| t[p])));
            }
        }
    }
    Ok(Scene {
        meta: s.meta.clone(),
        height: h,
        width: w,
        channels,
        polygon_map,
        land_mask,
        chart: s.chart.clone(),
        truth,
    })
}

/// Per-channel normalisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel mean and population standard deviation over all non-land pixels.
pub fn compute_stats(scenes: &[&Scene]) -> Result<ChannelStats> {
    if scenes.is_empty() {
        return Err(Error::arg("compute_stats: no scenes"));
    }
    let mut count = 0usize;
    let mut sum = [0.0f64; NUM_CHANNELS];
    for s in scenes {
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += s
                .channel(c)
                .iter()
                .zip(&s.land_mask)
                .filter(|(_, &l)| l == 0)
                .map(|(&v, _)| v as f64)
                .sum::<f64>();
        }
        count += s.land_mask.iter().filter(|&&l| l == 0).count();
    }
    if count == 0 {
        return Err(Error::arg("compute_stats: every pixel is land"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = [0.0f64; NUM_CHANNELS];
    for s in scenes {
        for (c, acc) in sq.iter_mut().enumerate() {
            *acc += s
                .channel(c)
                .iter()
                .zip(&s.land_mask)
                .filter(|(_, &l)| l == 0)
                .map(|(&v, _)| (v as f64 - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// Z-scores every channel; channels with `std < 1e-12` become zero.
pub fn normalize(s: &Scene, stats: &ChannelStats) -> Scene {
    let mut out = s.clone();
    for c in 0..NUM_CHANNELS {
        let (m, sd) = (stats.mean[c], stats.std[c]);
        for v in out.channel_mut(c) {
            *v = if sd < 1e-12 {
                0.0
            } else {
                ((*v as f64 - m) / sd) as f32
            };
        }
    }
    out
}

/// A square crop of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<'a> {
    /// `(row, col)` of the top-left corner in the parent scene.
    pub origin: (usize, usize),
    pub size: usize,
    pub channels: Vec<f32>,
    pub polygon_map: Vec<i32>,
    pub land_mask: Vec<u8>,
    pub truth: Option<Vec<u8>>,
    pub chart: &'a ChartTable,
}

/// Draws patches from one scene, preferring crops that contain labelled
/// (non-excluded) polygon pixels.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    scene: &'a Scene,
    size: usize,
    /// Summed-area table of labelled-pixel indicators, `(H+1) x (W+1)`.
    integral: Vec<u32>,
}

/// Attempts before a candidate without labelled pixels is accepted anyway.
pub const MAX_PATCH_TRIES: usize = 10;

impl<'a> PatchSampler<'a> {
    pub fn new(scene: &'a Scene, size: usize) -> Result<Self> {
        if size == 0 || size > scene.height || size > scene.width {
            return Err(Error::arg(format!(
                "patch size {size} exceeds scene {}x{}",
                scene.height, scene.width
            )));
        }
        let (h, w) = (scene.height, scene.width);
        let mut integral = vec![0u32; (h + 1) * (w + 1)];
        for i in 0..h {
            let mut row = 0u32;
            for j in 0..w {
                let p = scene.polygon_map[i * w + j];
                let labelled = p >= 0
                    && matches!(scene.chart.get(p as u32), Some(ChartEntry::Coded(_)));
                row += labelled as u32;
                integral[(i + 1) * (w + 1) + j + 1] = integral[i * (w + 1) + j + 1] + row;
            }
        }
        Ok(PatchSampler {
            scene,
            size,
            integral,
        })
    }

    /// Number of labelled pixels in the crop at `origin`.
    pub fn labelled_pixels(&self, origin: (usize, usize)) -> u32 {
        let w1 = self.scene.width + 1;
        let (r0, c0) = origin;
        let (r1, c1) = (r0 + self.size, c0 + self.size);
        self.integral[r1 * w1 + c1] + self.integral[r0 * w1 + c0]
            - self.integral[r0 * w1 + c1]
            - self.integral[r1 * w1 + c0]
    }

    /// Picks an origin uniformly, resampling up to [`MAX_PATCH_TRIES`] times
    /// while the crop contains no labelled pixel.
    pub fn sample_origin<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let mut origin = (0, 0);
        for _ in 0..MAX_PATCH_TRIES {
            origin = (
                rng.random_range(0..=self.scene.height - self.size),
                rng.random_range(0..=self.scene.width - self.size),
            );
            if self.labelled_pixels(origin) > 0 {
                break;
            }
        }
        origin
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Patch<'a> {
        let origin = self.sample_origin(rng);
        crop(self.scene, origin, self.size)
    }
}

/// Copies the `size x size` crop at `origin`.
pub fn crop(s: &Scene, origin: (usize, usize), size: usize) -> Patch<'_> {
    let (r0, c0) = origin;
    assert!(r0 + size <= s.height && c0 + size <= s.width, "crop out of bounds");
    let rows = || (0..size).map(move |i| (r0 + i) * s.width + c0);
    let mut channels = Vec::with_capacity(NUM_CHANNELS * size * size);
    for c in 0..NUM_CHANNELS {
        let plane = s.channel(c);
        for start in rows() {
            channels.extend_from_slice(&plane[start..start + size]);
        }
    }
    let take = |v: &[i32]| -> Vec<i32> {
        rows().flat_map(|st| v[st..st + size].iter().copied()).collect()
    };
    let take_u8 = |v: &[u8]| -> Vec<u8> {
        rows().flat_map(|st| v[st..st + size].iter().copied()).collect()
    };
    Patch {
        origin,
        size,
        channels,
        polygon_map: take(&s.polygon_map),
        land_mask: take_u8(&s.land_mask),
        truth: s.truth.as_deref().map(take_u8),
        chart: &s.chart,
    }
}

/// `count` seeded random patches of side `size`.
pub fn extract_patches(s: &Scene, size: usize, seed: u64, count: usize) -> Result<Vec<Patch<'_>>> {
    let sampler = PatchSampler::new(s, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
}
