//! Polygon R², pixel metrics against hidden truth, and whole-scene inference.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::icechart::RegionalLabel;
use crate::regionloss::{aggregate_polygon, present_polygons, PolygonPrediction};
use crate::scene_io::{Scene, NUM_CHANNELS};
use crate::unet::{predict, UNetParams};
use crate::NUM_CLASSES;

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["Open water", "Young ice", "First-year ice", "Multiyear ice"];

/// Label variance below this makes a class's R² undefined.
pub const R2_MIN_DENOMINATOR: f64 = 1e-15;

/// Tiles pushed through the network per forward call.
const TILE_BATCH: usize = 4;

pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` where the class's label variance is zero.
    pub r2: [Option<f64>; NUM_CLASSES],
    pub n_poly: usize,
    pub pixel_accuracy: Option<f64>,
    /// Rows are truth, columns prediction.
    pub confusion: Option<Confusion>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,r2,defined\n");
        for (k, r) in self.r2.iter().enumerate() {
            match r {
                Some(v) => writeln!(s, "{k},{v},true"),
                None => writeln!(s, "{k},,false"),
            }
            .expect("write to string");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<16}{:>10}", "Class", "R2 (%)").unwrap();
        for (name, r) in CLASS_NAMES.iter().zip(&self.r2) {
            match r {
                Some(v) => writeln!(s, "{name:<16}{:>10.2}", v * 100.0),
                None => writeln!(s, "{name:<16}{:>10}", "undefined"),
            }
            .unwrap();
        }
        writeln!(s, "Polygons: {}", self.n_poly).unwrap();
        if let Some(a) = self.pixel_accuracy {
            writeln!(s, "Pixel accuracy: {a:.4}").unwrap();
        }
        if let Some(cm) = &self.confusion {
            writeln!(s, "Confusion (rows truth, cols prediction):").unwrap();
            for row in cm {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>8}")).collect();
                writeln!(s, "{}", cells.join("")).unwrap();
            }
        }
        s
    }
}

/// Per-class coefficient of determination over polygons.
pub fn r2_per_class(
    labels: &[RegionalLabel],
    preds: &[PolygonPrediction],
) -> Result<[Option<f64>; NUM_CLASSES]> {
    if labels.len() != preds.len() {
        return Err(Error::arg(format!(
            "r2_per_class: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::arg("r2_per_class: no polygons"));
    }
    let n = labels.len() as f64;
    let mut out = [None; NUM_CLASSES];
    for (k, slot) in out.iter_mut().enumerate() {
        let mean = labels.iter().map(|l| l.get(k)).sum::<f64>() / n;
        let den: f64 = labels.iter().map(|l| (l.get(k) - mean).powi(2)).sum();
        if den < R2_MIN_DENOMINATOR {
            continue;
        }
        let num: f64 = labels
            .iter()
            .zip(preds)
            .map(|(l, p)| (l.get(k) - p.conc[k]).powi(2))
            .sum();
        *slot = Some(1.0 - num / den);
    }
    Ok(out)
}

/// Per-pixel argmax of `[C, H, W]` (or `[1, C, H, W]`); ties go to the
/// smaller class index.
pub fn argmax_map(probs: &Tensor) -> Result<Vec<u8>> {
    let (c, hw) = match probs.shape() {
        [c, h, w] | [1, c, h, w] => (*c, h * w),
        s => return Err(Error::arg(format!("argmax_map: shape {s:?}"))),
    };
    let d = probs.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Accuracy and confusion over pixels with known truth and no land.
pub fn pixel_metrics(pred: &[u8], truth: &[u8], land_mask: &[u8]) -> Result<(Option<f64>, Confusion)> {
    if pred.len() != truth.len() || truth.len() != land_mask.len() {
        return Err(Error::arg("pixel_metrics: plane size mismatch"));
    }
    let mut cm = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for ((&p, &t), &l) in pred.iter().zip(truth).zip(land_mask) {
        if l != 0 || t as usize >= NUM_CLASSES {
            continue;
        }
        if p as usize >= NUM_CLASSES {
            return Err(Error::arg(format!("predicted class {p} out of range")));
        }
        cm[t as usize][p as usize] += 1;
    }
    Ok((accuracy(&cm), cm))
}

fn accuracy(cm: &Confusion) -> Option<f64> {
    let total: u64 = cm.iter().flatten().sum();
    let diag: u64 = (0..NUM_CLASSES).map(|k| cm[k][k]).sum();
    (total > 0).then(|| diag as f64 / total as f64)
}

/// Reflected index for padding past the end of an axis of length `n`.
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Class probabilities `[4, H, W]` for a whole normalised scene.
///
/// The scene is reflect-padded to a multiple of `tile`, run tile by tile
/// without overlap, stitched and cropped back.
pub fn predict_scene(params: &UNetParams, scene: &Scene, tile: usize) -> Result<Tensor> {
    let (h, w) = (scene.height, scene.width);
    if tile == 0 || h < tile || w < tile {
        return Err(Error::arg(format!(
            "scene {h}x{w} is smaller than the {tile}x{tile} tile; pad the scene or use a smaller tile"
        )));
    }
    let (th, tw) = (h.div_ceil(tile), w.div_ceil(tile));
    let origins: Vec<(usize, usize)> = (0..th)
        .flat_map(|a| (0..tw).map(move |b| (a * tile, b * tile)))
        .collect();
    let hw = h * w;
    let tt = tile * tile;
    let mut out = vec![0.0f64; NUM_CLASSES * hw];
    for chunk in origins.chunks(TILE_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * NUM_CHANNELS * tt);
        for &(r0, c0) in chunk {
            for c in 0..NUM_CHANNELS {
                let plane = scene.channel(c);
                for i in 0..tile {
                    let si = reflect(r0 + i, h);
                    for j in 0..tile {
                        input.push(plane[si * w + reflect(c0 + j, w)] as f64);
                    }
                }
            }
        }
        let x = Tensor::new(&[chunk.len(), NUM_CHANNELS, tile, tile], input)?;
        let probs = predict(params, x)?;
        let d = probs.data();
        for (b, &(r0, c0)) in chunk.iter().enumerate() {
            for k in 0..NUM_CLASSES {
                let src = &d[(b * NUM_CLASSES + k) * tt..(b * NUM_CLASSES + k + 1) * tt];
                for i in 0..tile.min(h - r0) {
                    for j in 0..tile.min(w - c0) {
                        out[k * hw + (r0 + i) * w + c0 + j] = src[i * tile + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[NUM_CLASSES, h, w], out)
}

/// Pooled polygon labels and predictions of one scene's probabilities.
pub fn scene_polygon_pairs(
    scene: &Scene,
    probs: &Tensor,
) -> Result<(Vec<RegionalLabel>, Vec<PolygonPrediction>)> {
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for id in present_polygons(&scene.polygon_map) {
        let entry = scene
            .chart
            .get(id)
            .ok_or_else(|| Error::format(format!("unreferenced polygon {id}")))?;
        let Some(label) = entry.label() else { continue };
        if let Ok(pred) = aggregate_polygon(probs, &scene.polygon_map, &scene.land_mask, id)? {
            labels.push(label);
            preds.push(pred);
        }
    }
    Ok((labels, preds))
}

/// Polygon R² pooled over all scenes, plus pixel metrics where truth exists.
///
/// Scenes must already be normalised the way the model was trained.
pub fn evaluate(params: &UNetParams, scenes: &[Scene], tile: usize) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::arg("evaluate: no scenes"));
    }
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut cm: Option<Confusion> = None;
    for s in scenes {
        let probs = predict_scene(params, s, tile)?;
        let (l, p) = scene_polygon_pairs(s, &probs)?;
        labels.extend(l);
        preds.extend(p);
        if let Some(truth) = &s.truth {
            let (_, c) = pixel_metrics(&argmax_map(&probs)?, truth, &s.land_mask)?;
            let acc = cm.get_or_insert([[0; NUM_CLASSES]; NUM_CLASSES]);
            for (row, crow) in acc.iter_mut().zip(&c) {
                for (a, v) in row.iter_mut().zip(crow) {
                    *a += v;
                }
            }
        }
    }
    let r2 = if labels.is_empty() {
        [None; NUM_CLASSES]
    } else {
        r2_per_class(&labels, &preds)?
    };
    Ok(MetricsReport {
        r2,
        n_poly: labels.len(),
        pixel_accuracy: cm.as_ref().and_then(accuracy),
        confusion: cm,
    })
}
