//! Polygon-level weak supervision and the pixel-level baseline loss.
//!
//! For every chart polygon inside an image the network's per-pixel class
//! probabilities are averaged over the polygon's sea pixels, and the mean
//! vector is scored against the chart's concentration vector with a soft
//! cross-entropy. The batch loss is the plain sum of those polygon terms.

use std::collections::BTreeMap;

use crate::autodiff::{soft_ce_value, Tape, Tensor, Var, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::icechart::{dominant_class, ChartEntry, ChartTable, RegionalLabel};
use crate::NUM_CLASSES;

/// Pixel label meaning "ignore".
pub const IGNORE_LABEL: u8 = 255;

/// Mean predicted concentration vector of one polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolygonPrediction {
    pub conc: [f64; NUM_CLASSES],
}

/// Per-pixel class labels for the baseline, `IGNORE_LABEL` where unusable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

/// Spatial context for one image of a batch.
#[derive(Debug, Clone, Copy)]
pub struct ImageRegions<'a> {
    /// Row-major polygon ids, `-1` for none.
    pub polygon_map: &'a [i32],
    /// Row-major land flags, 1 = land.
    pub land_mask: &'a [u8],
    pub chart: &'a ChartTable,
}

/// Counters describing how polygons were treated by the batch loss.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LossDiagnostics {
    pub scored: usize,
    pub excluded: usize,
    /// Polygons whose pixels are all land in this view.
    pub empty: usize,
}

/// Error raised when a polygon has no sea pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("polygon {0} has no sea pixels")]
pub struct EmptyPolygon(pub u32);

/// Flat indices of the pixels of `polygon_id` that are not land.
pub fn polygon_sea_pixels(polygon_map: &[i32], land_mask: &[u8], polygon_id: u32) -> Vec<u32> {
    polygon_map
        .iter()
        .zip(land_mask)
        .enumerate()
        .filter(|(_, (&p, &l))| p == polygon_id as i32 && l == 0)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Mean of `probs: [C, H, W]` over the polygon's sea pixels.
pub fn aggregate_polygon(
    probs: &Tensor,
    polygon_map: &[i32],
    land_mask: &[u8],
    polygon_id: u32,
) -> Result<std::result::Result<PolygonPrediction, EmptyPolygon>> {
    let (c, hw) = match probs.shape() {
        [c, h, w] => (*c, h * w),
        [1, c, h, w] => (*c, h * w),
        s => return Err(Error::arg(format!("aggregate_polygon: probs shape {s:?}"))),
    };
    if c != NUM_CLASSES || polygon_map.len() != hw || land_mask.len() != hw {
        return Err(Error::arg("aggregate_polygon: inconsistent shapes"));
    }
    let pixels = polygon_sea_pixels(polygon_map, land_mask, polygon_id);
    if pixels.is_empty() {
        return Ok(Err(EmptyPolygon(polygon_id)));
    }
    let n = pixels.len() as f64;
    let mut conc = [0.0; NUM_CLASSES];
    for (ch, v) in conc.iter_mut().enumerate() {
        let plane = &probs.data()[ch * hw..(ch + 1) * hw];
        *v = pixels.iter().map(|&p| plane[p as usize]).sum::<f64>() / n;
    }
    Ok(Ok(PolygonPrediction { conc }))
}

/// `-(1/n) Σ label_i ln(clamp(pred_i, 1e-7, 1))` with `n = 4`.
pub fn region_ce(pred: &PolygonPrediction, label: &RegionalLabel) -> f64 {
    soft_ce_value(&pred.conc, &label.conc())
}

/// Polygon ids present in a map, ascending, without the `-1` sentinel.
pub fn present_polygons(polygon_map: &[i32]) -> Vec<u32> {
    let mut ids: Vec<u32> = polygon_map
        .iter()
        .filter(|&&p| p >= 0)
        .map(|&p| p as u32)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Records the summed regional loss of a batch on `tape`.
///
/// `probs` is `[B, 4, H, W]` and `images` holds one entry per batch image.
/// Excluded polygons and polygons with no sea pixels contribute nothing.
pub fn batch_region_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    images: &[ImageRegions<'_>],
) -> Result<(Var, LossDiagnostics)> {
    let [bn, c, h, w] = tape.value(probs).dims4()?;
    if bn != images.len() || c != NUM_CLASSES {
        return Err(Error::arg(format!(
            "batch_region_loss: probs {:?} for {} images",
            tape.value(probs).shape(),
            images.len()
        )));
    }
    let mut diag = LossDiagnostics::default();
    let mut terms = Vec::new();
    for (img, regions) in images.iter().enumerate() {
        if regions.polygon_map.len() != h * w || regions.land_mask.len() != h * w {
            return Err(Error::arg(format!("batch_region_loss: image {img} map size mismatch")));
        }
        // bucket sea pixels per polygon in one pass
        let mut buckets: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for id in present_polygons(regions.polygon_map) {
            buckets.insert(id, Vec::new());
        }
        for (i, (&p, &l)) in regions.polygon_map.iter().zip(regions.land_mask).enumerate() {
            if p >= 0 && l == 0 {
                buckets.get_mut(&(p as u32)).expect("present").push(i as u32);
            }
        }
        for (id, pixels) in buckets {
            let label = match regions.chart.get(id) {
                None => {
                    return Err(Error::arg(format!("polygon {id} missing from chart")));
                }
                Some(ChartEntry::Excluded) => {
                    diag.excluded += 1;
                    continue;
                }
                Some(entry @ ChartEntry::Coded(_)) => entry.label().expect("coded"),
            };
            if pixels.is_empty() {
                diag.empty += 1;
                continue;
            }
            let mean = tape.masked_mean(probs, img, &pixels)?;
            terms.push(tape.soft_cross_entropy(mean, &label.conc())?);
            diag.scored += 1;
        }
    }
    let total = tape.add_scalars(&terms)?;
    Ok((total, diag))
}

/// Value of the summed regional loss for `probs: [B, 4, H, W]`.
pub fn batch_region_loss(probs: &Tensor, images: &[ImageRegions<'_>]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let (loss, _) = batch_region_loss_on_tape(&mut tape, p, images)?;
    Ok(tape.value(loss).item())
}

/// Per-pixel labels from dominant polygons; everything else is ignored.
pub fn derive_pixel_labels(
    chart: &ChartTable,
    polygon_map: &[i32],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<PixelLabelMap> {
    if polygon_map.len() != height * width {
        return Err(Error::arg("derive_pixel_labels: map size mismatch"));
    }
    let mut cache: BTreeMap<i32, u8> = BTreeMap::new();
    let labels = polygon_map
        .iter()
        .map(|&p| {
            *cache.entry(p).or_insert_with(|| {
                if p < 0 {
                    return IGNORE_LABEL;
                }
                chart
                    .get(p as u32)
                    .and_then(|e| e.label())
                    .and_then(|l| dominant_class(&l, threshold))
                    .map_or(IGNORE_LABEL, |s| s.value())
            })
        })
        .collect();
    Ok(PixelLabelMap {
        height,
        width,
        labels,
    })
}

/// Flat indices into `[B, 4, H, W]` of the labelled class probability of every
/// usable pixel.
fn pixel_picks(
    bn: usize,
    h: usize,
    w: usize,
    labels: &[&PixelLabelMap],
    land_masks: &[&[u8]],
) -> Result<Vec<u32>> {
    if labels.len() != bn || land_masks.len() != bn {
        return Err(Error::arg("pixel_ce_masked: batch size mismatch"));
    }
    let hw = h * w;
    let mut picks = Vec::new();
    for img in 0..bn {
        let lab = labels[img];
        if lab.labels.len() != hw || land_masks[img].len() != hw {
            return Err(Error::arg(format!("pixel_ce_masked: image {img} size mismatch")));
        }
        for (p, (&l, &land)) in lab.labels.iter().zip(land_masks[img]).enumerate() {
            if l != IGNORE_LABEL && land == 0 {
                if l as usize >= NUM_CLASSES {
                    return Err(Error::arg(format!("pixel label {l} out of range")));
                }
                picks.push(((img * NUM_CLASSES + l as usize) * hw + p) as u32);
            }
        }
    }
    Ok(picks)
}

/// Records the baseline's masked pixel cross-entropy on `tape`. Returns
/// `None` when no pixel in the batch is usable.
pub fn pixel_ce_masked_on_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[&PixelLabelMap],
    land_masks: &[&[u8]],
) -> Result<Option<Var>> {
    let [bn, c, h, w] = tape.value(probs).dims4()?;
    if c != NUM_CLASSES {
        return Err(Error::arg("pixel_ce_masked: expected 4 classes"));
    }
    let picks = pixel_picks(bn, h, w, labels, land_masks)?;
    if picks.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.picked_nll(probs, &picks)?))
}

/// Value of the masked pixel cross-entropy, `None` for an empty batch.
pub fn pixel_ce_masked(
    probs: &Tensor,
    labels: &[&PixelLabelMap],
    land_masks: &[&[u8]],
) -> Result<Option<f64>> {
    let [bn, _, h, w] = probs.dims4()?;
    let picks = pixel_picks(bn, h, w, labels, land_masks)?;
    if picks.is_empty() {
        return Ok(None);
    }
    let d = probs.data();
    let s: f64 = picks
        .iter()
        .map(|&i| -d[i as usize].clamp(LOG_CLAMP, 1.0).ln())
        .sum();
    Ok(Some(s / picks.len() as f64))
}
