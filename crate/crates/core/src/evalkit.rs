//! Retrieval evaluation (Euclidean ranking, CMC, mAP), text-to-image
//! retrieval by relevance score, and attention heat maps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::association::Mode;
use crate::datagen::{Split, TupleSource};
use crate::diffcore::{ParamStore, Real};
use crate::error::{Error, Result};
use crate::model::Model;

pub fn euclid_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "feature dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Gallery indices in ascending order of `scores`, ties broken by index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Gallery indices in descending order of `scores`, ties broken by index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean over relevant positions of precision at that rank.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub queries: usize,
    pub skipped: usize,
}

/// Features of a retrieval set with tuple ids (for self-match exclusion)
/// and identity labels.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

/// Metrics from a query × gallery distance matrix. Gallery entries with the
/// same id as the query are dropped; queries whose identity is absent from
/// the remaining gallery are skipped with a warning.
pub fn metrics_from_distances(
    distances: &[Vec<f64>],
    query_ids: &[usize],
    query_labels: &[usize],
    gallery_ids: &[usize],
    gallery_labels: &[usize],
) -> Metrics {
    let mut m = Metrics::default();
    for (q, row) in distances.iter().enumerate() {
        let order: Vec<usize> = rank_ascending(row)
            .into_iter()
            .filter(|&g| gallery_ids[g] != query_ids[q])
            .collect();
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_labels[g] == query_labels[q]).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            log::warn!("query {} (identity {}) has no match in the gallery; skipped", query_ids[q], query_labels[q]);
            m.skipped += 1;
            continue;
        };
        m.queries += 1;
        m.map += average_precision(&relevant);
        m.top1 += (first < 1) as u8 as f64;
        m.top5 += (first < 5) as u8 as f64;
        m.top10 += (first < 10) as u8 as f64;
    }
    if m.queries > 0 {
        let n = m.queries as f64;
        m.map /= n;
        m.top1 /= n;
        m.top5 /= n;
        m.top10 /= n;
    }
    m
}

pub fn compute_metrics(queries: &FeatureSet, gallery: &FeatureSet) -> Result<Metrics> {
    let distances = queries
        .features
        .iter()
        .map(|q| gallery.features.iter().map(|g| euclid_dist(q, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_distances(
        &distances,
        &queries.ids,
        &queries.labels,
        &gallery.ids,
        &gallery.labels,
    ))
}

/// Expected metrics of a uniformly random ranking, estimated by sampling.
pub fn chance_metrics(
    query_labels: &[usize],
    gallery_labels: &[usize],
    trials: usize,
    rng: &mut impl Rng,
) -> Metrics {
    let mut acc = Metrics::default();
    let ids_q: Vec<usize> = (0..query_labels.len()).collect();
    let ids_g: Vec<usize> = (query_labels.len()..query_labels.len() + gallery_labels.len()).collect();
    for _ in 0..trials {
        let distances: Vec<Vec<f64>> = query_labels
            .iter()
            .map(|_| {
                let mut perm: Vec<f64> = (0..gallery_labels.len()).map(|i| i as f64).collect();
                perm.shuffle(rng);
                perm
            })
            .collect();
        let m = metrics_from_distances(&distances, &ids_q, query_labels, &ids_g, gallery_labels);
        acc.map += m.map;
        acc.top1 += m.top1;
        acc.top5 += m.top5;
        acc.top10 += m.top10;
        acc.queries = m.queries;
    }
    let n = trials.max(1) as f64;
    Metrics {
        map: acc.map / n,
        top1: acc.top1 / n,
        top5: acc.top5 / n,
        top10: acc.top10 / n,
        queries: acc.queries,
        skipped: 0,
    }
}

/// Identity features of every tuple in a split. Reads images and labels
/// only.
pub fn extract_features<S: Real>(
    model: &Model,
    store: &ParamStore<S>,
    source: &dyn TupleSource,
    split: Split,
) -> Result<FeatureSet> {
    let mut set = FeatureSet::default();
    for i in source.indices(split) {
        let image = source.image(i)?;
        set.features.push(model.image_feature(store, &image.to_tensor::<S>())?);
        set.labels.push(source.label(i));
        set.ids.push(i);
    }
    Ok(set)
}

/// Image-only re-identification evaluation on the query and gallery splits.
pub fn evaluate_reid<S: Real>(model: &Model, store: &ParamStore<S>, source: &dyn TupleSource) -> Result<Metrics> {
    let queries = extract_features(model, store, source, Split::Query)?;
    let gallery = extract_features(model, store, source, Split::Gallery)?;
    compute_metrics(&queries, &gallery)
}

/// Gallery images ranked by descending relevance to a description, with
/// their scores. Requires a model trained with the association loss.
pub fn text_to_image_retrieve<S: Real>(
    model: &Model,
    store: &ParamStore<S>,
    trained_mode: Mode,
    words: &[usize],
    gallery_globals: &[Vec<f64>],
) -> Result<Vec<(usize, f64)>> {
    if !trained_mode.uses_dis() {
        return Err(Error::NoScoreHead(trained_mode.to_string()));
    }
    let theta = model.text_feature(store, words)?;
    let scores: Vec<f64> = gallery_globals
        .iter()
        .map(|psi| model.relevance(store, psi, &theta))
        .collect();
    Ok(rank_descending(&scores).into_iter().map(|i| (i, scores[i])).collect())
}

/// Per-pixel grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Attention upsampled to pixels: `raw` carries each bin's weight on every
/// pixel of that bin (nearest neighbour), `normalized` is `raw` min-max
/// scaled to `[0, 1]` (all zeros when constant).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub raw: Grid,
    pub normalized: Grid,
}

pub fn attention_heatmap(
    weights: &[f64],
    bin_pixels: &[((usize, usize), (usize, usize))],
    size: (usize, usize),
) -> Result<Heatmap> {
    if weights.len() != bin_pixels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} attention weights for {} bins",
            weights.len(),
            bin_pixels.len()
        )));
    }
    let (h, w) = size;
    let mut raw = vec![0.0; h * w];
    for (&wt, &((r0, r1), (c0, c1))) in weights.iter().zip(bin_pixels) {
        for y in r0..r1.min(h) {
            for x in c0..c1.min(w) {
                raw[y * w + x] = wt;
            }
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; h * w]
    };
    Ok(Heatmap {
        raw: Grid {
            height: h,
            width: w,
            values: raw,
        },
        normalized: Grid {
            height: h,
            width: w,
            values: normalized,
        },
    })
}

/// Share of the grid's total mass inside `rows × cols` (half-open).
pub fn mass_in_region(grid: &Grid, rows: (usize, usize), cols: (usize, usize)) -> Result<f64> {
    if rows.0 >= rows.1 || cols.0 >= cols.1 {
        return Err(Error::InvalidArgument("empty region".into()));
    }
    if rows.1 > grid.height || cols.1 > grid.width {
        return Err(Error::InvalidArgument(format!(
            "region {rows:?}x{cols:?} exceeds {}x{} grid",
            grid.height, grid.width
        )));
    }
    let total: f64 = grid.values.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("grid has no mass".into()));
    }
    let inside: f64 = (rows.0..rows.1)
        .flat_map(|y| (cols.0..cols.1).map(move |x| (y, x)))
        .map(|(y, x)| grid.get(y, x))
        .sum();
    Ok(inside / total)
}

/// 8-bit binary PGM (P5) of a `[0, 1]` grid.
pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// One row of comma-separated values per pixel row.
pub fn grid_to_csv(grid: &Grid) -> String {
    let mut s = String::new();
    for y in 0..grid.height {
        let row: Vec<String> = (0..grid.width).map(|x| format!("{:.6}", grid.get(y, x))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn grid_from_csv(text: &str) -> Result<Grid> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad CSV value `{v}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("ragged or empty CSV grid".into()));
    }
    Ok(Grid {
        height: rows.len(),
        width,
        values: rows.into_iter().flatten().collect(),
    })
}

/// Writes `<stem>.pgm` and `<stem>.csv` of the normalized map.
pub fn write_heatmap(heatmap: &Heatmap, stem: &Path) -> Result<()> {
    std::fs::write(stem.with_extension("pgm"), encode_pgm(&heatmap.normalized))?;
    std::fs::write(stem.with_extension("csv"), grid_to_csv(&heatmap.normalized))?;
    Ok(())
}

pub const METRICS_HEADER: &str = "variant,seed,mAP,top1,top5,top10";

pub fn metrics_csv_row(variant: &str, seed: u64, m: &Metrics) -> String {
    format!(
        "{variant},{seed},{:.6},{:.6},{:.6},{:.6}",
        m.map, m.top1, m.top5, m.top10
    )
}

/// Fixed-width table of percentages.
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let mut s = format!("{:<12} {:>7} {:>7} {:>7} {:>7}\n", "variant", "mAP", "top-1", "top-5", "top-10");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            name,
            100.0 * m.map,
            100.0 * m.top1,
            100.0 * m.top5,
            100.0 * m.top10
        );
    }
    s
}
