//! Localization score, AggAtt binning and Spearman rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::CellBox;
use crate::tensor::Tensor;

pub const FLAG_NO_POSITIVE_MASS: &str = "no-positive-mass";

/// Percentile edges of the AggAtt bins.
pub const AGGATT_EDGES: [f64; 7] = [0.0, 2.0, 5.0, 50.0, 95.0, 98.0, 100.0];

/// Fraction of positive attribution inside `cell`. `None` when the map has
/// no positive mass.
pub fn localization_score(map: &Tensor, cell: &CellBox) -> Result<Option<f64>> {
    let (h, w) = map.dims2()?;
    if cell.h == 0 || cell.w == 0 || cell.y0 + cell.h > h || cell.x0 + cell.w > w {
        return Err(shape_err(format!("cell {cell:?} lies outside the {h}x{w} map")));
    }
    let mut inside = Vec::with_capacity(cell.h * cell.w);
    let mut all = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = map.data()[y * w + x].max(0.0);
            all.push(v);
            if cell.contains(y, x) {
                inside.push(v);
            }
        }
    }
    let total = exact_sum(&all);
    Ok((total > 0.0).then(|| exact_sum(&inside) / total))
}

/// Correctly rounded sum (Shewchuk's exact partials), so that maps differing
/// by a power-of-two factor or by symmetric layout give identical scores.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the exact sum of the non-overlapping partials once
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Ranks `[start, end)` of each bin for `n` records.
pub fn bin_bounds(n: usize, edges: &[f64]) -> Vec<(usize, usize)> {
    let cut = |e: f64| ((e * n as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize;
    edges.windows(2).map(|w| (cut(w[0]).min(n), cut(w[1]).min(n))).collect()
}

/// One scored map to aggregate.
#[derive(Clone, Debug)]
pub struct ScoredMap {
    pub sample_id: u64,
    pub score: f64,
    pub map: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggAttBin {
    pub lower_percent: f64,
    pub upper_percent: f64,
    pub sample_ids: Vec<u64>,
    pub mean_score: f64,
    #[serde(skip)]
    pub mean_map: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggAttPanel {
    pub edges: Vec<f64>,
    pub bins: Vec<AggAttBin>,
    /// Maps excluded because their positive mass was zero.
    pub excluded: usize,
}

/// Sorts maps by descending score (ties by ascending sample id) and averages
/// each percentile bin after scaling every map to unit positive mass.
pub fn aggatt(records: &[ScoredMap], edges: &[f64]) -> Result<AggAttPanel> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("AggAtt needs at least one record".into()));
    }
    if edges.len() < 2 || edges[0] != 0.0 || *edges.last().unwrap() != 100.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("AggAtt edges must rise from 0 to 100, got {edges:?}")));
    }
    let shape = records[0].map.shape().to_vec();
    let mut usable = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        if r.map.shape() != shape.as_slice() {
            return Err(shape_err("AggAtt maps differ in shape"));
        }
        let mass: f64 = r.map.data().iter().map(|v| v.max(0.0)).sum();
        if mass > 0.0 && r.score.is_finite() {
            usable.push((r, mass));
        } else {
            excluded += 1;
        }
    }
    usable.sort_by(|(a, _), (b, _)| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    let bounds = bin_bounds(usable.len(), edges);
    if let Some(i) = bounds.iter().position(|(s, e)| s == e) {
        return Err(Error::Starved(format!(
            "AggAtt bin {}-{}% is empty with {} usable maps",
            edges[i],
            edges[i + 1],
            usable.len()
        )));
    }
    let bins = bounds
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            let members = &usable[s..e];
            let mut acc = Tensor::zeros(shape.clone());
            for (r, mass) in members {
                for (a, v) in acc.data_mut().iter_mut().zip(r.map.data()) {
                    *a += v / mass;
                }
            }
            let n = members.len() as f64;
            AggAttBin {
                lower_percent: edges[i],
                upper_percent: edges[i + 1],
                sample_ids: members.iter().map(|(r, _)| r.sample_id).collect(),
                mean_score: members.iter().map(|(r, _)| r.score).sum::<f64>() / n,
                mean_map: Some(acc.scale(1.0 / n)),
            }
        })
        .collect();
    Ok(AggAttPanel { edges: edges.to_vec(), bins, excluded })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks. `None` when
/// either list has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equally long lists of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spearman input contains non-finite values".into()));
    }
    Ok(rank_correlation(&average_ranks(a), &average_ranks(b)))
}

/// Pearson correlation of average ranks, evaluated in integers on doubled
/// ranks so the only rounding is the final division.
fn rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as i128;
    let doubled = |r: &[f64]| r.iter().map(|&v| (2.0 * v) as i128).collect::<Vec<_>>();
    let (x, y) = (doubled(x), doubled(y));
    let sx: i128 = x.iter().sum();
    let sy: i128 = y.iter().sum();
    let sxx: i128 = x.iter().map(|v| v * v).sum();
    let syy: i128 = y.iter().map(|v| v * v).sum();
    let sxy: i128 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let num = n * sxy - sx * sy;
    let dx = n * sxx - sx * sx;
    let dy = n * syy - sy * sy;
    if dx == 0 || dy == 0 {
        return None;
    }
    let rho = if dx == dy { num as f64 / dx as f64 } else { num as f64 / ((dx as f64).sqrt() * (dy as f64).sqrt()) };
    Some(rho.clamp(-1.0, 1.0))
}

/// Mean, median, quartiles and count of a set of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quartiles by linear interpolation between order statistics.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Summary { n: v.len(), mean: v.iter().sum::<f64>() / v.len() as f64, q1: q(0.25), median: q(0.5), q3: q(0.75) })
}


#[cfg(test)]
mod oracle_tests {
    use super::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn spearman_matches_rank_difference_formula() {
        let mut worst: f64 = 0.0;
        for n in 2..=6 {
            let base: Vec<f64> = (0..n).map(|i| i as f64 * 0.7 - 1.0).collect();
            for p in permutations(n) {
                let other: Vec<f64> = p.iter().map(|&i| (i as f64).powi(3)).collect();
                let d2: usize = p.iter().enumerate().map(|(i, &r)| (i as isize - r as isize).pow(2) as usize).sum();
                let denom = n * (n * n - 1);
                let want = (denom as f64 - 6.0 * d2 as f64) / denom as f64;
                let got = spearman(&base, &other).unwrap().unwrap();
                worst = worst.max((got - want).abs());
            }
        }
        assert!(worst == 0.0, "max deviation {worst:e}");
    }
}
