//! Retrieval metrics and the cross-resolution separability diagnostic.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::Embedding;
use crate::error::{Error, Result};

/// Resolutions visited by both diagnostic modes.
pub const RESOLUTION_GRID: [f64; 8] = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

/// Squared Euclidean distances, `n_query × n_gallery`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn pairwise_sqdist(queries: &[Embedding], gallery: &[Embedding]) -> Result<DistanceMatrix> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("distance matrix needs at least one query and one gallery item"));
    }
    let d = queries[0].dim();
    if let Some(e) = queries.iter().chain(gallery).find(|e| e.dim() != d) {
        return Err(Error::shape(format!("embedding dimension {} differs from {d}", e.dim())));
    }
    let values = Array2::from_shape_fn((queries.len(), gallery.len()), |(i, j)| {
        sqdist(queries[i].as_slice(), gallery[j].as_slice())
    });
    Ok(DistanceMatrix { values })
}

/// Rank-k accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub ranks: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl CmcCurve {
    pub fn at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.accuracy[i])
    }
}

/// For each query, sorts the gallery by distance (ties by gallery index)
/// and records the position of the first correct identity. Rank-k accuracy
/// is the fraction of queries whose position is below k.
pub fn cmc(dist: &DistanceMatrix, query_ids: &[u32], gallery_ids: &[u32], ranks: &[usize]) -> Result<CmcCurve> {
    let (nq, ng) = dist.values.dim();
    if query_ids.len() != nq || gallery_ids.len() != ng {
        return Err(Error::shape(format!(
            "{}x{} distance matrix with {} query and {} gallery labels",
            nq,
            ng,
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::invalid("ranks must be non-empty and positive"));
    }
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let mut hits = vec![0usize; ranks.len()];
    for (qi, &qid) in query_ids.iter().enumerate() {
        let row = dist.values.row(qi);
        let best = (0..ng)
            .filter(|&j| gallery_ids[j] == qid)
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
            .ok_or_else(|| Error::invalid(format!("query identity {qid} has no gallery match")))?;
        let ahead = (0..ng)
            .filter(|&j| row[j] < row[best] || (row[j] == row[best] && j < best))
            .count();
        for (h, &k) in hits.iter_mut().zip(&ranks) {
            if ahead < k {
                *h += 1;
            }
        }
    }
    Ok(CmcCurve {
        accuracy: hits.iter().map(|&h| h as f64 / nq as f64).collect(),
        ranks,
    })
}

/// Summary written by `rivid eval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub n_query: usize,
    pub n_gallery: usize,
}

pub fn retrieval_metrics(
    queries: &[Embedding],
    query_ids: &[u32],
    gallery: &[Embedding],
    gallery_ids: &[u32],
) -> Result<RetrievalMetrics> {
    let d = pairwise_sqdist(queries, gallery)?;
    let c = cmc(&d, query_ids, gallery_ids, &[1, 5])?;
    Ok(RetrievalMetrics {
        rank1: c.accuracy[0],
        rank5: c.accuracy[1],
        n_query: queries.len(),
        n_gallery: gallery.len(),
    })
}

/// Same- and different-identity distance sums and their ratio. `o` is
/// `None` when `d_dif` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectivePoint {
    pub d_sim: f64,
    pub d_dif: f64,
    pub o: Option<f64>,
}

/// Sums squared distances over ordered pairs (sample of `first`, sample of
/// `second`). With `same_samples` the two lists describe the same images
/// and index-aligned self pairs are skipped.
pub fn objective(first: &[(u32, Embedding)], second: &[(u32, Embedding)], same_samples: bool) -> Result<ObjectivePoint> {
    if same_samples && first.len() != second.len() {
        return Err(Error::shape("same-sample objective needs index-aligned lists"));
    }
    let ids = |v: &[(u32, Embedding)]| {
        let mut ids: Vec<u32> = v.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let (a, b) = (ids(first), ids(second));
    if a.len() < 2 || a != b {
        return Err(Error::invalid(
            "objective needs the same set of at least 2 identities at both resolutions",
        ));
    }
    let (mut d_sim, mut d_dif) = (0.0, 0.0);
    for (i, (pi, ei)) in first.iter().enumerate() {
        for (j, (pj, ej)) in second.iter().enumerate() {
            if same_samples && i == j {
                continue;
            }
            if ei.dim() != ej.dim() {
                return Err(Error::shape("embedding dimensions differ"));
            }
            let d = sqdist(ei.as_slice(), ej.as_slice());
            if pi == pj {
                d_sim += d;
            } else {
                d_dif += d;
            }
        }
    }
    Ok(ObjectivePoint {
        d_sim,
        d_dif,
        o: (d_dif > 0.0).then(|| d_sim / d_dif),
    })
}

/// Diagonal sweep (`r1 = r2`) or sweep against full resolution (`r2 = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    A,
    B,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(GridMode::A),
            "b" => Ok(GridMode::B),
            _ => Err(Error::invalid(format!("mode must be `a` or `b`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub r1: f64,
    pub r2: f64,
    pub point: ObjectivePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrid {
    pub mode: GridMode,
    pub rows: Vec<GridRow>,
    pub n_samples: usize,
    pub n_identities: usize,
}

impl ObjectiveGrid {
    /// `r1,r2,D_sim,D_dif,O`, preceded by a comment with the sample count.
    /// Undefined ratios are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# mode={} samples={} identities={}\nr1,r2,D_sim,D_dif,O\n",
            match self.mode {
                GridMode::A => "a",
                GridMode::B => "b",
            },
            self.n_samples,
            self.n_identities
        );
        for r in &self.rows {
            let o = r.point.o.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            writeln!(out, "{},{},{},{},{o}", r.r1, r.r2, r.point.d_sim, r.point.d_dif).unwrap();
        }
        out
    }

    /// Mean `|ΔO / Δr1|` over consecutive grid points.
    pub fn mean_abs_slope(&self) -> Result<f64> {
        if self.rows.len() < 2 {
            return Err(Error::invalid("slope needs at least two grid points"));
        }
        let mut total = 0.0;
        for w in self.rows.windows(2) {
            let (a, b) = (
                w[0].point.o.ok_or_else(|| Error::invalid("undefined objective in grid"))?,
                w[1].point.o.ok_or_else(|| Error::invalid("undefined objective in grid"))?,
            );
            total += ((b - a) / (w[1].r1 - w[0].r1)).abs();
        }
        Ok(total / (self.rows.len() - 1) as f64)
    }
}

/// Evaluates the objective over [`RESOLUTION_GRID`]. `embed_at(r)` must
/// return the labelled embeddings of the same test images, in the same
/// order, rendered at resolution `r`.
pub fn objective_curves(
    mode: GridMode,
    mut embed_at: impl FnMut(f64) -> Result<Vec<(u32, Embedding)>>,
) -> Result<ObjectiveGrid> {
    let full = match mode {
        GridMode::B => Some(embed_at(1.0)?),
        GridMode::A => None,
    };
    let mut rows = Vec::with_capacity(RESOLUTION_GRID.len());
    let mut n_samples = 0;
    let mut n_identities = 0;
    for &r1 in &RESOLUTION_GRID {
        let first = embed_at(r1)?;
        n_samples = first.len();
        let mut ids: Vec<u32> = first.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        n_identities = ids.len();
        let (r2, point) = match &full {
            None => (r1, objective(&first, &first, true)?),
            Some(f) => (1.0, objective(&first, f, r1 == 1.0)?),
        };
        rows.push(GridRow { r1, r2, point });
    }
    Ok(ObjectiveGrid {
        mode,
        rows,
        n_samples,
        n_identities,
    })
}
