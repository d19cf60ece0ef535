//! Embedding extraction and single-query retrieval metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{flip, Image};
use crate::data::{Dataset, Split};
use crate::model::Model;
use crate::{exec, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: usize,
    pub camera: usize,
    pub source: String,
    pub vector: Vec<f64>,
}

const EXTRACT_BATCH: usize = 64;

/// Eval-mode feature of every image; with `flip_mean` the feature is the
/// mean of the image's and its mirror's.
pub fn extract_features(model: &Model, images: &[Image], flip_mean: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EXTRACT_BATCH) {
        let plain = model.embed(&Image::batch_tensor(chunk)?)?;
        let mirrored = if flip_mean {
            let flipped: Vec<Image> = chunk.iter().map(flip).collect();
            Some(model.embed(&Image::batch_tensor(&flipped)?)?)
        } else {
            None
        };
        for i in 0..chunk.len() {
            let mut v = plain.sample(i).to_vec();
            if let Some(m) = &mirrored {
                for (a, b) in v.iter_mut().zip(m.sample(i)) {
                    *a = (*a + b) / 2.0;
                }
            }
            out.push(v);
        }
    }
    if let Some(i) = out.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("embedding {i}")));
    }
    Ok(out)
}

/// Embeddings of the dataset images at `indices`.
pub fn extract_embeddings(model: &Model, data: &Dataset, indices: &[usize], flip_mean: bool) -> Result<Vec<EmbeddingRecord>> {
    let images: Vec<Image> = indices.iter().map(|&i| data.images[i].clone()).collect();
    let vectors = extract_features(model, &images, flip_mean)?;
    Ok(indices
        .iter()
        .zip(vectors)
        .map(|(&i, vector)| {
            let r = &data.records[i];
            EmbeddingRecord {
                id: r.id,
                camera: r.camera,
                source: r.path.clone(),
                vector,
            }
        })
        .collect())
}

/// Embedding CSV: `id,camera,dim,values...` with a header line.
pub fn embeddings_to_csv(records: &[EmbeddingRecord]) -> String {
    let mut s = String::from("id,camera,dim,values\n");
    for r in records {
        let _ = write!(s, "{},{},{}", r.id, r.camera, r.vector.len());
        for v in &r.vector {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn embeddings_from_csv(text: &str, source: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        let num = |k: usize| -> Result<usize> {
            fields
                .get(k)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| err(format!("field {k} is not an integer")))
        };
        let (id, camera, dim) = (num(0)?, num(1)?, num(2)?);
        if fields.len() != 3 + dim {
            return Err(err(format!("expected {dim} values, found {}", fields.len().saturating_sub(3))));
        }
        let vector = fields[3..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| err(e.to_string())))
            .collect::<Result<_>>()?;
        out.push(EmbeddingRecord {
            id,
            camera,
            source: format!("{source}:{}", i + 1),
            vector,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Gallery items sharing the query's identity and camera are removed
    /// before ranking (market-style).
    #[default]
    CrossCamera,
    /// Every gallery item is ranked.
    All,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gallery positions sorted by ascending distance to `query`, ties by
/// position, after the protocol filter.
pub fn rank_gallery(query: &EmbeddingRecord, gallery: &[EmbeddingRecord], protocol: Protocol) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| protocol == Protocol::All || !(g.id == query.id && g.camera == query.camera))
        .map(|(i, g)| {
            if g.vector.len() != query.vector.len() {
                return Err(Error::Shape {
                    op: "rank_gallery",
                    dim: "features",
                    expected: query.vector.len(),
                    actual: g.vector.len(),
                });
            }
            Ok((euclidean(&query.vector, &g.vector), i))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::Eval(format!("gallery is empty after filtering for {}", query.source)));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Ranking of one query with its correct-match flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub ranking: Vec<usize>,
    pub matches: Vec<bool>,
}

impl QueryResult {
    pub fn new(query: usize, ranking: Vec<usize>, matches: Vec<bool>) -> Self {
        Self { query, ranking, matches }
    }

    /// 0-based rank of the first correct match.
    pub fn first_match(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m)
    }

    /// Mean over correct positions `k` of the precision of the top `k`.
    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (k, &m) in self.matches.iter().enumerate() {
            if m {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        (hits > 0).then(|| sum / hits as f64)
    }
}

fn valid(results: &[QueryResult]) -> Result<Vec<&QueryResult>> {
    let v: Vec<_> = results.iter().filter(|r| r.first_match().is_some()).collect();
    if v.is_empty() {
        return Err(Error::Eval("no query has a valid correct match".into()));
    }
    Ok(v)
}

/// Fraction of valid queries whose first correct match is within the top `r`,
/// per requested rank `r >= 1`.
pub fn cmc(results: &[QueryResult], ranks: &[usize]) -> Result<Vec<f64>> {
    let v = valid(results)?;
    Ok(ranks
        .iter()
        .map(|&r| {
            let hit = v.iter().filter(|q| q.first_match().is_some_and(|f| f < r)).count();
            hit as f64 / v.len() as f64
        })
        .collect())
}

pub fn mean_average_precision(results: &[QueryResult]) -> Result<f64> {
    let v = valid(results)?;
    Ok(v.iter().filter_map(|q| q.average_precision()).sum::<f64>() / v.len() as f64)
}

/// Metrics over a query set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub protocol: Protocol,
    pub queries: usize,
    /// CMC at ranks `1..=len`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries without a correct match after filtering.
    pub excluded: Vec<String>,
    pub per_query: Vec<QueryResult>,
}

impl RetrievalResult {
    /// CMC at rank `r`; ranks past the gallery size saturate.
    pub fn cmc_at(&self, r: usize) -> f64 {
        self.cmc.get(r.max(1) - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn report_json(&self) -> serde_json::Value {
        let at: BTreeMap<String, f64> = [1, 5, 10].iter().map(|&r| (r.to_string(), self.cmc_at(r))).collect();
        serde_json::json!({
            "protocol": self.protocol,
            "queries": self.queries,
            "valid_queries": self.queries - self.excluded.len(),
            "cmc": at,
            "cmc_curve": self.cmc,
            "map": self.map,
            "excluded": self.excluded,
        })
    }
}

/// Ranks every query against the gallery; queries are processed
/// independently and the result does not depend on scheduling.
pub fn evaluate(query: &[EmbeddingRecord], gallery: &[EmbeddingRecord], protocol: Protocol) -> Result<RetrievalResult> {
    let ranked = exec::map_indexed(query.len(), |q| rank_gallery(&query[q], gallery, protocol));
    let mut per_query = Vec::with_capacity(query.len());
    let mut excluded = Vec::new();
    for (q, ranking) in ranked.into_iter().enumerate() {
        let ranking = match ranking {
            Ok(r) => r,
            Err(Error::Eval(_)) => {
                excluded.push(query[q].source.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let matches: Vec<bool> = ranking.iter().map(|&g| gallery[g].id == query[q].id).collect();
        if !matches.contains(&true) {
            excluded.push(query[q].source.clone());
        }
        per_query.push(QueryResult::new(q, ranking, matches));
    }
    let depth = per_query.iter().map(|r| r.ranking.len()).max().unwrap_or(0);
    let ranks: Vec<usize> = (1..=depth).collect();
    Ok(RetrievalResult {
        protocol,
        queries: query.len(),
        cmc: cmc(&per_query, &ranks)?,
        map: mean_average_precision(&per_query)?,
        excluded,
        per_query,
    })
}

/// Query/gallery evaluation of `model` on the dataset's held-out splits.
pub fn evaluate_dataset(model: &Model, data: &Dataset, flip_mean: bool, protocol: Protocol) -> Result<RetrievalResult> {
    let q = extract_embeddings(model, data, &data.indices(Split::Query), flip_mean)?;
    let g = extract_embeddings(model, data, &data.indices(Split::Gallery), flip_mean)?;
    evaluate(&q, &g, protocol)
}

pub fn write_report(result: &RetrievalResult, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&result.report_json()).expect("serialisable report");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, camera: usize, vector: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            id,
            camera,
            source: format!("{id}-{camera}"),
            vector,
        }
    }

    #[test]
    fn copy_at_other_camera_ranks_first() {
        let q = rec(1, 0, vec![0.3, -1.0]);
        let g = vec![rec(2, 1, vec![0.0, 0.0]), rec(1, 1, vec![0.3, -1.0])];
        assert_eq!(rank_gallery(&q, &g, Protocol::CrossCamera).unwrap()[0], 1);
    }

    #[test]
    fn same_camera_positives_exclude_query() {
        let q = vec![rec(1, 0, vec![0.0])];
        let g = vec![rec(1, 0, vec![0.0]), rec(2, 1, vec![1.0])];
        let r = evaluate(&q, &g, Protocol::CrossCamera);
        // The only query is invalid, so no metric can be formed.
        assert!(r.is_err());
        let q = vec![rec(1, 0, vec![0.0]), rec(2, 0, vec![1.0])];
        let r = evaluate(&q, &g, Protocol::CrossCamera).unwrap();
        assert_eq!(r.excluded, vec!["1-0".to_string()]);
        assert_eq!(r.cmc_at(1), 1.0);
    }

    #[test]
    fn step_cmc_and_closed_form_ap() {
        let r = QueryResult::new(0, vec![0, 1, 2], vec![false, false, true]);
        assert_eq!(cmc(&[r], &[1, 2, 3]).unwrap(), vec![0.0, 0.0, 1.0]);
        let r = QueryResult::new(0, vec![0, 1], vec![false, true]);
        assert_eq!(r.average_precision(), Some(0.5));
        let r = QueryResult::new(0, vec![0, 1, 2], vec![true, true, false]);
        assert_eq!(mean_average_precision(&[r]).unwrap(), 1.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let r = QueryResult::new(0, vec![0], vec![false]);
        assert!(cmc(std::slice::from_ref(&r), &[1]).is_err());
        assert!(mean_average_precision(&[r]).is_err());
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = rec(0, 0, vec![0.0]);
        let g = vec![rec(1, 1, vec![1.0]), rec(2, 1, vec![-1.0]), rec(0, 1, vec![1.0])];
        assert_eq!(rank_gallery(&q, &g, Protocol::All).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec(3, 1, vec![0.1, -2.5e-7]), rec(4, 0, vec![1.0 / 3.0, 7.0])];
        let back = embeddings_from_csv(&embeddings_to_csv(&rs), "e.csv").unwrap();
        for (a, b) in rs.iter().zip(&back) {
            assert_eq!((a.id, a.camera, &a.vector), (b.id, b.camera, &b.vector));
        }
        assert!(embeddings_from_csv("h\n1,0,3,0.5\n", "e.csv").is_err());
    }
}
