//! Beam subset recommendation from the completed tensor, the nearest-position
//! fingerprint baseline and exhaustive search.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::BeamIndex;
use crate::completion::CompletedTensor;
use crate::database::{to_db, top_k, GridSpec, MeasurementDatabase, PositionLabel};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    TensorCompletion,
    Fingerprint,
    Exhaustive,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::TensorCompletion => "tensor-completion",
            Source::Fingerprint => "fingerprint",
            Source::Exhaustive => "exhaustive",
        }
    }
}

/// Ordered beam list for one position. `scores` holds the power (dB) the
/// method ranked by, or `None` when it ranks nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationSet {
    pub position: PositionLabel,
    pub beams: Vec<BeamIndex>,
    pub scores: Vec<Option<f64>>,
    pub source: Source,
}

impl RecommendationSet {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn contains(&self, b: BeamIndex) -> bool {
        self.beams.contains(&b)
    }

    /// The first `n` beams. Every method here builds its list greedily, so
    /// this equals the set the method would return for `n`.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.beams.len());
        Self {
            position: self.position,
            beams: self.beams[..n].to_vec(),
            scores: self.scores[..n].to_vec(),
            source: self.source,
        }
    }
}

/// Top-`n_tr` beams of a row-major `(i, j)` score plane; ties go to the
/// lexicographically smaller beam.
pub fn select_from_scores(scores: &[f64], c_phi: usize, n_tr: usize) -> Result<Vec<BeamIndex>> {
    if n_tr == 0 || n_tr > scores.len() {
        return Err(invalid(format!("n_tr must lie in 1..={}, got {n_tr}", scores.len())));
    }
    Ok(top_k(scores, n_tr).into_iter().map(|k| BeamIndex::from_flat(k, c_phi)).collect())
}

pub fn select_beams(t_hat: &CompletedTensor, p: PositionLabel, n_tr: usize) -> Result<RecommendationSet> {
    let [lx, ly, _, cp] = t_hat.tensor.shape;
    if p.px == 0 || p.py == 0 || p.px > lx || p.py > ly {
        return Err(invalid(format!("position ({}, {}) outside the {lx}x{ly} grid", p.px, p.py)));
    }
    let plane = t_hat.tensor.beam_slice(p.px - 1, p.py - 1);
    let beams = select_from_scores(plane, cp, n_tr)?;
    let scores = beams.iter().map(|b| Some(plane[b.flat(cp)])).collect();
    Ok(RecommendationSet { position: p, beams, scores, source: Source::TensorCompletion })
}

/// Beams of the observed position nearest to `p` in label space, strongest
/// first, padded with the best unused beams of the next-nearest positions.
/// Distance ties go to the smaller `p_x`, then `p_y`. The list is shorter than
/// `n_tr` only if the whole database holds fewer distinct beams.
pub fn fingerprint_baseline(
    db: &MeasurementDatabase,
    grid: &GridSpec,
    p: PositionLabel,
    n_tr: usize,
) -> Result<RecommendationSet> {
    if db.is_empty() {
        return Err(Error::NoData("fingerprint baseline needs a non-empty database".into()));
    }
    if !grid.contains(p) {
        return Err(invalid(format!("position ({}, {}) outside the grid", p.px, p.py)));
    }
    if n_tr == 0 {
        return Err(invalid("n_tr must be at least 1"));
    }
    let mut positions: Vec<PositionLabel> = db.positions().into_iter().collect();
    let dist2 = |q: &PositionLabel| q.px.abs_diff(p.px).pow(2) + q.py.abs_diff(p.py).pow(2);
    positions.sort_by_key(|q| (dist2(q), q.px, q.py));

    let mut beams = Vec::with_capacity(n_tr);
    let mut scores = Vec::with_capacity(n_tr);
    let mut used = BTreeSet::new();
    'outer: for q in positions {
        let mut stored = db.beams_at(q);
        stored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (b, mean) in stored {
            if beams.len() == n_tr {
                break 'outer;
            }
            if used.insert(b) {
                beams.push(b);
                scores.push(Some(to_db(mean)));
            }
        }
    }
    Ok(RecommendationSet { position: p, beams, scores, source: Source::Fingerprint })
}

/// Every beam of a `c_theta × c_phi` codebook in index order.
pub fn exhaustive(p: PositionLabel, c_theta: usize, c_phi: usize) -> RecommendationSet {
    let beams: Vec<BeamIndex> = (0..c_theta * c_phi).map(|k| BeamIndex::from_flat(k, c_phi)).collect();
    RecommendationSet { position: p, scores: vec![None; beams.len()], beams, source: Source::Exhaustive }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    p_x: usize,
    p_y: usize,
    rank: usize,
    i: usize,
    j: usize,
    #[serde(rename = "predicted_dB")]
    predicted_db: Option<f64>,
    source: Source,
}

/// Columns `p_x,p_y,rank,i,j,predicted_dB,source`; rank is one-based.
pub fn write_recommendations_csv(sets: &[RecommendationSet], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if sets.iter().all(|s| s.is_empty()) {
        w.write_record(["p_x", "p_y", "rank", "i", "j", "predicted_dB", "source"]).map_err(csv_err)?;
    }
    for s in sets {
        for (r, (b, score)) in s.beams.iter().zip(&s.scores).enumerate() {
            let row = Row {
                p_x: s.position.px,
                p_y: s.position.py,
                rank: r + 1,
                i: b.i,
                j: b.j,
                predicted_db: *score,
                source: s.source,
            };
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads sets written by [`write_recommendations_csv`], grouped by
/// `(source, position)` in file order.
pub fn read_recommendations_csv(path: &Path) -> Result<Vec<RecommendationSet>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "recommendations not found; run the recommend stage first".into(),
        });
    }
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut sets: Vec<RecommendationSet> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(csv_err)?;
        let p = PositionLabel::new(row.p_x, row.p_y);
        let start_new = match sets.last() {
            Some(s) => s.position != p || s.source != row.source,
            None => true,
        };
        if start_new {
            sets.push(RecommendationSet { position: p, beams: Vec::new(), scores: Vec::new(), source: row.source });
        }
        let s = sets.last_mut().expect("pushed above");
        if row.rank != s.beams.len() + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("rank {} out of sequence at ({}, {})", row.rank, row.p_x, row.p_y),
            });
        }
        s.beams.push(BeamIndex::new(row.i, row.j));
        s.scores.push(row.predicted_db);
    }
    Ok(sets)
}
