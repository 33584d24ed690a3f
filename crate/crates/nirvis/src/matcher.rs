//! Closed-set identification: cosine matching with rank-k / CMC reporting.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lowrank::Spectrum;

/// Enrolled identities (VIS in the standard protocol).
#[derive(Debug, Clone)]
pub struct GallerySet {
    pub features: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub spectrum: Spectrum,
}

/// Query samples (NIR in the standard protocol).
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub spectrum: Spectrum,
}

fn validate_set(features: &DMatrix<f64>, labels: &[u32], what: &str) -> Result<()> {
    if features.ncols() == 0 {
        return Err(Error::InvalidInput(format!("empty {what}")));
    }
    if labels.len() != features.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} columns but {} labels",
            features.ncols(),
            labels.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl GallerySet {
    pub fn new(features: DMatrix<f64>, labels: Vec<u32>, spectrum: Spectrum) -> Result<Self> {
        validate_set(&features, &labels, "gallery")?;
        Ok(Self {
            features,
            labels,
            spectrum,
        })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ProbeSet {
    pub fn new(features: DMatrix<f64>, labels: Vec<u32>, spectrum: Spectrum) -> Result<Self> {
        validate_set(&features, &labels, "probe set")?;
        Ok(Self {
            features,
            labels,
            spectrum,
        })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Best match for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDecision {
    pub probe_index: usize,
    pub true_label: u32,
    pub predicted_label: u32,
    pub score: f64,
}

/// Identification rates for ranks 1..=R plus per-probe decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// `rank_accuracies[r-1]` is the rank-r identification rate.
    pub rank_accuracies: Vec<f64>,
    pub decisions: Vec<ProbeDecision>,
}

impl MatchReport {
    pub fn rank1(&self) -> f64 {
        self.rank_accuracies[0]
    }

    /// The cumulative match characteristic is the rank-accuracy vector
    /// itself; rates are cumulative by construction.
    pub fn cmc(&self) -> &[f64] {
        &self.rank_accuracies
    }

    /// CSV with header `rank,rate`.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("rank,rate\n");
        for (i, r) in self.rank_accuracies.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, r));
        }
        out
    }

    /// CSV with header `probe_id,true_label,pred_label,score`.
    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("probe_id,true_label,pred_label,score\n");
        for d in &self.decisions {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d.probe_index, d.true_label, d.predicted_label, d.score
            ));
        }
        out
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Ranks every probe against the gallery by descending cosine similarity.
///
/// A probe scores a rank-r hit if any gallery item of the correct subject
/// appears among its top r matches. Ties are broken by the lower gallery
/// index so results are deterministic.
pub fn identify(gallery: &GallerySet, probes: &ProbeSet, max_rank: usize) -> Result<MatchReport> {
    if gallery.features.nrows() != probes.features.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "gallery dim {} vs probe dim {}",
            gallery.features.nrows(),
            probes.features.nrows()
        )));
    }
    if max_rank < 1 || max_rank > gallery.len() {
        return Err(Error::Contract(format!(
            "max_rank={} out of range for gallery of {}",
            max_rank,
            gallery.len()
        )));
    }

    let g = gallery.len();
    let p = probes.len();
    let mut hits_at_rank = vec![0usize; max_rank];
    let mut decisions = Vec::with_capacity(p);

    for pi in 0..p {
        let probe = probes.features.column(pi);
        let mut scored: Vec<(usize, f64)> = (0..g)
            .map(|gi| {
                let sim = cosine_similarity(probe.as_slice(), gallery.features.column(gi).as_slice())?;
                Ok((gi, sim))
            })
            .collect::<Result<_>>()?;
        // descending score, ascending gallery index on ties
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let (best_gi, best_score) = scored[0];
        decisions.push(ProbeDecision {
            probe_index: pi,
            true_label: probes.labels[pi],
            predicted_label: gallery.labels[best_gi],
            score: best_score,
        });

        if let Some(first_correct) = scored
            .iter()
            .position(|&(gi, _)| gallery.labels[gi] == probes.labels[pi])
        {
            for r in first_correct..max_rank {
                hits_at_rank[r] += 1;
            }
        }
    }

    let rank_accuracies = hits_at_rank
        .iter()
        .map(|&h| h as f64 / p as f64)
        .collect();
    Ok(MatchReport {
        rank_accuracies,
        decisions,
    })
}
