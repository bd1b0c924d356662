//! Detection metrics and ablation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::select_threshold;
use crate::error::{Error, Result};
use crate::scoring::{aggregate, Detector, RawScore};
use crate::tensor::Tensor;

/// Probability that an ID score beats an OOD score, ties counted half,
/// computed from midranks of the pooled scores.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidArgument("AUROC needs non-empty ID and OOD score sets".into()));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("AUROC input contains NaN".into()));
    }
    let mut pooled: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tie block shares the mean rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let ids = pooled[i..=j].iter().filter(|p| p.1).count();
        id_rank_sum += mid * ids as f64;
        i = j + 1;
    }
    let (n1, n0) = (id.len() as f64, ood.len() as f64);
    Ok((id_rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub tau: f64,
}

/// FPR of OOD scores at the threshold that keeps `tpr` of the ID scores.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<OperatingPoint> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidArgument("FPR needs non-empty ID and OOD score sets".into()));
    }
    let tau = select_threshold(id, tpr)?;
    let accepted = ood.iter().filter(|&&s| s >= tau).count();
    Ok(OperatingPoint {
        fpr: accepted as f64 / ood.len() as f64,
        tau,
    })
}

/// Ablation axes of the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreVariant {
    ClaOnly,
    RecOnly,
    Aggregated,
    AggregatedAdjust,
    AggregatedAdjustPerturb,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 5] = [
        ScoreVariant::ClaOnly,
        ScoreVariant::RecOnly,
        ScoreVariant::Aggregated,
        ScoreVariant::AggregatedAdjust,
        ScoreVariant::AggregatedAdjustPerturb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreVariant::ClaOnly => "cla-only",
            ScoreVariant::RecOnly => "rec-only",
            ScoreVariant::Aggregated => "aggregated",
            ScoreVariant::AggregatedAdjust => "aggregated+adjust",
            ScoreVariant::AggregatedAdjustPerturb => "aggregated+adjust+perturb",
        }
    }

    pub fn perturbed(self) -> bool {
        self == ScoreVariant::AggregatedAdjustPerturb
    }

    /// Score under this ablation; cla-only is the aggregate with the rec term zeroed.
    pub fn score(self, r: &RawScore) -> f64 {
        match self {
            ScoreVariant::ClaOnly => aggregate(r.score_cla, 0.0, 1.0),
            ScoreVariant::RecOnly => r.score_rec_raw,
            ScoreVariant::Aggregated => aggregate(r.score_cla, r.score_rec_raw, 1.0),
            ScoreVariant::AggregatedAdjust | ScoreVariant::AggregatedAdjustPerturb => {
                aggregate(r.score_cla, r.score_rec_raw, r.lambda)
            }
        }
    }
}

pub const AVERAGE_ROW: &str = "average";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id_dataset: String,
    pub ood_dataset: String,
    pub method: String,
    pub variant: ScoreVariant,
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Threshold of the FPR operating point (95% of ID test scores at or above it).
    pub tau: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean over OOD datasets per (method, variant).
    pub aggregates: Vec<EvalRow>,
}

const CSV_HEADER: [&str; 10] = [
    "id_dataset",
    "ood_dataset",
    "method",
    "variant",
    "auroc",
    "fpr_at_95_tpr",
    "n_id",
    "n_ood",
    "tau",
    "epsilon",
];

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut keys: Vec<(String, ScoreVariant)> = Vec::new();
        for r in &rows {
            let k = (r.method.clone(), r.variant);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let aggregates = keys
            .into_iter()
            .map(|(method, variant)| {
                let group: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method && r.variant == variant).collect();
                let m = group.len() as f64;
                let mean = |f: fn(&EvalRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / m;
                EvalRow {
                    id_dataset: group[0].id_dataset.clone(),
                    ood_dataset: AVERAGE_ROW.to_string(),
                    method,
                    variant,
                    auroc: mean(|r| r.auroc),
                    fpr_at_95_tpr: mean(|r| r.fpr_at_95_tpr),
                    n_id: group[0].n_id,
                    n_ood: group.iter().map(|r| r.n_ood).sum(),
                    tau: mean(|r| r.tau),
                    epsilon: group[0].epsilon,
                }
            })
            .collect();
        EvalReport { rows, aggregates }
    }

    /// Concatenates reports and recomputes the aggregate rows.
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        EvalReport::from_rows(reports.into_iter().flat_map(|r| r.rows).collect())
    }

    pub fn row(&self, method: &str, ood: &str, variant: ScoreVariant) -> Option<&EvalRow> {
        self.rows
            .iter()
            .chain(&self.aggregates)
            .find(|r| r.method == method && r.ood_dataset == ood && r.variant == variant)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in self.rows.iter().chain(&self.aggregates) {
            w.write_record([
                r.id_dataset.clone(),
                r.ood_dataset.clone(),
                r.method.clone(),
                r.variant.as_str().to_string(),
                r.auroc.to_string(),
                r.fpr_at_95_tpr.to_string(),
                r.n_id.to_string(),
                r.n_ood.to_string(),
                r.tau.to_string(),
                r.epsilon.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Raw scores of a named set at ε = 0 and, when needed, at the calibrated ε.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub name: String,
    pub plain: Vec<RawScore>,
    pub perturbed: Option<Vec<RawScore>>,
    pub epsilon: Option<f64>,
}

impl ScoredSet {
    /// Scores of this set under `variant`.
    pub fn variant_scores(&self, variant: ScoreVariant) -> Result<Vec<f64>> {
        let raw = if variant.perturbed() {
            self.perturbed.as_ref().ok_or(Error::Uncalibrated)?
        } else {
            &self.plain
        };
        Ok(raw.iter().map(|r| variant.score(r)).collect())
    }
}

/// Scores a set; `perturb` requests the calibrated-ε pass as well.
pub fn score_set(detector: &Detector, name: &str, x: &Tensor<f32>, perturb: bool) -> Result<ScoredSet> {
    let epsilon = if perturb {
        Some(detector.calibration().ok_or(Error::Uncalibrated)?.epsilon)
    } else {
        None
    };
    let ctx = |e: Error| match e {
        Error::Uncalibrated | Error::MissingStage { .. } => e,
        other => Error::Data(format!("scoring `{name}`: {other}")),
    };
    if x.batch() == 0 {
        return Err(Error::Data(format!("dataset `{name}` is empty")));
    }
    let p = detector.prepare(x).map_err(ctx)?;
    let plain = detector.raw_scores(&p, 0.0).map_err(ctx)?;
    let perturbed = match epsilon {
        Some(e) if e > 0.0 => Some(detector.raw_scores(&p, e).map_err(ctx)?),
        Some(_) => Some(plain.clone()),
        None => None,
    };
    Ok(ScoredSet {
        name: name.to_string(),
        plain,
        perturbed,
        epsilon,
    })
}

/// Report rows for every (OOD set, variant) pair from precomputed scores.
pub fn report_from_scores(
    method: &str,
    id: &ScoredSet,
    oods: &[ScoredSet],
    variants: &[ScoreVariant],
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for set in oods {
        for &v in variants {
            let id_s = id.variant_scores(v)?;
            let ood_s = set.variant_scores(v)?;
            let op = fpr_at_tpr(&id_s, &ood_s, 0.95)?;
            rows.push(EvalRow {
                id_dataset: id.name.clone(),
                ood_dataset: set.name.clone(),
                method: method.to_string(),
                variant: v,
                auroc: auroc(&id_s, &ood_s)?,
                fpr_at_95_tpr: op.fpr,
                n_id: id_s.len(),
                n_ood: ood_s.len(),
                tau: op.tau,
                epsilon: if v.perturbed() { id.epsilon.unwrap_or(0.0) } else { 0.0 },
            });
        }
    }
    Ok(EvalReport::from_rows(rows))
}

/// Scores the ID test set and every OOD set under each ablation variant.
/// The perturbed variant needs a calibrated detector.
pub fn evaluate_suite(
    detector: &Detector,
    id_name: &str,
    id_test: &Tensor<f32>,
    oods: &[(String, Tensor<f32>)],
    variants: &[ScoreVariant],
) -> Result<EvalReport> {
    let perturb = variants.iter().any(|v| v.perturbed());
    let id = score_set(detector, id_name, id_test, perturb)?;
    let ood_sets = oods
        .iter()
        .map(|(name, x)| score_set(detector, name, x, perturb))
        .collect::<Result<Vec<_>>>()?;
    report_from_scores(detector.variant().as_str(), &id, &ood_sets, variants)
}

/// Histogram plot data, one block per named score set separated by two blank
/// lines. Columns: bin center, count, density.
pub fn histogram_plot_data(sets: &[(&str, &[f64])], bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let all = sets.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(Error::InvalidArgument("no finite scores to histogram".into()));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out = String::new();
    for (i, (name, scores)) in sets.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let mut counts = vec![0usize; bins];
        for &s in scores.iter().filter(|v| v.is_finite()) {
            let b = (((s - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = scores.len().max(1) as f64;
        writeln!(out, "# {name}").expect("write to string");
        for (b, &c) in counts.iter().enumerate() {
            let center = lo + (b as f64 + 0.5) * width;
            writeln!(out, "{center} {c} {}", c as f64 / (total * width)).expect("write to string");
        }
    }
    Ok(out)
}
