//! RMSE for ratings; HR@k and NDCG@k over ranked candidate lists.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::data::{BinnedDataset, LooSplit};
use crate::dve::EmbeddingMode;
use crate::model::{DveModel, ModelError, TimePolicy};
use crate::tensor::TensorError;

type Result<T> = std::result::Result<T, ModelError>;

fn invalid(msg: String) -> ModelError {
    TensorError::InvalidArgument(msg).into()
}

/// Neumaier-compensated sum, so means do not depend on chunking.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(invalid(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let sq = compensated_sum(predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)));
    Ok((sq / predictions.len() as f64).sqrt())
}

/// One held-out positive ranked against its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEvalCase {
    pub user: usize,
    pub test_item: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    rank: usize,
}

impl RankedEvalCase {
    pub fn new(user: usize, test_item: usize, candidates: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if candidates.len() != scores.len() {
            return Err(invalid(format!(
                "{} candidates but {} scores",
                candidates.len(),
                scores.len()
            )));
        }
        let mut sorted = candidates.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate candidate items".into()));
        }
        let Some(pos) = candidates.iter().position(|&c| c == test_item) else {
            return Err(invalid(format!("test item {test_item} not among candidates")));
        };
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(TensorError::NonFinite { param: user, entry: i }.into());
        }
        let s = scores[pos];
        // descending score, ties to the lower item id
        let ahead = candidates
            .iter()
            .zip(&scores)
            .filter(|&(&c, &v)| v > s || (v == s && c < test_item))
            .count();
        Ok(Self {
            user,
            test_item,
            candidates,
            scores,
            rank: ahead + 1,
        })
    }

    /// 1-based position of the test item.
    pub fn rank_of_test(&self) -> usize {
        self.rank
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.candidates.len() {
            return Err(invalid(format!("k={k} outside 1..={}", self.candidates.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NdcgFormula {
    /// Ideal DCG summed over all `k` positions.
    PaperEq7,
    /// Ideal DCG of a single relevant item, i.e. 1.
    #[default]
    SingleRelevant,
}

impl NdcgFormula {
    pub fn as_str(self) -> &'static str {
        match self {
            NdcgFormula::PaperEq7 => "paper_eq7",
            NdcgFormula::SingleRelevant => "single_relevant",
        }
    }
}

impl fmt::Display for NdcgFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NdcgFormula {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper_eq7" => Ok(NdcgFormula::PaperEq7),
            "single_relevant" => Ok(NdcgFormula::SingleRelevant),
            other => Err(format!("unknown ndcg formula {other:?} (paper_eq7, single_relevant)")),
        }
    }
}

pub fn hit_ratio(case: &RankedEvalCase, k: usize) -> Result<f64> {
    case.check_k(k)?;
    Ok(if case.rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg(case: &RankedEvalCase, k: usize, formula: NdcgFormula) -> Result<f64> {
    case.check_k(k)?;
    Ok(ndcg_at_rank(case.rank, k, formula))
}

pub(crate) fn ndcg_at_rank(rank: usize, k: usize, formula: NdcgFormula) -> f64 {
    if rank > k {
        return 0.0;
    }
    let dcg = 1.0 / ((rank + 1) as f64).log2();
    match formula {
        NdcgFormula::SingleRelevant => dcg,
        NdcgFormula::PaperEq7 => dcg / (1..=k).map(|i| 1.0 / ((i + 1) as f64).log2()).sum::<f64>(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n_users: usize,
    pub n_excluded: usize,
    pub formula: Option<NdcgFormula>,
    pub seed: Option<u64>,
    pub per_user: Option<Vec<f64>>,
}

impl MetricReport {
    /// `HR@10`, `NDCG@10`, `RMSE` and so on.
    pub fn label(&self) -> String {
        match self.k {
            Some(k) => format!("{}@{k}", self.metric),
            None => self.metric.clone(),
        }
    }

    pub const TSV_HEADER: &'static str = "metric\tk\tvalue\tn_users\tn_excluded\tformula\tseed";

    pub fn tsv_row(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
            self.metric,
            opt(self.k.map(|k| k.to_string())),
            self.value,
            self.n_users,
            self.n_excluded,
            opt(self.formula.map(|f| f.to_string())),
            opt(self.seed.map(|s| s.to_string())),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "metric": self.metric,
            "k": self.k,
            "value": self.value,
            "n_users": self.n_users,
            "n_excluded": self.n_excluded,
            "formula": self.formula.map(|f| f.as_str()),
            "seed": self.seed,
        })
    }
}

pub fn reports_tsv(reports: &[MetricReport]) -> String {
    let mut out = String::from(MetricReport::TSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

pub fn reports_json(reports: &[MetricReport]) -> String {
    let v: Vec<_> = reports.iter().map(MetricReport::to_json).collect();
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
    s.push('\n');
    s
}

const SCORE_CHUNK: usize = 4096;

/// Mean-mode RMSE over the given record indices. `horizon` is the last
/// bin seen in training.
pub fn evaluate_rmse(
    model: &DveModel,
    ds: &BinnedDataset,
    records: &[usize],
    policy: TimePolicy,
    horizon: usize,
) -> Result<MetricReport> {
    let chunks: Vec<&[usize]> = records.chunks(SCORE_CHUNK).collect();
    let sq: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            // score bin by bin so the recurrence is asked for one bin at a time
            let mut out = vec![0.0; chunk.len()];
            let mut by_bin: Vec<(usize, usize)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &r)| (policy.resolve(ds.records[r].bin, horizon), j))
                .collect();
            by_bin.sort_unstable();
            for group in by_bin.chunk_by(|a, b| a.0 == b.0) {
                let bin = group[0].0;
                let users: Vec<usize> = group.iter().map(|&(_, j)| ds.records[chunk[j]].user).collect();
                let items: Vec<usize> = group.iter().map(|&(_, j)| ds.records[chunk[j]].item).collect();
                let s = model.score_pairs(&users, &items, bin, EmbeddingMode::Mean, &mut rng)?;
                for (&(_, j), p) in group.iter().zip(s) {
                    let d = p - ds.records[chunk[j]].value;
                    out[j] = d * d;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(invalid("no records to evaluate".into()));
    }
    let total = compensated_sum(sq.into_iter().flatten());
    Ok(MetricReport {
        metric: "RMSE".into(),
        k: None,
        value: (total / records.len() as f64).sqrt(),
        n_users: records.len(),
        n_excluded: 0,
        formula: None,
        seed: None,
        per_user: None,
    })
}

/// RMSE of predicting the train-side mean rating for every test record.
pub fn global_mean_baseline(ds: &BinnedDataset, train: &[usize], test: &[usize]) -> Result<f64> {
    if train.is_empty() {
        return Err(invalid("empty train side".into()));
    }
    let mean = compensated_sum(train.iter().map(|&i| ds.records[i].value)) / train.len() as f64;
    let truths: Vec<f64> = test.iter().map(|&i| ds.records[i].value).collect();
    rmse(&vec![mean; truths.len()], &truths)
}

/// Builds the ranked case for one leave-one-out user.
pub fn rank_case(
    model: &DveModel,
    ds: &BinnedDataset,
    case: &crate::data::LooCase,
    policy: TimePolicy,
    horizon: usize,
) -> Result<Option<RankedEvalCase>> {
    let rec = &ds.records[case.record];
    let mut candidates = Vec::with_capacity(case.negatives.len() + 1);
    candidates.push(rec.item);
    candidates.extend_from_slice(&case.negatives);
    if case.user >= model.config.n_users || candidates.iter().any(|&c| c >= model.config.n_items) {
        return Ok(None);
    }
    let bin = policy.resolve(rec.bin, horizon);
    let users = vec![case.user; candidates.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores = model.score_pairs(&users, &candidates, bin, EmbeddingMode::Mean, &mut rng)?;
    RankedEvalCase::new(case.user, rec.item, candidates, scores).map(Some)
}

/// HR@k and NDCG@k averaged over every scorable leave-one-out user.
pub fn evaluate_ranking(
    model: &DveModel,
    ds: &BinnedDataset,
    split: &LooSplit,
    k: usize,
    formula: NdcgFormula,
    policy: TimePolicy,
    horizon: usize,
) -> Result<(MetricReport, MetricReport)> {
    let per_case: Vec<Option<(f64, f64)>> = split
        .cases
        .par_iter()
        .map(|c| {
            Ok(match rank_case(model, ds, c, policy, horizon)? {
                Some(rc) => Some((hit_ratio(&rc, k)?, ndcg(&rc, k, formula)?)),
                None => None,
            })
        })
        .collect::<Result<_>>()?;
    let scored: Vec<(f64, f64)> = per_case.iter().flatten().copied().collect();
    let excluded = per_case.len() - scored.len() + split.excluded_users.len();
    Ok(summarize(&scored, k, formula, excluded))
}

/// Averages per-user (hit, ndcg) pairs into the two reports.
pub fn summarize(values: &[(f64, f64)], k: usize, formula: NdcgFormula, n_excluded: usize) -> (MetricReport, MetricReport) {
    let n = values.len();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        if n == 0 {
            0.0
        } else {
            compensated_sum(values.iter().map(f)) / n as f64
        }
    };
    let hr = MetricReport {
        metric: "HR".into(),
        k: Some(k),
        value: mean(|v| v.0),
        n_users: n,
        n_excluded,
        formula: None,
        seed: None,
        per_user: Some(values.iter().map(|v| v.0).collect()),
    };
    let nd = MetricReport {
        metric: "NDCG".into(),
        k: Some(k),
        value: mean(|v| v.1),
        n_users: n,
        n_excluded,
        formula: Some(formula),
        seed: None,
        per_user: Some(values.iter().map(|v| v.1).collect()),
    };
    (hr, nd)
}
