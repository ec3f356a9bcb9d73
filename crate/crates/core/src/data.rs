//! Supervised multilabel data, LibSVM-style text I/O, and conversion into
//! logged bandit feedback.
//!
//! Text format, one row per line: `l1,l2,... i:v i:v ...` with 1-based label
//! and feature indices. A line that starts with whitespace, or whose first
//! token already contains `:`, has an empty label set.

use std::io::BufRead;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{Action, ActionSpace, BanditDataset, ContextFeatures, LoggedInteraction};
use crate::error::{Error, Result};
use crate::policy::{sigmoid, ActionPolicy, MultiLabelProductPolicy};
use crate::rng::{derive_seed, derived_rng, permutation};
use crate::surrogate::{fit_mle, FitOptions};

/// Penalty used when fitting the logging policy's per-label logistic heads.
pub const LOGGING_L2: f64 = 1e-2;
pub const DEFAULT_LOGGING_FRACTION: f64 = 0.05;
pub const DEFAULT_REPLICATIONS: usize = 4;
pub const DEFAULT_TEST_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedRow {
    /// `(index, value)` pairs with 1-based indices, in file order.
    pub features: Vec<(usize, f64)>,
    /// Sorted 1-based label indices.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedDataset {
    rows: Vec<SupervisedRow>,
    p: usize,
    #[serde(rename = "L")]
    labels: usize,
}

impl SupervisedDataset {
    pub fn new(rows: Vec<SupervisedRow>, p: usize, labels: usize) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if let Some(&(j, _)) = row.features.iter().find(|(j, _)| *j == 0 || *j > p) {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: feature index {j} outside [1, {p}]"
                )));
            }
            if let Some(&l) = row.labels.iter().find(|&&l| l == 0 || l > labels) {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: label {l} outside [1, {labels}]"
                )));
            }
        }
        Ok(Self { rows, p, labels })
    }

    pub fn rows(&self) -> &[SupervisedRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dense(&self, i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.p];
        for &(j, v) in &self.rows[i].features {
            x[j - 1] = v;
        }
        x
    }

    /// Label set of row `i` as a 0/1 tuple of length `L`.
    pub fn label_vector(&self, i: usize) -> Vec<u8> {
        let mut y = vec![0u8; self.labels];
        for &l in &self.rows[i].labels {
            y[l - 1] = 1;
        }
        y
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            p: self.p,
            labels: self.labels,
        }
    }

    pub fn to_svmlight(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let labels: Vec<String> = row.labels.iter().map(|l| l.to_string()).collect();
            out.push_str(&labels.join(","));
            for (j, v) in &row.features {
                out.push_str(&format!(" {j}:{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses the multilabel text format. Dimensions default to the largest
/// feature and label indices seen; declared ones are enforced.
pub fn parse_multilabel_svmlight<R: BufRead>(
    reader: R,
    declared_p: Option<usize>,
    declared_labels: Option<usize>,
) -> Result<SupervisedDataset> {
    let mut rows = Vec::new();
    let (mut p, mut big_l) = (0usize, 0usize);
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        let mut tokens = line.split_whitespace().peekable();
        let mut labels = Vec::new();
        let labelled = !line.starts_with(char::is_whitespace)
            && tokens.peek().is_some_and(|t| !t.contains(':'));
        if labelled {
            for part in tokens.next().expect("peeked").split(',') {
                let l: usize = part
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad label {part:?}")))?;
                if l == 0 {
                    return Err(parse_err(line_no, "labels are 1-based"));
                }
                labels.push(l);
            }
            labels.sort_unstable();
            if labels.windows(2).any(|w| w[0] == w[1]) {
                return Err(parse_err(line_no, "duplicate label"));
            }
        }
        let mut features: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, format!("expected index:value, got {tok:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature index {i:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature value {v:?}")))?;
            if i == 0 {
                return Err(parse_err(line_no, "feature indices are 1-based"));
            }
            if !v.is_finite() {
                return Err(parse_err(line_no, "non-finite feature value"));
            }
            if features.iter().any(|(j, _)| *j == i) {
                return Err(parse_err(line_no, format!("duplicate feature index {i}")));
            }
            features.push((i, v));
        }
        p = p.max(features.iter().map(|f| f.0).max().unwrap_or(0));
        big_l = big_l.max(labels.last().copied().unwrap_or(0));
        rows.push(SupervisedRow { features, labels });
    }
    let p = match declared_p {
        Some(d) if d < p => {
            return Err(Error::InvalidArgument(format!(
                "feature index {p} exceeds declared dimension {d}"
            )))
        }
        Some(d) => d,
        None => p,
    };
    let big_l = match declared_labels {
        Some(d) if d < big_l => {
            return Err(Error::InvalidArgument(format!(
                "label {big_l} exceeds declared label count {d}"
            )))
        }
        Some(d) => d,
        None => big_l,
    };
    SupervisedDataset::new(rows, p, big_l)
}

/// Negative Hamming distance between two label tuples.
pub fn hamming_reward(y_true: &[u8], y: &[u8]) -> Result<f64> {
    if y_true.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y.len(),
        });
    }
    Ok(-(y_true.iter().zip(y).filter(|(a, b)| a != b).count() as f64))
}

/// Samples `replications` label vectors per supervised row from `logging`.
/// Records are ordered by replication, then by row.
pub fn supervised_to_bandit(
    sup: &SupervisedDataset,
    logging: &MultiLabelProductPolicy,
    replications: usize,
    seed: u64,
) -> Result<BanditDataset> {
    if logging.p() != sup.p() || logging.labels() != sup.labels() {
        return Err(Error::InvalidArgument(format!(
            "logging policy is (L = {}, p = {}) but data is (L = {}, p = {})",
            logging.labels(),
            logging.p(),
            sup.labels(),
            sup.p()
        )));
    }
    let n = sup.len();
    let records: Vec<LoggedInteraction> = (0..replications * n)
        .into_par_iter()
        .map(|k| {
            let i = k % n;
            let x = sup.dense(i);
            let mut rng = derived_rng(seed, k as u64);
            let action = logging.sample_action(&x, &mut rng)?;
            let Action::Labels(y) = &action else {
                unreachable!("multilabel policy samples label vectors")
            };
            let reward = hamming_reward(&sup.label_vector(i), y)?;
            let propensity = logging.propensity(&x, &action)?;
            Ok(LoggedInteraction {
                x: ContextFeatures::new(x)?,
                action,
                reward,
                propensity,
            })
        })
        .collect::<Result<_>>()?;
    BanditDataset::new(records, ActionSpace::Multilabel { labels: sup.labels() }, sup.p())
}

/// Fits one logistic head per label on a seeded `fraction` of the rows.
/// A head whose label is constant on the subset is fitted on the columns that
/// are constant there (an intercept, if the data has one) and is zero elsewhere.
pub fn train_logging_policy(
    sup: &SupervisedDataset,
    fraction: f64,
    seed: u64,
) -> Result<MultiLabelProductPolicy> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((fraction * sup.len() as f64).round() as usize).max(1);
    if sup.len() < k || sup.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut idx = permutation(sup.len(), seed);
    idx.truncate(k);
    idx.sort_unstable();
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| sup.dense(i)).collect();
    let ys: Vec<Vec<u8>> = idx.iter().map(|&i| sup.label_vector(i)).collect();
    let p = sup.p();
    let constant_cols: Vec<usize> = (0..p)
        .filter(|&c| xs.iter().all(|x| x[c] == xs[0][c]) && xs[0][c] != 0.0)
        .collect();
    let mut weights = vec![0.0; sup.labels() * p];
    for j in 0..sup.labels() {
        let constant_label = ys.iter().all(|y| y[j] == ys[0][j]);
        let cols: Vec<usize> = if constant_label { constant_cols.clone() } else { (0..p).collect() };
        if cols.is_empty() {
            continue;
        }
        let records = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                Ok(LoggedInteraction {
                    x: ContextFeatures::new(cols.iter().map(|&c| x[c]).collect())?,
                    // Class 0 of the binary model is "label on".
                    action: Action::Class(if y[j] == 1 { 0 } else { 1 }),
                    reward: 0.0,
                    propensity: 1.0,
                })
            })
            .collect::<Result<_>>()?;
        let head = BanditDataset::new(records, ActionSpace::Multiclass { m: 2 }, cols.len())?;
        let fit = fit_mle(
            &head,
            &FitOptions {
                l2_penalty: LOGGING_L2,
                ..FitOptions::default()
            },
        )?;
        for (w, &c) in fit.beta_hat.params().iter().zip(&cols) {
            weights[j * p + c] = *w;
        }
    }
    MultiLabelProductPolicy::new(sup.labels(), p, weights)
}

/// Seeded split into (train, test) with `test_fraction` of rows held out.
pub fn train_test_split(
    sup: &SupervisedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(SupervisedDataset, SupervisedDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let perm = permutation(sup.len(), seed);
    let n_test = (test_fraction * sup.len() as f64).round() as usize;
    let mut test: Vec<usize> = perm[..n_test].to_vec();
    let mut train: Vec<usize> = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((sup.subset(&train), sup.subset(&test)))
}

/// Expected Hamming loss `sum_j P(y_j != y*_j)` of a product policy, averaged
/// over rows.
pub fn expected_hamming_loss(policy: &MultiLabelProductPolicy, sup: &SupervisedDataset) -> Result<f64> {
    if sup.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_row: Vec<f64> = (0..sup.len())
        .map(|i| {
            let q = policy.marginals(&sup.dense(i))?;
            let y = sup.label_vector(i);
            Ok(q.iter().zip(&y).map(|(qj, &yj)| if yj == 1 { 1.0 - qj } else { *qj }).sum())
        })
        .collect::<Result<_>>()?;
    Ok(crate::numeric::mean(&per_row))
}

/// Options for [`synthetic_multilabel`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticMultilabel {
    pub rows: usize,
    pub labels: usize,
    /// Feature dimension including the leading constant column.
    pub p: usize,
    /// Scale of the planted separators; larger means more separable labels.
    pub signal: f64,
    /// Probability of flipping each label after thresholding.
    pub flip: f64,
}

impl Default for SyntheticMultilabel {
    fn default() -> Self {
        Self {
            rows: 5000,
            labels: 4,
            p: 10,
            signal: 2.0,
            flip: 0.05,
        }
    }
}

/// Rows with `x_1 = 1` and standard normal other coordinates; label j is on
/// when `w_j . x > 0` for a planted `w_j`, then flipped with probability `flip`.
pub fn synthetic_multilabel(spec: &SyntheticMultilabel, seed: u64) -> Result<SupervisedDataset> {
    if spec.p < 2 || spec.labels == 0 {
        return Err(Error::InvalidArgument("need p >= 2 and at least one label".into()));
    }
    let mut wrng = derived_rng(seed, 0);
    let planted: Vec<Vec<f64>> = (0..spec.labels)
        .map(|_| {
            let mut w: Vec<f64> = (0..spec.p)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut wrng);
                    z * spec.signal / (spec.p as f64).sqrt()
                })
                .collect();
            w[0] *= 0.5;
            w
        })
        .collect();
    let row_seed = derive_seed(seed, 1);
    let rows = (0..spec.rows)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(row_seed, i as u64);
            let mut x = vec![1.0];
            x.extend((1..spec.p).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
            let labels = planted
                .iter()
                .enumerate()
                .filter_map(|(j, w)| {
                    let on = crate::numeric::dot(w, &x) > 0.0;
                    let flip = rng.random::<f64>() < spec.flip;
                    (on != flip).then_some(j + 1)
                })
                .collect();
            let features = x.iter().enumerate().map(|(j, v)| (j + 1, *v)).collect();
            SupervisedRow { features, labels }
        })
        .collect();
    SupervisedDataset::new(rows, spec.p, spec.labels)
}

/// Probability a product policy with these marginals reproduces `y` exactly.
pub fn reproduction_probability(marginals: &[f64], y: &[u8]) -> f64 {
    marginals
        .iter()
        .zip(y)
        .map(|(q, &b)| if b == 1 { *q } else { 1.0 - q })
        .product()
}

/// Per-label accuracy of thresholding `sigmoid(w_j . x)` at 1/2.
pub fn label_accuracy(policy: &MultiLabelProductPolicy, sup: &SupervisedDataset) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..sup.len() {
        let x = sup.dense(i);
        let y = sup.label_vector(i);
        for (j, &yj) in y.iter().enumerate() {
            let z = crate::numeric::dot(policy.head(j), &x);
            if (sigmoid(z) > 0.5) == (yj == 1) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (sup.len() * sup.labels()).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SupervisedDataset> {
        parse_multilabel_svmlight(text.as_bytes(), None, None)
    }

    #[test]
    fn parses_format_examples() {
        let d = parse("1,3 2:0.5 7:1.0\n  2:0.5\n").unwrap();
        assert_eq!(d.rows()[0].labels, vec![1, 3]);
        assert_eq!(d.rows()[0].features, vec![(2, 0.5), (7, 1.0)]);
        assert!(d.rows()[1].labels.is_empty());
        assert_eq!((d.p(), d.labels()), (7, 3));
        let d = parse("4:1 5:2").unwrap();
        assert!(d.rows()[0].labels.is_empty());
        assert_eq!(d.dense(0), vec![0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        for (text, line) in [
            ("1 2:0.5\n1 3:x\n", 2),
            ("1 2:0.5 2:0.7\n", 1),
            ("1\n2 0:1\n", 2),
            ("1,a 2:1\n", 1),
            ("1 2:1\n\n1,1 3:1\n", 3),
            ("1 2:1 junk\n", 1),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
        assert!(parse_multilabel_svmlight("1 9:1\n".as_bytes(), Some(5), None).is_err());
        assert_eq!(parse_multilabel_svmlight("1 2:1\n".as_bytes(), Some(5), Some(4)).unwrap().p(), 5);
    }

    #[test]
    fn round_trip_is_identity() {
        let d = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 100,
                labels: 5,
                p: 6,
                signal: 1.0,
                flip: 0.2,
            },
            3,
        )
        .unwrap();
        let text = d.to_svmlight();
        let back = parse_multilabel_svmlight(text.as_bytes(), Some(6), Some(5)).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_svmlight(), text);
    }

    #[test]
    fn hamming_cases() {
        assert_eq!(hamming_reward(&[1, 0, 1], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(hamming_reward(&[1, 0, 1], &[0, 0, 1]).unwrap(), -1.0);
        assert_eq!(hamming_reward(&[1, 0, 1, 1], &[0, 1, 0, 0]).unwrap(), -4.0);
        assert!(hamming_reward(&[1, 0], &[1]).is_err());
    }

    fn small() -> SupervisedDataset {
        synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 100,
                labels: 3,
                p: 4,
                ..SyntheticMultilabel::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn conversion_sizes_and_bookkeeping() {
        let sup = small();
        let logging = train_logging_policy(&sup, 0.5, 1).unwrap();
        let b = supervised_to_bandit(&sup, &logging, 4, 2).unwrap();
        assert_eq!(b.len(), 400);
        for (k, r) in b.records().iter().enumerate() {
            assert_eq!(r.x.as_slice(), sup.dense(k % 100).as_slice());
            assert_eq!(r.propensity, logging.propensity(&r.x, &r.action).unwrap());
            assert!(r.propensity > 0.0);
            assert!(r.reward <= 0.0 && r.reward >= -3.0);
        }
        assert_eq!(b, supervised_to_bandit(&sup, &logging, 4, 2).unwrap());
    }

    #[test]
    fn saturated_logging_reproduces_labels() {
        // A constant-only dataset whose labels are fixed; +-50 logits reproduce them.
        let rows = (0..20)
            .map(|_| SupervisedRow {
                features: vec![(1, 1.0)],
                labels: vec![1, 3],
            })
            .collect();
        let sup = SupervisedDataset::new(rows, 1, 3).unwrap();
        let logging = MultiLabelProductPolicy::new(3, 1, vec![50.0, -50.0, 50.0]).unwrap();
        let b = supervised_to_bandit(&sup, &logging, 4, 0).unwrap();
        for r in b.records() {
            assert_eq!(r.reward, 0.0);
            assert!((r.propensity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn replication_blocks_share_marginals() {
        let sup = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 10_000,
                labels: 3,
                p: 4,
                ..SyntheticMultilabel::default()
            },
            8,
        )
        .unwrap();
        let logging = train_logging_policy(&sup, 0.05, 3).unwrap();
        let b = supervised_to_bandit(&sup, &logging, 2, 4).unwrap();
        let n = sup.len();
        for j in 0..3 {
            let freq = |block: usize| {
                b.records()[block * n..(block + 1) * n]
                    .iter()
                    .filter(|r| matches!(&r.action, Action::Labels(y) if y[j] == 1))
                    .count() as f64
                    / n as f64
            };
            let (f0, f1) = (freq(0), freq(1));
            let pbar = (f0 + f1) / 2.0;
            let sd = (2.0 * pbar * (1.0 - pbar) / n as f64).sqrt();
            assert!((f0 - f1).abs() <= 4.0 * sd, "label {j}: {f0} vs {f1}");
        }
    }

    #[test]
    fn logging_fit_on_separable_labels_is_accurate() {
        let sup = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 1000,
                labels: 3,
                p: 5,
                signal: 4.0,
                flip: 0.0,
            },
            11,
        )
        .unwrap();
        let pol = train_logging_policy(&sup, 1.0, 1).unwrap();
        assert!(label_accuracy(&pol, &sup).unwrap() >= 0.95);
        assert_eq!(pol, train_logging_policy(&sup, 1.0, 1).unwrap());
    }

    #[test]
    fn logging_subset_size_and_determinism() {
        let sup = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 1000,
                ..SyntheticMultilabel::default()
            },
            2,
        )
        .unwrap();
        let k = ((0.05 * sup.len() as f64).round()) as usize;
        assert_eq!(k, 50);
        let a = train_logging_policy(&sup, 0.05, 9).unwrap();
        assert_eq!(a, train_logging_policy(&sup, 0.05, 9).unwrap());
        assert!(train_logging_policy(&sup, 0.0, 9).is_err());
        assert!(train_logging_policy(&sup, 1.5, 9).is_err());
    }

    #[test]
    fn constant_label_head_uses_intercept_only() {
        let rows = (0..30)
            .map(|i| SupervisedRow {
                features: vec![(1, 1.0), (2, i as f64 / 10.0 - 1.5)],
                labels: if i % 2 == 0 { vec![1, 2] } else { vec![2] },
            })
            .collect();
        let sup = SupervisedDataset::new(rows, 2, 2).unwrap();
        let pol = train_logging_policy(&sup, 1.0, 0).unwrap();
        // Label 2 is always on: its head has a positive intercept and no slope.
        assert!(pol.head(1)[0] > 0.0);
        assert_eq!(pol.head(1)[1], 0.0);
        assert!(pol.head(0)[1] != 0.0);
    }

    #[test]
    fn split_partitions_rows() {
        let sup = small();
        let (train, test) = train_test_split(&sup, 0.25, 3).unwrap();
        assert_eq!((train.len(), test.len()), (75, 25));
        let mut all: Vec<_> = train.rows().iter().chain(test.rows()).cloned().collect();
        let mut orig = sup.rows().to_vec();
        let key = |r: &SupervisedRow| format!("{r:?}");
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    #[test]
    fn expected_hamming_loss_matches_enumeration() {
        let sup = small();
        let pol = train_logging_policy(&sup, 0.5, 2).unwrap();
        let mut total = 0.0;
        for i in 0..sup.len() {
            let x = sup.dense(i);
            let y = sup.label_vector(i);
            for a in crate::policy::enumerate_actions(ActionSpace::Multilabel { labels: 3 }) {
                let Action::Labels(yy) = &a else { unreachable!() };
                total -= pol.propensity(&x, &a).unwrap() * hamming_reward(&y, yy).unwrap();
            }
        }
        let want = total / sup.len() as f64;
        assert!((expected_hamming_loss(&pol, &sup).unwrap() - want).abs() < 1e-12);
        let q = pol.marginals(&sup.dense(0)).unwrap();
        let y = sup.label_vector(0);
        let a = Action::Labels(y.clone());
        assert!((reproduction_probability(&q, &y) - pol.propensity(&sup.dense(0), &a).unwrap()).abs() < 1e-14);
    }
}
