//! Alignment and analysis metrics: boundary errors, tolerance accuracy,
//! similarity heatmaps, PCA projections and weighted classification scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cif::BoundarySet;
use crate::diffcore::{cosine, Tensor};
use crate::error::{Error, Result};

pub const CUTOFFS_MS: [f64; 4] = [50.0, 100.0, 500.0, 1000.0];

/// Signed per-token edge errors (predicted minus gold) and the pooled
/// absolute errors of both edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryErrors {
    pub per_token: Vec<(f64, f64)>,
    pub pooled_abs: Vec<f64>,
}

impl BoundaryErrors {
    pub fn extend(&mut self, other: &BoundaryErrors) {
        self.per_token.extend_from_slice(&other.per_token);
        self.pooled_abs.extend_from_slice(&other.pooled_abs);
    }

    pub fn mae(&self) -> f64 {
        if self.pooled_abs.is_empty() {
            return 0.0;
        }
        self.pooled_abs.iter().sum::<f64>() / self.pooled_abs.len() as f64
    }

    /// Lower median of the pooled absolute errors.
    pub fn median(&self) -> f64 {
        if self.pooled_abs.is_empty() {
            return 0.0;
        }
        let mut v = self.pooled_abs.clone();
        v.sort_by(f64::total_cmp);
        v[(v.len() - 1) / 2]
    }
}

/// Pairs predicted and gold boundaries token by token.
/// Returns the errors with their MAE and lower median.
pub fn boundary_errors(pred: &BoundarySet, gold: &BoundarySet) -> Result<(BoundaryErrors, f64, f64)> {
    if pred.len() != gold.len() {
        return Err(Error::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut e = BoundaryErrors::default();
    for (p, g) in pred.entries.iter().zip(&gold.entries) {
        let (l, r) = (p.left_ms - g.left_ms, p.right_ms - g.right_ms);
        e.per_token.push((l, r));
        e.pooled_abs.push(l.abs());
        e.pooled_abs.push(r.abs());
    }
    let (mae, median) = (e.mae(), e.median());
    Ok((e, mae, median))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceReport {
    pub cutoffs_ms: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl ToleranceReport {
    pub fn is_monotone(&self) -> bool {
        self.accuracy.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Fraction of pooled absolute errors within each cutoff.
pub fn tolerance_accuracy(errors: &BoundaryErrors, cutoffs: &[f64]) -> Result<ToleranceReport> {
    if errors.pooled_abs.is_empty() {
        return Err(Error::EmptyErrors);
    }
    if cutoffs.iter().any(|c| !(*c > 0.0)) || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("cutoffs must be positive and ascending: {cutoffs:?}")));
    }
    let n = errors.pooled_abs.len() as f64;
    let accuracy = cutoffs
        .iter()
        .map(|&c| errors.pooled_abs.iter().filter(|&&e| e <= c).count() as f64 / n)
        .collect();
    Ok(ToleranceReport {
        cutoffs_ms: cutoffs.to_vec(),
        accuracy,
    })
}

/// `values[k][n] = cos(â_k, l_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapMatrix {
    pub values: Tensor,
}

impl HeatmapMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Binary 8-bit PGM, gray level `round(255 (cos + 1) / 2)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols(), self.rows()).into_bytes();
        out.extend(
            self.values
                .data()
                .iter()
                .map(|v| (255.0 * (v.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8),
        );
        out
    }
}

pub fn similarity_heatmap(a_hat: &Tensor, l: &Tensor) -> Result<HeatmapMatrix> {
    if a_hat.rank() != 2 || l.rank() != 2 || a_hat.shape()[1] != l.shape()[1] {
        return Err(Error::shape(
            "similarity_heatmap",
            format!("{:?} vs {:?}", a_hat.shape(), l.shape()),
        ));
    }
    let (r, c) = (a_hat.shape()[0], l.shape()[0]);
    let mut values = Vec::with_capacity(r * c);
    for a in a_hat.rows() {
        for b in l.rows() {
            values.push(cosine(a, b)?);
        }
    }
    Ok(HeatmapMatrix {
        values: Tensor::matrix(r, c, values)?,
    })
}

/// Mean of the diagonal minus mean of the off-diagonal entries. A 1x1
/// matrix has no off-diagonal entries; their mean is taken as 0.
pub fn diagonality_score(h: &HeatmapMatrix) -> Result<f64> {
    let (r, c) = (h.rows(), h.cols());
    if r != c {
        return Err(Error::NonSquare { rows: r, cols: c });
    }
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..r {
        for j in 0..c {
            let v = h.values.get2(i, j);
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_mean = if r > 1 { off / (r * r - r) as f64 } else { 0.0 };
    Ok(diag / r as f64 - off_mean)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and matching unit eigenvectors.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| m[b * d + b].total_cmp(&m[a * d + a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| m[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..d).map(|k| v[k * d + i]).collect())
        .collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    pub directions: [Vec<f64>; 2],
}

impl PcaProjection {
    /// `point_index,x,y,group_tag` rows.
    pub fn to_csv(&self, tags: &[&str]) -> String {
        let mut out = String::from("point_index,x,y,group_tag\n");
        for (i, p) in self.points.iter().enumerate() {
            let tag = tags.get(i).copied().unwrap_or("");
            writeln!(out, "{i},{:.9},{:.9},{tag}", p[0], p[1]).unwrap();
        }
        out
    }
}

/// Projects the rows of `x` (K x d) onto their top two principal directions.
/// Each direction is signed so that its first non-negligible loading is positive.
pub fn pca_project(x: &Tensor) -> Result<PcaProjection> {
    let (k, d) = x.dims2();
    if k < 3 {
        return Err(Error::DegenerateData(format!("PCA needs at least 3 points, got {k}")));
    }
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let centered: Vec<Vec<f64>> = x
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (k - 1) as f64);
    let (vals, vecs) = symmetric_eigen(&cov, d);
    let tol = 1e-12 * cov.iter().map(|c| c.abs()).fold(0.0, f64::max).max(1e-300);
    if vals.first().is_none_or(|&v| v <= tol) {
        return Err(Error::DegenerateData("covariance has rank 0".into()));
    }
    let mut dirs: Vec<Vec<f64>> = vecs.into_iter().take(2).collect();
    while dirs.len() < 2 {
        dirs.push(vec![0.0; d]);
    }
    for dir in dirs.iter_mut() {
        if let Some(first) = dir.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                dir.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    let points = centered
        .iter()
        .map(|r| {
            let p = |dir: &Vec<f64>| r.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0]), p(&dirs[1])]
        })
        .collect();
    let ev = |i: usize| vals.get(i).copied().unwrap_or(0.0).max(0.0);
    Ok(PcaProjection {
        points,
        explained_variance: [ev(0), ev(1)],
        directions: [dirs[0].clone(), dirs[1].clone()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub accuracy: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    /// `confusion[gold][pred]`; predictions that failed are not counted.
    pub confusion: Vec<Vec<usize>>,
}

/// Support-weighted recall and F1. A `None` prediction counts as wrong.
pub fn classification_scores(pred: &[Option<usize>], gold: &[usize], classes: usize) -> Result<ClassScores> {
    if pred.len() != gold.len() {
        return Err(Error::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyErrors);
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (p, &g) in pred.iter().zip(gold) {
        if let Some(p) = p {
            confusion[g][*p] += 1;
        }
    }
    let n = gold.len() as f64;
    let (mut recall_w, mut f1_w, mut correct) = (0.0, 0.0, 0usize);
    for c in 0..classes {
        let support = gold.iter().filter(|&&g| g == c).count();
        let tp = confusion[c][c];
        correct += tp;
        if support == 0 {
            continue;
        }
        let predicted: usize = (0..classes).map(|g| confusion[g][c]).sum();
        let recall = tp as f64 / support as f64;
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = support as f64 / n;
        recall_w += w * recall;
        f1_w += w * f1;
    }
    Ok(ClassScores {
        accuracy: correct as f64 / n,
        recall_weighted: recall_w,
        f1_weighted: f1_w,
        confusion,
    })
}

/// Structured evaluation summary. Missing classification scores are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_ms: f64,
    pub median_ms: f64,
    pub acc_50: f64,
    pub acc_100: f64,
    pub acc_500: f64,
    pub acc_1000: f64,
    pub diagonality: f64,
    pub recall_weighted: Option<f64>,
    pub f1_weighted: Option<f64>,
    pub top1: f64,
    pub top5: f64,
    pub utterances: usize,
    pub tokens: usize,
}

impl MetricsReport {
    pub fn tolerance(&self) -> ToleranceReport {
        ToleranceReport {
            cutoffs_ms: CUTOFFS_MS.to_vec(),
            accuracy: vec![self.acc_50, self.acc_100, self.acc_500, self.acc_1000],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cif::Boundary;

    fn set(pairs: &[(f64, f64)]) -> BoundarySet {
        BoundarySet {
            entries: pairs
                .iter()
                .enumerate()
                .map(|(k, &(l, r))| Boundary { token_index: k, left_ms: l, right_ms: r })
                .collect(),
        }
    }

    #[test]
    fn boundary_examples() {
        let gold = set(&[(0.0, 40.0), (40.0, 90.0), (90.0, 120.0)]);
        let (_, mae, med) = boundary_errors(&gold, &gold).unwrap();
        assert_eq!((mae, med), (0.0, 0.0));
        let shifted = set(&[(30.0, 70.0), (70.0, 120.0), (120.0, 150.0)]);
        let (e, mae, med) = boundary_errors(&shifted, &gold).unwrap();
        assert_eq!(e.pooled_abs.len(), 6);
        assert!((mae - 30.0).abs() < 1e-12 && (med - 30.0).abs() < 1e-12);
        assert!(matches!(
            boundary_errors(&set(&[(0.0, 1.0)]), &gold),
            Err(Error::CountMismatch { pred: 1, gold: 3 })
        ));
    }

    #[test]
    fn lower_median() {
        let e = BoundaryErrors {
            per_token: vec![],
            pooled_abs: vec![4.0, 1.0, 3.0, 2.0],
        };
        assert_eq!(e.median(), 2.0);
    }

    #[test]
    fn tolerance_examples() {
        let e = BoundaryErrors {
            per_token: vec![],
            pooled_abs: vec![30.0, 70.0, 600.0, 1200.0],
        };
        let r = tolerance_accuracy(&e, &CUTOFFS_MS).unwrap();
        // 600 is outside the 500 ms cutoff
        assert_eq!(r.accuracy, vec![0.25, 0.5, 0.5, 0.75]);
        let zero = BoundaryErrors {
            per_token: vec![],
            pooled_abs: vec![0.0; 5],
        };
        assert_eq!(tolerance_accuracy(&zero, &CUTOFFS_MS).unwrap().accuracy, vec![1.0; 4]);
        assert!(matches!(
            tolerance_accuracy(&BoundaryErrors::default(), &CUTOFFS_MS),
            Err(Error::EmptyErrors)
        ));
    }

    #[test]
    fn heatmap_and_diagonality() {
        let eye = Tensor::identity(4);
        let h = similarity_heatmap(&eye, &eye).unwrap();
        assert_eq!(h.values, eye);
        assert_eq!(diagonality_score(&h).unwrap(), 1.0);

        let anti = similarity_heatmap(
            &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            &Tensor::matrix(1, 2, vec![-2.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(anti.values.data(), &[-1.0]);

        let hand = HeatmapMatrix {
            values: Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap(),
        };
        assert!((diagonality_score(&hand).unwrap() - 0.7).abs() < 1e-12);
        let constant = HeatmapMatrix {
            values: Tensor::from_rows(&[vec![0.4; 3], vec![0.4; 3], vec![0.4; 3]]).unwrap(),
        };
        assert!(diagonality_score(&constant).unwrap().abs() < 1e-15);
        let rect = HeatmapMatrix { values: Tensor::zeros(&[2, 3]) };
        assert!(matches!(diagonality_score(&rect), Err(Error::NonSquare { rows: 2, cols: 3 })));
    }

    #[test]
    fn pgm_levels() {
        let h = HeatmapMatrix {
            values: Tensor::from_rows(&[vec![-1.0, 0.0, 1.0]]).unwrap(),
        };
        let pgm = h.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn eigen_of_diagonal_and_rotated() {
        let (vals, _) = symmetric_eigen(&[1.0, 0.0, 0.0, 3.0], 2);
        assert_eq!(vals, vec![3.0, 1.0]);
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert!((vecs[0][0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn pca_collinear_and_degenerate() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![-1.0, -2.0, -3.0]]).unwrap();
        let p = pca_project(&x).unwrap();
        assert!(p.explained_variance[1].abs() < 1e-9);
        assert!(p.directions[0][0] > 0.0);
        let same = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(pca_project(&same), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn weighted_scores_by_hand() {
        // gold: 4 x class0, 3 x class1, 3 x class2
        let gold = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let pred = [0, 0, 0, 1, 1, 1, 2, 2, 2, 0].map(Some);
        let s = classification_scores(&pred, &gold, 3).unwrap();
        // class0: r 3/4, p 3/4; class1: r 2/3, p 2/3; class2: r 2/3, p 2/3
        let recall = 0.4 * 0.75 + 0.3 * (2.0 / 3.0) + 0.3 * (2.0 / 3.0);
        assert!((s.recall_weighted - recall).abs() < 1e-12);
        assert!((s.f1_weighted - recall).abs() < 1e-12);
        assert!((s.accuracy - 0.7).abs() < 1e-12);

        let perfect = classification_scores(&gold.map(Some), &gold, 3).unwrap();
        assert_eq!((perfect.recall_weighted, perfect.f1_weighted), (1.0, 1.0));
    }

    #[test]
    fn report_json_has_named_fields() {
        let r = MetricsReport {
            mae_ms: 1.0,
            median_ms: 0.5,
            acc_50: 1.0,
            acc_100: 1.0,
            acc_500: 1.0,
            acc_1000: 1.0,
            diagonality: 0.4,
            recall_weighted: None,
            f1_weighted: None,
            top1: 0.9,
            top5: 1.0,
            utterances: 2,
            tokens: 9,
        };
        let j = r.to_json();
        for key in ["mae_ms", "median_ms", "acc_50", "acc_100", "acc_500", "acc_1000", "diagonality", "recall_weighted", "f1_weighted"] {
            assert!(j.contains(&format!("\"{key}\"")), "{key}");
        }
        assert!(j.contains("\"recall_weighted\": null"));
        assert_eq!(serde_json::from_str::<MetricsReport>(&j).unwrap(), r);
    }
}
