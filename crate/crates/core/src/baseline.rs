//! Shallow baseline: PCA fitted on the support set followed by a one-class
//! SVM with a Gaussian kernel, evaluated over a fixed (gamma, nu) grid.

use crate::episodes::ClassIndexedDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::metrics::{
    accuracy_protocol, auc_protocol, AccuracyProtocolReport, AucProtocolReport, Scorer,
};
use crate::qp::{BoundStatus, BoxedSimplexQp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_VARIANCE_KEEP: f64 = 0.95;
pub const NU_GRID: [f64; 2] = [0.01, 0.1];

/// `2^-10, ..., 2^-1`.
pub fn gamma_grid() -> Vec<f64> {
    (1..=10).rev().map(|e| 2f64.powi(-e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// `k x D`, orthonormal rows.
    pub components: Mat<T>,
    /// Explained-variance fraction of each kept component.
    pub explained: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn transform(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.rows();
        let d = self.mean.len();
        if x.numel() != n * d {
            return Err(Error::contract(format!(
                "PCA fitted on {d} features, got {:?}",
                x.shape()
            )));
        }
        let k = self.components.rows;
        let mut out = Vec::with_capacity(n * k);
        let mut centered = vec![T::zero(); d];
        for i in 0..n {
            for (c, (&v, &m)) in centered.iter_mut().zip(x.row(i).iter().zip(&self.mean)) {
                *c = v - m;
            }
            for j in 0..k {
                out.push(linalg::dot(self.components.row(j), &centered));
            }
        }
        Tensor::new(vec![n, k], out)
    }
}

/// Fits PCA on the rows of `x` (any trailing shape is flattened) and
/// projects them. Keeps the fewest components whose cumulative explained
/// variance reaches `variance_keep`, at most `n - 1`.
pub fn pca_fit_transform<T: Scalar>(
    x: &Tensor<T>,
    variance_keep: T,
) -> Result<(PcaModel<T>, Tensor<T>)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::contract("PCA needs at least two examples"));
    }
    if !(variance_keep > T::zero() && variance_keep <= T::one()) {
        return Err(Error::config(format!(
            "variance_keep must lie in (0, 1], got {variance_keep}"
        )));
    }
    let d = x.numel() / n;
    let nf = T::from_count(n);
    let mut mean = vec![T::zero(); d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut xc = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            xc[(i, j)] = x.row(i)[j] - mean[j];
        }
    }
    // eigenvectors of the n x n Gram matrix map to covariance eigenvectors
    let gram = xc.matmul(&xc.transpose());
    let (values, vectors) = gram.symmetric_eigen();
    let total: T = values.iter().map(|&v| v.max(T::zero())).sum();
    if !(total > T::zero()) {
        return Err(Error::numeric("pca", "data has zero total variance"));
    }
    let floor = total * T::epsilon() * T::from_count(n.max(d));
    let mut k = 0;
    let mut cumulative = T::zero();
    while k < n - 1 && values[k] > floor {
        cumulative = cumulative + values[k];
        k += 1;
        if cumulative / total >= variance_keep {
            break;
        }
    }
    let mut components = Mat::zeros(k, d);
    for c in 0..k {
        let scale = T::one() / values[c].sqrt();
        for j in 0..d {
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + xc[(i, j)] * vectors[(i, c)];
            }
            components[(c, j)] = acc * scale;
        }
    }
    orthonormalize_rows(&mut components);
    let explained = values[..k].iter().map(|&v| v / total).collect();
    let model = PcaModel {
        mean,
        components,
        explained,
    };
    let projected = model.transform(x)?;
    Ok((model, projected))
}

/// Modified Gram-Schmidt, applied twice to clean up rounding.
fn orthonormalize_rows<T: Scalar>(m: &mut Mat<T>) {
    for _ in 0..2 {
        for r in 0..m.rows {
            for p in 0..r {
                let proj = linalg::dot(m.row(r), m.row(p));
                for j in 0..m.cols {
                    m[(r, j)] = m[(r, j)] - proj * m[(p, j)];
                }
            }
            let norm = linalg::dot(m.row(r), m.row(r)).sqrt();
            for j in 0..m.cols {
                m[(r, j)] = m[(r, j)] / norm;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcsvmModel<T> {
    pub alpha: Vec<T>,
    pub rho: T,
    pub gamma: T,
    pub nu: T,
    pub points: Tensor<T>,
    pub kkt_residual: T,
}

fn gaussian<T: Scalar>(a: &[T], b: &[T], gamma: T) -> T {
    (-gamma * linalg::squared_distance(a, b)).exp()
}

/// Fits the one-class SVM dual `min 1/2 a^T Q a` over
/// `sum(a) = 1, 0 <= a_i <= 1 / (nu n)` with the exact active-set solver.
pub fn ocsvm_fit<T: Scalar>(points: &Tensor<T>, gamma: T, nu: T) -> Result<OcsvmModel<T>> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::contract("one-class SVM needs at least one point"));
    }
    if !(gamma > T::zero()) || !(nu > T::zero() && nu <= T::one()) {
        return Err(Error::config(format!(
            "need gamma > 0 and nu in (0, 1], got gamma {gamma}, nu {nu}"
        )));
    }
    let mut q = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = gaussian(points.row(i), points.row(j), gamma);
        }
    }
    let upper = T::one() / (nu * T::from_count(n));
    let qp = BoxedSimplexQp {
        hessian: q.clone(),
        linear: vec![T::zero(); n],
        lower: vec![T::zero(); n],
        upper: vec![upper; n],
    };
    let start = vec![T::one() / T::from_count(n); n];
    let sol = qp.solve(&start, T::lit(1e-10).max(T::epsilon() * T::lit(100.0)))?;
    let qa = q.matvec(&sol.x);
    let margin: Vec<T> = (0..n)
        .filter(|&i| sol.status[i] == BoundStatus::Free)
        .map(|i| qa[i])
        .collect();
    let rho = if margin.is_empty() {
        (0..n)
            .filter(|&i| sol.x[i] > T::zero())
            .map(|i| qa[i])
            .fold(T::neg_infinity(), T::max)
    } else {
        margin.iter().copied().sum::<T>() / T::from_count(margin.len())
    };
    Ok(OcsvmModel {
        alpha: sol.x,
        rho,
        gamma,
        nu,
        points: points.clone(),
        kkt_residual: sol.kkt_residual,
    })
}

impl<T: Scalar> OcsvmModel<T> {
    /// `sum_i alpha_i k(x_i, x) - rho`; non-negative means inside.
    pub fn decision(&self, x: &[T]) -> T {
        let s = (0..self.points.rows())
            .map(|i| self.alpha[i] * gaussian(self.points.row(i), x, self.gamma))
            .sum::<T>();
        s - self.rho
    }

    /// The dual objective `1/2 a^T Q a`.
    pub fn objective(&self, alpha: &[T]) -> T {
        let n = self.points.rows();
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                acc = acc
                    + alpha[i]
                        * alpha[j]
                        * gaussian(self.points.row(i), self.points.row(j), self.gamma);
            }
        }
        acc * T::lit(0.5)
    }
}

/// PCA on the support, then a one-class SVM on the projected support.
/// Scores are raw decision values, thresholded at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcsvmScorer {
    pub gamma: f64,
    pub nu: f64,
    pub variance_keep: f64,
}

impl Scorer for OcsvmScorer {
    fn scores(&self, support: &Tensor<f64>, queries: &Tensor<f64>) -> Result<Vec<f64>> {
        let (pca, projected) = pca_fit_transform(support, self.variance_keep)?;
        let model = ocsvm_fit(&projected, self.gamma, self.nu)?;
        let q = pca.transform(queries)?;
        Ok((0..q.rows()).map(|i| model.decision(q.row(i))).collect())
    }

    fn threshold(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Auc { repetitions: usize },
    Accuracy { episodes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolReport {
    Auc(AucProtocolReport),
    Accuracy(AccuracyProtocolReport),
}

impl ProtocolReport {
    /// Value compared across the grid: median class AUC or mean accuracy.
    pub fn headline(&self) -> f64 {
        match self {
            ProtocolReport::Auc(r) => r.median.mean,
            ProtocolReport::Accuracy(r) => r.mean,
        }
    }

    pub fn to_csv(&self) -> String {
        match self {
            ProtocolReport::Auc(r) => r.to_csv(),
            ProtocolReport::Accuracy(r) => r.to_csv(),
        }
    }
}

pub fn run_protocol(
    scorer: &dyn Scorer,
    dataset: &ClassIndexedDataset,
    shot: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<ProtocolReport> {
    Ok(match protocol {
        Protocol::Auc { repetitions } => {
            ProtocolReport::Auc(auc_protocol(scorer, dataset, shot, repetitions, seed)?)
        }
        Protocol::Accuracy { episodes } => {
            ProtocolReport::Accuracy(accuracy_protocol(scorer, dataset, shot, episodes, seed)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub gamma: f64,
    pub nu: f64,
    pub report: ProtocolReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub entries: Vec<GridEntry>,
    pub best: usize,
}

impl BaselineReport {
    pub fn best_entry(&self) -> &GridEntry {
        &self.entries[self.best]
    }

    pub fn grid_csv(&self) -> String {
        let mut s = String::from("gamma,nu,score\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.gamma, e.nu, e.report.headline()));
        }
        s
    }
}

/// Runs the protocol for every grid point with the same seed and keeps the
/// best; earlier grid points win ties.
pub fn baseline_grid_eval(
    dataset: &ClassIndexedDataset,
    shot: usize,
    protocol: Protocol,
    seed: u64,
    variance_keep: f64,
) -> Result<BaselineReport> {
    if shot < 2 {
        return Err(Error::config(
            "the baseline fits PCA on the support set and needs shot >= 2",
        ));
    }
    let mut entries = Vec::new();
    for gamma in gamma_grid() {
        for nu in NU_GRID {
            let scorer = OcsvmScorer {
                gamma,
                nu,
                variance_keep,
            };
            let report = run_protocol(&scorer, dataset, shot, protocol, seed)?;
            entries.push(GridEntry { gamma, nu, report });
        }
    }
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.report.headline() > entries[best].report.headline() {
            best = i;
        }
    }
    Ok(BaselineReport { entries, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_twenty_points() {
        let g = gamma_grid();
        assert_eq!(g.len() * NU_GRID.len(), 20);
        assert_eq!(g[0], 1.0 / 1024.0);
        assert_eq!(g[9], 0.5);
    }

    #[test]
    fn pca_of_two_points() {
        let x: Tensor<f64> =
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        let (m, p) = pca_fit_transform(&x, 0.95).unwrap();
        assert_eq!(m.components.rows, 1);
        let c = m.components.row(0);
        let expected = [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()];
        let sign = c[0].signum();
        for (a, b) in c.iter().zip(expected) {
            assert!((a * sign - b).abs() < 1e-12);
        }
        assert!((p.data()[0].abs() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_constant_data() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(pca_fit_transform(&x, 0.95).is_err());
    }

    #[test]
    fn ocsvm_single_point_boundary() {
        let x: Tensor<f64> = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let m = ocsvm_fit(&x, 0.5, 0.1).unwrap();
        assert_eq!(m.alpha, vec![1.0]);
        assert!(m.decision(&[0.3, -0.7]).abs() < 1e-12);
        assert!(m.decision(&[1.0, 1.0]) < 0.0);
    }

    #[test]
    fn ocsvm_identical_points_are_radial() {
        let x: Tensor<f64> = Tensor::from_rows(&vec![vec![1.0, 2.0]; 5]).unwrap();
        let m = ocsvm_fit(&x, 0.5, 0.1).unwrap();
        let a = m.decision(&[2.0, 2.0]);
        let b = m.decision(&[1.0, 3.0]);
        assert!((a - b).abs() < 1e-12);
        assert!(m.decision(&[1.0, 2.0]).abs() < 1e-9);
    }
}
