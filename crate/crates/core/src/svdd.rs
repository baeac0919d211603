//! Support Vector Data Description: the minimum enclosing ball of a set of
//! feature vectors, computed through its simplex-constrained dual
//!
//! ```text
//! maximize    a^T diag(K') - a^T K' a
//! subject to  sum(a) = 1, a >= 0,        K' = Z Z^T + lambda I
//! ```
//!
//! whose solution gives the center `c = sum_i a_i z_i`. Gradients flow
//! through the solution by implicit differentiation of the KKT system on
//! the active set.
//!
//! Features are re-centered (their mean subtracted) before the kernel is
//! formed. Because the weights sum to one the dual is exactly invariant to
//! translation, so this changes nothing but the conditioning of the solve.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::qp::{BoundStatus, BoxedSimplexQp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Diagonal stabilization added to the kernel matrix.
pub const DEFAULT_LAMBDA: f64 = 1e-6;
/// KKT residual the dual solver must reach.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
/// Weights at or above this value count as support vectors.
pub const ACTIVE_THRESHOLD: f64 = 1e-7;

/// Gram matrix of a support set plus its diagonal stabilization.
#[derive(Debug, Clone)]
pub struct KernelMatrix<T> {
    gram: Mat<T>,
    lambda: T,
    features: Option<Tensor<T>>,
}

impl<T: Scalar> KernelMatrix<T> {
    /// Wraps an explicit Gram matrix. Solutions computed from it carry no
    /// center since the features are unknown.
    pub fn from_gram(gram: Mat<T>, lambda: T) -> Result<Self> {
        if gram.rows != gram.cols || gram.rows == 0 {
            return Err(Error::contract(format!(
                "kernel matrix must be square and non-empty, got {}x{}",
                gram.rows, gram.cols
            )));
        }
        if !(lambda >= T::zero()) {
            return Err(Error::contract("kernel stabilization must be non-negative"));
        }
        Ok(KernelMatrix {
            gram,
            lambda,
            features: None,
        })
    }

    pub fn size(&self) -> usize {
        self.gram.rows
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn is_stabilized(&self) -> bool {
        self.lambda > T::zero()
    }

    pub fn features(&self) -> Option<&Tensor<T>> {
        self.features.as_ref()
    }

    /// `K' = K + lambda I`.
    pub fn entries(&self) -> Mat<T> {
        let mut k = self.gram.clone();
        for i in 0..k.rows {
            k[(i, i)] = k[(i, i)] + self.lambda;
        }
        k
    }

    /// `J K J + lambda I` with `J = I - 11^T / n`: the stabilized kernel of
    /// the mean-centered features.
    pub fn centered_entries(&self) -> Mat<T> {
        let n = self.size();
        let nf = T::from_count(n);
        let row_means: Vec<T> = (0..n)
            .map(|i| self.gram.row(i).iter().copied().sum::<T>() / nf)
            .collect();
        let total = row_means.iter().copied().sum::<T>() / nf;
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = self.gram[(i, j)] - row_means[i] - row_means[j] + total;
            }
            k[(i, i)] = k[(i, i)] + self.lambda;
        }
        k
    }
}

/// `K'_ij = <z_i, z_j> + lambda [i = j]` for the rows of `features`.
pub fn build_kernel<T: Scalar>(features: &Tensor<T>, lambda: T) -> Result<KernelMatrix<T>> {
    if features.ndim() != 2 {
        return Err(Error::contract(format!(
            "build_kernel expects an (n, d) feature matrix, got {:?}",
            features.shape()
        )));
    }
    features.check_finite("build_kernel")?;
    let n = features.rows();
    let mut gram = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = linalg::dot(features.row(i), features.row(j));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let mut k = KernelMatrix::from_gram(gram, lambda)?;
    k.features = Some(features.clone());
    Ok(k)
}

/// Optimal weights of the simplex dual for a given (already stabilized) kernel.
#[derive(Debug, Clone)]
pub struct DualWeights<T> {
    pub alpha: Vec<T>,
    /// Equality multiplier in `2 K a - diag(K) = nu 1 + mu`.
    pub nu: T,
    /// Non-negativity multipliers, zero on support vectors.
    pub mu: Vec<T>,
    pub active_set: Vec<usize>,
    pub kkt_residual: T,
}

/// Solves `max a^T diag(K) - a^T K a` over the probability simplex.
pub fn solve_simplex_dual<T: Scalar>(kernel: &Mat<T>, tolerance: T) -> Result<DualWeights<T>> {
    let n = kernel.rows;
    if n == 0 || kernel.cols != n {
        return Err(Error::contract(
            "simplex dual needs a non-empty square kernel",
        ));
    }
    if !(tolerance > T::zero()) {
        return Err(Error::contract("solver tolerance must be positive"));
    }
    let two = T::lit(2.0);
    let mut hessian = kernel.clone();
    hessian.data.iter_mut().for_each(|v| *v = *v * two);
    let diag: Vec<T> = (0..n).map(|i| kernel[(i, i)]).collect();
    let qp = BoxedSimplexQp {
        hessian,
        linear: diag.iter().map(|&d| -d).collect(),
        lower: vec![T::zero(); n],
        upper: vec![T::infinity(); n],
    };
    // start from the vertex farthest from the origin
    let start_idx = (0..n).fold(0, |best, i| if diag[i] > diag[best] { i } else { best });
    let mut start = vec![T::zero(); n];
    start[start_idx] = T::one();
    let sol = qp.solve(&start, tolerance)?;
    let threshold = T::lit(ACTIVE_THRESHOLD);
    let active_set = (0..n)
        .filter(|&i| sol.status[i] == BoundStatus::Free && sol.x[i] >= threshold)
        .collect();
    Ok(DualWeights {
        alpha: sol.x,
        nu: sol.nu,
        mu: sol.mu,
        active_set,
        kkt_residual: sol.kkt_residual,
    })
}

/// Solution of one SVDD problem.
#[derive(Debug, Clone)]
pub struct DualSolution<T> {
    pub alpha: Vec<T>,
    /// Equality multiplier, expressed in the caller's (uncentered) coordinates.
    pub nu: T,
    pub mu: Vec<T>,
    pub active_set: Vec<usize>,
    /// `sum_i alpha_i z_i`; empty when the kernel was built without features.
    pub center: Vec<T>,
    /// `max_i |z_i - center|` over the whole support set.
    pub radius: T,
    pub kkt_residual: T,
}

/// Solves the SVDD dual for a stabilized kernel.
pub fn solve_dual<T: Scalar>(kernel: &KernelMatrix<T>, tolerance: T) -> Result<DualSolution<T>> {
    let centered = kernel.centered_entries();
    let weights = solve_simplex_dual(&centered, tolerance)?;
    let n = kernel.size();
    let alpha = weights.alpha;

    // squared distances from the kernel alone: K_ii - 2 (K a)_i + a^T K a
    let ka = kernel.gram.matvec(&alpha);
    let aka = linalg::dot(&alpha, &ka);
    let kernel_dist_sq: Vec<T> = (0..n)
        .map(|i| (kernel.gram[(i, i)] - T::lit(2.0) * ka[i] + aka).max(T::zero()))
        .collect();

    let (center, radius) = match &kernel.features {
        Some(features) => {
            let center = weighted_rows(features, &alpha);
            let radius = (0..n)
                .map(|i| linalg::squared_distance(features.row(i), &center).sqrt())
                .fold(T::zero(), T::max);
            (center, radius)
        }
        None => (
            Vec::new(),
            kernel_dist_sq
                .iter()
                .copied()
                .fold(T::zero(), T::max)
                .sqrt(),
        ),
    };

    // nu_raw = nu_centered + |c_raw|^2 - |c_centered|^2, where
    // |c_raw|^2 = a^T K a and |c_centered|^2 = a^T K_c a (lambda excluded)
    let mut kc_no_ridge = centered.clone();
    for i in 0..n {
        kc_no_ridge[(i, i)] = kc_no_ridge[(i, i)] - kernel.lambda;
    }
    let akca = linalg::dot(&alpha, &kc_no_ridge.matvec(&alpha));
    let nu = weights.nu + aka - akca;

    Ok(DualSolution {
        alpha,
        nu,
        mu: weights.mu,
        active_set: weights.active_set,
        center,
        radius,
        kkt_residual: weights.kkt_residual,
    })
}

fn weighted_rows<T: Scalar>(features: &Tensor<T>, weights: &[T]) -> Vec<T> {
    let d = features.numel() / features.rows();
    let mut c = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        for (cj, &z) in c.iter_mut().zip(features.row(i)) {
            *cj = *cj + w * z;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Inside,
    Outside,
}

/// Classifies a query feature vector against the ball: inside iff
/// `|query - center| <= radius`. Also returns the distance.
pub fn decide<T: Scalar>(query: &[T], solution: &DualSolution<T>) -> Result<(Decision, T)> {
    if query.len() != solution.center.len() {
        return Err(Error::contract(format!(
            "query has dimension {} but the center has dimension {}",
            query.len(),
            solution.center.len()
        )));
    }
    let distance = linalg::squared_distance(query, &solution.center).sqrt();
    let decision = if distance <= solution.radius {
        Decision::Inside
    } else {
        Decision::Outside
    };
    Ok((decision, distance))
}

/// Gradient of a loss with respect to the kernel entries, given the
/// gradient with respect to the optimal weights.
///
/// The active set is treated as locally constant. The adjoint `(w, rho)`
/// solves `[2 K_AA, 1; 1^T, 0] [w; rho] = [grad_alpha_A; 0]`, and then
/// `dL/dK_ij = -(w_i a_j + a_i w_j) + [i = j] w_i` on `A x A`, zero elsewhere.
pub fn qp_backward<T: Scalar>(
    kernel: &Mat<T>,
    weights: &DualWeights<T>,
    grad_alpha: &[T],
) -> Result<Mat<T>> {
    let n = kernel.rows;
    if grad_alpha.len() != n || weights.alpha.len() != n {
        return Err(Error::contract(format!(
            "qp_backward: kernel is {n}x{n} but grad_alpha has {} entries",
            grad_alpha.len()
        )));
    }
    if grad_alpha.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "qp_backward",
            "non-finite gradient with respect to alpha",
        ));
    }
    let active = &weights.active_set;
    let m = active.len();
    let mut grad = Mat::zeros(n, n);
    if m == 0 {
        return Err(Error::Differentiation("empty active set".into()));
    }
    let two = T::lit(2.0);
    let mut sys = Mat::zeros(m + 1, m + 1);
    let mut rhs = vec![T::zero(); m + 1];
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            sys[(a, b)] = two * kernel[(i, j)];
        }
        sys[(a, m)] = T::one();
        sys[(m, a)] = T::one();
        rhs[a] = grad_alpha[i];
    }
    let adjoint = sys
        .solve(&rhs, T::epsilon() * T::lit(64.0))
        .ok_or_else(|| {
            Error::Differentiation(format!(
                "singular reduced KKT system on active set {active:?}; the support vectors are affinely dependent, retry with a larger lambda"
            ))
        })?;
    for (a, &i) in active.iter().enumerate() {
        let wi = adjoint[a];
        for &j in active {
            let wj = adjoint[active.iter().position(|&k| k == j).expect("active index")];
            grad[(i, j)] = -(wi * weights.alpha[j] + weights.alpha[i] * wj);
        }
        grad[(i, i)] = grad[(i, i)] + wi;
    }
    Ok(grad)
}

/// Exact minimum enclosing ball by enumerating every support subset of size
/// at most `d + 1` and keeping the smallest circumscribed ball that contains
/// all points. Exponential; meant as a test oracle for `n <= 10`.
pub fn meb_oracle<T: Scalar>(points: &Tensor<T>) -> Result<(Vec<T>, T)> {
    if points.ndim() != 2 {
        return Err(Error::contract("meb_oracle expects an (n, d) point matrix"));
    }
    let n = points.rows();
    let d = points.numel() / n;
    if n > 10 {
        return Err(Error::contract(format!(
            "meb_oracle is limited to 10 points, got {n}"
        )));
    }
    let max_size = (d + 1).min(n);
    let mut best: Option<(Vec<T>, T)> = None;
    let mut subset = Vec::with_capacity(max_size);
    for mask in 1u32..(1u32 << n) {
        if mask.count_ones() as usize > max_size {
            continue;
        }
        subset.clear();
        subset.extend((0..n).filter(|&i| mask & (1 << i) != 0));
        let Some((center, radius)) = circumball(points, &subset) else {
            continue;
        };
        if let Some((_, r)) = &best {
            if radius >= *r {
                continue;
            }
        }
        let slack = radius * T::lit(1e-9) + T::lit(1e-12);
        let contains_all = (0..n)
            .all(|i| linalg::squared_distance(points.row(i), &center).sqrt() <= radius + slack);
        if contains_all {
            best = Some((center, radius));
        }
    }
    best.ok_or_else(|| Error::numeric("meb_oracle", "no enclosing circumball found"))
}

/// Center and radius of the smallest sphere through `subset` whose center
/// lies in the subset's affine hull; `None` if the points are affinely dependent.
fn circumball<T: Scalar>(points: &Tensor<T>, subset: &[usize]) -> Option<(Vec<T>, T)> {
    let p0 = points.row(subset[0]);
    let k = subset.len() - 1;
    if k == 0 {
        return Some((p0.to_vec(), T::zero()));
    }
    let diffs: Vec<Vec<T>> = subset[1..]
        .iter()
        .map(|&i| points.row(i).iter().zip(p0).map(|(&a, &b)| a - b).collect())
        .collect();
    let mut a = Mat::zeros(k, k);
    let mut b = vec![T::zero(); k];
    let two = T::lit(2.0);
    for r in 0..k {
        for c in 0..k {
            a[(r, c)] = two * linalg::dot(&diffs[r], &diffs[c]);
        }
        b[r] = linalg::dot(&diffs[r], &diffs[r]);
    }
    let t = a.solve(&b, T::lit(1e-10))?;
    let mut center = p0.to_vec();
    for (tr, diff) in t.iter().zip(&diffs) {
        for (c, &v) in center.iter_mut().zip(diff) {
            *c = *c + *tr * v;
        }
    }
    let radius = linalg::squared_distance(&center, p0).sqrt();
    Some((center, radius))
}

/// Backward rule of the SVDD weight layer: maps `dL/dalpha` to `dL/dZ`.
struct SvddWeightsOp<T> {
    centered_features: Mat<T>,
    kernel: Mat<T>,
    weights: DualWeights<T>,
}

impl<T: Scalar> CustomOp<T> for SvddWeightsOp<T> {
    fn name(&self) -> &str {
        "svdd_weights"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let g = qp_backward(&self.kernel, &self.weights, grad_output.data())?;
        // K_c = Z_c Z_c^T  =>  dL/dZ_c = (G + G^T) Z_c
        let mut sym = g.clone();
        for i in 0..g.rows {
            for j in 0..g.cols {
                sym[(i, j)] = g[(i, j)] + g[(j, i)];
            }
        }
        let mut grad_zc = sym.matmul(&self.centered_features);
        // Z_c = J Z  =>  dL/dZ = J dL/dZ_c
        let n = grad_zc.rows;
        let nf = T::from_count(n);
        for col in 0..grad_zc.cols {
            let mean = (0..n).map(|r| grad_zc[(r, col)]).sum::<T>() / nf;
            for r in 0..n {
                grad_zc[(r, col)] = grad_zc[(r, col)] - mean;
            }
        }
        Ok(vec![Tensor::from_mat(&grad_zc)])
    }
}

/// Records the SVDD weight layer on `graph`: `features` is an `(n, d)`
/// node, the result is the `(n)` node of optimal dual weights.
pub fn svdd_weights<T: Scalar>(
    graph: &mut Graph<T>,
    features: Var,
    lambda: T,
    tolerance: T,
) -> Result<(Var, DualSolution<T>)> {
    let z = graph.value(features).clone();
    let kernel = build_kernel(&z, lambda)?;
    let solution = solve_dual(&kernel, tolerance)?;
    let mut centered = z.to_mat();
    let nf = T::from_count(centered.rows);
    for col in 0..centered.cols {
        let mean = (0..centered.rows).map(|r| centered[(r, col)]).sum::<T>() / nf;
        for r in 0..centered.rows {
            centered[(r, col)] = centered[(r, col)] - mean;
        }
    }
    let op = SvddWeightsOp {
        centered_features: centered,
        kernel: kernel.centered_entries(),
        weights: DualWeights {
            alpha: solution.alpha.clone(),
            nu: solution.nu,
            mu: solution.mu.clone(),
            active_set: solution.active_set.clone(),
            kkt_residual: solution.kkt_residual,
        },
    };
    let alpha = graph.custom(
        &[features],
        Tensor::vector(solution.alpha.clone()),
        Box::new(op),
    )?;
    Ok((alpha, solution))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kernel_of_two_points() {
        let k = build_kernel(&pts(&[&[0.0, 0.0], &[2.0, 0.0]]), 0.0).unwrap();
        assert_eq!(k.entries().data, vec![0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn kernel_stabilization_adds_lambda_on_diagonal() {
        let k = build_kernel(&pts(&[&[1.0]]), 1e-6).unwrap();
        assert_eq!(k.entries().data, vec![1.000001]);
        let z = pts(&[&[0.5, -1.0], &[2.0, 0.5], &[-0.75, 0.125]]);
        let plain = build_kernel(&z, 0.0).unwrap().entries();
        let stab = build_kernel(&z, 0.25).unwrap().entries();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.25 } else { 0.0 };
                assert_eq!(stab[(i, j)] - plain[(i, j)], expected);
            }
        }
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let z = pts(&[&[f64::NAN, 0.0]]);
        assert!(matches!(build_kernel(&z, 0.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn single_point_ball() {
        let k = build_kernel(&pts(&[&[3.0, -1.0]]), 1e-6).unwrap();
        let s = solve_dual(&k, 1e-8).unwrap();
        assert_eq!(s.alpha, vec![1.0]);
        assert_eq!(s.radius, 0.0);
        assert_eq!(s.center, vec![3.0, -1.0]);
    }

    #[test]
    fn two_point_ball_is_midpoint() {
        let k = build_kernel(&pts(&[&[0.0, 0.0], &[2.0, 0.0]]), 1e-6).unwrap();
        let s = solve_dual(&k, 1e-8).unwrap();
        assert!((s.alpha[0] - 0.5).abs() < 1e-9 && (s.alpha[1] - 0.5).abs() < 1e-9);
        assert!((s.center[0] - 1.0).abs() < 1e-9 && s.center[1].abs() < 1e-12);
        assert!((s.radius - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_satisfy_kkt_by_hand() {
        // 2 K a - diag(K) = (0, 1, 0) at a = (1/2, 0, 1/2): nu = 0, mu = (0, 1, 0)
        let k = build_kernel(&pts(&[&[0.0], &[1.0], &[2.0]]), 1e-6).unwrap();
        let s = solve_dual(&k, 1e-8).unwrap();
        assert!((s.alpha[0] - 0.5).abs() < 1e-9);
        assert_eq!(s.alpha[1], 0.0);
        assert!((s.alpha[2] - 0.5).abs() < 1e-9);
        assert!((s.center[0] - 1.0).abs() < 1e-9);
        assert!((s.radius - 1.0).abs() < 1e-9);
        assert!(s.nu.abs() < 1e-9, "nu = {}", s.nu);
        assert!((s.mu[1] - 1.0).abs() < 1e-5);
        assert_eq!(s.active_set, vec![0, 2]);
    }

    #[test]
    fn equilateral_triangle_has_uniform_weights() {
        let h = 3f64.sqrt() / 2.0;
        let k = build_kernel(&pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.5, h]]), 1e-6).unwrap();
        let s = solve_dual(&k, 1e-8).unwrap();
        for a in &s.alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!((s.center[0] - 0.5).abs() < 1e-9 && (s.center[1] - h / 3.0).abs() < 1e-9);
    }

    #[test]
    fn decide_against_two_point_ball() {
        let k = build_kernel(&pts(&[&[0.0, 0.0], &[2.0, 0.0]]), 1e-6).unwrap();
        let s = solve_dual(&k, 1e-8).unwrap();
        let (d, dist) = decide(&s.center.clone(), &s).unwrap();
        assert_eq!((d, dist), (Decision::Inside, 0.0));
        let (d, dist) = decide(&[1.0, 0.5], &s).unwrap();
        assert_eq!(d, Decision::Inside);
        assert!((dist - 0.5).abs() < 1e-9);
        let (d, dist) = decide(&[1.0, 2.0], &s).unwrap();
        assert_eq!(d, Decision::Outside);
        assert!((dist - 2.0).abs() < 1e-9);
        assert!(matches!(decide(&[1.0], &s), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_kernel_gradient() {
        let k = build_kernel(&pts(&[&[0.0, 1.0], &[2.0, 0.0], &[0.3, 0.2]]), 1e-6).unwrap();
        let centered = k.centered_entries();
        let w = solve_simplex_dual(&centered, 1e-8).unwrap();
        let g = qp_backward(&centered, &w, &[0.0; 3]).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn meb_oracle_small_cases() {
        let (c, r) = meb_oracle(&pts(&[&[4.0, 2.0]])).unwrap();
        assert_eq!((c, r), (vec![4.0, 2.0], 0.0));
        let (c, r) = meb_oracle(&pts(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.5]])).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1].abs() < 1e-12 && (r - 1.0).abs() < 1e-12);
        let (c, r) =
            meb_oracle(&pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        assert!((r - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_precision_solve() {
        let z: Tensor<f32> =
            Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.3]]).unwrap();
        let k = build_kernel(&z, 1e-6).unwrap();
        let s = solve_dual(&k, 1e-4).unwrap();
        assert!((s.center[0] - 1.0).abs() < 1e-4 && (s.radius - 1.0).abs() < 1e-4);
    }
}
