//! Real, symmetric (even-degree), orthonormal spherical harmonics.
//!
//! # Basis convention
//!
//! Only even degrees `l = 0, 2, 4, ...` appear, matching antipodally symmetric
//! functions. A band limit `order` (even) yields
//! `(order + 1)(order + 2) / 2` coefficients: 45 at order 8, 66 at order 10.
//!
//! Coefficients are stored flat. Degree `l` starts at offset `l (l - 1) / 2`
//! (0, 1, 6, 15, 28, 45 for l = 0, 2, 4, 6, 8, 10) and orders run
//! `m = -l ... l`, so `index(l, m) = l (l - 1) / 2 + (m + l)`.
//!
//! The basis functions are
//!
//! * `m < 0`: `sqrt(2) K(l, |m|) sin(|m| phi) P_l^{|m|}(cos theta)`
//! * `m = 0`: `K(l, 0) P_l^0(cos theta)`
//! * `m > 0`: `sqrt(2) K(l, m) cos(m phi) P_l^m(cos theta)`
//!
//! with `K(l, m) = sqrt((2l + 1) / (4 pi) * (l - m)! / (l + m)!)` and
//! associated Legendre functions including the Condon-Shortley phase. The
//! basis is orthonormal: `integral Y_i Y_j dOmega = delta_ij`.
//!
//! `theta` is the polar angle from +z (`cos theta = z`) and
//! `phi = atan2(y, x)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sphere::{fibonacci_directions, Direction, Rotation3};

/// Condition-number ceiling for least-squares fits; beyond this the design is
/// rejected as ill-conditioned.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Number of coefficients of an even-degree basis with band limit `order`.
pub fn coeff_count(order: usize) -> usize {
    debug_assert!(order % 2 == 0);
    (order + 1) * (order + 2) / 2
}

/// Flat offset of degree `l` (even) within a coefficient vector.
pub fn degree_offset(l: usize) -> usize {
    debug_assert!(l % 2 == 0);
    (l * l - l) / 2
}

/// Flat index of the `(l, m)` basis function.
pub fn coeff_index(l: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= l);
    degree_offset(l) + (m + l as i64) as usize
}

/// Degree of each flat coefficient index, e.g. `[0, 2, 2, 2, 2, 2, 4, ...]`.
pub fn degree_table(order: usize) -> Vec<usize> {
    let mut table = Vec::with_capacity(coeff_count(order));
    for l in (0..=order).step_by(2) {
        table.extend(std::iter::repeat(l).take(2 * l + 1));
    }
    table
}

/// Legendre polynomial `P_l(x)` by upward recurrence.
pub fn legendre_p(l: usize, x: f64) -> f64 {
    match l {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=l {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Reusable basis-row evaluator. Owns the recurrence scratch so bulk callers
/// (design matrices, dense rotation grids) avoid per-row allocation.
pub struct BasisEval {
    order: usize,
    /// K(l, m) for even l, packed like the coefficient layout.
    norm: Vec<f64>,
    /// Associated Legendre scratch, packed `l (l + 1) / 2 + m` over all l.
    plm: Vec<f64>,
    /// cos(m phi), sin(m phi) scratch.
    cosm: Vec<f64>,
    sinm: Vec<f64>,
}

impl BasisEval {
    pub fn new(order: usize) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::invalid_input(format!(
                "band limit must be even, got {order}"
            )));
        }
        let mut norm = Vec::with_capacity(coeff_count(order));
        for l in (0..=order).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                let ma = m.unsigned_abs() as usize;
                // (l - m)! / (l + m)! = 1 / ((l - m + 1) * ... * (l + m))
                let mut ratio = 1.0;
                for k in (l - ma + 1)..=(l + ma) {
                    ratio *= k as f64;
                }
                let k2 = (2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) / ratio;
                norm.push(k2.sqrt());
            }
        }
        Ok(BasisEval {
            order,
            norm,
            plm: vec![0.0; (order + 1) * (order + 2) / 2],
            cosm: vec![0.0; order + 1],
            sinm: vec![0.0; order + 1],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Evaluates all basis functions at `d` into `out`
    /// (`out.len() == coeff_count(order)`).
    pub fn row_into(&mut self, d: &Direction, out: &mut [f64]) {
        assert_eq!(out.len(), coeff_count(self.order));
        let l_max = self.order;
        let ct = d.z().clamp(-1.0, 1.0);
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let phi = d.y().atan2(d.x());

        // Associated Legendre P_l^m(ct) for all 0 <= m <= l <= l_max, with the
        // Condon-Shortley phase. Odd degrees are recurrence intermediates.
        let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
        self.plm[0] = 1.0;
        for m in 1..=l_max {
            // P_m^m = -(2m - 1) sin(theta) P_{m-1}^{m-1}
            self.plm[idx(m, m)] = -((2 * m - 1) as f64) * st * self.plm[idx(m - 1, m - 1)];
        }
        for m in 0..l_max {
            // P_{m+1}^m = (2m + 1) cos(theta) P_m^m
            self.plm[idx(m + 1, m)] = ((2 * m + 1) as f64) * ct * self.plm[idx(m, m)];
        }
        for m in 0..=l_max {
            for l in (m + 2)..=l_max {
                let lf = l as f64;
                let mf = m as f64;
                self.plm[idx(l, m)] = ((2.0 * lf - 1.0) * ct * self.plm[idx(l - 1, m)]
                    - (lf + mf - 1.0) * self.plm[idx(l - 2, m)])
                    / (lf - mf);
            }
        }

        // cos(m phi), sin(m phi) by angle addition.
        let (sp, cp) = phi.sin_cos();
        self.cosm[0] = 1.0;
        self.sinm[0] = 0.0;
        for m in 1..=l_max {
            self.cosm[m] = self.cosm[m - 1] * cp - self.sinm[m - 1] * sp;
            self.sinm[m] = self.sinm[m - 1] * cp + self.cosm[m - 1] * sp;
        }

        let sqrt2 = std::f64::consts::SQRT_2;
        let mut j = 0;
        for l in (0..=l_max).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                let ma = m.unsigned_abs() as usize;
                let p = self.plm[idx(l, ma)];
                let k = self.norm[j];
                out[j] = if m < 0 {
                    sqrt2 * k * self.sinm[ma] * p
                } else if m == 0 {
                    k * p
                } else {
                    sqrt2 * k * self.cosm[ma] * p
                };
                j += 1;
            }
        }
    }
}

/// All basis functions with band limit `order` evaluated at `d`.
pub fn basis_row(order: usize, d: &Direction) -> Result<Vec<f64>> {
    let mut eval = BasisEval::new(order)?;
    let mut out = vec![0.0; coeff_count(order)];
    eval.row_into(d, &mut out);
    Ok(out)
}

/// Design matrix: one basis row per direction.
pub fn design_matrix(order: usize, dirs: &[Direction]) -> Result<DMatrix<f64>> {
    let mut eval = BasisEval::new(order)?;
    let k = coeff_count(order);
    let mut m = DMatrix::zeros(dirs.len(), k);
    let mut row = vec![0.0; k];
    for (i, d) in dirs.iter().enumerate() {
        eval.row_into(d, &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// A band-limited function on the sphere, stored as basis coefficients in the
/// flat layout documented at the module level. All coefficients are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ShVec {
    order: usize,
    coeffs: Vec<f64>,
}

impl ShVec {
    pub fn new(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::invalid_input(format!(
                "band limit must be even, got {order}"
            )));
        }
        let expect = coeff_count(order);
        if coeffs.len() != expect {
            return Err(Error::invalid_input(format!(
                "band limit {order} needs {expect} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(
                "harmonic coefficient vector".to_string(),
            ));
        }
        Ok(ShVec { order, coeffs })
    }

    pub fn zeros(order: usize) -> Result<Self> {
        ShVec::new(order, vec![0.0; coeff_count(order)])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficient of the `(l, m)` basis function, if within the band limit.
    pub fn coeff(&self, l: usize, m: i64) -> Option<f64> {
        if l % 2 != 0 || l > self.order || m.unsigned_abs() as usize > l {
            return None;
        }
        Some(self.coeffs[coeff_index(l, m)])
    }

    /// Total squared-coefficient energy (equals the L2 norm of the function
    /// squared, by orthonormality).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// Energy in degrees `l >= 2`, i.e. everything but the constant term.
    pub fn anisotropic_energy(&self) -> f64 {
        self.coeffs[1..].iter().map(|c| c * c).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &ShVec, s: f64) -> Result<()> {
        if other.order != self.order {
            return Err(Error::invalid_input(format!(
                "band limit mismatch: {} vs {}",
                self.order, other.order
            )));
        }
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
        Ok(())
    }
}

/// Precomputed least-squares fit of basis coefficients from directional
/// samples. Construction validates sampling density and conditioning once;
/// [`ShFitter::fit`] then runs a single matrix-vector product per voxel.
pub struct ShFitter {
    order: usize,
    n_dirs: usize,
    pinv: DMatrix<f64>,
    condition: f64,
}

impl ShFitter {
    pub fn new(order: usize, dirs: &[Direction]) -> Result<Self> {
        let k = coeff_count(order);
        if dirs.len() < k {
            return Err(Error::invalid_input(format!(
                "band limit {order} needs at least {k} sample directions, got {}",
                dirs.len()
            )));
        }
        let design = design_matrix(order, dirs)?;
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = smax / smin;
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::IllConditioned(format!(
                "design matrix condition number {condition:.3e} exceeds {CONDITION_LIMIT:e}; \
                 sample directions are too clustered for band limit {order}"
            )));
        }
        let u = svd.u.as_ref().expect("svd with u");
        let v_t = svd.v_t.as_ref().expect("svd with v_t");
        // pinv = V S^-1 U^T
        let mut sinv_ut = u.transpose();
        for (i, mut row) in sinv_ut.row_iter_mut().enumerate() {
            row *= 1.0 / svd.singular_values[i];
        }
        let pinv = v_t.transpose() * sinv_ut;
        Ok(ShFitter {
            order,
            n_dirs: dirs.len(),
            pinv,
            condition,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    /// Ratio of largest to smallest singular value of the design matrix.
    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Least-squares coefficients for one sample vector (one value per
    /// direction passed at construction).
    pub fn fit(&self, values: &[f64]) -> Result<ShVec> {
        if values.len() != self.n_dirs {
            return Err(Error::invalid_input(format!(
                "expected {} samples, got {}",
                self.n_dirs,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("directional samples".to_string()));
        }
        let rhs = DVector::from_column_slice(values);
        let coeffs = &self.pinv * rhs;
        ShVec::new(self.order, coeffs.data.into())
    }
}

/// One-shot least-squares fit; see [`ShFitter`] for the amortized variant.
pub fn fit_sh(dirs: &[Direction], values: &[f64], order: usize) -> Result<ShVec> {
    ShFitter::new(order, dirs)?.fit(values)
}

/// Evaluates the band-limited function at each direction.
pub fn eval_sh(v: &ShVec, dirs: &[Direction]) -> Vec<f64> {
    let mut eval = BasisEval::new(v.order()).expect("ShVec order is valid");
    let k = coeff_count(v.order());
    let mut row = vec![0.0; k];
    dirs.iter()
        .map(|d| {
            eval.row_into(d, &mut row);
            row.iter().zip(v.coeffs()).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Dense grid + pseudoinverse reused by every [`rotate_sh`] call of a given
/// band limit.
struct RotateGrid {
    dirs: Vec<Direction>,
    pinv: DMatrix<f64>,
}

fn rotate_grid(order: usize) -> Arc<RotateGrid> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<RotateGrid>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("rotate grid cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| {
            // 724 points keep the order-10 fit condition number < 2; higher
            // band limits scale the grid to stay oversampled ~8x.
            let n = 724.max(8 * coeff_count(order));
            let dirs = fibonacci_directions(n);
            let fitter =
                ShFitter::new(order, &dirs).expect("dense quasi-uniform grid is well conditioned");
            Arc::new(RotateGrid {
                dirs,
                pinv: fitter.pinv,
            })
        })
        .clone()
}

/// Rotates a band-limited function: the result `g` satisfies
/// `g(u) = f(R^-1 u)`.
///
/// Implemented by resampling on a dense quasi-uniform grid and refitting.
/// Rotation maps each degree-`l` subspace onto itself, so the rotated function
/// is band-limited at the same order and the refit is exact up to the
/// conditioning of the dense grid (no truncation error).
pub fn rotate_sh(v: &ShVec, r: &Rotation3) -> ShVec {
    let grid = rotate_grid(v.order());
    let r_inv = r.inverse();
    let pre_images: Vec<Direction> = grid.dirs.iter().map(|d| r_inv.apply(*d)).collect();
    let samples = eval_sh(v, &pre_images);
    let rhs = DVector::from_vec(samples);
    let coeffs = &grid.pinv * rhs;
    ShVec::new(v.order(), coeffs.data.into()).expect("rotation preserves finiteness")
}

/// Coefficients of a unit-mass delta peak at `d`, band-limited at `order`:
/// the projection of the delta distribution onto each basis function, which is
/// simply the basis row at `d`.
pub fn delta_fod(d: &Direction, order: usize) -> Result<ShVec> {
    ShVec::new(order, basis_row(order, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::sphere_product_quadrature;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shvec(order: usize, rng: &mut impl Rng) -> ShVec {
        let coeffs: Vec<f64> = (0..coeff_count(order))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ShVec::new(order, coeffs).unwrap()
    }

    #[test]
    fn layout_constants() {
        assert_eq!(coeff_count(0), 1);
        assert_eq!(coeff_count(8), 45);
        assert_eq!(coeff_count(10), 66);
        assert_eq!(
            [0, 2, 4, 6, 8, 10].map(degree_offset),
            [0, 1, 6, 15, 28, 45]
        );
        // Indices within a degree are contiguous and end where the next starts.
        assert_eq!(coeff_index(2, -2), 1);
        assert_eq!(coeff_index(2, 2), 5);
        assert_eq!(coeff_index(4, -4), 6);
        assert_eq!(coeff_index(10, 10), 65);
        let table = degree_table(10);
        assert_eq!(table.len(), 66);
        assert_eq!(table[0], 0);
        assert_eq!(table[1], 2);
        assert_eq!(table[45], 10);
    }

    #[test]
    fn closed_form_values() {
        let inv_sqrt_4pi = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
        let row = basis_row(4, &Direction::Z).unwrap();
        assert_relative_eq!(row[0], inv_sqrt_4pi, epsilon = 1e-14);
        // At the pole only m = 0 terms survive; P_l(1) = 1.
        assert_relative_eq!(
            row[coeff_index(2, 0)],
            (5.0 / (4.0 * std::f64::consts::PI)).sqrt(),
            epsilon = 1e-14
        );
        for m in [-2i64, -1, 1, 2] {
            assert_relative_eq!(row[coeff_index(2, m)], 0.0, epsilon = 1e-14);
        }
        // On the equator at phi = 0: the (2, 0) function is
        // sqrt(5/4pi) P_2(0) = -1/2 sqrt(5/4pi), and (2, 2) is
        // 1/4 sqrt(15/pi).
        let row = basis_row(2, &Direction::X).unwrap();
        assert_relative_eq!(
            row[coeff_index(2, 0)],
            -0.5 * (5.0 / (4.0 * std::f64::consts::PI)).sqrt(),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            row[coeff_index(2, 2)],
            0.25 * (15.0 / std::f64::consts::PI).sqrt(),
            epsilon = 1e-14
        );
        // sin-terms vanish at phi = 0.
        assert_relative_eq!(row[coeff_index(2, -1)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(row[coeff_index(2, -2)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn basis_is_orthonormal_under_exact_quadrature() {
        // Degree-20 integrands: 12 polar Gauss nodes (exact through 23) and
        // 25 azimuthal nodes (exact through trig degree 24).
        let quad = sphere_product_quadrature(12, 25);
        let order = 10;
        let k = coeff_count(order);
        let mut eval = BasisEval::new(order).unwrap();
        let mut rows = Vec::with_capacity(quad.points.len());
        for p in &quad.points {
            let mut row = vec![0.0; k];
            eval.row_into(p, &mut row);
            rows.push(row);
        }
        for a in 0..k {
            for b in a..k {
                let g: f64 = rows
                    .iter()
                    .zip(&quad.weights)
                    .map(|(r, w)| w * r[a] * r[b])
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (g - expect).abs() < 1e-12,
                    "gram[{a}][{b}] = {g}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn parseval_energy_matches_surface_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let quad = sphere_product_quadrature(12, 25);
        for _ in 0..5 {
            let v = random_shvec(10, &mut rng);
            let vals = eval_sh(&v, &quad.points);
            let integral: f64 = vals.iter().zip(&quad.weights).map(|(f, w)| w * f * f).sum();
            assert_relative_eq!(integral, v.energy(), epsilon = 1e-11);
        }
    }

    #[test]
    fn fit_recovers_synthesized_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dirs = fibonacci_directions(96);
        let fitter = ShFitter::new(8, &dirs).unwrap();
        assert!(
            fitter.condition_number() < 10.0,
            "96-point spiral should be well conditioned, got {}",
            fitter.condition_number()
        );
        for _ in 0..20 {
            let v = random_shvec(8, &mut rng);
            let samples = eval_sh(&v, &dirs);
            let back = fitter.fit(&samples).unwrap();
            for (a, b) in back.coeffs().iter().zip(v.coeffs()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fit_rejects_undersampled_and_clustered_schemes() {
        let dirs = fibonacci_directions(44);
        assert!(matches!(
            ShFitter::new(8, &dirs),
            Err(Error::InvalidInput(_))
        ));
        // 60 directions inside a ~1 degree cap: hopeless conditioning.
        let clustered: Vec<Direction> = (0..60)
            .map(|i| {
                let t = 1e-2 * (i as f64 / 60.0);
                let phi = 2.399963 * i as f64;
                Direction::normalized(t * phi.cos(), t * phi.sin(), 1.0).unwrap()
            })
            .collect();
        assert!(matches!(
            ShFitter::new(8, &clustered),
            Err(Error::IllConditioned(_))
        ));
        // Non-finite samples are rejected.
        let fitter = ShFitter::new(8, &fibonacci_directions(96)).unwrap();
        let mut vals = vec![0.0; 96];
        vals[3] = f64::NAN;
        assert!(matches!(fitter.fit(&vals), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rotation_matches_point_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for order in [2usize, 8, 10] {
            let v = random_shvec(order, &mut rng);
            let r = Rotation3::random(&mut rng);
            let g = rotate_sh(&v, &r);
            assert_eq!(g.order(), order);
            for _ in 0..40 {
                let u = Direction::random(&mut rng);
                let lhs = eval_sh(&g, &[r.apply(u)])[0];
                let rhs = eval_sh(&v, &[u])[0];
                assert!(
                    (lhs - rhs).abs() < 1e-9,
                    "g(Ru) = {lhs} but f(u) = {rhs} at order {order}"
                );
            }
        }
    }

    #[test]
    fn rotation_preserves_per_degree_energy_and_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let v = random_shvec(10, &mut rng);
        let r1 = Rotation3::random(&mut rng);
        let r2 = Rotation3::random(&mut rng);
        let g1 = rotate_sh(&v, &r1);
        let table = degree_table(10);
        for l in [0usize, 2, 4, 6, 8, 10] {
            let energy = |x: &ShVec| -> f64 {
                x.coeffs()
                    .iter()
                    .zip(&table)
                    .filter(|(_, d)| **d == l)
                    .map(|(c, _)| c * c)
                    .sum()
            };
            assert_relative_eq!(energy(&g1), energy(&v), epsilon = 1e-10);
        }
        let lhs = rotate_sh(&g1, &r2);
        let rhs = rotate_sh(&v, &r2.compose(&r1));
        for (a, b) in lhs.coeffs().iter().zip(rhs.coeffs()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Identity rotation is a no-op up to refit precision.
        let id = rotate_sh(&v, &Rotation3::identity());
        for (a, b) in id.coeffs().iter().zip(v.coeffs()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn delta_peak_matches_legendre_addition_theorem() {
        // For a delta at d, the band-limited function evaluates at u to
        // sum over even l of (2l + 1) / (4 pi) P_l(d . u).
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let four_pi = 4.0 * std::f64::consts::PI;
        for order in [4usize, 8, 10] {
            let d = Direction::random(&mut rng);
            let delta = delta_fod(&d, order).unwrap();
            for _ in 0..50 {
                let u = Direction::random(&mut rng);
                let got = eval_sh(&delta, &[u])[0];
                let want: f64 = (0..=order)
                    .step_by(2)
                    .map(|l| (2 * l + 1) as f64 / four_pi * legendre_p(l, d.dot(&u)))
                    .sum();
                assert!(
                    (got - want).abs() < 1e-10,
                    "order {order}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn delta_peak_is_maximal_at_its_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = Direction::random(&mut rng);
        let delta = delta_fod(&d, 10).unwrap();
        let at_peak = eval_sh(&delta, &[d])[0];
        for _ in 0..500 {
            let u = Direction::random(&mut rng);
            let v = eval_sh(&delta, &[u])[0];
            assert!(v <= at_peak + 1e-12);
        }
    }

    #[test]
    fn shvec_validates() {
        assert!(ShVec::new(8, vec![0.0; 45]).is_ok());
        assert!(ShVec::new(8, vec![0.0; 44]).is_err());
        assert!(ShVec::new(7, vec![0.0; 36]).is_err());
        let mut c = vec![0.0; 45];
        c[0] = f64::INFINITY;
        assert!(ShVec::new(8, c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fit_round_trip_is_exact_for_band_limited_inputs(
            seed in 0u64..1_000_000,
            order in prop::sample::select(vec![0usize, 2, 4, 8]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs = fibonacci_directions(96);
            let v = random_shvec(order, &mut rng);
            let samples = eval_sh(&v, &dirs);
            let back = fit_sh(&dirs, &samples, order).unwrap();
            for (a, b) in back.coeffs().iter().zip(v.coeffs()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn rotation_preserves_total_energy(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_shvec(8, &mut rng);
            let r = Rotation3::random(&mut rng);
            let g = rotate_sh(&v, &r);
            prop_assert!((g.energy() - v.energy()).abs() < 1e-9 * (1.0 + v.energy()));
        }
    }
}
