//! Unit vectors, rotations, and point sets on the sphere.
//!
//! Everything downstream (harmonic fitting, phantom simulation, deconvolution)
//! works with [`Direction`] values that are unit-norm by construction, so the
//! norm check happens once at the boundary instead of inside every kernel.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance on `|v| - 1` accepted by [`Direction::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A unit vector in R^3. The constructor enforces unit norm, so holders of a
/// `Direction` may assume `x^2 + y^2 + z^2 = 1` to within [`UNIT_NORM_TOL`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction {
    x: f64,
    y: f64,
    z: f64,
}

impl Direction {
    /// Wraps a vector that is already unit norm (within [`UNIT_NORM_TOL`]).
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::NonFinite(format!(
                "direction components ({x}, {y}, {z})"
            )));
        }
        let norm = (x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid_input(format!(
                "direction ({x}, {y}, {z}) has norm {norm}, expected 1 within {UNIT_NORM_TOL:e}"
            )));
        }
        Ok(Direction { x, y, z })
    }

    /// Normalizes an arbitrary non-zero vector into a direction.
    pub fn normalized(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::NonFinite(format!(
                "direction components ({x}, {y}, {z})"
            )));
        }
        let norm = (x * x + y * y + z * z).sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid_input(
                "cannot normalize a (near-)zero vector into a direction".to_string(),
            ));
        }
        Ok(Direction {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// The antipodal direction.
    pub fn flipped(&self) -> Direction {
        Direction {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Angle in radians between two directions, in `[0, pi]`.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// Angle in radians treating `d` and `-d` as the same axis, in `[0, pi/2]`.
    pub fn axis_angle_to(&self, other: &Direction) -> f64 {
        self.dot(other).abs().clamp(0.0, 1.0).acos()
    }

    /// Euclidean distance to another direction. For small separations this is
    /// numerically much sharper than [`Direction::angle_to`], whose `acos`
    /// bottoms out around 1e-8.
    pub fn distance_to(&self, other: &Direction) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Draws a direction uniformly on the sphere.
    pub fn random(rng: &mut impl Rng) -> Direction {
        loop {
            let x: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            let z: f64 = StandardNormal.sample(rng);
            let norm = (x * x + y * y + z * z).sqrt();
            if norm > 1e-6 {
                return Direction {
                    x: x / norm,
                    y: y / norm,
                    z: z / norm,
                };
            }
        }
    }

    pub const Z: Direction = Direction {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };
    pub const X: Direction = Direction {
        x: 1.0,
        y: 0.0,
        z: 0.0,
    };
    pub const Y: Direction = Direction {
        x: 0.0,
        y: 1.0,
        z: 0.0,
    };
}

/// Tolerance on orthonormality accepted by [`Rotation3::from_matrix`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A proper rotation of R^3, stored as a row-major 3x3 matrix. The constructor
/// enforces `R^T R = I` (within [`ORTHONORMAL_TOL`]) and `det R > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3 {
    m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates and wraps a row-major matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        for row in &m {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite("rotation matrix entry".to_string()));
                }
            }
        }
        // R^T R == I check, entry by entry.
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += m[k][i] * m[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (s - expect).abs() > ORTHONORMAL_TOL {
                    return Err(Error::invalid_input(format!(
                        "matrix is not orthonormal: (R^T R)[{i}][{j}] = {s}"
                    )));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det <= 0.0 {
            return Err(Error::invalid_input(format!(
                "matrix has determinant {det}, expected a proper rotation (det = +1)"
            )));
        }
        Ok(Rotation3 { m })
    }

    /// Rodrigues' formula.
    pub fn from_axis_angle(axis: Direction, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let [x, y, z] = axis.as_array();
        Rotation3 {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        }
    }

    /// Draws a rotation uniformly (Haar measure) via a random unit quaternion.
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let q: [f64; 4] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n < 1e-6 {
                continue;
            }
            let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            return Rotation3 {
                m: [
                    [
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y - w * z),
                        2.0 * (x * z + w * y),
                    ],
                    [
                        2.0 * (x * y + w * z),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z - w * x),
                    ],
                    [
                        2.0 * (x * z - w * y),
                        2.0 * (y * z + w * x),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                ],
            };
        }
    }

    /// The rotation taking `from` onto `to` along the shortest arc.
    pub fn between(from: Direction, to: Direction) -> Self {
        let c = from.dot(&to);
        if c > 1.0 - 1e-12 {
            return Rotation3::identity();
        }
        if c < -1.0 + 1e-12 {
            // Antipodal: rotate by pi around any axis orthogonal to `from`.
            let helper = if from.x().abs() < 0.9 {
                Direction::X
            } else {
                Direction::Y
            };
            let ax = from.as_array();
            let hx = helper.as_array();
            let cross = [
                ax[1] * hx[2] - ax[2] * hx[1],
                ax[2] * hx[0] - ax[0] * hx[2],
                ax[0] * hx[1] - ax[1] * hx[0],
            ];
            let axis = Direction::normalized(cross[0], cross[1], cross[2])
                .expect("cross product of non-parallel unit vectors is non-zero");
            return Rotation3::from_axis_angle(axis, std::f64::consts::PI);
        }
        let f = from.as_array();
        let t = to.as_array();
        let cross = [
            f[1] * t[2] - f[2] * t[1],
            f[2] * t[0] - f[0] * t[2],
            f[0] * t[1] - f[1] * t[0],
        ];
        let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let axis = Direction::normalized(cross[0], cross[1], cross[2])
            .expect("cross product is non-zero away from the parallel case");
        Rotation3::from_axis_angle(axis, s.atan2(c))
    }

    /// Applies the rotation. The result is renormalized to absorb the last-bit
    /// drift of the matrix product.
    pub fn apply(&self, d: Direction) -> Direction {
        let [x, y, z] = d.as_array();
        let rx = self.m[0][0] * x + self.m[0][1] * y + self.m[0][2] * z;
        let ry = self.m[1][0] * x + self.m[1][1] * y + self.m[1][2] * z;
        let rz = self.m[2][0] * x + self.m[2][1] * y + self.m[2][2] * z;
        Direction::normalized(rx, ry, rz).expect("rotation preserves norm")
    }

    /// Inverse rotation (matrix transpose).
    pub fn inverse(&self) -> Self {
        let m = &self.m;
        Rotation3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// `self . other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Rotation3) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Rotation3 { m }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }
}

/// Deterministic quasi-uniform point set: the golden-angle (Fibonacci) spiral.
///
/// Points are symmetric-free (no exact antipodal pairs) and cover the sphere
/// evenly enough that least-squares harmonic fits stay well conditioned from
/// a few dozen points upward.
pub fn fibonacci_directions(n: usize) -> Vec<Direction> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Direction::normalized(r * phi.cos(), r * phi.sin(), z)
                .expect("spiral points are unit norm")
        })
        .collect()
}

/// A quadrature rule on the sphere: `integral f dOmega ~= sum_i w_i f(p_i)`.
pub struct SphereQuadrature {
    pub points: Vec<Direction>,
    pub weights: Vec<f64>,
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre polynomial. Exact for
/// polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev-like initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n and P_n' by upward recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn_prev = if n == 1 { 1.0 } else { p0 };
            let deriv = n as f64 * (x * pn - pn_prev) / (x * x - 1.0);
            let dx = pn / deriv;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let pn_prev = if n == 1 { 1.0 } else { p0 };
        let deriv = n as f64 * (x * (if n == 1 { x } else { p1 }) - pn_prev) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        out.push((x, w));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Product quadrature on the sphere: Gauss-Legendre in `cos(theta)` times the
/// trapezoid rule in `phi`. Integrates spherical polynomials exactly when
/// `polar_n` Gauss nodes cover the polar degree (`2 * polar_n - 1`) and
/// `azimuth_n` equidistant azimuthal nodes cover the trigonometric degree
/// (`azimuth_n - 1`).
pub fn sphere_product_quadrature(polar_n: usize, azimuth_n: usize) -> SphereQuadrature {
    let nodes = gauss_legendre(polar_n);
    let dphi = 2.0 * std::f64::consts::PI / azimuth_n as f64;
    let mut points = Vec::with_capacity(polar_n * azimuth_n);
    let mut weights = Vec::with_capacity(polar_n * azimuth_n);
    for &(ct, w_ct) in &nodes {
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        for j in 0..azimuth_n {
            let phi = dphi * j as f64;
            points.push(
                Direction::normalized(st * phi.cos(), st * phi.sin(), ct)
                    .expect("quadrature points are unit norm"),
            );
            weights.push(w_ct * dphi);
        }
    }
    SphereQuadrature { points, weights }
}
