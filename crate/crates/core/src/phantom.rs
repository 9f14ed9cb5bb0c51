//! Synthetic diffusion phantoms: multi-tensor voxels, scanner profiles with
//! Rician noise, and paired/labeled dataset generation.
//!
//! A voxel is a mixture of axially symmetric tensor compartments. Its
//! noise-free signal along gradient `g` at b-value `b` is
//!
//! ```text
//! S(g) = gain * sum_k f_k * exp(-b * (radial_k + (axial_k - radial_k) (g . d_k)^2))
//! ```
//!
//! and the ground-truth fiber orientation distribution is the
//! fraction-weighted sum of band-limited delta peaks at the compartment
//! directions, normalized to unit energy outside the constant term.
//!
//! Rician noise models magnitude images: `S' = sqrt((S + n1)^2 + n2^2)` with
//! `n1, n2 ~ N(0, sigma^2)`. `sigma = 0` is exactly the identity (no RNG
//! draws), so noiseless runs are bit-deterministic regardless of draw order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{delta_fod, ShFitter, ShVec};
use crate::sphere::{fibonacci_directions, Direction, Rotation3};

/// Band limit used for signal coefficient vectors (45 coefficients).
pub const DEFAULT_SIGNAL_ORDER: usize = 8;
/// Band limit used for fiber-distribution coefficient vectors (66).
pub const DEFAULT_FOD_ORDER: usize = 10;
/// Default axial diffusivity in mm^2/s.
pub const DEFAULT_AXIAL: f64 = 1.7e-3;
/// Default radial diffusivity in mm^2/s.
pub const DEFAULT_RADIAL: f64 = 0.3e-3;
/// Default b-value in s/mm^2.
pub const DEFAULT_B_VALUE: f64 = 2000.0;

/// Seed mixing (splitmix64) so that every voxel gets an independent,
/// reproducible RNG stream. Serial and batched generation therefore produce
/// identical datasets.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A diffusion gradient sampling scheme: directions plus one shared b-value.
#[derive(Clone, Debug)]
pub struct GradientScheme {
    directions: Vec<Direction>,
    b_value: f64,
}

impl GradientScheme {
    pub fn new(directions: Vec<Direction>, b_value: f64) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::invalid_input("gradient scheme has no directions"));
        }
        if !(b_value.is_finite() && b_value > 0.0) {
            return Err(Error::invalid_input(format!(
                "b-value must be positive and finite, got {b_value}"
            )));
        }
        Ok(GradientScheme {
            directions,
            b_value,
        })
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn b_value(&self) -> f64 {
        self.b_value
    }
}

/// One axially symmetric tensor compartment of a voxel.
#[derive(Clone, Copy, Debug)]
pub struct TensorCompartment {
    pub direction: Direction,
    /// Diffusivity along the axis, mm^2/s.
    pub axial: f64,
    /// Diffusivity across the axis, mm^2/s.
    pub radial: f64,
    /// Volume fraction in (0, 1].
    pub fraction: f64,
}

impl TensorCompartment {
    pub fn new(direction: Direction, axial: f64, radial: f64, fraction: f64) -> Result<Self> {
        if !(axial.is_finite() && radial.is_finite() && axial >= radial && radial > 0.0) {
            return Err(Error::invalid_input(format!(
                "diffusivities must satisfy axial >= radial > 0, got axial={axial}, radial={radial}"
            )));
        }
        if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid_input(format!(
                "volume fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(TensorCompartment {
            direction,
            axial,
            radial,
            fraction,
        })
    }
}

/// A voxel: tensor compartments whose fractions sum to one, plus the derived
/// ground-truth fiber distribution (unit energy outside the constant term).
#[derive(Clone, Debug)]
pub struct VoxelPhantom {
    compartments: Vec<TensorCompartment>,
    truth: ShVec,
}

impl VoxelPhantom {
    pub fn new(compartments: Vec<TensorCompartment>, fod_order: usize) -> Result<Self> {
        if compartments.is_empty() {
            return Err(Error::invalid_input("voxel needs at least one compartment"));
        }
        let total: f64 = compartments.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_input(format!(
                "volume fractions must sum to 1, got {total}"
            )));
        }
        let mut truth = ShVec::zeros(fod_order)?;
        for c in &compartments {
            truth.add_scaled(&delta_fod(&c.direction, fod_order)?, c.fraction)?;
        }
        let energy = truth.anisotropic_energy();
        if energy <= 0.0 {
            return Err(Error::invalid_input(
                "truth fiber distribution has no energy outside the constant term",
            ));
        }
        truth.scale(1.0 / energy.sqrt());
        Ok(VoxelPhantom {
            compartments,
            truth,
        })
    }

    pub fn compartments(&self) -> &[TensorCompartment] {
        &self.compartments
    }

    /// Ground-truth fiber distribution, unit energy in degrees `l >= 2`.
    pub fn truth_fod(&self) -> &ShVec {
        &self.truth
    }

    /// The same voxel with every compartment direction rotated. The truth
    /// distribution is rebuilt from the rotated delta peaks, which is exact.
    pub fn rotated(&self, r: &Rotation3) -> VoxelPhantom {
        let comps: Vec<TensorCompartment> = self
            .compartments
            .iter()
            .map(|c| TensorCompartment {
                direction: r.apply(c.direction),
                ..*c
            })
            .collect();
        VoxelPhantom::new(comps, self.truth.order()).expect("rotation preserves validity")
    }
}

/// An acquisition profile: a gradient scheme (optionally rotated as a block),
/// a Rician noise level, and a multiplicative scanner gain.
#[derive(Clone, Debug)]
pub struct ScannerProfile {
    scheme: GradientScheme,
    rotation: Rotation3,
    sigma: f64,
    gain: f64,
}

impl ScannerProfile {
    pub fn new(
        scheme: GradientScheme,
        rotation: Rotation3,
        sigma: f64,
        gain: f64,
    ) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid_input(format!(
                "noise level must be >= 0, got {sigma}"
            )));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::invalid_input(format!(
                "scanner gain must be positive, got {gain}"
            )));
        }
        Ok(ScannerProfile {
            scheme,
            rotation,
            sigma,
            gain,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn b_value(&self) -> f64 {
        self.scheme.b_value()
    }

    /// Scheme directions after the profile's block rotation; the signal is
    /// simulated and fitted along these.
    pub fn effective_directions(&self) -> Vec<Direction> {
        self.scheme
            .directions()
            .iter()
            .map(|d| self.rotation.apply(*d))
            .collect()
    }

    /// Least-squares fitter on the effective directions.
    pub fn fitter(&self, order: usize) -> Result<ShFitter> {
        ShFitter::new(order, &self.effective_directions())
    }
}

/// Serializable description of a [`ScannerProfile`] on a Fibonacci-spiral
/// scheme. `rotation_seed = 0` means no rotation; any other value seeds a
/// random block rotation of the scheme.
///
/// Deserializes from either the field map or the compact
/// `dirs=96,b=2000,sigma=0.02,gain=1,rot=0` string used on the command line,
/// so configuration files can use whichever reads better.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSpec {
    pub n_dirs: usize,
    pub b_value: f64,
    pub sigma: f64,
    pub gain: f64,
    pub rotation_seed: u64,
}

impl<'de> Deserialize<'de> for ProfileSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Compact(String),
            Fields {
                n_dirs: usize,
                b_value: f64,
                sigma: f64,
                gain: f64,
                rotation_seed: u64,
            },
        }
        match Repr::deserialize(deserializer)? {
            Repr::Compact(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Fields {
                n_dirs,
                b_value,
                sigma,
                gain,
                rotation_seed,
            } => Ok(ProfileSpec {
                n_dirs,
                b_value,
                sigma,
                gain,
                rotation_seed,
            }),
        }
    }
}

impl ProfileSpec {
    pub fn build(&self) -> Result<ScannerProfile> {
        let scheme = GradientScheme::new(fibonacci_directions(self.n_dirs), self.b_value)?;
        let rotation = if self.rotation_seed == 0 {
            Rotation3::identity()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rotation_seed);
            Rotation3::random(&mut rng)
        };
        ScannerProfile::new(scheme, rotation, self.sigma, self.gain)
    }
}

impl std::fmt::Display for ProfileSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "dirs={},b={},sigma={},gain={},rot={}",
            self.n_dirs, self.b_value, self.sigma, self.gain, self.rotation_seed
        )
    }
}

impl std::str::FromStr for ProfileSpec {
    type Err = Error;

    /// Parses `dirs=96,b=2000,sigma=0.02,gain=1,rot=0` (any key order, all
    /// keys required).
    fn from_str(s: &str) -> Result<Self> {
        let mut n_dirs = None;
        let mut b_value = None;
        let mut sigma = None;
        let mut gain = None;
        let mut rot = None;
        for part in s.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::invalid_input(format!("profile field `{part}` is not key=value"))
            })?;
            let bad = |e: std::num::ParseFloatError| {
                Error::invalid_input(format!("profile field `{key}`: {e}"))
            };
            match key.trim() {
                "dirs" => {
                    n_dirs = Some(value.trim().parse::<usize>().map_err(|e| {
                        Error::invalid_input(format!("profile field `dirs`: {e}"))
                    })?)
                }
                "b" => b_value = Some(value.trim().parse::<f64>().map_err(bad)?),
                "sigma" => sigma = Some(value.trim().parse::<f64>().map_err(bad)?),
                "gain" => gain = Some(value.trim().parse::<f64>().map_err(bad)?),
                "rot" => {
                    rot = Some(value.trim().parse::<u64>().map_err(|e| {
                        Error::invalid_input(format!("profile field `rot`: {e}"))
                    })?)
                }
                other => {
                    return Err(Error::invalid_input(format!(
                        "unknown profile field `{other}`"
                    )))
                }
            }
        }
        let missing = |name: &str| Error::invalid_input(format!("profile is missing `{name}`"));
        Ok(ProfileSpec {
            n_dirs: n_dirs.ok_or_else(|| missing("dirs"))?,
            b_value: b_value.ok_or_else(|| missing("b"))?,
            sigma: sigma.ok_or_else(|| missing("sigma"))?,
            gain: gain.ok_or_else(|| missing("gain"))?,
            rotation_seed: rot.ok_or_else(|| missing("rot"))?,
        })
    }
}

/// Noise-free attenuation of the phantom along one (already rotated) gradient
/// direction, before gain.
fn attenuation(phantom: &VoxelPhantom, b: f64, g: &Direction) -> f64 {
    phantom
        .compartments()
        .iter()
        .map(|c| {
            let t = g.dot(&c.direction);
            c.fraction * (-b * (c.radial + (c.axial - c.radial) * t * t)).exp()
        })
        .sum()
}

/// Simulates the signal of `phantom` under `profile`, one value per effective
/// direction. With `sigma > 0` each value receives Rician noise (two normal
/// draws per direction, in direction order); with `sigma = 0` no draws occur.
pub fn simulate_signal(
    phantom: &VoxelPhantom,
    profile: &ScannerProfile,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let b = profile.b_value();
    let dirs = profile.effective_directions();
    dirs.iter()
        .map(|g| {
            let s = profile.gain() * attenuation(phantom, b, g);
            if profile.sigma() > 0.0 {
                let n1: f64 = StandardNormal.sample(rng);
                let n2: f64 = StandardNormal.sample(rng);
                let re = s + profile.sigma() * n1;
                let im = profile.sigma() * n2;
                (re * re + im * im).sqrt()
            } else {
                s
            }
        })
        .collect()
}

/// Random fiber-configuration distribution for dataset voxels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiberMix {
    /// Probability of a two-fiber crossing (otherwise single fiber).
    pub two_fiber_prob: f64,
    /// Minimum crossing angle between the two fiber axes, degrees.
    pub min_crossing_deg: f64,
    /// First-fiber volume fraction is drawn uniformly from
    /// `[fraction_low, 1 - fraction_low]`.
    pub fraction_low: f64,
}

impl Default for FiberMix {
    fn default() -> Self {
        FiberMix {
            two_fiber_prob: 0.5,
            min_crossing_deg: 30.0,
            fraction_low: 0.3,
        }
    }
}

impl FiberMix {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.two_fiber_prob) {
            return Err(Error::invalid_config(format!(
                "two_fiber_prob must lie in [0, 1], got {}",
                self.two_fiber_prob
            )));
        }
        if !(0.0..90.0).contains(&self.min_crossing_deg) {
            return Err(Error::invalid_config(format!(
                "min_crossing_deg must lie in [0, 90), got {}",
                self.min_crossing_deg
            )));
        }
        if !(self.fraction_low > 0.0 && self.fraction_low <= 0.5) {
            return Err(Error::invalid_config(format!(
                "fraction_low must lie in (0, 0.5], got {}",
                self.fraction_low
            )));
        }
        Ok(())
    }

    /// Draws one voxel configuration.
    fn draw(&self, tensor: &TensorShape, rng: &mut impl Rng) -> Vec<TensorCompartment> {
        let two = rng.random_bool(self.two_fiber_prob);
        let d1 = Direction::random(rng);
        if !two {
            return vec![
                TensorCompartment::new(d1, tensor.axial, tensor.radial, 1.0)
                    .expect("valid single compartment"),
            ];
        }
        let min_rad = self.min_crossing_deg.to_radians();
        let d2 = loop {
            let cand = Direction::random(rng);
            if d1.axis_angle_to(&cand) >= min_rad {
                break cand;
            }
        };
        let f1 = rng.random_range(self.fraction_low..=(1.0 - self.fraction_low));
        vec![
            TensorCompartment::new(d1, tensor.axial, tensor.radial, f1).expect("valid"),
            TensorCompartment::new(d2, tensor.axial, tensor.radial, 1.0 - f1).expect("valid"),
        ]
    }
}

/// Shared per-compartment diffusivities.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TensorShape {
    pub axial: f64,
    pub radial: f64,
}

impl Default for TensorShape {
    fn default() -> Self {
        TensorShape {
            axial: DEFAULT_AXIAL,
            radial: DEFAULT_RADIAL,
        }
    }
}

/// Size and composition of one generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Labeled voxels: signal coefficients plus ground-truth distribution.
    pub n_labeled: usize,
    /// Paired voxels: the same voxel acquired under two profiles.
    pub n_paired: usize,
    /// Extra random whole-voxel rotations appended per base voxel
    /// (`n_rotations = r` turns each base voxel into `r + 1` entries).
    pub n_rotations: usize,
    pub fiber: FiberMix,
    pub tensor: TensorShape,
    /// Band limit of signal coefficient vectors.
    pub order_in: usize,
    /// Band limit of truth coefficient vectors.
    pub order_out: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_labeled: 0,
            n_paired: 0,
            n_rotations: 0,
            fiber: FiberMix::default(),
            tensor: TensorShape::default(),
            order_in: DEFAULT_SIGNAL_ORDER,
            order_out: DEFAULT_FOD_ORDER,
        }
    }
}

/// A labeled example: signal coefficients and the ground-truth distribution.
#[derive(Clone, Debug)]
pub struct LabeledVoxel {
    pub signal: ShVec,
    pub truth: ShVec,
}

/// The same voxel acquired under two different profiles.
#[derive(Clone, Debug)]
pub struct PairedVoxel {
    pub a: ShVec,
    pub b: ShVec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub profile_truth: ProfileSpec,
    pub profile_a: ProfileSpec,
    pub profile_b: ProfileSpec,
}

/// An in-memory dataset; see [`make_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labeled: Vec<LabeledVoxel>,
    pub paired: Vec<PairedVoxel>,
    pub provenance: DatasetProvenance,
}

/// Generates a dataset.
///
/// Labeled voxels are simulated under `profile_truth` and paired voxels under
/// (`profile_a`, `profile_b`), each with its own random fiber configuration
/// drawn from `spec.fiber`. Every base voxel is expanded with
/// `spec.n_rotations` extra random whole-voxel rotations (entry 0 keeps the
/// original orientation); pools are truncated to the exact requested counts.
///
/// Each base voxel consumes its own RNG stream derived from `seed`
/// (configuration first, then its rotations, then noise in entry order with
/// profile `a` before `b`), so generation order cannot change the output and
/// distinct seeds give independent datasets.
pub fn make_dataset(
    spec: &DatasetSpec,
    profile_truth: &ProfileSpec,
    profile_a: &ProfileSpec,
    profile_b: &ProfileSpec,
    seed: u64,
) -> Result<Dataset> {
    spec.fiber.validate()?;
    if spec.n_labeled == 0 && spec.n_paired == 0 {
        return Err(Error::invalid_config(
            "dataset would be empty: both n_labeled and n_paired are zero",
        ));
    }
    if !(spec.tensor.axial >= spec.tensor.radial && spec.tensor.radial > 0.0) {
        return Err(Error::invalid_config(format!(
            "tensor shape must satisfy axial >= radial > 0, got {:?}",
            spec.tensor
        )));
    }

    let truth_scanner = profile_truth.build()?;
    let scanner_a = profile_a.build()?;
    let scanner_b = profile_b.build()?;
    // Conditioning is validated once per scheme; per-voxel fits cannot fail.
    let truth_fitter = truth_scanner.fitter(spec.order_in)?;
    let a_fitter = scanner_a.fitter(spec.order_in)?;
    let b_fitter = scanner_b.fitter(spec.order_in)?;

    let per_base = spec.n_rotations + 1;
    let entries = |n: usize, pool_tag: u64, f: &mut dyn FnMut(&VoxelPhantom, &mut ChaCha8Rng)| {
        let n_base = n.div_ceil(per_base);
        let mut produced = 0usize;
        'outer: for base_idx in 0..n_base {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, (pool_tag << 48) | base_idx as u64));
            let comps = spec.fiber.draw(&spec.tensor, &mut rng);
            let base = VoxelPhantom::new(comps, spec.order_out).expect("drawn voxel is valid");
            let rotations: Vec<Rotation3> = (0..spec.n_rotations)
                .map(|_| Rotation3::random(&mut rng))
                .collect();
            for j in 0..per_base {
                let phantom = if j == 0 {
                    base.clone()
                } else {
                    base.rotated(&rotations[j - 1])
                };
                f(&phantom, &mut rng);
                produced += 1;
                if produced == n {
                    break 'outer;
                }
            }
        }
    };

    let mut labeled = Vec::with_capacity(spec.n_labeled);
    entries(spec.n_labeled, 1, &mut |phantom, rng| {
        let signal = simulate_signal(phantom, &truth_scanner, rng);
        let x = truth_fitter.fit(&signal).expect("validated fitter");
        labeled.push(LabeledVoxel {
            signal: x,
            truth: phantom.truth_fod().clone(),
        });
    });

    let mut paired = Vec::with_capacity(spec.n_paired);
    entries(spec.n_paired, 2, &mut |phantom, rng| {
        let sa = simulate_signal(phantom, &scanner_a, rng);
        let sb = simulate_signal(phantom, &scanner_b, rng);
        paired.push(PairedVoxel {
            a: a_fitter.fit(&sa).expect("validated fitter"),
            b: b_fitter.fit(&sb).expect("validated fitter"),
        });
    });

    Ok(Dataset {
        labeled,
        paired,
        provenance: DatasetProvenance {
            seed,
            profile_truth: profile_truth.clone(),
            profile_a: profile_a.clone(),
            profile_b: profile_b.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::{degree_table, eval_sh};
    use approx::assert_relative_eq;
    use rand::RngCore;

    fn spec_profile(sigma: f64, gain: f64, rot: u64) -> ProfileSpec {
        ProfileSpec {
            n_dirs: 96,
            b_value: DEFAULT_B_VALUE,
            sigma,
            gain,
            rotation_seed: rot,
        }
    }

    #[test]
    fn noiseless_signal_matches_closed_form() {
        let z = Direction::Z;
        let voxel = VoxelPhantom::new(
            vec![TensorCompartment::new(z, 1.7e-3, 0.3e-3, 1.0).unwrap()],
            10,
        )
        .unwrap();
        let scheme = GradientScheme::new(
            vec![Direction::Z, Direction::X, Direction::normalized(1.0, 0.0, 1.0).unwrap()],
            2000.0,
        )
        .unwrap();
        let profile = ScannerProfile::new(scheme, Rotation3::identity(), 0.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = simulate_signal(&voxel, &profile, &mut rng);
        // Along the fiber: gain * exp(-b * axial); orthogonal: exp(-b * radial).
        assert_relative_eq!(s[0], 2.0 * (-2000.0 * 1.7e-3f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(s[1], 2.0 * (-2000.0 * 0.3e-3f64).exp(), epsilon = 1e-15);
        let t: f64 = 0.5; // (g . d)^2 at 45 degrees
        assert_relative_eq!(
            s[2],
            2.0 * (-2000.0 * (0.3e-3 + 1.4e-3 * t)).exp(),
            epsilon = 1e-12
        );
        // sigma = 0 consumed no randomness.
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let pre: u64 = rng2.next_u64();
        let mut rng3 = ChaCha8Rng::seed_from_u64(0);
        simulate_signal(&voxel, &profile, &mut rng3);
        assert_eq!(rng3.next_u64(), pre);
    }

    #[test]
    fn rician_noise_has_expected_second_moment() {
        // E[(S')^2] = S^2 + 2 sigma^2 for Rician magnitude noise.
        let voxel = VoxelPhantom::new(
            vec![TensorCompartment::new(Direction::Z, 1.7e-3, 0.3e-3, 1.0).unwrap()],
            10,
        )
        .unwrap();
        let scheme = GradientScheme::new(vec![Direction::X], 2000.0).unwrap();
        let sigma = 0.05;
        let profile = ScannerProfile::new(scheme, Rotation3::identity(), sigma, 1.0).unwrap();
        let clean = (-2000.0 * 0.3e-3f64).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 200_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let s = simulate_signal(&voxel, &profile, &mut rng);
            sum_sq += s[0] * s[0];
        }
        let expect = clean * clean + 2.0 * sigma * sigma;
        assert_relative_eq!(sum_sq / n as f64, expect, epsilon = 3e-4);
        // Rician noise biases the mean upward.
        let mut sum = 0.0;
        for _ in 0..n {
            sum += simulate_signal(&voxel, &profile, &mut rng)[0];
        }
        assert!(sum / n as f64 > clean);
    }

    #[test]
    fn voxel_validates_fractions_and_normalizes_truth() {
        let d = Direction::Z;
        let bad = VoxelPhantom::new(
            vec![TensorCompartment::new(d, 1.7e-3, 0.3e-3, 0.6).unwrap()],
            10,
        );
        assert!(bad.is_err());
        let v = VoxelPhantom::new(
            vec![
                TensorCompartment::new(Direction::Z, 1.7e-3, 0.3e-3, 0.6).unwrap(),
                TensorCompartment::new(Direction::X, 1.7e-3, 0.3e-3, 0.4).unwrap(),
            ],
            10,
        )
        .unwrap();
        assert_relative_eq!(v.truth_fod().anisotropic_energy(), 1.0, epsilon = 1e-12);
        // The truth peaks where the dominant fiber points.
        let at_z = eval_sh(v.truth_fod(), &[Direction::Z])[0];
        let at_x = eval_sh(v.truth_fod(), &[Direction::X])[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let u = Direction::random(&mut rng);
            let val = eval_sh(v.truth_fod(), &[u])[0];
            assert!(val <= at_z + 1e-9);
        }
        assert!(at_z > at_x);
    }

    #[test]
    fn compartment_validation() {
        let d = Direction::Z;
        assert!(TensorCompartment::new(d, 0.3e-3, 1.7e-3, 1.0).is_err());
        assert!(TensorCompartment::new(d, 1.7e-3, 0.0, 1.0).is_err());
        assert!(TensorCompartment::new(d, 1.7e-3, 0.3e-3, 0.0).is_err());
        assert!(TensorCompartment::new(d, 1.7e-3, 0.3e-3, 1.5).is_err());
    }

    #[test]
    fn profile_spec_parses_and_round_trips() {
        let spec: ProfileSpec = "dirs=96,b=2000,sigma=0.02,gain=1.1,rot=7".parse().unwrap();
        assert_eq!(
            spec,
            ProfileSpec {
                n_dirs: 96,
                b_value: 2000.0,
                sigma: 0.02,
                gain: 1.1,
                rotation_seed: 7
            }
        );
        let display = spec.to_string();
        let back: ProfileSpec = display.parse().unwrap();
        assert_eq!(back, spec);
        assert!("dirs=96,b=2000".parse::<ProfileSpec>().is_err());
        assert!("dirs=96,b=2000,sigma=0,gain=1,rot=0,bogus=1"
            .parse::<ProfileSpec>()
            .is_err());
        // rot = 0 is the identity; same scheme, different rot differ.
        let p0 = spec_profile(0.0, 1.0, 0).build().unwrap();
        let p7 = spec_profile(0.0, 1.0, 7).build().unwrap();
        let d0 = p0.effective_directions();
        let d7 = p7.effective_directions();
        assert!(d0[0].distance_to(&fibonacci_directions(96)[0]) < 1e-15);
        assert!(d0[0].distance_to(&d7[0]) > 1e-3);
    }

    #[test]
    fn profile_spec_deserializes_from_string_or_field_map() {
        let spec = ProfileSpec {
            n_dirs: 64,
            b_value: 2000.0,
            sigma: 0.04,
            gain: 1.0,
            rotation_seed: 3,
        };
        let from_string: ProfileSpec =
            serde_json::from_str("\"dirs=64,b=2000,sigma=0.04,gain=1,rot=3\"").unwrap();
        assert_eq!(from_string, spec);
        // Serialize emits the field map; it must parse back unchanged.
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.starts_with('{'));
        let from_map: ProfileSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(from_map, spec);
        assert!(serde_json::from_str::<ProfileSpec>("\"dirs=64\"").is_err());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let spec = DatasetSpec {
            n_labeled: 23,
            n_paired: 10,
            n_rotations: 4,
            ..DatasetSpec::default()
        };
        let truth = spec_profile(0.0, 1.0, 0);
        let a = spec_profile(0.02, 1.0, 0);
        let b = spec_profile(0.04, 1.1, 5);
        let d1 = make_dataset(&spec, &truth, &a, &b, 99).unwrap();
        // Exact counts even when n is not a multiple of (rotations + 1).
        assert_eq!(d1.labeled.len(), 23);
        assert_eq!(d1.paired.len(), 10);
        assert_eq!(d1.labeled[0].signal.order(), 8);
        assert_eq!(d1.labeled[0].truth.order(), 10);

        let d2 = make_dataset(&spec, &truth, &a, &b, 99).unwrap();
        for (u, v) in d1.labeled.iter().zip(&d2.labeled) {
            assert_eq!(u.signal.coeffs(), v.signal.coeffs());
            assert_eq!(u.truth.coeffs(), v.truth.coeffs());
        }
        for (u, v) in d1.paired.iter().zip(&d2.paired) {
            assert_eq!(u.a.coeffs(), v.a.coeffs());
            assert_eq!(u.b.coeffs(), v.b.coeffs());
        }
        let d3 = make_dataset(&spec, &truth, &a, &b, 100).unwrap();
        assert_ne!(d1.labeled[0].signal.coeffs(), d3.labeled[0].signal.coeffs());
        // Empty spec is rejected.
        assert!(make_dataset(
            &DatasetSpec::default(),
            &truth,
            &a,
            &b,
            1
        )
        .is_err());
    }

    #[test]
    fn rotation_augmentation_preserves_per_degree_energy() {
        // Entries within one base-voxel block are whole-voxel rotations of
        // each other, so the noiseless signal's per-degree energies match.
        let spec = DatasetSpec {
            n_labeled: 5,
            n_paired: 0,
            n_rotations: 4,
            fiber: FiberMix {
                two_fiber_prob: 1.0,
                ..FiberMix::default()
            },
            ..DatasetSpec::default()
        };
        let truth = spec_profile(0.0, 1.0, 0);
        let a = spec_profile(0.0, 1.0, 0);
        let ds = make_dataset(&spec, &truth, &a, &a, 7).unwrap();
        let table = degree_table(8);
        let energy = |v: &ShVec, l: usize| -> f64 {
            v.coeffs()
                .iter()
                .zip(&table)
                .filter(|(_, d)| **d == l)
                .map(|(c, _)| c * c)
                .sum()
        };
        // The attenuation profile is not exactly band-limited at order 8, so
        // discrete refitting after rotation shifts energies by the (tiny)
        // truncation alias; a wrong rotation would move l = 2 energy by ~0.1.
        for entry in &ds.labeled[1..] {
            for l in [0usize, 2, 4, 6, 8] {
                let diff = (energy(&entry.signal, l) - energy(&ds.labeled[0].signal, l)).abs();
                assert!(diff < 1e-4, "degree {l} energy moved by {diff}");
            }
        }
    }

    #[test]
    fn truth_targets_have_unit_anisotropic_energy() {
        let spec = DatasetSpec {
            n_labeled: 40,
            n_paired: 0,
            ..DatasetSpec::default()
        };
        let p = spec_profile(0.0, 1.0, 0);
        let ds = make_dataset(&spec, &p, &p, &p, 3).unwrap();
        for v in &ds.labeled {
            assert_relative_eq!(v.truth.anisotropic_energy(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn paired_voxels_share_geometry_but_differ_in_acquisition() {
        // Noiseless identical profiles make the two sides equal; differing
        // gains scale one side.
        let spec = DatasetSpec {
            n_labeled: 0,
            n_paired: 6,
            ..DatasetSpec::default()
        };
        let t = spec_profile(0.0, 1.0, 0);
        let same = make_dataset(&spec, &t, &t, &t, 11).unwrap();
        for p in &same.paired {
            for (x, y) in p.a.coeffs().iter().zip(p.b.coeffs()) {
                assert_relative_eq!(x, y, epsilon = 1e-12);
            }
        }
        let gained = spec_profile(0.0, 2.5, 0);
        let scaled = make_dataset(&spec, &t, &t, &gained, 11).unwrap();
        for p in &scaled.paired {
            for (x, y) in p.a.coeffs().iter().zip(p.b.coeffs()) {
                assert_relative_eq!(2.5 * x, *y, epsilon = 1e-9);
            }
        }
    }
}
