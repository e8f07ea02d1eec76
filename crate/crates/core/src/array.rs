//! Uniform planar array geometry, the quantized receive codebook, and
//! beamformed received power.
//!
//! Steering vectors use the layout `a = a_y ⊗ a_x / √N_r`, so element
//! `k = ny · n_x + nx` carries phase `ny·Ω_y + nx·Ω_x` with
//! `Ω_x = 2π·d·sinθ·cosφ` and `Ω_y = 2π·d·sinθ·sinφ` (`d` in wavelengths).

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_x: usize,
    pub n_y: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl ArrayGeometry {
    /// Half-wavelength UPA.
    pub fn new(n_x: usize, n_y: usize) -> Result<Self> {
        Self::with_spacing(n_x, n_y, 0.5)
    }

    pub fn with_spacing(n_x: usize, n_y: usize, spacing: f64) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(invalid(format!("array needs at least one element per axis, got {n_x}x{n_y}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid(format!("element spacing must be positive, got {spacing}")));
        }
        Ok(Self { n_x, n_y, spacing })
    }

    pub fn n_r(&self) -> usize {
        self.n_x * self.n_y
    }
}

/// One-based (elevation, azimuth) codebook index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BeamIndex {
    pub i: usize,
    pub j: usize,
}

impl BeamIndex {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    /// Row-major position in a `c_theta × c_phi` beam plane.
    pub fn flat(&self, c_phi: usize) -> usize {
        (self.i - 1) * c_phi + (self.j - 1)
    }

    pub fn from_flat(k: usize, c_phi: usize) -> Self {
        Self { i: k / c_phi + 1, j: k % c_phi + 1 }
    }
}

impl fmt::Display for BeamIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

/// Elevation and azimuth grids, both uniform over `[-π/2, π/2)`.
pub fn quantized_angles(c_theta: usize, c_phi: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if c_theta == 0 || c_phi == 0 {
        return Err(invalid(format!("codebook grid must be non-empty, got {c_theta}x{c_phi}")));
    }
    let grid = |c: usize| -> Vec<f64> {
        (0..c).map(|k| -FRAC_PI_2 + k as f64 * PI / c as f64).collect()
    };
    Ok((grid(c_theta), grid(c_phi)))
}

pub fn steering_vector(geometry: &ArrayGeometry, theta: f64, phi: f64) -> Vec<Complex64> {
    let scale = 2.0 * PI * geometry.spacing * theta.sin();
    let omega_x = scale * phi.cos();
    let omega_y = scale * phi.sin();
    let norm = 1.0 / (geometry.n_r() as f64).sqrt();
    let mut out = Vec::with_capacity(geometry.n_r());
    for ny in 0..geometry.n_y {
        for nx in 0..geometry.n_x {
            let phase = ny as f64 * omega_y + nx as f64 * omega_x;
            out.push(Complex64::from_polar(norm, phase));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub c_theta: usize,
    pub c_phi: usize,
    pub geometry: ArrayGeometry,
    thetas: Vec<f64>,
    phis: Vec<f64>,
    /// Row-major over `(i, j)`, see [`BeamIndex::flat`].
    vectors: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, beam: BeamIndex) -> bool {
        (1..=self.c_theta).contains(&beam.i) && (1..=self.c_phi).contains(&beam.j)
    }

    pub fn vector(&self, beam: BeamIndex) -> &[Complex64] {
        assert!(self.contains(beam), "beam {beam} outside {}x{} codebook", self.c_theta, self.c_phi);
        &self.vectors[beam.flat(self.c_phi)]
    }

    pub fn vector_flat(&self, k: usize) -> &[Complex64] {
        &self.vectors[k]
    }

    pub fn angles(&self, beam: BeamIndex) -> (f64, f64) {
        (self.thetas[beam.i - 1], self.phis[beam.j - 1])
    }

    /// All indices in lexicographic `(i, j)` order.
    pub fn indices(&self) -> impl Iterator<Item = BeamIndex> + '_ {
        (0..self.len()).map(|k| BeamIndex::from_flat(k, self.c_phi))
    }

    /// Noiseless `p_t·|wᴴh|²` for every beam, in flat order.
    pub fn noiseless_powers(&self, h: &[Complex64], p_t: f64) -> Vec<f64> {
        self.vectors.iter().map(|w| p_t * inner(w, h).norm_sqr()).collect()
    }
}

pub fn build_codebook(geometry: ArrayGeometry, c_theta: usize, c_phi: usize) -> Result<Codebook> {
    let (thetas, phis) = quantized_angles(c_theta, c_phi)?;
    let mut vectors = Vec::with_capacity(c_theta * c_phi);
    for &theta in &thetas {
        for &phi in &phis {
            vectors.push(steering_vector(&geometry, theta, phi));
        }
    }
    Ok(Codebook { c_theta, c_phi, geometry, thetas, phis, vectors })
}

/// `wᴴh`
pub fn inner(w: &[Complex64], h: &[Complex64]) -> Complex64 {
    w.iter().zip(h).map(|(a, b)| a.conj() * b).sum()
}

/// `|√p_t·wᴴh + ṽ|²` with `ṽ ~ CN(0, noise_var)` drawn from `rng`. No draw
/// is made when `noise_var` is zero.
pub fn received_power<R: Rng + ?Sized>(
    w: &[Complex64],
    h: &[Complex64],
    p_t: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<f64> {
    if w.len() != h.len() {
        return Err(invalid(format!("beam has {} elements but channel has {}", w.len(), h.len())));
    }
    if p_t < 0.0 || noise_var < 0.0 {
        return Err(invalid("transmit power and noise variance must be non-negative"));
    }
    let signal = inner(w, h) * p_t.sqrt();
    if noise_var == 0.0 {
        return Ok(signal.norm_sqr());
    }
    let sd = (noise_var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Ok((signal + Complex64::new(sd * re, sd * im)).norm_sqr())
}
