//! Seeded synthetic propagation scene.
//!
//! A base station sits above a rectangular service area. Each user
//! coordinate sees an optional line-of-sight ray plus single-bounce rays via
//! fixed scatterers grouped into clusters. Path amplitudes follow free-space
//! inverse-distance loss on the total ray length, scaled by a per-cluster
//! reflection loss and a smooth lognormal shadowing field; phases are
//! `2π·length/Λ`. Everything is a pure function of the scene and the
//! coordinate.
//!
//! Arrival angles are the elevation `θ` above the BS horizontal plane
//! (negative towards the ground) and the azimuth `φ` from the +x axis, which
//! faces the service area. The steering vector depends on the angles only
//! through `(sinθ·cosφ, sinθ·sinφ)`, so directions with `|φ| ≥ π/2` are
//! folded to the equivalent `(−θ, φ ∓ π)`.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, ArrayGeometry};
use crate::error::{invalid, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const CLUSTER_GAIN_DB: (f64, f64) = (-12.0, -4.0);
const CLUSTER_SPREAD_M: (f64, f64) = (0.5, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: f64,
    pub y: f64,
}

impl Coordinate {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceArea {
    pub x0: f64,
    pub x_end: f64,
    pub y0: f64,
    pub y_end: f64,
    pub bs_position: [f64; 3],
    pub ue_height: f64,
    /// Reference coordinates per axis, endpoints included.
    pub ref_grid_n: usize,
}

impl Default for ServiceArea {
    fn default() -> Self {
        Self::reference()
    }
}

impl ServiceArea {
    /// 50 m × 50 m area in front of a BS mounted 10 m high, 51×51 reference points.
    pub fn reference() -> Self {
        Self {
            x0: 10.0,
            x_end: 60.0,
            y0: -25.0,
            y_end: 25.0,
            bs_position: [0.0, 0.0, 10.0],
            ue_height: 1.5,
            ref_grid_n: 51,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0 < self.x_end && self.y0 < self.y_end) {
            return Err(invalid(format!(
                "service area bounds must satisfy x0 < x_end and y0 < y_end, got [{}, {}] x [{}, {}]",
                self.x0, self.x_end, self.y0, self.y_end
            )));
        }
        if self.ref_grid_n < 2 {
            return Err(invalid("reference grid needs at least 2 points per axis"));
        }
        if self.bs_position[2] < self.ue_height {
            return Err(invalid("base station must not sit below the user height"));
        }
        Ok(())
    }

    pub fn contains(&self, g: Coordinate) -> bool {
        (self.x0..=self.x_end).contains(&g.x) && (self.y0..=self.y_end).contains(&g.y)
    }

    /// Uniform `ref_grid_n × ref_grid_n` lattice, x-major.
    pub fn reference_coordinates(&self) -> Vec<Coordinate> {
        let n = self.ref_grid_n;
        let step = |lo: f64, hi: f64, k: usize| {
            if k == n - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                out.push(Coordinate::new(step(self.x0, self.x_end, a), step(self.y0, self.y_end, b)));
            }
        }
        out
    }

    pub fn ue_point(&self, g: Coordinate) -> [f64; 3] {
        [g.x, g.y, self.ue_height]
    }

    /// Straight-line BS–UE distance.
    pub fn bs_distance(&self, g: Coordinate) -> f64 {
        dist(self.bs_position, self.ue_point(g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: [f64; 3],
    pub spread: f64,
    pub base_gain_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_clusters: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub shadowing_corr_m: f64,
    pub shadowing_std_db: f64,
    /// Include the direct BS–UE ray. Off by default (NLOS street canyon).
    pub los: bool,
    pub carrier_hz: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            n_paths: 16,
            seed: 2020,
            shadowing_corr_m: 10.0,
            shadowing_std_db: 4.0,
            los: false,
            carrier_hz: 58.68e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scatterer {
    point: [f64; 3],
    cluster: usize,
}

/// Independent unit-variance fields on a coarse lattice, one per shadowing
/// group, interpolated with a normalized Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
struct ShadowField {
    origin: (f64, f64),
    spacing: f64,
    nx: usize,
    ny: usize,
    nodes: Vec<Vec<f64>>,
}

impl ShadowField {
    fn new(area: &ServiceArea, spacing: f64, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        let pad = 2.0 * spacing;
        let origin = (area.x0 - pad, area.y0 - pad);
        let nx = ((area.x_end - area.x0 + 2.0 * pad) / spacing).ceil() as usize + 1;
        let ny = ((area.y_end - area.y0 + 2.0 * pad) / spacing).ceil() as usize + 1;
        let nodes = (0..groups)
            .map(|_| (0..nx * ny).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self { origin, spacing, nx, ny, nodes }
    }

    fn value(&self, group: usize, g: Coordinate) -> f64 {
        let inv = 1.0 / (2.0 * self.spacing * self.spacing);
        let (mut acc, mut wsq) = (0.0, 0.0);
        let field = &self.nodes[group];
        for a in 0..self.nx {
            let dx = g.x - (self.origin.0 + a as f64 * self.spacing);
            for b in 0..self.ny {
                let dy = g.y - (self.origin.1 + b as f64 * self.spacing);
                let w = (-(dx * dx + dy * dy) * inv).exp();
                acc += w * field[a * self.ny + b];
                wsq += w * w;
            }
        }
        acc / wsq.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub area: ServiceArea,
    pub clusters: Vec<Cluster>,
    pub n_paths: usize,
    pub seed: u64,
    pub shadowing_corr_m: f64,
    pub shadowing_std_db: f64,
    pub los: bool,
    pub carrier_hz: f64,
    scatterers: Vec<Scatterer>,
    shadow: ShadowField,
}

/// Per-coordinate multipath description; the vectors are indexed by path.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    pub coordinate: Coordinate,
    pub gains: Vec<Complex64>,
    pub elevations: Vec<f64>,
    pub azimuths: Vec<f64>,
}

impl ChannelInstance {
    pub fn n_paths(&self) -> usize {
        self.gains.len()
    }
}

/// Scene with default shadowing and carrier settings.
pub fn generate_scene(area: ServiceArea, n_clusters: usize, n_paths: usize, seed: u64) -> Result<Scene> {
    let cfg = SceneConfig { n_clusters, n_paths, seed, ..SceneConfig::default() };
    Scene::generate(area, &cfg)
}

impl Scene {
    pub fn generate(area: ServiceArea, cfg: &SceneConfig) -> Result<Self> {
        area.validate()?;
        if cfg.n_clusters == 0 {
            return Err(invalid("scene needs at least one cluster"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let top = area.bs_position[2];
        let clusters = (0..cfg.n_clusters)
            .map(|_| Cluster {
                center: [
                    rng.random_range(area.x0..=area.x_end),
                    rng.random_range(area.y0..=area.y_end),
                    rng.random_range(0.0..=top),
                ],
                spread: rng.random_range(CLUSTER_SPREAD_M.0..=CLUSTER_SPREAD_M.1),
                base_gain_db: rng.random_range(CLUSTER_GAIN_DB.0..=CLUSTER_GAIN_DB.1),
            })
            .collect();
        Self::from_parts(
            area,
            clusters,
            cfg.n_paths,
            cfg.seed,
            cfg.shadowing_corr_m,
            cfg.shadowing_std_db,
            cfg.los,
            cfg.carrier_hz,
        )
    }

    /// Rebuilds the derived scatterers and shadowing lattice from the stored
    /// parameters. The derivation draws from ChaCha streams separate from the
    /// cluster draw, so a deserialized scene is identical to the generated one.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        area: ServiceArea,
        clusters: Vec<Cluster>,
        n_paths: usize,
        seed: u64,
        shadowing_corr_m: f64,
        shadowing_std_db: f64,
        los: bool,
        carrier_hz: f64,
    ) -> Result<Self> {
        area.validate()?;
        if clusters.is_empty() {
            return Err(invalid("scene needs at least one cluster"));
        }
        if n_paths == 0 {
            return Err(invalid("scene needs at least one path per coordinate"));
        }
        if clusters.iter().any(|c| !(c.spread > 0.0)) {
            return Err(invalid("cluster spreads must be positive"));
        }
        if !(shadowing_corr_m > 0.0) || !(shadowing_std_db >= 0.0) || !(carrier_hz > 0.0) {
            return Err(invalid("shadowing correlation and carrier must be positive, shadowing std non-negative"));
        }

        let top = area.bs_position[2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let n_reflected = n_paths - usize::from(los);
        let scatterers = (0..n_reflected)
            .map(|k| {
                let cluster = k % clusters.len();
                let c = &clusters[cluster];
                let jitter = Normal::new(0.0, c.spread).expect("positive spread");
                let mut point = c.center;
                for p in point.iter_mut() {
                    *p += jitter.sample(&mut rng);
                }
                point[2] = point[2].clamp(0.0, top);
                Scatterer { point, cluster }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let shadow = ShadowField::new(&area, shadowing_corr_m, clusters.len() + 1, &mut rng);

        Ok(Self {
            area,
            clusters,
            n_paths,
            seed,
            shadowing_corr_m,
            shadowing_std_db,
            los,
            carrier_hz,
            scatterers,
            shadow,
        })
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Free-space amplitude `Λ/(4πd)` of the direct ray at `g`.
    pub fn free_space_amplitude(&self, g: Coordinate) -> f64 {
        self.wavelength() / (4.0 * PI * self.area.bs_distance(g))
    }

    pub fn channel_at(&self, g: Coordinate) -> Result<ChannelInstance> {
        if !self.area.contains(g) {
            return Err(invalid(format!("coordinate ({}, {}) outside the service area", g.x, g.y)));
        }
        let bs = self.area.bs_position;
        let ue = self.area.ue_point(g);
        let lambda = self.wavelength();

        let mut inst = ChannelInstance {
            coordinate: g,
            gains: Vec::with_capacity(self.n_paths),
            elevations: Vec::with_capacity(self.n_paths),
            azimuths: Vec::with_capacity(self.n_paths),
        };
        let mut push = |direction: [f64; 3], length: f64, gain_db: f64| {
            let (theta, phi) = arrival_angles(direction);
            let amplitude = lambda / (4.0 * PI * length) * 10f64.powf(gain_db / 20.0);
            let phase = 2.0 * PI * (length / lambda).fract();
            inst.gains.push(Complex64::from_polar(amplitude, phase));
            inst.elevations.push(theta);
            inst.azimuths.push(phi);
        };

        if self.los {
            let shadow = self.shadowing_std_db * self.shadow.value(0, g);
            push(sub(ue, bs), dist(bs, ue), shadow);
        }
        for s in &self.scatterers {
            let c = &self.clusters[s.cluster];
            let shadow = self.shadowing_std_db * self.shadow.value(s.cluster + 1, g);
            let length = dist(bs, s.point) + dist(s.point, ue);
            push(sub(s.point, bs), length, c.base_gain_db + shadow);
        }
        Ok(inst)
    }

    /// Assembled channel vector at `g`.
    pub fn channel_vector(&self, g: Coordinate, geometry: &ArrayGeometry) -> Result<Vec<Complex64>> {
        Ok(assemble_channel(&self.channel_at(g)?, geometry))
    }

    pub fn to_toml(&self) -> String {
        let file = SceneFile {
            seed: self.seed,
            n_paths: self.n_paths,
            shadowing_corr_m: self.shadowing_corr_m,
            shadowing_std_db: self.shadowing_std_db,
            los: self.los,
            carrier_hz: self.carrier_hz,
            area: self.area.clone(),
            clusters: self.clusters.clone(),
        };
        toml::to_string(&file).expect("scene fields are always representable")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let f: SceneFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::from_parts(
            f.area,
            f.clusters,
            f.n_paths,
            f.seed,
            f.shadowing_corr_m,
            f.shadowing_std_db,
            f.los,
            f.carrier_hz,
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    n_paths: usize,
    shadowing_corr_m: f64,
    shadowing_std_db: f64,
    los: bool,
    carrier_hz: f64,
    area: ServiceArea,
    clusters: Vec<Cluster>,
}

/// `h = √N_r · Σ α_ℓ · a(θ_ℓ, φ_ℓ)`
pub fn assemble_channel(instance: &ChannelInstance, geometry: &ArrayGeometry) -> Vec<Complex64> {
    let n_r = geometry.n_r();
    let scale = (n_r as f64).sqrt();
    let mut h = vec![Complex64::new(0.0, 0.0); n_r];
    for ((alpha, &theta), &phi) in instance.gains.iter().zip(&instance.elevations).zip(&instance.azimuths) {
        let a = steering_vector(geometry, theta, phi);
        for (hk, ak) in h.iter_mut().zip(a) {
            *hk += alpha * ak * scale;
        }
    }
    h
}

/// `(θ, φ)` of a direction vector leaving the BS: elevation above the
/// horizontal plane and azimuth from the +x axis, with `|φ| ≥ π/2` folded to
/// `(−θ, φ ∓ π)` so that `φ ∈ [−π/2, π/2)`.
pub fn arrival_angles(d: [f64; 3]) -> (f64, f64) {
    let horizontal = d[0].hypot(d[1]);
    let mut theta = d[2].atan2(horizontal).clamp(-FRAC_PI_2, FRAC_PI_2 - 1e-9);
    let mut phi = d[1].atan2(d[0]);
    if phi >= FRAC_PI_2 {
        phi -= PI;
        theta = -theta;
    } else if phi < -FRAC_PI_2 {
        phi += PI;
        theta = -theta;
    }
    (theta, phi)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
