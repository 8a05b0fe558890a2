//! Classical ground states of the bilayer spin Hamiltonian
//!
//! ```text
//! H = -J Σ_<ij> S_i·S_j - D Σ_i (S_i·ẑ)² + Σ_ij w_ij S_i^top·S_j^bottom
//! ```
//!
//! with unit-length classical spins. Ground states come from a seeded
//! Metropolis anneal followed by projected torque descent, and are turned
//! into 100×100 out-of-plane magnetization images by nearest-site lookup.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LatticeGraph, Layer};

pub type Spin = [f64; 3];

/// Pixels per image side.
pub const IMAGE_SIDE: usize = 100;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("spin configuration has {got} sites, graph has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("site index {index} out of range for {len} sites")]
    InvalidSite { index: usize, len: usize },
    #[error("spin {0} is not a unit vector")]
    NotUnit(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianParams {
    /// Intralayer exchange J (meV).
    pub exchange: f64,
    /// Single-ion anisotropy D (meV).
    pub anisotropy: f64,
}

fn dot(a: Spin, b: Spin) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: Spin) -> Spin {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Spin, b: Spin) -> Spin {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinConfig {
    spins: Vec<Spin>,
}

impl SpinConfig {
    pub fn new(spins: Vec<Spin>) -> Result<Self, SpinError> {
        for (i, s) in spins.iter().enumerate() {
            if !((dot(*s, *s).sqrt() - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(SpinError::NotUnit(i));
            }
        }
        Ok(Self { spins })
    }

    pub fn uniform(n: usize, direction: Spin) -> Self {
        Self {
            spins: vec![normalize(direction); n],
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self {
            spins: (0..n).map(|_| UnitSphere.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    /// Replace one spin; the new value is normalized.
    pub fn set(&mut self, i: usize, s: Spin) {
        self.spins[i] = normalize(s);
    }

    pub fn negated(&self) -> Self {
        Self {
            spins: self.spins.iter().map(|s| [-s[0], -s[1], -s[2]]).collect(),
        }
    }

    pub fn mean_sz(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len() as f64;
        self.spins[range].iter().map(|s| s[2]).sum::<f64>() / n
    }

    pub fn max_norm_error(&self) -> f64 {
        self.spins
            .iter()
            .map(|s| (dot(*s, *s).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_len(graph: &LatticeGraph, s: &SpinConfig) -> Result<(), SpinError> {
    if s.len() != graph.site_count() {
        return Err(SpinError::DimensionMismatch {
            expected: graph.site_count(),
            got: s.len(),
        });
    }
    Ok(())
}

/// Total energy in meV, evaluated directly from the bond and pair lists.
pub fn energy(
    graph: &LatticeGraph,
    params: &HamiltonianParams,
    s: &SpinConfig,
) -> Result<f64, SpinError> {
    check_len(graph, s)?;
    let spins = s.spins();
    let exchange: f64 = graph
        .intra_bonds
        .iter()
        .map(|&(i, j)| dot(spins[i], spins[j]))
        .sum();
    let anisotropy: f64 = spins.iter().map(|v| v[2] * v[2]).sum();
    let interlayer: f64 = graph
        .inter_pairs
        .iter()
        .map(|p| p.weight * dot(spins[p.top], spins[p.bottom]))
        .sum();
    Ok(-params.exchange * exchange - params.anisotropy * anisotropy + interlayer)
}

/// `-∂H/∂S_i` in meV.
pub fn effective_field(
    graph: &LatticeGraph,
    params: &HamiltonianParams,
    s: &SpinConfig,
    i: usize,
) -> Result<Spin, SpinError> {
    check_len(graph, s)?;
    if i >= s.len() {
        return Err(SpinError::InvalidSite {
            index: i,
            len: s.len(),
        });
    }
    Ok(Interactions::new(graph).field(params, s.spins(), i))
}

/// Adjacency compiled for per-site updates.
struct Interactions {
    neighbors: Vec<[usize; 3]>,
    pair_offsets: Vec<usize>,
    pairs: Vec<(usize, f64)>,
}

impl Interactions {
    fn new(graph: &LatticeGraph) -> Self {
        let n = graph.site_count();
        let neighbors = graph.neighbor_table();
        let mut per_site: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for p in &graph.inter_pairs {
            per_site[p.top].push((p.bottom, p.weight));
            per_site[p.bottom].push((p.top, p.weight));
        }
        let mut pair_offsets = Vec::with_capacity(n + 1);
        pair_offsets.push(0);
        let mut pairs = Vec::with_capacity(2 * graph.inter_pairs.len());
        for list in per_site {
            pairs.extend(list);
            pair_offsets.push(pairs.len());
        }
        Self {
            neighbors,
            pair_offsets,
            pairs,
        }
    }

    /// Field from exchange and interlayer terms only (no self-anisotropy).
    fn coupling_field(&self, params: &HamiltonianParams, spins: &[Spin], i: usize) -> Spin {
        let mut h = [0.0; 3];
        for &j in self.neighbors[i].iter().filter(|&&j| j != usize::MAX) {
            for k in 0..3 {
                h[k] += params.exchange * spins[j][k];
            }
        }
        for &(j, w) in &self.pairs[self.pair_offsets[i]..self.pair_offsets[i + 1]] {
            for k in 0..3 {
                h[k] -= w * spins[j][k];
            }
        }
        h
    }

    fn field(&self, params: &HamiltonianParams, spins: &[Spin], i: usize) -> Spin {
        let mut h = self.coupling_field(params, spins, i);
        h[2] += 2.0 * params.anisotropy * spins[i][2];
        h
    }

    /// Energy change from replacing spin `i` by `new`, given its coupling field.
    fn local_delta(params: &HamiltonianParams, coupling: Spin, old: Spin, new: Spin) -> f64 {
        let d = [new[0] - old[0], new[1] - old[1], new[2] - old[2]];
        -dot(coupling, d) - params.anisotropy * (new[2] * new[2] - old[2] * old[2])
    }

    fn max_torque(&self, params: &HamiltonianParams, spins: &[Spin]) -> f64 {
        (0..spins.len())
            .map(|i| {
                let t = cross(spins[i], self.field(params, spins, i));
                dot(t, t).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Metropolis proposals.
    pub anneal_steps: usize,
    /// meV
    pub t_start: f64,
    /// meV
    pub t_end: f64,
    pub descent_rate: f64,
    /// meV
    pub torque_tol: f64,
    pub max_descent_iters: usize,
    pub seed: u64,
}

impl SolverConfig {
    /// Anneal from `2J` to 0.01 meV over 200 proposals per site.
    pub fn for_system(params: &HamiltonianParams, sites: usize, seed: u64) -> Self {
        SolverSettings::default().config(params, sites, seed)
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.t_start >= self.t_end && self.t_end >= 0.0) {
            return Err(SpinError::InvalidConfig(format!(
                "need t_start >= t_end >= 0, got {} and {}",
                self.t_start, self.t_end
            )));
        }
        if !(self.torque_tol > 0.0) {
            return Err(SpinError::InvalidConfig(
                "torque_tol must be positive".into(),
            ));
        }
        if !(self.descent_rate > 0.0 && self.descent_rate.is_finite()) {
            return Err(SpinError::InvalidConfig(
                "descent_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    fn temperature_schedule(&self) -> (f64, f64) {
        if self.anneal_steps < 2 || self.t_end <= 0.0 || self.t_start <= 0.0 {
            return (self.t_start, 1.0);
        }
        let ratio = (self.t_end / self.t_start).powf(1.0 / (self.anneal_steps - 1) as f64);
        (self.t_start, ratio)
    }
}

/// Solver defaults expressed relative to the system, turned into a concrete
/// [`SolverConfig`] per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub anneal_sweeps: usize,
    /// `t_start = t_start_over_exchange · J`
    pub t_start_over_exchange: f64,
    /// meV
    pub t_end: f64,
    pub descent_rate: f64,
    /// meV
    pub torque_tol: f64,
    pub max_descent_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            anneal_sweeps: 200,
            t_start_over_exchange: 2.0,
            t_end: 0.01,
            descent_rate: 0.1,
            torque_tol: 1e-6,
            max_descent_iters: 20_000,
        }
    }
}

impl SolverSettings {
    pub fn config(&self, params: &HamiltonianParams, sites: usize, seed: u64) -> SolverConfig {
        SolverConfig {
            anneal_steps: self.anneal_sweeps * sites,
            t_start: self.t_start_over_exchange * params.exchange,
            t_end: self.t_end,
            descent_rate: self.descent_rate,
            torque_tol: self.torque_tol,
            max_descent_iters: self.max_descent_iters,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundState {
    pub config: SpinConfig,
    /// meV
    pub energy: f64,
    /// Energy right after the anneal, before descent.
    pub anneal_energy: f64,
    /// True when the torque criterion fired.
    pub converged: bool,
    pub descent_iters: usize,
    pub max_torque: f64,
    /// Energy after every descent iteration (accumulated from local updates).
    pub descent_energies: Vec<f64>,
}

/// Seeded anneal + torque descent.
pub fn ground_state(
    graph: &LatticeGraph,
    params: &HamiltonianParams,
    cfg: &SolverConfig,
) -> Result<GroundState, SpinError> {
    cfg.validate()?;
    let inter = Interactions::new(graph);
    let n = graph.site_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut spins = SpinConfig::random(n, &mut rng).spins;

    anneal(&inter, params, cfg, &mut spins, &mut rng);

    let state = SpinConfig { spins };
    let anneal_energy = energy(graph, params, &state)?;
    let mut spins = state.spins;

    let mut current = anneal_energy;
    let mut descent_energies = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_descent_iters {
        let (delta, torque) = descent_sweep(&inter, params, cfg.descent_rate, &mut spins);
        current += delta;
        descent_energies.push(current);
        iters += 1;
        // Torque is measured on each spin just before its update.
        if torque < cfg.torque_tol {
            converged = true;
            break;
        }
    }
    let max_torque = inter.max_torque(params, &spins);

    let config = SpinConfig { spins };
    let final_energy = energy(graph, params, &config)?;
    Ok(GroundState {
        config,
        energy: final_energy,
        anneal_energy,
        converged,
        descent_iters: iters,
        max_torque,
        descent_energies,
    })
}

fn anneal(
    inter: &Interactions,
    params: &HamiltonianParams,
    cfg: &SolverConfig,
    spins: &mut [Spin],
    rng: &mut ChaCha8Rng,
) {
    let n = spins.len();
    if n == 0 {
        return;
    }
    let (mut t, ratio) = cfg.temperature_schedule();
    let scale = params.exchange.abs().max(f64::MIN_POSITIVE);
    for _ in 0..cfg.anneal_steps {
        let i = rng.gen_range(0..n);
        let old = spins[i];
        // Mixed proposals: uniform redraw, reversal, or a thermal cone.
        let new = match rng.gen_range(0..3u8) {
            0 => UnitSphere.sample(rng),
            1 => [-old[0], -old[1], -old[2]],
            _ => {
                let width = (t / scale).sqrt().clamp(0.02, 1.0);
                let g: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                normalize([
                    old[0] + width * g[0],
                    old[1] + width * g[1],
                    old[2] + width * g[2],
                ])
            }
        };
        let coupling = inter.coupling_field(params, spins, i);
        let delta = Interactions::local_delta(params, coupling, old, new);
        let accept = delta <= 0.0 || (t > 0.0 && rng.gen::<f64>() < (-delta / t).exp());
        if accept {
            spins[i] = new;
        }
        t *= ratio;
    }
}

/// One sequential sweep of `S_i <- normalize(S_i + rate * h_perp)`, with step
/// halving whenever a move would raise the energy. Returns the energy change
/// and the largest torque seen before an update.
fn descent_sweep(
    inter: &Interactions,
    params: &HamiltonianParams,
    rate: f64,
    spins: &mut [Spin],
) -> (f64, f64) {
    let mut total = 0.0;
    let mut max_torque = 0.0f64;
    for i in 0..spins.len() {
        let s = spins[i];
        let coupling = inter.coupling_field(params, spins, i);
        let mut h = coupling;
        h[2] += 2.0 * params.anisotropy * s[2];
        let along = dot(h, s);
        let perp = [
            h[0] - along * s[0],
            h[1] - along * s[1],
            h[2] - along * s[2],
        ];
        // |S × h| = |h_perp| for a unit spin.
        max_torque = max_torque.max(dot(perp, perp).sqrt());
        let mut eta = rate;
        for _ in 0..12 {
            let cand = normalize([
                s[0] + eta * perp[0],
                s[1] + eta * perp[1],
                s[2] + eta * perp[2],
            ]);
            let delta = Interactions::local_delta(params, coupling, s, cand);
            if delta <= 0.0 {
                spins[i] = cand;
                total += delta;
                break;
            }
            eta *= 0.5;
        }
    }
    (total, max_torque)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainImage {
    pub layer: Layer,
    /// Row-major `IMAGE_SIDE × IMAGE_SIDE` out-of-plane magnetization.
    pub pixels: Vec<f32>,
}

/// Pixel-to-site lookup for one layer of a graph; spin independent.
#[derive(Debug, Clone)]
pub struct Rasterizer {
    layer: Layer,
    site_of_pixel: Vec<usize>,
}

impl Rasterizer {
    pub fn new(graph: &LatticeGraph, layer: Layer) -> Self {
        let range = graph.layer_range(layer);
        let mut site_of_pixel = Vec::with_capacity(IMAGE_PIXELS);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let p = graph.frac_to_cartesian(pixel_frac(r, c));
                let mut best = (usize::MAX, f64::INFINITY);
                for i in range.clone() {
                    let (_, d) = graph.min_image(p, graph.sites[i].position);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                site_of_pixel.push(best.0);
            }
        }
        Self {
            layer,
            site_of_pixel,
        }
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn site_of_pixel(&self) -> &[usize] {
        &self.site_of_pixel
    }

    pub fn render(&self, s: &SpinConfig) -> DomainImage {
        let mut pixels = vec![0.0; IMAGE_PIXELS];
        self.render_into(s, &mut pixels);
        DomainImage {
            layer: self.layer,
            pixels,
        }
    }

    pub fn render_into(&self, s: &SpinConfig, out: &mut [f32]) {
        for (px, &site) in out.iter_mut().zip(&self.site_of_pixel) {
            *px = (s.spins[site][2] as f32).clamp(-1.0, 1.0);
        }
    }
}

/// Fractional cell coordinate of the centre of pixel `(row, col)`.
pub fn pixel_frac(row: usize, col: usize) -> [f64; 2] {
    [
        (col as f64 + 0.5) / IMAGE_SIDE as f64,
        (row as f64 + 0.5) / IMAGE_SIDE as f64,
    ]
}

pub fn rasterize(graph: &LatticeGraph, s: &SpinConfig, layer: Layer) -> DomainImage {
    Rasterizer::new(graph, layer).render(s)
}
