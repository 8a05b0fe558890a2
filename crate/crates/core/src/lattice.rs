//! Commensurate twisted-bilayer honeycomb superlattices.
//!
//! Both layers are honeycomb lattices with lattice constant `a0 = 1` and
//! nearest-neighbour distance `1/sqrt(3)`. For index `m` the top layer is
//! spanned by `m a1 + (m+1) a2` and the bottom layer by `(m+1) a1 + m a2`;
//! each layer is rotated so that this vector lies along +x, which makes the
//! two layers coincide on the moiré cell `L1 = (|T|, 0)`, `L2 = R(60°) L1`.
//! A sites of both layers sit on the origin, so the cell corner is an AA
//! stacking point.
//!
//! Site bookkeeping is exact: fractional cell coordinates are computed with
//! integer arithmetic before any rotation is applied.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Nearest-neighbour distance of the honeycomb lattice in units of `a0`.
pub const NN_DISTANCE: f64 = 1.0 / SQRT3;

/// Angle slack (degrees) applied to both bounds of an angle-range query.
pub const ANGLE_RANGE_TOLERANCE_DEG: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid moiré index {0}: must be >= 1")]
    InvalidIndex(u32),
    #[error("invalid angle range [{min}, {max}]: need 0 < min < max")]
    InvalidAngleRange { min: f64, max: f64 },
    #[error("invalid coupling profile: {0}")]
    InvalidProfile(String),
}

/// Commensuration index `m` of the twisted bilayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct MoireIndex(u32);

impl MoireIndex {
    pub fn new(m: u32) -> Result<Self, LatticeError> {
        if m == 0 {
            return Err(LatticeError::InvalidIndex(m));
        }
        Ok(Self(m))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Number of monolayer unit cells in the moiré cell, `3m² + 3m + 1`.
    pub fn cells_per_layer(self) -> usize {
        let m = self.0 as usize;
        3 * m * m + 3 * m + 1
    }

    pub fn sites_per_layer(self) -> usize {
        2 * self.cells_per_layer()
    }

    pub fn angle_deg(self) -> f64 {
        commensurate_angle(self)
    }
}

impl TryFrom<u32> for MoireIndex {
    type Error = LatticeError;

    fn try_from(m: u32) -> Result<Self, Self::Error> {
        Self::new(m)
    }
}

impl From<MoireIndex> for u32 {
    fn from(m: MoireIndex) -> u32 {
        m.0
    }
}

/// Twist angle in degrees: `cos θ = (3m² + 3m + 1/2) / (3m² + 3m + 1)`.
pub fn commensurate_angle(m: MoireIndex) -> f64 {
    let k = 3.0 * f64::from(m.0) * f64::from(m.0) + 3.0 * f64::from(m.0);
    ((k + 0.5) / (k + 1.0)).acos().to_degrees()
}

/// All indices whose angle lies in `[min_deg, max_deg]`, ascending in `m`.
///
/// Bounds are widened by [`ANGLE_RANGE_TOLERANCE_DEG`] so that ranges quoted
/// to two decimals include their endpoint angles.
pub fn commensurate_indices_in_range(
    min_deg: f64,
    max_deg: f64,
) -> Result<Vec<MoireIndex>, LatticeError> {
    if !(min_deg > 0.0 && min_deg < max_deg && max_deg.is_finite()) {
        return Err(LatticeError::InvalidAngleRange {
            min: min_deg,
            max: max_deg,
        });
    }
    let lo = min_deg - ANGLE_RANGE_TOLERANCE_DEG;
    let hi = max_deg + ANGLE_RANGE_TOLERANCE_DEG;
    let mut out = Vec::new();
    let mut m = 1u32;
    loop {
        let idx = MoireIndex(m);
        let theta = commensurate_angle(idx);
        if theta < lo {
            break;
        }
        if theta <= hi {
            out.push(idx);
        }
        m += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sublattice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeSite {
    pub id: usize,
    pub layer: Layer,
    pub sublattice: Sublattice,
    /// Cartesian position inside the moiré cell, units of `a0`.
    pub position: [f64; 2],
    /// Fractional coordinates with respect to the cell vectors, in `[0, 1)`.
    pub frac: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterPair {
    pub top: usize,
    pub bottom: usize,
    /// Coupling weight in meV.
    pub weight: f64,
}

/// Stacking-modulated interlayer exchange.
///
/// `w = j_perp_scale · g(u) · exp(-(ρ/ρ0)²)` with `ρ0 = cutoff_radius / 2` and
/// `g(u) = (1 - h) + h f(u)`, where `f` is the first-star registry harmonic
/// (`+1` at AA, `-1/2` at AB/BA) and `h = registry_harmonic`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingProfile {
    /// meV
    pub j_perp_scale: f64,
    pub registry_harmonic: f64,
    /// units of `a0`
    pub cutoff_radius: f64,
}

impl Default for CouplingProfile {
    fn default() -> Self {
        Self {
            j_perp_scale: 1.0,
            registry_harmonic: 1.0,
            cutoff_radius: 1.0,
        }
    }
}

impl CouplingProfile {
    /// A profile with no interlayer coupling at all.
    pub fn decoupled() -> Self {
        Self {
            j_perp_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LatticeError> {
        if !(self.cutoff_radius > 0.0 && self.cutoff_radius.is_finite()) {
            return Err(LatticeError::InvalidProfile(format!(
                "cutoff_radius must be positive and finite, got {}",
                self.cutoff_radius
            )));
        }
        if !self.j_perp_scale.is_finite() {
            return Err(LatticeError::InvalidProfile(
                "j_perp_scale must be finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.registry_harmonic) {
            return Err(LatticeError::InvalidProfile(format!(
                "registry_harmonic must lie in [0, 1], got {}",
                self.registry_harmonic
            )));
        }
        Ok(())
    }
}

/// Shortest reciprocal vectors of the unrotated monolayer (`a1 = x̂`).
fn registry_star() -> [[f64; 2]; 3] {
    let b1 = [2.0 * PI, -2.0 * PI / SQRT3];
    let b2 = [0.0, 4.0 * PI / SQRT3];
    [b1, b2, [-b1[0] - b2[0], -b1[1] - b2[1]]]
}

/// First-star registry harmonic: `+1` at AA, `-1/2` at AB and BA.
pub fn registry_harmonic(u: [f64; 2]) -> f64 {
    registry_star()
        .iter()
        .map(|g| (g[0] * u[0] + g[1] * u[1]).cos())
        .sum::<f64>()
        / 3.0
}

/// Interlayer coupling (meV) for a pair at local registry `u` and in-plane
/// separation `distance`.
pub fn interlayer_coupling(profile: &CouplingProfile, registry: [f64; 2], distance: f64) -> f64 {
    if distance > profile.cutoff_radius {
        return 0.0;
    }
    let h = profile.registry_harmonic;
    let g = (1.0 - h) + h * registry_harmonic(registry);
    let rho0 = 0.5 * profile.cutoff_radius;
    profile.j_perp_scale * g * (-(distance / rho0).powi(2)).exp()
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Cartesian position of `n1 a1 + n2 a2` (arguments in lattice units).
fn lattice_cartesian(n1: f64, n2: f64) -> [f64; 2] {
    [n1 + 0.5 * n2, 0.5 * SQRT3 * n2]
}

/// Integer supercell of one layer: columns `T1 = (p, q)`, `T2 = R60 T1 = (-q, p + q)`
/// in the `(a1, a2)` basis.
struct Supercell {
    p: i64,
    q: i64,
}

impl Supercell {
    fn det(&self) -> i64 {
        self.p * self.p + self.p * self.q + self.q * self.q
    }

    /// `adj(M) · v` where `M = [[p, -q], [q, p + q]]`.
    fn adj_mul(&self, v: [i64; 2]) -> [i64; 2] {
        [
            (self.p + self.q) * v[0] + self.q * v[1],
            -self.q * v[0] + self.p * v[1],
        ]
    }

    /// Reduce a monolayer cell index into the supercell; returns the reduced
    /// index and its fractional coordinate numerators (denominator `det`).
    fn reduce(&self, n: [i64; 2]) -> ([i64; 2], [i64; 2]) {
        let det = self.det();
        let num = self.adj_mul(n);
        let k = [num[0].div_euclid(det), num[1].div_euclid(det)];
        let reduced = [
            n[0] - (self.p * k[0] - self.q * k[1]),
            n[1] - (self.q * k[0] + (self.p + self.q) * k[1]),
        ];
        (reduced, [num[0] - det * k[0], num[1] - det * k[1]])
    }

    /// Angle of `T1` with respect to `a1`.
    fn angle(&self) -> f64 {
        let t = lattice_cartesian(self.p as f64, self.q as f64);
        t[1].atan2(t[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeGraph {
    pub m: MoireIndex,
    pub theta_deg: f64,
    pub profile: CouplingProfile,
    /// Top-layer sites occupy `0..n`, bottom-layer sites `n..2n`.
    pub sites: Vec<LatticeSite>,
    pub intra_bonds: Vec<(usize, usize)>,
    pub inter_pairs: Vec<InterPair>,
    pub cell_vectors: [[f64; 2]; 2],
    #[serde(skip)]
    layer_rotation: [f64; 2],
}

impl LatticeGraph {
    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn layer_range(&self, layer: Layer) -> std::ops::Range<usize> {
        let n = self.sites_in_layer(Layer::Top);
        match layer {
            Layer::Top => 0..n,
            Layer::Bottom => n..self.sites.len(),
        }
    }

    pub fn sites_in_layer(&self, layer: Layer) -> usize {
        self.sites.iter().filter(|s| s.layer == layer).count()
    }

    pub fn frac_to_cartesian(&self, f: [f64; 2]) -> [f64; 2] {
        let [l1, l2] = self.cell_vectors;
        [f[0] * l1[0] + f[1] * l2[0], f[0] * l1[1] + f[1] * l2[1]]
    }

    /// Shortest periodic image of `to - from`, returned as `(vector, length)`.
    pub fn min_image(&self, from: [f64; 2], to: [f64; 2]) -> ([f64; 2], f64) {
        let [l1, l2] = self.cell_vectors;
        let det = l1[0] * l2[1] - l1[1] * l2[0];
        let d = [to[0] - from[0], to[1] - from[1]];
        let f1 = (d[0] * l2[1] - d[1] * l2[0]) / det;
        let f2 = (l1[0] * d[1] - l1[1] * d[0]) / det;
        let f1 = f1 - f1.round();
        let f2 = f2 - f2.round();
        let mut best = ([0.0; 2], f64::INFINITY);
        for s1 in -1..=1 {
            for s2 in -1..=1 {
                let g1 = f1 + f64::from(s1);
                let g2 = f2 + f64::from(s2);
                let v = [g1 * l1[0] + g2 * l2[0], g1 * l1[1] + g2 * l2[1]];
                let len = v[0].hypot(v[1]);
                if len < best.1 {
                    best = (v, len);
                }
            }
        }
        best
    }

    /// Local stacking registry at a point: offset of the bottom lattice
    /// relative to the top lattice, in the unrotated monolayer frame.
    pub fn registry_at(&self, r: [f64; 2]) -> [f64; 2] {
        let [rot_top, rot_bottom] = self.layer_rotation;
        let xt = rotate(r, -rot_top);
        let xb = rotate(r, -rot_bottom);
        [xb[0] - xt[0], xb[1] - xt[1]]
    }

    /// Per-site lists of the three intralayer neighbours.
    pub fn neighbor_table(&self) -> Vec<[usize; 3]> {
        let mut table = vec![[usize::MAX; 3]; self.sites.len()];
        let mut fill = vec![0usize; self.sites.len()];
        for &(i, j) in &self.intra_bonds {
            table[i][fill[i]] = j;
            fill[i] += 1;
            table[j][fill[j]] = i;
            fill[j] += 1;
        }
        table
    }

    /// Sub-graph holding only one layer and no interlayer pairs.
    pub fn single_layer(&self, layer: Layer) -> LatticeGraph {
        let range = self.layer_range(layer);
        let offset = range.start;
        let sites = self.sites[range.clone()]
            .iter()
            .map(|s| LatticeSite {
                id: s.id - offset,
                ..s.clone()
            })
            .collect();
        let intra_bonds = self
            .intra_bonds
            .iter()
            .filter(|(i, _)| range.contains(i))
            .map(|&(i, j)| (i - offset, j - offset))
            .collect();
        LatticeGraph {
            m: self.m,
            theta_deg: self.theta_deg,
            profile: CouplingProfile::decoupled(),
            sites,
            intra_bonds,
            inter_pairs: Vec::new(),
            cell_vectors: self.cell_vectors,
            layer_rotation: self.layer_rotation,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lattice graph serializes")
    }
}

fn build_layer(
    layer: Layer,
    cell: &Supercell,
    cell_vectors: [[f64; 2]; 2],
    first_id: usize,
) -> (Vec<LatticeSite>, Vec<(usize, usize)>) {
    let det = cell.det();
    let bound = cell.p + cell.q + 1;
    // Enumerate reduced cell indices in a fixed order.
    let mut cells = Vec::with_capacity(det as usize);
    for n1 in -2 * bound..=2 * bound {
        for n2 in -2 * bound..=2 * bound {
            let (reduced, _) = cell.reduce([n1, n2]);
            if reduced == [n1, n2] {
                cells.push([n1, n2]);
            }
        }
    }
    debug_assert_eq!(cells.len() as i64, det);

    let mut index: HashMap<([i64; 2], Sublattice), usize> = HashMap::with_capacity(2 * cells.len());
    let mut sites = Vec::with_capacity(2 * cells.len());
    for &n in &cells {
        for sub in [Sublattice::A, Sublattice::B] {
            // Fractional numerators over 3·det: adj(M)(3n + basis).
            let shift = if sub == Sublattice::B { 1 } else { 0 };
            let num = cell.adj_mul([3 * n[0] + shift, 3 * n[1] + shift]);
            let denom = 3 * det;
            let frac = [
                num[0].rem_euclid(denom) as f64 / denom as f64,
                num[1].rem_euclid(denom) as f64 / denom as f64,
            ];
            let [l1, l2] = cell_vectors;
            let position = [
                frac[0] * l1[0] + frac[1] * l2[0],
                frac[0] * l1[1] + frac[1] * l2[1],
            ];
            let id = first_id + sites.len();
            index.insert((n, sub), id);
            sites.push(LatticeSite {
                id,
                layer,
                sublattice: sub,
                position,
                frac,
            });
        }
    }

    // A at n bonds to B at n, n - a1 and n - a2.
    let mut bonds = Vec::with_capacity(3 * cells.len());
    for &n in &cells {
        let a = index[&(n, Sublattice::A)];
        for d in [[0, 0], [-1, 0], [0, -1]] {
            let (nb, _) = cell.reduce([n[0] + d[0], n[1] + d[1]]);
            bonds.push((a, index[&(nb, Sublattice::B)]));
        }
    }
    (sites, bonds)
}

/// Build the commensurate bilayer for index `m`.
pub fn build_superlattice(
    m: MoireIndex,
    profile: &CouplingProfile,
) -> Result<LatticeGraph, LatticeError> {
    profile.validate()?;
    let mm = i64::from(m.get());
    let top_cell = Supercell { p: mm, q: mm + 1 };
    let bottom_cell = Supercell { p: mm + 1, q: mm };
    let t = lattice_cartesian(top_cell.p as f64, top_cell.q as f64);
    let period = t[0].hypot(t[1]);
    if 2.0 * profile.cutoff_radius >= period {
        return Err(LatticeError::InvalidProfile(format!(
            "cutoff_radius {} must be below half the moiré period {period:.4}",
            profile.cutoff_radius
        )));
    }
    let l1 = [period, 0.0];
    let l2 = [0.5 * period, 0.5 * SQRT3 * period];
    let cell_vectors = [l1, l2];
    let rot_top = -top_cell.angle();
    let rot_bottom = -bottom_cell.angle();

    let (mut sites, mut intra_bonds) = build_layer(Layer::Top, &top_cell, cell_vectors, 0);
    let (bottom_sites, bottom_bonds) =
        build_layer(Layer::Bottom, &bottom_cell, cell_vectors, sites.len());
    sites.extend(bottom_sites);
    intra_bonds.extend(bottom_bonds);

    let mut graph = LatticeGraph {
        m,
        theta_deg: commensurate_angle(m),
        profile: *profile,
        sites,
        intra_bonds,
        inter_pairs: Vec::new(),
        cell_vectors,
        layer_rotation: [rot_top, rot_bottom],
    };
    graph.inter_pairs = interlayer_pairs(&graph, Layer::Top);
    Ok(graph)
}

/// Interlayer pairs within the cutoff, enumerated starting from `first`.
/// The result is always expressed as (top, bottom) and sorted.
pub fn interlayer_pairs(graph: &LatticeGraph, first: Layer) -> Vec<InterPair> {
    let profile = &graph.profile;
    if profile.j_perp_scale == 0.0 {
        return Vec::new();
    }
    let (outer, inner) = match first {
        Layer::Top => (
            graph.layer_range(Layer::Top),
            graph.layer_range(Layer::Bottom),
        ),
        Layer::Bottom => (
            graph.layer_range(Layer::Bottom),
            graph.layer_range(Layer::Top),
        ),
    };
    let bins = SiteBins::new(graph, inner, profile.cutoff_radius);
    let mut pairs = Vec::new();
    for i in outer {
        let pi = graph.sites[i].position;
        bins.for_each_candidate(graph.sites[i].frac, |j| {
            let pj = graph.sites[j].position;
            let (d, dist) = graph.min_image(pi, pj);
            if dist <= profile.cutoff_radius {
                let mid = [pi[0] + 0.5 * d[0], pi[1] + 0.5 * d[1]];
                let weight = interlayer_coupling(profile, graph.registry_at(mid), dist);
                let (top, bottom) = if first == Layer::Top { (i, j) } else { (j, i) };
                pairs.push(InterPair {
                    top,
                    bottom,
                    weight,
                });
            }
        });
    }
    pairs.sort_by_key(|p| (p.top, p.bottom));
    pairs
}

/// Uniform binning of one layer in fractional coordinates.
struct SiteBins {
    per_axis: usize,
    bins: Vec<Vec<usize>>,
}

impl SiteBins {
    fn new(graph: &LatticeGraph, range: std::ops::Range<usize>, cutoff: f64) -> Self {
        // The rhombus height bounds the fractional extent of a cutoff disk.
        let height = graph.cell_vectors[1][1];
        let per_axis = ((height / cutoff).floor() as usize).max(1);
        let mut bins = vec![Vec::new(); per_axis * per_axis];
        for i in range {
            let [b1, b2] = Self::bin_of(graph.sites[i].frac, per_axis);
            bins[b1 * per_axis + b2].push(i);
        }
        Self { per_axis, bins }
    }

    fn bin_of(frac: [f64; 2], per_axis: usize) -> [usize; 2] {
        let k = per_axis as f64;
        [
            ((frac[0] * k) as usize).min(per_axis - 1),
            ((frac[1] * k) as usize).min(per_axis - 1),
        ]
    }

    fn for_each_candidate(&self, frac: [f64; 2], mut f: impl FnMut(usize)) {
        let n = self.per_axis;
        if n < 4 {
            self.bins.iter().flatten().for_each(|&j| f(j));
            return;
        }
        let [b1, b2] = Self::bin_of(frac, n);
        for d1 in [n - 1, 0, 1] {
            for d2 in [n - 1, 0, 1] {
                let c1 = (b1 + d1) % n;
                let c2 = (b2 + d2) % n;
                self.bins[c1 * n + c2].iter().for_each(|&j| f(j));
            }
        }
    }
}
