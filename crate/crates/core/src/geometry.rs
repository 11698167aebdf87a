//! Analytic test manifolds embedded in ℝ^D.
//!
//! Each manifold is a canonical model in ℝ^{d+m} (circle, round sphere, or the
//! graph of a polynomial over a ball) placed in ℝ^D by an isometric frame and
//! an offset. All intrinsic quantities are computed on the canonical model, so
//! they do not depend on D.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffusion::FiniteMeasure;
use crate::error::{invalid, LabError, Result};
use crate::linalg::{extend_orthonormal, gram_schmidt, random_orthonormal};
use crate::poly::{PolyTerm, VecPoly};
use crate::rng::{self, LabRng};

/// Grid size used for curvature, Jacobian and volume scans of polynomial graphs.
const SCAN_POINTS: usize = 10_000;
/// Tolerance for "y lies on the manifold".
pub const ON_MANIFOLD_TOL: f64 = 1e-8;
const MIN_ACCEPTANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKind {
    Circle { radius: f64 },
    Sphere { dim: usize, radius: f64 },
    /// Graph `z ↦ (z, f(z))` of a polynomial `f: B_d(0, chart_radius) → ℝ^m`.
    PolyGraph { dim: usize, chart_radius: f64, terms: Vec<PolyTerm> },
}

impl ManifoldKind {
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            ManifoldKind::Circle { .. } => 1,
            ManifoldKind::Sphere { dim, .. } => *dim,
            ManifoldKind::PolyGraph { dim, .. } => *dim,
        }
    }

    /// Dimension of the canonical model, `d + m`.
    pub fn canonical_dim(&self) -> usize {
        match self {
            ManifoldKind::Circle { .. } => 2,
            ManifoldKind::Sphere { dim, .. } => dim + 1,
            ManifoldKind::PolyGraph { dim, terms, .. } => {
                dim + terms.first().map_or(1, |t| t.coeffs.len())
            }
        }
    }
}

/// Serializable manifold block: kind-specific keys plus `ambient_dim` and an
/// optional frame `seed` (absent means the identity frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    #[serde(flatten)]
    pub kind: ManifoldKind,
    pub ambient_dim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<EmbeddedManifold> {
        make_manifold(self.kind.clone(), self.ambient_dim, self.seed)
    }
}

/// Density with respect to the Hausdorff measure, up to normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    #[default]
    Uniform,
    /// `1 + a·cos(angle)` on circles and spheres (angle from the first canonical
    /// axis); `1 + a·cos(π z₀ / R)` on polynomial graphs. Requires `0 ≤ a ≤ 1`.
    Cosine { amplitude: f64 },
}

impl DensitySpec {
    fn validate(&self) -> Result<()> {
        if let DensitySpec::Cosine { amplitude } = self {
            if !(0.0..=1.0).contains(amplitude) {
                return invalid(format!("cosine amplitude {amplitude} outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn amplitude(&self) -> f64 {
        match self {
            DensitySpec::Uniform => 0.0,
            DensitySpec::Cosine { amplitude } => *amplitude,
        }
    }

    /// Unnormalized density at a canonical point.
    fn unnormalized(&self, m: &EmbeddedManifold, c: &DVector<f64>) -> f64 {
        let a = self.amplitude();
        match &m.kind {
            ManifoldKind::Circle { radius } | ManifoldKind::Sphere { radius, .. } => {
                1.0 + a * c[0] / radius
            }
            ManifoldKind::PolyGraph { chart_radius, .. } => {
                1.0 + a * (PI * c[0] / chart_radius).cos()
            }
        }
    }

    fn normalizer(&self, m: &EmbeddedManifold) -> f64 {
        match &m.kind {
            // The odd part integrates to zero on circles and spheres.
            ManifoldKind::Circle { .. } | ManifoldKind::Sphere { .. } => m.volume,
            ManifoldKind::PolyGraph { .. } => {
                if self.amplitude() == 0.0 {
                    return m.volume;
                }
                m.graph_scan()
                    .iter()
                    .map(|(z, jac)| {
                        let c = m.graph_point(z);
                        self.unnormalized(m, &c) * jac
                    })
                    .sum::<f64>()
                    * m.graph_cell_volume()
            }
        }
    }

    /// Normalized density at an ambient point on the manifold.
    pub fn density_at(&self, m: &EmbeddedManifold, y: &DVector<f64>) -> f64 {
        let c = m.to_canonical(y);
        self.unnormalized(m, &c) / self.normalizer(m)
    }

    /// `(p_min, p_max)` of the normalized density.
    pub fn bounds(&self, m: &EmbeddedManifold) -> (f64, f64) {
        let z = self.normalizer(m);
        let a = self.amplitude();
        ((1.0 - a) / z, (1.0 + a) / z)
    }
}

/// A d-dimensional analytic manifold embedded isometrically in ℝ^D.
#[derive(Debug, Clone)]
pub struct EmbeddedManifold {
    kind: ManifoldKind,
    ambient_dim: usize,
    frame: DMatrix<f64>,
    offset: DVector<f64>,
    reach: f64,
    holder_const: f64,
    volume: f64,
    diameter: f64,
    density: DensitySpec,
    density_bounds: (f64, f64),
    // Polynomial-graph data: the graph map and the rejection-sampling Jacobian bound.
    graph: Option<VecPoly>,
    jacobian_max: f64,
}

/// Build a manifold of the given kind in ℝ^D. With `seed = Some(s)` the frame is
/// a seeded uniformly random orthonormal set; with `None` it is the identity.
pub fn make_manifold(kind: ManifoldKind, ambient_dim: usize, seed: Option<u64>) -> Result<EmbeddedManifold> {
    let cd = kind.canonical_dim();
    if ambient_dim < cd {
        return invalid(format!("ambient dimension {ambient_dim} below the model's minimum {cd}"));
    }
    let frame = match seed {
        Some(s) => random_orthonormal(&mut rng::master(s), ambient_dim, cd),
        None => DMatrix::identity(ambient_dim, cd),
    };
    build(kind, frame, DVector::zeros(ambient_dim))
}

fn build(kind: ManifoldKind, frame: DMatrix<f64>, offset: DVector<f64>) -> Result<EmbeddedManifold> {
    let ambient_dim = frame.nrows();
    let mut m = EmbeddedManifold {
        kind: kind.clone(),
        ambient_dim,
        frame,
        offset,
        reach: 0.0,
        holder_const: 0.0,
        volume: 0.0,
        diameter: 0.0,
        density: DensitySpec::Uniform,
        density_bounds: (0.0, 0.0),
        graph: None,
        jacobian_max: 1.0,
    };
    match &kind {
        ManifoldKind::Circle { radius: r } | ManifoldKind::Sphere { radius: r, .. } => {
            let r = *r;
            if !(r > 0.0 && r.is_finite()) {
                return invalid(format!("radius must be positive, got {r}"));
            }
            let d = kind.intrinsic_dim();
            if d == 0 {
                return invalid("sphere dimension must be at least 1");
            }
            m.reach = r;
            m.volume = sphere_volume(d, r);
            m.diameter = 2.0 * r;
            // Projection chart y + Tz − h(|z|)n with h(ρ) = r − √(r² − ρ²), on |z| ≤ r/8.
            let rho = r / 8.0;
            let h1 = rho / (r * r - rho * rho).sqrt();
            let h2 = r * r / (r * r - rho * rho).powf(1.5);
            m.holder_const = (1.0 + h1 * h1).sqrt().max(h2);
        }
        ManifoldKind::PolyGraph { dim, chart_radius, terms } => {
            let d = *dim;
            if d == 0 {
                return invalid("graph dimension must be at least 1");
            }
            if !(*chart_radius > 0.0 && chart_radius.is_finite()) {
                return invalid(format!("chart radius must be positive, got {chart_radius}"));
            }
            if terms.is_empty() {
                return invalid("polynomial graph needs at least one term");
            }
            let codim = terms[0].coeffs.len();
            if codim == 0 {
                return invalid("polynomial coefficients must be nonempty vectors");
            }
            for t in terms {
                if t.exponents.len() != d || t.coeffs.len() != codim {
                    return invalid("polynomial term shapes are inconsistent");
                }
                if t.coeffs.iter().any(|c| !c.is_finite()) {
                    return invalid("polynomial coefficients must be finite");
                }
            }
            m.graph = Some(VecPoly { d, m: codim, terms: terms.clone() });
            m.scan_graph_constants()?;
        }
    }
    let (lo, hi) = DensitySpec::Uniform.bounds(&m);
    m.density_bounds = (lo, hi);
    Ok(m)
}

/// `Γ(k/2)` for a positive integer `k`.
fn gamma_half(k: usize) -> f64 {
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while x < k as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Volume of the unit ball in ℝ^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    PI.powf(d as f64 / 2.0) / gamma_half(d + 2)
}

/// d-dimensional volume of the round sphere `S^d(r)`.
pub fn sphere_volume(d: usize, r: f64) -> f64 {
    2.0 * PI.powf((d + 1) as f64 / 2.0) / gamma_half(d + 1) * r.powi(d as i32)
}

/// `log₊ x = max(log x, 0)`.
pub fn log_plus(x: f64) -> f64 {
    x.ln().max(0.0)
}

fn unit_directions(d: usize) -> Vec<DVector<f64>> {
    match d {
        1 => vec![DVector::from_element(1, 1.0)],
        2 => (0..180)
            .map(|k| {
                let a = PI * k as f64 / 180.0;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        _ => {
            let mut dirs: Vec<DVector<f64>> = (0..d)
                .map(|j| DVector::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 }))
                .collect();
            let mut rng = LabRng::seed_from_u64(0x5eed);
            for _ in 0..256 {
                let v = rng::standard_normal(&mut rng, d);
                dirs.push(v.normalize());
            }
            dirs
        }
    }
}

impl EmbeddedManifold {
    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.kind.intrinsic_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// Bound on the first two derivatives of the charts on `B(0, τ/8)`.
    pub fn holder_const(&self) -> f64 {
        self.holder_const
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Factor that rescales the manifold to unit diameter.
    pub fn unit_diameter_scale(&self) -> f64 {
        1.0 / self.diameter
    }

    /// Chart radius `r₀ = min(1, τ, 1/L_M)/8`.
    pub fn r0(&self) -> f64 {
        1.0f64.min(self.reach).min(1.0 / self.holder_const) / 8.0
    }

    pub fn density(&self) -> DensitySpec {
        self.density
    }

    pub fn density_bounds(&self) -> (f64, f64) {
        self.density_bounds
    }

    /// Attach a density; both bounds must be positive.
    pub fn with_density(mut self, density: DensitySpec) -> Result<Self> {
        density.validate()?;
        let (lo, hi) = density.bounds(&self);
        if !(lo > 0.0 && lo <= hi) {
            return invalid(format!("density bounds ({lo}, {hi}) must be positive and ordered"));
        }
        self.density = density;
        self.density_bounds = (lo, hi);
        Ok(self)
    }

    /// The same manifold scaled to unit diameter and translated so that it
    /// passes through the origin. The frame is unchanged.
    pub fn normalized(&self) -> Result<EmbeddedManifold> {
        let s = self.unit_diameter_scale();
        let kind = match &self.kind {
            ManifoldKind::Circle { radius } => ManifoldKind::Circle { radius: radius * s },
            ManifoldKind::Sphere { dim, radius } => ManifoldKind::Sphere { dim: *dim, radius: radius * s },
            ManifoldKind::PolyGraph { dim, chart_radius, terms } => ManifoldKind::PolyGraph {
                dim: *dim,
                chart_radius: chart_radius * s,
                // g(u) = s·f(u/s) rescales a degree-k coefficient by s^{1−k}.
                terms: terms
                    .iter()
                    .map(|t| PolyTerm {
                        exponents: t.exponents.clone(),
                        coeffs: t.coeffs.iter().map(|c| c * s.powi(1 - t.degree() as i32)).collect(),
                    })
                    .collect(),
            },
        };
        let mut out = build(kind, self.frame.clone(), DVector::zeros(self.ambient_dim))?;
        let anchor = out.anchor_point();
        out.offset = -anchor;
        out.with_density(self.density)
    }

    /// A fixed reference point of the canonical model, embedded.
    pub fn anchor_point(&self) -> DVector<f64> {
        let c = match &self.kind {
            ManifoldKind::Circle { radius } | ManifoldKind::Sphere { radius, .. } => {
                let mut c = DVector::zeros(self.kind.canonical_dim());
                c[0] = *radius;
                c
            }
            ManifoldKind::PolyGraph { dim, .. } => self.graph_point(&vec![0.0; *dim]),
        };
        self.embed(&c)
    }

    pub fn embed(&self, canonical: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.frame * canonical
    }

    /// Frame coordinates of `x` (the canonical point when `x` is on the manifold).
    pub fn to_canonical(&self, x: &DVector<f64>) -> DVector<f64> {
        self.frame.tr_mul(&(x - &self.offset))
    }

    fn graph(&self) -> &VecPoly {
        self.graph.as_ref().expect("polynomial graph data")
    }

    /// `(z, f(z))` for a polynomial graph.
    fn graph_point(&self, z: &[f64]) -> DVector<f64> {
        let f = self.graph().eval(z);
        DVector::from_iterator(z.len() + f.len(), z.iter().copied().chain(f.iter().copied()))
    }

    /// Jacobian of `z ↦ (z, f(z))`, `(d+m) × d`.
    fn graph_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let g = self.graph();
        let mut j = DMatrix::zeros(g.d + g.m, g.d);
        for k in 0..g.d {
            j[(k, k)] = 1.0;
        }
        j.view_mut((g.d, 0), (g.m, g.d)).copy_from(&g.jacobian(z));
        j
    }

    fn graph_step(&self) -> (usize, f64) {
        let d = self.intrinsic_dim();
        let r = match &self.kind {
            ManifoldKind::PolyGraph { chart_radius, .. } => *chart_radius,
            _ => unreachable!(),
        };
        let per_axis = (SCAN_POINTS as f64).powf(1.0 / d as f64).ceil() as usize;
        (per_axis, 2.0 * r / per_axis as f64)
    }

    fn graph_cell_volume(&self) -> f64 {
        let (_, h) = self.graph_step();
        h.powi(self.intrinsic_dim() as i32)
    }

    /// Midpoint grid over the chart ball with area elements `√det(JᵀJ)`.
    fn graph_scan(&self) -> Vec<(Vec<f64>, f64)> {
        let d = self.intrinsic_dim();
        let (per_axis, h) = self.graph_step();
        let r = h * per_axis as f64 / 2.0;
        let total = per_axis.pow(d as u32);
        let mut out = Vec::new();
        for flat in 0..total {
            let mut idx = flat;
            let z: Vec<f64> = (0..d)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    -r + (i as f64 + 0.5) * h
                })
                .collect();
            if z.iter().map(|v| v * v).sum::<f64>() > r * r {
                continue;
            }
            let j = self.graph_jacobian(&z);
            let det = (j.transpose() * &j).determinant().max(0.0).sqrt();
            out.push((z, det));
        }
        out
    }

    fn scan_graph_constants(&mut self) -> Result<()> {
        let d = self.intrinsic_dim();
        let dirs = unit_directions(d);
        let scan = self.graph_scan();
        let mut kappa_max: f64 = 0.0;
        let mut deriv1: f64 = 1.0;
        let mut deriv2: f64 = 0.0;
        let mut jac_max: f64 = 0.0;
        for (z, det) in &scan {
            jac_max = jac_max.max(*det);
            let j = self.graph_jacobian(z);
            let g = j.transpose() * &j;
            let g_inv = g
                .clone()
                .try_inverse()
                .ok_or_else(|| LabError::Numerical("singular graph metric".into()))?;
            let normal = DMatrix::identity(j.nrows(), j.nrows()) - &j * &g_inv * j.transpose();
            deriv1 = deriv1.max(j.singular_values()[0]);
            for a in &dirs {
                let f2 = self.graph().second_directional(z, a);
                let mut h = DVector::zeros(j.nrows());
                h.rows_mut(d, f2.len()).copy_from(&f2);
                let speed2 = (a.transpose() * &g * a)[(0, 0)];
                kappa_max = kappa_max.max((&normal * &h).norm() / speed2);
                deriv2 = deriv2.max(f2.norm());
            }
        }
        if !kappa_max.is_finite() {
            return Err(LabError::Numerical("curvature scan produced non-finite values".into()));
        }
        let reach = if kappa_max > 0.0 { 1.0 / (2.0 * kappa_max) } else { f64::INFINITY };
        if reach <= 0.0 {
            return invalid("polynomial graph has non-positive reach bound");
        }
        self.reach = reach;
        self.holder_const = deriv1.max(deriv2);
        self.jacobian_max = jac_max * 1.01;
        self.volume = scan.iter().map(|(_, det)| det).sum::<f64>() * self.graph_cell_volume();
        // Diameter from a thinned set of scan points.
        let stride = (scan.len() / 400).max(1);
        let pts: Vec<DVector<f64>> = scan.iter().step_by(stride).map(|(z, _)| self.graph_point(z)).collect();
        let mut diam: f64 = 0.0;
        for (i, p) in pts.iter().enumerate() {
            for q in &pts[i + 1..] {
                diam = diam.max((p - q).norm());
            }
        }
        self.diameter = diam.max(f64::MIN_POSITIVE);
        Ok(())
    }

    /// Nearest point of the canonical model to a canonical-space vector.
    fn canonical_projection(&self, c: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ManifoldKind::Circle { radius } | ManifoldKind::Sphere { radius, .. } => {
                let n = c.norm();
                if n == 0.0 {
                    let mut p = DVector::zeros(c.len());
                    p[0] = *radius;
                    p
                } else {
                    c * (radius / n)
                }
            }
            ManifoldKind::PolyGraph { dim, chart_radius, .. } => {
                let d = *dim;
                let clamp = |z: &mut Vec<f64>| {
                    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > *chart_radius {
                        z.iter_mut().for_each(|v| *v *= chart_radius / n);
                    }
                };
                let mut z: Vec<f64> = c.iter().take(d).copied().collect();
                clamp(&mut z);
                let mut best = (self.graph_point(&z) - c).norm_squared();
                // Damped Gauss-Newton on ½‖Φ(z) − c‖² with backtracking.
                for _ in 0..100 {
                    let r = self.graph_point(&z) - c;
                    let j = self.graph_jacobian(&z);
                    let g = j.transpose() * &j;
                    let grad = j.transpose() * &r;
                    let Some(step) = g.lu().solve(&grad) else { break };
                    let mut lambda = 1.0;
                    let mut improved = false;
                    while lambda > 1e-8 {
                        let mut cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a - lambda * b).collect();
                        clamp(&mut cand);
                        let val = (self.graph_point(&cand) - c).norm_squared();
                        if val < best {
                            best = val;
                            z = cand;
                            improved = true;
                            break;
                        }
                        lambda *= 0.5;
                    }
                    if !improved || step.norm() * lambda < 1e-15 {
                        break;
                    }
                }
                self.graph_point(&z)
            }
        }
    }

    /// Nearest manifold point to `x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.to_canonical(x);
        self.embed(&self.canonical_projection(&c))
    }

    /// Euclidean distance from `x` to the manifold.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        (x - self.project(x)).norm()
    }

    fn check_on(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.ambient_dim {
            return Err(LabError::DimensionMismatch { expected: self.ambient_dim, got: y.len() });
        }
        let dist = self.distance(y);
        if dist > ON_MANIFOLD_TOL {
            return Err(LabError::OffManifold { distance: dist, tolerance: ON_MANIFOLD_TOL });
        }
        Ok(self.to_canonical(y))
    }

    /// Orthonormal tangent basis of the canonical model at canonical point `c`.
    fn canonical_tangent(&self, c: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            ManifoldKind::Circle { .. } => {
                let n = c.norm();
                DMatrix::from_column_slice(2, 1, &[-c[1] / n, c[0] / n])
            }
            ManifoldKind::Sphere { dim, .. } => {
                let normal = DMatrix::from_column_slice(dim + 1, 1, c.normalize().as_slice());
                let full = extend_orthonormal(&normal, dim + 1);
                full.columns(1, *dim).into_owned()
            }
            ManifoldKind::PolyGraph { dim, .. } => {
                let z: Vec<f64> = c.iter().take(*dim).copied().collect();
                gram_schmidt(&self.graph_jacobian(&z), 0.0).expect("graph Jacobian has full rank")
            }
        }
    }

    /// D×d orthonormal basis of `T_yM`.
    pub fn tangent_basis(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let c = self.check_on(y)?;
        Ok(&self.frame * self.canonical_tangent(&c))
    }

    /// Orthogonal projector onto `T_yM`.
    pub fn tangent_projector(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let t = self.tangent_basis(y)?;
        Ok(&t * t.transpose())
    }

    /// Tangent coordinates `π_y(x − y)` expressed in the basis of [`tangent_basis`](Self::tangent_basis).
    pub fn chart_coords(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.tangent_basis(y)?.tr_mul(&(x - y)))
    }

    /// The chart `Φ_y`: the manifold point whose tangent-plane projection at `y`
    /// is `y + T z`. Defined for `‖z‖ ≤ τ/8`.
    pub fn chart(&self, y: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.check_on(y)?;
        let d = self.intrinsic_dim();
        if z.len() != d {
            return Err(LabError::DimensionMismatch { expected: d, got: z.len() });
        }
        let t = self.canonical_tangent(&c);
        let limit = self.reach / 8.0;
        if z.norm() > limit * (1.0 + 1e-12) {
            return invalid(format!("chart coordinate norm {} exceeds τ/8 = {limit}", z.norm()));
        }
        let canon = match &self.kind {
            ManifoldKind::Circle { radius: r } | ManifoldKind::Sphere { radius: r, .. } => {
                let h = r - (r * r - z.norm_squared()).sqrt();
                &c + &t * z - c.normalize() * h
            }
            ManifoldKind::PolyGraph { dim, .. } => {
                let w0: Vec<f64> = c.iter().take(*dim).copied().collect();
                let mut w = w0.clone();
                for _ in 0..60 {
                    let res = t.tr_mul(&(self.graph_point(&w) - &c)) - z;
                    if res.norm() < 1e-15 {
                        break;
                    }
                    let jac = t.tr_mul(&self.graph_jacobian(&w));
                    let step = jac
                        .lu()
                        .solve(&res)
                        .ok_or_else(|| LabError::Numerical("chart Newton step singular".into()))?;
                    w.iter_mut().zip(step.iter()).for_each(|(a, b)| *a -= b);
                }
                self.graph_point(&w)
            }
        };
        Ok(self.embed(&canon))
    }

    /// Points on the manifold forming a net of the given spacing.
    pub fn grid(&self, spacing: f64) -> Result<Vec<DVector<f64>>> {
        if !(spacing > 0.0) {
            return invalid("grid spacing must be positive");
        }
        let pts: Vec<DVector<f64>> = match &self.kind {
            ManifoldKind::Circle { radius } => {
                let n = ((2.0 * PI * radius) / spacing).ceil().max(3.0) as usize;
                (0..n)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / n as f64;
                        DVector::from_vec(vec![radius * a.cos(), radius * a.sin()])
                    })
                    .collect()
            }
            ManifoldKind::Sphere { dim: 2, radius } => {
                // Fibonacci lattice; covering radius is below the nominal spacing.
                let n = (4.0 * PI * radius * radius / (spacing * spacing) * 2.0).ceil().max(8.0) as usize;
                let golden = PI * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|k| {
                        let zc = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                        let rr = (1.0 - zc * zc).sqrt();
                        let a = golden * k as f64;
                        DVector::from_vec(vec![radius * rr * a.cos(), radius * rr * a.sin(), radius * zc])
                    })
                    .collect()
            }
            ManifoldKind::PolyGraph { dim: 1, chart_radius, .. } => {
                // Arc length per unit z is at most the Jacobian bound.
                let n = ((2.0 * chart_radius * self.jacobian_max) / spacing).ceil().max(2.0) as usize;
                (0..=n)
                    .map(|k| {
                        let z = -chart_radius + 2.0 * chart_radius * k as f64 / n as f64;
                        self.graph_point(&[z])
                    })
                    .collect()
            }
            _ => {
                // Oversample uniformly, then thin to a net.
                let d = self.intrinsic_dim() as i32;
                let count = (self.volume / (spacing / 4.0).powi(d) * 4.0).ceil().clamp(64.0, 2e6) as usize;
                let mut rng = LabRng::seed_from_u64(0x6e7);
                let raw = self.sample_canonical(&DensitySpec::Uniform, count, &mut rng)?;
                let net = eps_net(&raw, spacing)?;
                return Ok(net.centers.iter().map(|c| self.embed(c)).collect());
            }
        };
        Ok(pts.iter().map(|c| self.embed(c)).collect())
    }

    fn sample_canonical<R: Rng + ?Sized>(
        &self,
        density: &DensitySpec,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        density.validate()?;
        let a = density.amplitude();
        let q_max = 1.0 + a;
        let mut out = Vec::with_capacity(n);
        let mut attempts: u64 = 0;
        while out.len() < n {
            attempts += 1;
            let (c, jac_ratio) = match &self.kind {
                ManifoldKind::Circle { radius } => {
                    let th = rng.random::<f64>() * 2.0 * PI;
                    (DVector::from_vec(vec![radius * th.cos(), radius * th.sin()]), 1.0)
                }
                ManifoldKind::Sphere { dim, radius } => {
                    let g = rng::standard_normal(rng, dim + 1);
                    (g.normalize() * *radius, 1.0)
                }
                ManifoldKind::PolyGraph { dim, chart_radius, .. } => {
                    let dir = rng::standard_normal(rng, *dim).normalize();
                    let rad = chart_radius * rng.random::<f64>().powf(1.0 / *dim as f64);
                    let z: Vec<f64> = dir.iter().map(|v| v * rad).collect();
                    let j = self.graph_jacobian(&z);
                    let det = (j.transpose() * &j).determinant().max(0.0).sqrt();
                    (self.graph_point(&z), det / self.jacobian_max)
                }
            };
            let accept = density.unnormalized(self, &c) / q_max * jac_ratio;
            if rng.random::<f64>() < accept {
                out.push(c);
            }
            if attempts >= 10_000 && (out.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
                return Err(LabError::LowAcceptance {
                    rate: out.len() as f64 / attempts as f64,
                    floor: MIN_ACCEPTANCE,
                });
            }
        }
        Ok(out)
    }
}

/// Draw `n` i.i.d. points from `density · dHausdorff` with uniform weights.
pub fn sample_measure(
    manifold: &EmbeddedManifold,
    density: &DensitySpec,
    n: usize,
    seed: u64,
) -> Result<FiniteMeasure> {
    if n == 0 {
        return invalid("sample size must be at least 1");
    }
    let mut rng = rng::master(seed);
    let pts = manifold.sample_canonical(density, n, &mut rng)?;
    FiniteMeasure::uniform(pts.iter().map(|c| manifold.embed(c)).collect())
}

/// An ε-dense, ε/2-separated subset of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    pub centers: Vec<DVector<f64>>,
    pub epsilon: f64,
}

/// Greedy net: scan in input order, admit a point iff it is farther than ε/2
/// from every admitted center. Candidates are bucketed on the leading (up to
/// three) coordinates, which only prunes pairs already farther than ε/2.
pub fn eps_net(points: &[DVector<f64>], epsilon: f64) -> Result<EpsNet> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    let half = epsilon / 2.0;
    let lead = points.first().map_or(0, |p| p.len().min(3));
    let key = |p: &DVector<f64>| -> Vec<i64> { (0..lead).map(|k| (p[k] / half).floor() as i64).collect() };
    let mut cells: std::collections::HashMap<Vec<i64>, Vec<usize>> = Default::default();
    let mut centers: Vec<DVector<f64>> = Vec::new();
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(lead as u32))
        .map(|mut c| {
            (0..lead)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect()
        })
        .collect();
    for p in points {
        let k = key(p);
        let near = offsets.iter().any(|o| {
            let cell: Vec<i64> = k.iter().zip(o).map(|(a, b)| a + b).collect();
            cells.get(&cell).is_some_and(|ids| ids.iter().any(|&i| (p - &centers[i]).norm() <= half))
        });
        if !near {
            cells.entry(k).or_default().push(centers.len());
            centers.push(p.clone());
        }
    }
    Ok(EpsNet { centers, epsilon })
}

impl EpsNet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Largest distance from a point of `points` to its nearest center.
    pub fn max_gap(&self, points: &[DVector<f64>]) -> f64 {
        points
            .iter()
            .map(|p| self.centers.iter().map(|c| (p - c).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    }

    /// Every point of `points` lies within ε of a center.
    pub fn is_dense_over(&self, points: &[DVector<f64>]) -> bool {
        points.is_empty() || (!self.centers.is_empty() && self.max_gap(points) <= self.epsilon)
    }

    /// Pairwise center distances exceed ε/2.
    pub fn is_sparse(&self) -> bool {
        let half = self.epsilon / 2.0;
        self.centers
            .iter()
            .enumerate()
            .all(|(i, a)| self.centers[i + 1..].iter().all(|b| (a - b).norm() > half))
    }

    /// Cardinality bound `|net| ≤ (ε/2)^{−d} Vol M`.
    pub fn within_volume_bound(&self, d: usize, volume: f64) -> bool {
        self.centers.len() as f64 <= (self.epsilon / 2.0).powi(-(d as i32)) * volume
    }

    /// Error unless every probe lies within `resolution` of a center.
    pub fn verify_density(&self, probes: &[DVector<f64>], resolution: f64) -> Result<()> {
        let gap = self.max_gap(probes);
        if gap > resolution {
            return Err(LabError::NetTooCoarse { distance: gap, resolution });
        }
        Ok(())
    }
}

/// The smallest scalar satisfying the complexity inequalities for a manifold
/// and density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityConstant {
    pub c_log: f64,
}

impl ComplexityConstant {
    pub fn for_manifold(m: &EmbeddedManifold) -> Result<Self> {
        let d = m.intrinsic_dim() as f64;
        let (p_min, p_max) = m.density_bounds();
        if !(p_min > 0.0) {
            return invalid("complexity constant needs a positive density lower bound");
        }
        let log_vol = m.volume().ln();
        let candidates = [
            d.max(4.0),
            -p_min.ln(),
            p_max.ln(),
            if log_vol > 0.0 { log_vol.ln() } else { f64::NEG_INFINITY },
            -(m.reach().min(1.0 / m.holder_const())).ln(),
        ];
        let c = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Strict inequalities: step just above the binding constraint.
        Ok(Self { c_log: c + 1e-9 * c.abs().max(1.0) })
    }

    pub fn satisfied_by(&self, m: &EmbeddedManifold) -> bool {
        let d = m.intrinsic_dim() as f64;
        let (p_min, p_max) = m.density_bounds();
        let e = self.c_log.exp();
        self.c_log > d.max(4.0)
            && 1.0 / e < p_min
            && p_max < e
            && m.volume().ln() < e
            && m.reach().min(1.0 / m.holder_const()) >= 1.0 / e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parabola(d_amb: usize, seed: Option<u64>) -> EmbeddedManifold {
        make_manifold(
            ManifoldKind::PolyGraph {
                dim: 1,
                chart_radius: 0.3,
                terms: vec![PolyTerm { exponents: vec![2], coeffs: vec![1.0] }],
            },
            d_amb,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn circle_basics() {
        let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 2, None).unwrap();
        assert_eq!(m.reach(), 1.0);
        assert!((m.volume() - 2.0 * PI).abs() < 1e-12);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let p = m.tangent_projector(&y).unwrap();
        assert!((p[(1, 1)] - 1.0).abs() < 1e-12 && p[(0, 0)].abs() < 1e-12);
        assert!(make_manifold(ManifoldKind::Circle { radius: 1.0 }, 1, None).is_err());
    }

    #[test]
    fn sphere_reach_independent_of_d() {
        let m = make_manifold(ManifoldKind::Sphere { dim: 2, radius: 1.0 }, 64, Some(4)).unwrap();
        assert_eq!(m.reach(), 1.0);
        assert!(crate::linalg::orthonormality_defect(m.frame()) < 1e-12);
        assert!((m.volume() - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn parabola_reach_from_curvature() {
        let m = parabola(8, Some(1));
        // Curvature of z² peaks at the vertex with value 2.
        assert!((m.reach() - 0.25).abs() < 1e-6, "reach {}", m.reach());
    }

    #[test]
    fn off_manifold_projector_rejected() {
        let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 3, None).unwrap();
        assert!(m.tangent_projector(&DVector::from_vec(vec![1.1, 0.0, 0.0])).is_err());
    }

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * PI).abs() < 1e-12);
        assert!((sphere_volume(1, 2.0) - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn normalized_has_unit_diameter_and_contains_origin() {
        let m = make_manifold(ManifoldKind::Circle { radius: 3.0 }, 5, Some(2)).unwrap();
        let n = m.normalized().unwrap();
        assert!((n.diameter() - 1.0).abs() < 1e-12);
        assert!(n.distance(&DVector::zeros(5)) < 1e-12);
        let p = parabola(4, Some(3)).normalized().unwrap();
        assert!((p.diameter() - 1.0).abs() < 1e-2);
        assert!(p.distance(&DVector::zeros(4)) < 1e-12);
    }

    #[test]
    fn complexity_constant_is_admissible() {
        for m in [
            make_manifold(ManifoldKind::Circle { radius: 1.0 }, 4, Some(1)).unwrap(),
            make_manifold(ManifoldKind::Sphere { dim: 2, radius: 0.5 }, 4, Some(1)).unwrap(),
            parabola(3, None),
        ] {
            let c = ComplexityConstant::for_manifold(&m).unwrap();
            assert!(c.satisfied_by(&m));
        }
    }

    #[test]
    fn cosine_density_bounds() {
        let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 2, None).unwrap();
        assert!(m.clone().with_density(DensitySpec::Cosine { amplitude: 1.0 }).is_err());
        let m = m.with_density(DensitySpec::Cosine { amplitude: 0.5 }).unwrap();
        let (lo, hi) = m.density_bounds();
        assert!((lo - 0.5 / (2.0 * PI)).abs() < 1e-12 && (hi - 1.5 / (2.0 * PI)).abs() < 1e-12);
    }
}
