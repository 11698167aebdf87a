//! ReLU networks and the anchor-localized structured score estimator.
//!
//! A network computes `(A^L relu + b^L) ∘ … ∘ (A^1 relu + b^1)(x)`: the ReLU is
//! applied to the input of every affine layer, and the output is linear.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ou_coeffs, ScoreField, MIN_SCORE_TIME};
use crate::error::{invalid, LabError, Result};
use crate::fit::span_basis;
use crate::linalg::span_basis as svd_span;
use crate::rng::{self, standard_normal};

/// Partition function: 1 on [0, 1/2], 2 − 2x on [1/2, 1], 0 beyond.
pub fn rho(x: f64) -> f64 {
    let x = x.abs();
    if x <= 0.5 {
        1.0
    } else if x <= 1.0 {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    layers: Vec<Layer>,
    bound: f64,
    /// Declared nonzero budget. Tracked, not enforced.
    sparsity: usize,
}

/// Gradients of a scalar objective with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input: DVector<f64>,
}

impl NetGrad {
    fn zeros_like(net: &ReluNet) -> Self {
        NetGrad {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
            input: DVector::zeros(net.input_dim()),
        }
    }

    fn add_scaled(&mut self, other: &NetGrad, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b * s;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b * s;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

impl ReluNet {
    pub fn from_layers(layers: Vec<Layer>, bound: f64, sparsity: usize) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        if !(bound > 0.0) {
            return invalid(format!("weight bound must be positive, got {bound}"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return invalid(format!("layer {k}: bias length {} vs {} rows", l.bias.len(), l.weight.nrows()));
            }
            if k > 0 && l.weight.ncols() != layers[k - 1].weight.nrows() {
                return invalid(format!("layer {k}: input width {} vs previous output {}", l.weight.ncols(), layers[k - 1].weight.nrows()));
            }
        }
        let mut net = ReluNet { layers, bound, sparsity };
        net.clip();
        Ok(net)
    }

    /// He-scaled Gaussian weights, zero biases. `widths = [input, hidden…, output]`.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], bound: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return invalid("widths need input and output sizes");
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0].max(1) as f64).sqrt()).expect("finite scale");
                Layer { weight: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)), bias: DVector::zeros(w[1]) }
            })
            .collect();
        let sparsity = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self::from_layers(layers, bound, sparsity)
    }

    pub fn zeros(widths: &[usize], bound: f64) -> Result<Self> {
        if widths.len() < 2 {
            return invalid("widths need input and output sizes");
        }
        let layers = widths.windows(2).map(|w| Layer { weight: DMatrix::zeros(w[1], w[0]), bias: DVector::zeros(w[1]) }).collect();
        Self::from_layers(layers, bound, 0)
    }

    pub fn identity(dim: usize, bound: f64) -> Result<Self> {
        Self::from_layers(vec![Layer { weight: DMatrix::identity(dim, dim), bias: DVector::zeros(dim) }], bound, dim)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn sparsity_budget(&self) -> usize {
        self.sparsity
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn nonzeros(&self) -> usize {
        self.layers.iter().map(|l| l.weight.iter().chain(l.bias.iter()).filter(|v| **v != 0.0).count()).sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.amax().max(l.bias.amax())).fold(0.0, f64::max)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, each weight matrix column-major, then its bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    /// Inverse of [`params`](Self::params); entries are not clipped.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(LabError::DimensionMismatch { expected: self.num_params(), got: p.len() });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&p[k..k + n]);
            k += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&p[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn clip(&mut self) {
        let b = self.bound;
        for l in &mut self.layers {
            l.weight.apply(|v| *v = v.clamp(-b, b));
            l.bias.apply(|v| *v = v.clamp(-b, b));
        }
    }

    fn sgd_step(&mut self, g: &NetGrad, lr: f64) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(g.weights.iter().zip(&g.biases)) {
            l.weight -= gw * lr;
            l.bias -= gb * lr;
        }
        self.clip();
    }

    fn forward(&self, input: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if input.len() != self.input_dim() {
            return Err(LabError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for l in &self.layers {
            let r = acts.last().expect("nonempty").map(|v| v.max(0.0));
            acts.push(&l.weight * r + &l.bias);
        }
        Ok(acts)
    }
}

pub fn net_eval(net: &ReluNet, input: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(net.forward(input)?.pop().expect("nonempty"))
}

/// Reverse-mode gradient of `⟨upstream, net(input)⟩`. ReLU′(0) = 0.
pub fn net_grad(net: &ReluNet, input: &DVector<f64>, upstream: &DVector<f64>) -> Result<NetGrad> {
    if upstream.len() != net.output_dim() {
        return Err(LabError::DimensionMismatch { expected: net.output_dim(), got: upstream.len() });
    }
    let acts = net.forward(input)?;
    let nl = net.layers.len();
    let mut weights = vec![DMatrix::zeros(0, 0); nl];
    let mut biases = vec![DVector::zeros(0); nl];
    let mut g = upstream.clone();
    for l in (0..nl).rev() {
        let r = acts[l].map(|v| v.max(0.0));
        weights[l] = &g * r.transpose();
        let gr = net.layers[l].weight.tr_mul(&g);
        biases[l] = g;
        g = gr.zip_map(&acts[l], |gv, a| if a > 0.0 { gv } else { 0.0 });
    }
    Ok(NetGrad { weights, biases, input: g })
}

/// `ρ(gapᵢ / 2C)` with `gapᵢ = ‖x − c_t Gᵢ‖² − min_j ‖x − c_t G_j‖²`.
pub fn rho_weight(t: f64, x: &DVector<f64>, anchors: &[DVector<f64>], c_const: f64) -> Result<Vec<f64>> {
    if anchors.is_empty() {
        return Err(LabError::Empty("anchor set".into()));
    }
    if !(c_const > 0.0) {
        return invalid(format!("localization constant must be positive, got {c_const}"));
    }
    let c = ou_coeffs(t)?.c;
    let d2: Vec<f64> = anchors.iter().map(|g| (x - g * c).norm_squared()).collect();
    Ok(rho_from_sq_dists(&d2, c_const))
}

fn rho_from_sq_dists(d2: &[f64], c_const: f64) -> Vec<f64> {
    let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    d2.iter().map(|v| rho((v - min) / (2.0 * c_const))).collect()
}

/// Constants of the structured family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConstants {
    /// Weight floor exponent: `φ_w ≥ n^{−C_w}`.
    pub c_w: f64,
    /// Envelope multiplier.
    pub c_e: f64,
    pub c_dim: f64,
    pub c_log: f64,
    /// Intrinsic dimension used in the localization constant.
    pub d: usize,
    /// Sample size `n`.
    pub n: usize,
    /// Overrides `C(t, n)` when set.
    pub rho_const: Option<f64>,
}

impl Default for FamilyConstants {
    fn default() -> Self {
        FamilyConstants { c_w: 4.0, c_e: 2.0, c_dim: 1.0, c_log: 5.0, d: 1, n: 100, rho_const: None }
    }
}

impl FamilyConstants {
    /// `C(t, n) = 960 σ_t² (d(log n + 4 C_log) + 8 log n)`.
    pub fn rho_const_at(&self, sigma2: f64) -> f64 {
        if let Some(c) = self.rho_const {
            return c;
        }
        let ln = (self.n as f64).ln();
        960.0 * sigma2 * (self.d as f64 * (ln + 4.0 * self.c_log) + 8.0 * ln)
    }

    pub fn weight_floor(&self) -> f64 {
        (self.n as f64).powf(-self.c_w)
    }

    /// `C_e √(C_dim log n)`, with `log n` floored at 1 so tiny samples keep a usable box.
    pub fn envelope(&self) -> f64 {
        self.c_e * (self.c_dim * (self.n as f64).ln().max(1.0)).sqrt()
    }
}

/// `s(t,x) = (c_t/σ_t²) Σ ωᵢ eᵢ / Σ ωᵢ − x/σ_t²` with `ωᵢ = ρᵢ φ_{w,i}` and
/// `eᵢ = Gᵢ + Lᵢ φ_{e,i}(σ_t, x̃ᵢ, −x̃ᵢ)`, `x̃ᵢ = Lᵢᵀ(x − c_t Gᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredScore {
    pub anchors: Vec<DVector<f64>>,
    pub frames: Vec<DMatrix<f64>>,
    pub phi_e: Vec<ReluNet>,
    pub phi_w: Vec<ReluNet>,
    pub constants: FamilyConstants,
    /// Radius bound on every predicted conditional expectation.
    pub e_bound: f64,
    pub t_range: (f64, f64),
}

/// Gradient of a scalar objective with respect to all nets of a [`StructuredScore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub e: Vec<NetGrad>,
    pub w: Vec<NetGrad>,
}

impl ModelGrad {
    fn zeros_like(m: &StructuredScore) -> Self {
        ModelGrad { e: m.phi_e.iter().map(NetGrad::zeros_like).collect(), w: m.phi_w.iter().map(NetGrad::zeros_like).collect() }
    }

    fn add_scaled(&mut self, o: &ModelGrad, s: f64) {
        for (a, b) in self.e.iter_mut().zip(&o.e) {
            a.add_scaled(b, s);
        }
        for (a, b) in self.w.iter_mut().zip(&o.w) {
            a.add_scaled(b, s);
        }
    }

    /// Same layout as [`StructuredScore::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (e, w) in self.e.iter().zip(&self.w) {
            out.extend(e.flatten());
            out.extend(w.flatten());
        }
        out
    }
}

struct AnchorEval {
    i: usize,
    rho: f64,
    input: DVector<f64>,
    e: DVector<f64>,
    /// Box-clip mask on φ_e outputs (true = passes gradient).
    e_mask: Vec<bool>,
    e_ball_clipped: bool,
    w: f64,
    w_active: bool,
}

struct Evaluation {
    c: f64,
    sigma2: f64,
    anchors: Vec<AnchorEval>,
    total: f64,
    e_bar: DVector<f64>,
    score: DVector<f64>,
}

impl StructuredScore {
    /// Zero-initialized `φ_e` (so `eᵢ = Gᵢ`) and constant `φ_w = 1`, with hidden
    /// layers drawn at random.
    pub fn init(
        anchors: Vec<DVector<f64>>,
        frames: Vec<DMatrix<f64>>,
        hidden: &[usize],
        bound: f64,
        constants: FamilyConstants,
        t_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(LabError::Empty("anchor set".into()));
        }
        if anchors.len() != frames.len() {
            return invalid("one frame per anchor required");
        }
        if !(t_range.0 >= MIN_SCORE_TIME && t_range.1 > t_range.0) {
            return invalid(format!("invalid time range {t_range:?}"));
        }
        let dim = anchors[0].len();
        let mut rng = rng::master(seed);
        let mut phi_e = Vec::new();
        let mut phi_w = Vec::new();
        for f in &frames {
            if f.nrows() != dim {
                return Err(LabError::DimensionMismatch { expected: dim, got: f.nrows() });
            }
            let di = f.ncols();
            let mut widths = vec![1 + 2 * di];
            widths.extend_from_slice(hidden);
            let mut we = widths.clone();
            we.push(di);
            let mut e = ReluNet::random(&we, bound, &mut rng)?;
            zero_last(&mut e);
            let mut ww = widths;
            ww.push(1);
            let mut w = ReluNet::random(&ww, bound, &mut rng)?;
            zero_last(&mut w);
            w.layers.last_mut().expect("nonempty").bias[0] = 1.0f64.min(bound);
            phi_e.push(e);
            phi_w.push(w);
        }
        let e_bound = 2.0 * anchors.iter().map(|a| a.norm()).fold(0.0, f64::max) + 1.0;
        let model = StructuredScore { anchors, frames, phi_e, phi_w, constants, e_bound, t_range };
        model.check_class()?;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Frame orthonormality, net shapes and the weight bound.
    pub fn check_class(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            let defect = (f.tr_mul(f) - DMatrix::identity(f.ncols(), f.ncols())).amax();
            if defect > 1e-10 {
                return Err(LabError::Numerical(format!("frame {i} not orthonormal (defect {defect:e})")));
            }
            let di = f.ncols();
            let (e, w) = (&self.phi_e[i], &self.phi_w[i]);
            if e.input_dim() != 1 + 2 * di || e.output_dim() != di || w.input_dim() != 1 + 2 * di || w.output_dim() != 1 {
                return invalid(format!("anchor {i}: network shapes do not match frame dimension {di}"));
            }
            for net in [e, w] {
                if net.max_abs_entry() > net.bound() {
                    return Err(LabError::Numerical(format!("anchor {i}: entry exceeds bound {}", net.bound())));
                }
            }
        }
        Ok(())
    }

    fn evaluate(&self, t: f64, x: &DVector<f64>) -> Result<Evaluation> {
        self.check_time(t)?;
        if x.len() != self.dim() {
            return Err(LabError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let oc = ou_coeffs(t)?;
        let (c, sigma, sigma2) = (oc.c, oc.sigma, oc.sigma2());
        let d2: Vec<f64> = self.anchors.iter().map(|g| (x - g * c).norm_squared()).collect();
        let mut rhos = rho_from_sq_dists(&d2, self.constants.rho_const_at(sigma2));
        if !rhos.iter().any(|r| *r > 0.0) {
            let nearest = (0..d2.len()).min_by(|a, b| d2[*a].total_cmp(&d2[*b])).expect("nonempty");
            rhos = vec![0.0; d2.len()];
            rhos[nearest] = 1.0;
        }
        let floor = self.constants.weight_floor();
        let env = self.constants.envelope();
        let mut anchors = Vec::new();
        for (i, &r) in rhos.iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            let l = &self.frames[i];
            let xt = l.tr_mul(&(x - &self.anchors[i] * c));
            let di = xt.len();
            let mut input = DVector::zeros(1 + 2 * di);
            input[0] = sigma;
            for k in 0..di {
                input[1 + k] = xt[k];
                input[1 + di + k] = -xt[k];
            }
            let raw = net_eval(&self.phi_e[i], &input)?;
            let mut mask = vec![true; di];
            let mut phi = raw.clone();
            for k in 0..di {
                let lo = (xt[k] - env * sigma) / c;
                let hi = (xt[k] + env * sigma) / c;
                if phi[k] < lo || phi[k] > hi {
                    phi[k] = phi[k].clamp(lo, hi);
                    mask[k] = false;
                }
            }
            let mut e = &self.anchors[i] + l * &phi;
            let en = e.norm();
            let ball = en > self.e_bound;
            if ball {
                e *= self.e_bound / en;
            }
            let raw_w = net_eval(&self.phi_w[i], &input)?[0];
            let w_active = raw_w > floor;
            anchors.push(AnchorEval { i, rho: r, input, e, e_mask: mask, e_ball_clipped: ball, w: raw_w.max(floor), w_active });
        }
        let total: f64 = anchors.iter().map(|a| a.rho * a.w).sum();
        let mut e_bar = DVector::zeros(self.dim());
        for a in &anchors {
            e_bar.axpy(a.rho * a.w / total, &a.e, 1.0);
        }
        let score = (&e_bar * c - x) / sigma2;
        Ok(Evaluation { c, sigma2, anchors, total, e_bar, score })
    }

    /// Predicted conditional expectation `Σ ωᵢ eᵢ / Σ ωᵢ`.
    pub fn cond_expectation(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(t, x)?.e_bar)
    }

    /// Gradient of `⟨g, s(t,x)⟩` with respect to all network parameters.
    pub fn score_vjp(&self, t: f64, x: &DVector<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, ModelGrad)> {
        let ev = self.evaluate(t, x)?;
        let mut grad = ModelGrad::zeros_like(self);
        let g_bar = g * (ev.c / ev.sigma2);
        for a in &ev.anchors {
            let frac = a.rho * a.w / ev.total;
            if !a.e_ball_clipped {
                let mut up = self.frames[a.i].tr_mul(&(&g_bar * frac));
                for (k, keep) in a.e_mask.iter().enumerate() {
                    if !keep {
                        up[k] = 0.0;
                    }
                }
                grad.e[a.i] = net_grad(&self.phi_e[a.i], &a.input, &up)?;
            }
            if a.w_active {
                let gw = a.rho * (&a.e - &ev.e_bar).dot(&g_bar) / ev.total;
                grad.w[a.i] = net_grad(&self.phi_w[a.i], &a.input, &DVector::from_element(1, gw))?;
            }
        }
        Ok((ev.score, grad))
    }

    /// Per-draw denoising loss `‖s(t, c_t y + σ_t z) + z/σ_t‖²` and its gradient.
    pub fn loss_and_grad(&self, t: f64, y: &DVector<f64>, z: &DVector<f64>) -> Result<(f64, ModelGrad)> {
        let oc = ou_coeffs(t)?;
        let x = y * oc.c + z * oc.sigma;
        let s = self.eval(t, &x)?;
        let resid = s + z / oc.sigma;
        let (_, grad) = self.score_vjp(t, &x, &(&resid * 2.0))?;
        Ok((resid.norm_squared(), grad))
    }

    pub fn num_params(&self) -> usize {
        self.phi_e.iter().chain(&self.phi_w).map(|n| n.num_params()).sum()
    }

    /// All parameters, anchor by anchor: `φ_e` then `φ_w`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (e, w) in self.phi_e.iter().zip(&self.phi_w) {
            out.extend(e.params());
            out.extend(w.params());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(LabError::DimensionMismatch { expected: self.num_params(), got: p.len() });
        }
        let mut k = 0;
        for (e, w) in self.phi_e.iter_mut().zip(self.phi_w.iter_mut()) {
            let n = e.num_params();
            e.set_params(&p[k..k + n])?;
            k += n;
            let n = w.num_params();
            w.set_params(&p[k..k + n])?;
            k += n;
        }
        Ok(())
    }

    fn sgd_step(&mut self, g: &ModelGrad, lr: f64) {
        for (net, gn) in self.phi_e.iter_mut().zip(&g.e) {
            net.sgd_step(gn, lr);
        }
        for (net, gn) in self.phi_w.iter_mut().zip(&g.w) {
            net.sgd_step(gn, lr);
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &Checkpoint::from_model(self))?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)?;
        ck.into_model()
    }
}

fn zero_last(net: &mut ReluNet) {
    let l = net.layers.last_mut().expect("nonempty");
    l.weight.fill(0.0);
    l.bias.fill(0.0);
}

impl ScoreField for StructuredScore {
    fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    fn time_range(&self) -> (f64, f64) {
        self.t_range
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(t, x)?.score)
    }

    fn name(&self) -> &str {
        "structured"
    }
}

pub const CHECKPOINT_FORMAT: &str = "structured-score";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint. Matrices are stored row-major as nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    constants: FamilyConstants,
    e_bound: f64,
    t_range: (f64, f64),
    anchors: Vec<AnchorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorRecord {
    point: Vec<f64>,
    frame: Vec<Vec<f64>>,
    phi_e: NetRecord,
    phi_w: NetRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetRecord {
    bound: f64,
    sparsity: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols_if_empty: usize) -> Result<DMatrix<f64>> {
    let nc = r.first().map_or(ncols_if_empty, |x| x.len());
    if r.iter().any(|x| x.len() != nc) {
        return invalid("ragged matrix in checkpoint");
    }
    Ok(DMatrix::from_fn(r.len(), nc, |i, j| r[i][j]))
}

impl NetRecord {
    fn from_net(n: &ReluNet) -> Self {
        NetRecord {
            bound: n.bound,
            sparsity: n.sparsity,
            layers: n.layers.iter().map(|l| LayerRecord { weight: rows(&l.weight), bias: l.bias.as_slice().to_vec() }).collect(),
        }
    }

    /// `in_dim` fixes the shape of weight matrices with zero rows.
    fn into_net(self, mut in_dim: usize) -> Result<ReluNet> {
        let mut layers = Vec::new();
        for l in self.layers {
            let weight = from_rows(&l.weight, in_dim)?;
            in_dim = weight.nrows();
            layers.push(Layer { weight, bias: DVector::from_vec(l.bias) });
        }
        ReluNet::from_layers(layers, self.bound, self.sparsity)
    }
}

impl Checkpoint {
    fn from_model(m: &StructuredScore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            constants: m.constants,
            e_bound: m.e_bound,
            t_range: m.t_range,
            anchors: (0..m.len())
                .map(|i| AnchorRecord {
                    point: m.anchors[i].as_slice().to_vec(),
                    frame: rows(&m.frames[i]),
                    phi_e: NetRecord::from_net(&m.phi_e[i]),
                    phi_w: NetRecord::from_net(&m.phi_w[i]),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<StructuredScore> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint {} v{}", self.format, self.version));
        }
        let mut model = StructuredScore {
            anchors: Vec::new(),
            frames: Vec::new(),
            phi_e: Vec::new(),
            phi_w: Vec::new(),
            constants: self.constants,
            e_bound: self.e_bound,
            t_range: self.t_range,
        };
        for a in self.anchors {
            let dim = a.point.len();
            let frame = from_rows(&a.frame, 0)?;
            let frame = if frame.nrows() == 0 { DMatrix::zeros(dim, 0) } else { frame };
            let di = frame.ncols();
            model.anchors.push(DVector::from_vec(a.point));
            model.frames.push(frame);
            model.phi_e.push(a.phi_e.into_net(1 + 2 * di)?);
            model.phi_w.push(a.phi_w.into_net(1 + 2 * di)?);
        }
        if model.anchors.is_empty() {
            return Err(LabError::Empty("checkpoint anchors".into()));
        }
        model.check_class()?;
        Ok(model)
    }
}

/// Anchors with their local frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFrames {
    pub anchors: Vec<DVector<f64>>,
    pub frames: Vec<DMatrix<f64>>,
    /// Indices into the sample set.
    pub indices: Vec<usize>,
    /// Anchors whose neighborhood was degenerate and received the global frame.
    pub fallback: Vec<bool>,
    /// Anchors whose frame was cut down to `cap` directions.
    pub truncated: Vec<bool>,
}

/// Subsample `count` anchors uniformly without replacement and give each the
/// span of its `eps`-neighbor differences, capped at `cap` leading directions.
pub fn build_anchor_frames(samples: &[DVector<f64>], count: usize, eps: f64, cap: usize, seed: u64) -> Result<AnchorFrames> {
    let n = samples.len();
    if n == 0 {
        return Err(LabError::Empty("sample set".into()));
    }
    if count == 0 || count > n {
        return invalid(format!("anchor count must be in 1..={n}, got {count}"));
    }
    if !(eps > 0.0) {
        return invalid(format!("anchor radius must be positive, got {eps}"));
    }
    let mut rng = rng::master(seed);
    let mut indices: Vec<usize> = if count == n { (0..n).collect() } else { sample_indices(&mut rng, n, count).into_vec() };
    indices.sort_unstable();
    let global = global_frame(samples, cap);
    let mut out = AnchorFrames { anchors: Vec::new(), frames: Vec::new(), indices: indices.clone(), fallback: Vec::new(), truncated: Vec::new() };
    for &i in &indices {
        let g = &samples[i];
        let vs: Vec<DVector<f64>> = samples.iter().map(|y| y - g).filter(|v| v.norm() <= eps && v.norm() > 0.0).collect();
        let basis = if vs.is_empty() { None } else { Some(span_basis(&vs, 1e-10)?.basis) };
        let (frame, fallback) = match basis {
            Some(b) if b.ncols() > 0 => (b, false),
            _ => (global.clone(), true),
        };
        let truncated = frame.ncols() > cap;
        let frame = if truncated { frame.columns(0, cap).into_owned() } else { frame };
        out.anchors.push(g.clone());
        out.frames.push(frame);
        out.fallback.push(fallback);
        out.truncated.push(truncated);
    }
    Ok(out)
}

/// Default frame cap `⌈C_dim log n⌉`.
pub fn default_frame_cap(c_dim: f64, n: usize) -> usize {
    ((c_dim * (n as f64).ln()).ceil() as usize).max(1)
}

fn global_frame(samples: &[DVector<f64>], cap: usize) -> DMatrix<f64> {
    let dim = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(dim), |acc, y| acc + y) / samples.len() as f64;
    let centered = DMatrix::from_columns(&samples.iter().map(|y| y - &mean).collect::<Vec<_>>());
    if centered.amax() == 0.0 {
        return DMatrix::zeros(dim, 0);
    }
    let b = svd_span(&centered, 1e-10);
    if b.ncols() > cap {
        b.columns(0, cap).into_owned()
    } else {
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mc_draws: usize,
    pub seed: u64,
    /// Abort when the smoothed risk exceeds this multiple of the initial risk.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { t_lo: 0.25, t_hi: 0.5, step_size: 1e-3, steps: 2000, batch_size: 16, mc_draws: 2, seed: 0, divergence_factor: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: StructuredScore,
    /// Minibatch estimate of `∫ E‖ŝ + Z/σ‖² dt` per step.
    pub risk_trace: Vec<f64>,
}

/// Plain SGD on the Monte Carlo empirical risk over `[t_lo, t_hi]`: uniform
/// sample, uniform time, `mc_draws` noise draws per sample.
pub fn erm_train(init: StructuredScore, samples: &[DVector<f64>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(LabError::Empty("sample set".into()));
    }
    if !(cfg.t_lo >= MIN_SCORE_TIME && cfg.t_hi > cfg.t_lo) {
        return invalid(format!("invalid training interval [{}, {}]", cfg.t_lo, cfg.t_hi));
    }
    if cfg.t_lo < init.t_range.0 || cfg.t_hi > init.t_range.1 {
        return invalid("training interval outside the model's time range");
    }
    if cfg.batch_size == 0 || cfg.mc_draws == 0 {
        return invalid("batch size and draws must be positive");
    }
    let mut model = init;
    let mut trace = Vec::with_capacity(cfg.steps);
    let width = cfg.t_hi - cfg.t_lo;
    let window = 20usize;
    let mut initial = None;
    for step in 0..cfg.steps {
        let per: Vec<(f64, ModelGrad)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::substream(cfg.seed, (step * cfg.batch_size + b) as u64);
                let y = &samples[rng.random_range(0..samples.len())];
                let t = rng.random_range(cfg.t_lo..=cfg.t_hi);
                let mut loss = 0.0;
                let mut grad = ModelGrad::zeros_like(&model);
                for _ in 0..cfg.mc_draws {
                    let z = standard_normal(&mut rng, y.len());
                    let (l, g) = model.loss_and_grad(t, y, &z)?;
                    loss += l;
                    grad.add_scaled(&g, 1.0);
                }
                Ok((loss, grad))
            })
            .collect::<Result<_>>()?;
        let scale = width / (cfg.batch_size * cfg.mc_draws) as f64;
        let mut grad = ModelGrad::zeros_like(&model);
        let mut risk = 0.0;
        for (l, g) in &per {
            risk += l * scale;
            grad.add_scaled(g, scale);
        }
        trace.push(risk);
        let init_risk = *initial.get_or_insert(risk);
        let recent = &trace[trace.len().saturating_sub(window)..];
        let smoothed = recent.iter().sum::<f64>() / recent.len() as f64;
        if !smoothed.is_finite() || smoothed > cfg.divergence_factor * init_risk {
            return Err(LabError::Diverged { risk: smoothed, limit: cfg.divergence_factor * init_risk });
        }
        model.sgd_step(&grad, cfg.step_size);
        assert!(
            model.phi_e.iter().chain(&model.phi_w).all(|n| n.max_abs_entry() <= n.bound()),
            "weight bound violated after step {step}"
        );
    }
    Ok(TrainOutcome { model, risk_trace: trace })
}
