//! Interpolation network: maps a D-channel irregular series onto a fixed
//! reference grid, producing C=3 rows per channel (smooth cross-channel
//! interpolant, transient component, intensity), plus the leave-one-out
//! reconstruction loss used for pretraining.

use serde::{Deserialize, Serialize};

use crate::graph::NodeId;
use crate::data::{ChannelSeries, EpisodeRecord};
use crate::params::Binding;
use crate::{NumericError, Op, ParameterStore, Real, Tape, Tensor};

pub const LOG_ALPHA: &str = "interp.log_alpha";
pub const RHO_RAW: &str = "interp.rho_raw";

/// Intensity floor below which normalized interpolants fall back to zero.
const INTENSITY_GUARD: Real = 1e-12;

/// Uniformly spaced reference time points over `[0, window]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    points: Vec<Real>,
}

impl ReferenceGrid {
    pub fn uniform(window: Real, t: usize) -> Self {
        assert!(t >= 2, "reference grid needs at least 2 points");
        assert!(window > 0.0, "window must be positive");
        let step = window / (t - 1) as Real;
        Self { points: (0..t).map(|k| k as Real * step).collect() }
    }

    pub fn points(&self) -> &[Real] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Mean gap between consecutive points.
    pub fn mean_gap(&self) -> Real {
        let n = self.points.len();
        (self.points[n - 1] - self.points[0]) / (n - 1) as Real
    }
}

/// Shape and fixed hyperparameters of the interpolation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpSpec {
    pub d: usize,
    /// Transient-bandwidth multiplier; fixed, not learned.
    pub kappa: Real,
}

impl InterpSpec {
    pub fn new(d: usize) -> Self {
        Self { d, kappa: 10.0 }
    }
}

/// Install freshly initialized interpolation parameters into `store`:
/// `interp.log_alpha` at log(1/gap^2) and `interp.rho_raw` as the square
/// root of identity-plus-0.01 mixing weights.
pub fn init_interp_params(spec: &InterpSpec, grid: &ReferenceGrid, store: &mut ParameterStore) {
    let gap = grid.mean_gap();
    let log_alpha = (1.0 / (gap * gap)).ln();
    store.insert(LOG_ALPHA, Tensor::vector(vec![log_alpha; spec.d]));
    let mut rho_raw = Vec::with_capacity(spec.d * spec.d);
    for i in 0..spec.d {
        for j in 0..spec.d {
            rho_raw.push(if i == j { 1.0 } else { 0.01f64.sqrt() });
        }
    }
    store.insert(RHO_RAW, Tensor::matrix(spec.d, spec.d, rho_raw).unwrap());
}

/// Squared-exponential kernel weight `exp(-alpha (r - t)^2)`.
pub fn kernel_weight(r: Real, t: Real, alpha: Real) -> Real {
    debug_assert!(alpha > 0.0);
    (-alpha * (r - t) * (r - t)).exp()
}

/// First interpolation layer for one channel: smooth interpolant, transient
/// interpolant (bandwidth `kappa * alpha`), and intensity, each evaluated at
/// every grid point. Empty channels yield all-zero outputs.
pub fn channel_interpolants(
    series: &ChannelSeries,
    grid: &ReferenceGrid,
    alpha: Real,
    kappa: Real,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let t_pts = grid.points();
    let mut sigma = vec![0.0; t_pts.len()];
    let mut gamma = vec![0.0; t_pts.len()];
    let mut lambda = vec![0.0; t_pts.len()];
    if series.is_empty() {
        return (sigma, gamma, lambda);
    }
    for (k, &r) in t_pts.iter().enumerate() {
        let mut lam = 0.0;
        let mut num = 0.0;
        let mut lam_g = 0.0;
        let mut num_g = 0.0;
        for (&t, &x) in series.times().iter().zip(series.values()) {
            let w = kernel_weight(r, t, alpha);
            lam += w;
            num += w * x;
            let wg = kernel_weight(r, t, kappa * alpha);
            lam_g += wg;
            num_g += wg * x;
        }
        lambda[k] = lam;
        // the smooth intensity gates both normalized interpolants
        if lam < INTENSITY_GUARD || lam_g == 0.0 {
            sigma[k] = 0.0;
            gamma[k] = 0.0;
        } else {
            sigma[k] = num / lam;
            gamma[k] = num_g / lam_g;
        }
    }
    (sigma, gamma, lambda)
}

/// Second interpolation layer: intensity-weighted cross-channel mix,
/// `chi_d = sum_e rho[d][e] lambda_e sigma_e / sum_e rho[d][e] lambda_e`.
pub fn cross_channel(
    sigma: &[Vec<Real>],
    lambda: &[Vec<Real>],
    rho: &[Vec<Real>],
) -> Vec<Vec<Real>> {
    let d = sigma.len();
    let t = sigma.first().map(|r| r.len()).unwrap_or(0);
    let mut chi = vec![vec![0.0; t]; d];
    for di in 0..d {
        for k in 0..t {
            let mut num = 0.0;
            let mut den = 0.0;
            for e in 0..d {
                num += rho[di][e] * lambda[e][k] * sigma[e][k];
                den += rho[di][e] * lambda[e][k];
            }
            chi[di][k] = if den < INTENSITY_GUARD { 0.0 } else { num / den };
        }
    }
    chi
}

/// Tape nodes for the assembled interpolant block.
pub struct InterpNodes {
    /// Smooth cross-channel rows, `[D, T]`.
    pub chi: NodeId,
    /// Transient rows `gamma - chi`, `[D, T]`.
    pub tau: NodeId,
    /// Intensity rows, `[D, T]`.
    pub lambda: NodeId,
    /// Stacked `[chi; tau; lambda]`, `[3D, T]`.
    pub block: NodeId,
}

fn squared_distances(queries: &[Real], times: &[Real]) -> Tensor {
    let mut data = Vec::with_capacity(queries.len() * times.len());
    for &q in queries {
        for &t in times {
            data.push((q - t) * (q - t));
        }
    }
    Tensor::matrix(queries.len(), times.len(), data).unwrap()
}

/// Kernel-weighted sums of one channel against query points, on the tape.
/// Returns `(weighted_sum, intensity)`, both `[1, Q]` rows.
fn channel_sums_on_tape(
    tape: &mut Tape,
    alpha_d: NodeId,
    bandwidth_mult: Real,
    queries: &[Real],
    series: &ChannelSeries,
) -> Result<(NodeId, NodeId), NumericError> {
    let q = queries.len();
    if series.is_empty() {
        let zeros = tape.constant(Tensor::zeros(&[1, q]));
        return Ok((zeros, zeros));
    }
    let l = series.len();
    let dist2 = tape.constant(squared_distances(queries, series.times()));
    let neg_alpha = tape.apply(Op::Scale(-bandwidth_mult), &[alpha_d])?;
    let scaled = tape.apply(Op::Mul, &[neg_alpha, dist2])?;
    let weights = tape.apply(Op::Exp, &[scaled])?; // [Q, L]
    let values = tape.constant(Tensor::new(vec![l, 1], series.values().to_vec()).unwrap());
    let ones = tape.constant(Tensor::full(&[l, 1], 1.0));
    let sums = tape.apply(Op::MatMul, &[weights, values])?;
    let intensity = tape.apply(Op::MatMul, &[weights, ones])?;
    let sums = tape.apply(Op::Reshape(vec![1, q]), &[sums])?;
    let intensity = tape.apply(Op::Reshape(vec![1, q]), &[intensity])?;
    Ok((sums, intensity))
}

fn per_channel_alpha(
    tape: &mut Tape,
    binding: &Binding,
    d: usize,
) -> Result<Vec<NodeId>, NumericError> {
    let log_alpha = binding.id(LOG_ALPHA)?;
    let alpha = tape.apply(Op::Exp, &[log_alpha])?;
    (0..d)
        .map(|i| tape.apply(Op::Slice { axis: 0, start: i, len: 1 }, &[alpha]))
        .collect()
}

fn rho_on_tape(tape: &mut Tape, binding: &Binding) -> Result<NodeId, NumericError> {
    let raw = binding.id(RHO_RAW)?;
    tape.apply(Op::Square, &[raw])
}

/// Assemble the `(3D) x T` interpolant block for one record on the tape,
/// differentiable with respect to the interpolation parameters.
pub fn assemble_block_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    spec: &InterpSpec,
    grid: &ReferenceGrid,
    record: &EpisodeRecord,
) -> Result<InterpNodes, NumericError> {
    if record.channels.len() != spec.d {
        return Err(NumericError::ShapeMismatch {
            op: "assemble_block".to_string(),
            details: format!("record has {} channels, spec has {}", record.channels.len(), spec.d),
        });
    }
    let alphas = per_channel_alpha(tape, binding, spec.d)?;
    let queries = grid.points().to_vec();
    let mut sum_rows = Vec::with_capacity(spec.d);
    let mut lam_rows = Vec::with_capacity(spec.d);
    let mut gamma_rows = Vec::with_capacity(spec.d);
    for (d, series) in record.channels.iter().enumerate() {
        let (s, lam) = channel_sums_on_tape(tape, alphas[d], 1.0, &queries, series)?;
        let (sg, lam_g) = channel_sums_on_tape(tape, alphas[d], spec.kappa, &queries, series)?;
        // gate the transient interpolant on the smooth intensity, so both
        // normalized components fall back to zero in the same regions
        let mask = tape.constant(
            tape.value(lam).map(|l| if l < INTENSITY_GUARD { 0.0 } else { 1.0 }),
        );
        let ratio = tape.apply(Op::GuardedDiv, &[sg, lam_g])?;
        let gamma = tape.apply(Op::Mul, &[ratio, mask])?;
        sum_rows.push(s);
        lam_rows.push(lam);
        gamma_rows.push(gamma);
    }
    let sums = tape.apply(Op::Concat(0), &sum_rows)?; // [D, T] of lambda*sigma
    let lambda = tape.apply(Op::Concat(0), &lam_rows)?;
    let gamma = tape.apply(Op::Concat(0), &gamma_rows)?;
    let rho = rho_on_tape(tape, binding)?;
    let numer = tape.apply(Op::MatMul, &[rho, sums])?;
    let denom = tape.apply(Op::MatMul, &[rho, lambda])?;
    let chi = tape.apply(Op::GuardedDiv, &[numer, denom])?;
    let neg_chi = tape.apply(Op::Scale(-1.0), &[chi])?;
    let tau = tape.apply(Op::Add, &[gamma, neg_chi])?;
    let block = tape.apply(Op::Concat(0), &[chi, tau, lambda])?;
    Ok(InterpNodes { chi, tau, lambda, block })
}

/// Forward-only block assembly; runs a throwaway tape.
pub fn assemble_block(
    record: &EpisodeRecord,
    grid: &ReferenceGrid,
    spec: &InterpSpec,
    store: &ParameterStore,
) -> Result<Tensor, NumericError> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let nodes = assemble_block_on_tape(&mut tape, &binding, spec, grid, record)?;
    Ok(tape.value(nodes.block).clone())
}

/// Leave-one-out reconstruction loss on the tape: every observed point is
/// predicted by the cross-channel smooth interpolant with that observation
/// masked out of its own channel, and the mean squared error is returned.
///
/// The masked sums are the full kernel sums minus the self term, which is
/// exactly `w(t_j, t_j) = 1` for the intensity and `x_j` for the weighted sum.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    spec: &InterpSpec,
    record: &EpisodeRecord,
) -> Result<NodeId, NumericError> {
    let total_obs = record.observation_count();
    if total_obs == 0 {
        return Err(NumericError::Invalid(format!(
            "record {} has no observations for reconstruction loss",
            record.id
        )));
    }
    let alphas = per_channel_alpha(tape, binding, spec.d)?;
    let rho = rho_on_tape(tape, binding)?;
    let mut sq_err_sums = Vec::new();
    for (d, series) in record.channels.iter().enumerate() {
        if series.is_empty() {
            continue;
        }
        let queries = series.times().to_vec();
        let q = queries.len();
        let mut sum_rows = Vec::with_capacity(spec.d);
        let mut lam_rows = Vec::with_capacity(spec.d);
        for (e, other) in record.channels.iter().enumerate() {
            let (mut s, mut lam) = channel_sums_on_tape(tape, alphas[e], 1.0, &queries, other)?;
            if e == d {
                // mask the self observation out of its own channel
                let self_vals =
                    tape.constant(Tensor::new(vec![1, q], series.values().to_vec()).unwrap());
                let neg_vals = tape.apply(Op::Scale(-1.0), &[self_vals])?;
                s = tape.apply(Op::Add, &[s, neg_vals])?;
                lam = tape.apply(Op::AddConst(-1.0), &[lam])?;
            }
            sum_rows.push(s);
            lam_rows.push(lam);
        }
        let sums = tape.apply(Op::Concat(0), &sum_rows)?;
        let lambda = tape.apply(Op::Concat(0), &lam_rows)?;
        let numer = tape.apply(Op::MatMul, &[rho, sums])?;
        let denom = tape.apply(Op::MatMul, &[rho, lambda])?;
        let chi = tape.apply(Op::GuardedDiv, &[numer, denom])?;
        let chi_d = tape.apply(Op::Slice { axis: 0, start: d, len: 1 }, &[chi])?;
        let observed = tape.constant(Tensor::new(vec![1, q], series.values().to_vec()).unwrap());
        let neg_obs = tape.apply(Op::Scale(-1.0), &[observed])?;
        let err = tape.apply(Op::Add, &[chi_d, neg_obs])?;
        let sq = tape.apply(Op::Square, &[err])?;
        sq_err_sums.push(tape.apply(Op::Sum, &[sq])?);
    }
    let mut total = sq_err_sums[0];
    for &s in &sq_err_sums[1..] {
        total = tape.apply(Op::Add, &[total, s])?;
    }
    tape.apply(Op::Scale(1.0 / total_obs as Real), &[total])
}

/// Forward-only reconstruction loss.
pub fn reconstruction_loss(
    record: &EpisodeRecord,
    spec: &InterpSpec,
    store: &ParameterStore,
) -> Result<Real, NumericError> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = reconstruction_loss_on_tape(&mut tape, &binding, spec, record)?;
    Ok(tape.value(loss).item())
}
