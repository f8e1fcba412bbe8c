//! Layer-by-layer gradient descent on the stack phases.
//!
//! The objective is `Γ = ‖α R G T − Λ‖²_F` where `Λ` holds the top `2S`
//! singular values of `G`. Each epoch sweeps the transmit layers `1..L`, then
//! the receive layers `1..K`; every layer step computes the analytic phase
//! gradient, rescales it so its largest entry is `π`, takes a fixed step of
//! size `η`, and re-solves `α` by least squares. `η` decays geometrically per
//! epoch.
//!
//! Gradients are evaluated from cached partial products. For transmit layer
//! `l` and polarization `p`,
//!
//! ```text
//! F^l_p = V^l Φ^{l-1}_p V^{l-1} ··· Φ^1_p V^1             (M x S)
//! B^l_p = R G_{:,p} Φ^L_p V^L ··· Φ^{l+1}_p V^{l+1}        (2S x M)
//! H_{:,p} = B^l_p Φ^l_p F^l_p
//! ```
//!
//! and symmetrically on the receive side with
//! `P^k_q = U^1 Ψ^1_q ··· Ψ^{k-1}_q U^k` and
//! `C^k_q = U^{k+1} Ψ^{k+1}_q ··· U^K Ψ^K_q [G_q0 T_0, G_q1 T_1]`, so that
//! `H_{q,:} = P^k_q Ψ^k_q C^k_q`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::channel::ChannelRealization;
use crate::config::{AlgoConfig, StackMode, SystemConfig};
use crate::geometry::PropagationSet;
use crate::stack::{end_to_end_blocks, scale_cols, scale_rows, PhaseStack, Side, StackShape};
use crate::{CMatrix, Error, Result, C64};

/// Gradient of `Γ` with respect to one layer's phases, indexed
/// `[polarization][unit]`. In tied mode both slots hold the derivative with
/// respect to the shared phase, i.e. the sum of the two polarization partials.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub values: [Vec<f64>; 2],
}

impl LayerGradient {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
struct Caches {
    revision: u64,
    /// `F[l][p]`.
    forward_tx: Vec<[CMatrix; 2]>,
    /// `B[l][p]`.
    backward_tx: Vec<[CMatrix; 2]>,
    /// `P[k][q]`.
    forward_rx: Vec<[CMatrix; 2]>,
    /// `C[k][q]`.
    backward_rx: Vec<[CMatrix; 2]>,
    h: CMatrix,
}

/// Channel, propagation and (optionally) fresh gradient caches for one trial.
#[derive(Debug, Clone)]
pub struct ObjectiveContext<'a> {
    pub channel: &'a ChannelRealization,
    pub prop: &'a PropagationSet,
    caches: Option<Caches>,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(channel: &'a ChannelRealization, prop: &'a PropagationSet) -> Result<Self> {
        let (m, n, s) = (prop.tx_units(), prop.rx_units(), prop.streams_per_pol());
        if channel.g.shape() != (2 * n, 2 * m) {
            return Err(Error::Shape(format!(
                "channel {:?} does not match M={m}, N={n}",
                channel.g.shape()
            )));
        }
        if channel.target.len() != 2 * s {
            return Err(Error::Shape(format!(
                "target has {} streams, propagation carries {}",
                channel.target.len(),
                2 * s
            )));
        }
        Ok(ObjectiveContext { channel, prop, caches: None })
    }

    fn streams_per_pol(&self) -> usize {
        self.prop.streams_per_pol()
    }

    /// `‖Λ_{1:2S}‖²_F`.
    pub fn target_energy(&self) -> f64 {
        self.channel.target_energy()
    }

    /// Rebuild every cached partial product for `stack`.
    pub fn refresh(&mut self, stack: &PhaseStack) -> Result<()> {
        let prop = self.prop;
        if stack.shape() != StackShape::of(prop) {
            return Err(Error::Shape(format!(
                "phase stack {:?} vs propagation {:?}",
                stack.shape(),
                StackShape::of(prop)
            )));
        }
        let (l_count, k_count) = (prop.tx_layers(), prop.rx_layers());
        let (m, n, s) = (prop.tx_units(), prop.rx_units(), self.streams_per_pol());
        let g = &self.channel.g;

        // forward sweeps
        let mut forward_tx: Vec<[CMatrix; 2]> = Vec::with_capacity(l_count);
        let mut t: Vec<CMatrix> = Vec::with_capacity(2);
        let mut fwd: [Vec<CMatrix>; 2] = [Vec::new(), Vec::new()];
        for p in 0..2 {
            let mut f = prop.tx_matrices[0].clone();
            for l in 0..l_count {
                let shifted = scale_rows(&f, &stack.factors(Side::Tx, l, p));
                fwd[p].push(f);
                if l + 1 < l_count {
                    f = &prop.tx_matrices[l + 1] * shifted;
                } else {
                    t.push(shifted);
                    break;
                }
            }
        }
        for l in 0..l_count {
            forward_tx.push([fwd[0][l].clone(), fwd[1][l].clone()]);
        }

        let mut forward_rx: Vec<[CMatrix; 2]> = Vec::with_capacity(k_count);
        let mut r: Vec<CMatrix> = Vec::with_capacity(2);
        let mut fwd: [Vec<CMatrix>; 2] = [Vec::new(), Vec::new()];
        for q in 0..2 {
            let mut pk = prop.rx_matrices[0].clone();
            for k in 0..k_count {
                let shifted = scale_cols(&pk, &stack.factors(Side::Rx, k, q));
                fwd[q].push(pk);
                if k + 1 < k_count {
                    pk = shifted * &prop.rx_matrices[k + 1];
                } else {
                    r.push(shifted);
                    break;
                }
            }
        }
        for k in 0..k_count {
            forward_rx.push([fwd[0][k].clone(), fwd[1][k].clone()]);
        }

        // R G restricted to transmit polarization p: 2S x M
        let rg: Vec<CMatrix> = (0..2)
            .map(|p| {
                let mut out = CMatrix::zeros(2 * s, m);
                for q in 0..2 {
                    let blk = &r[q] * g.view((q * n, p * m), (n, m));
                    out.view_mut((q * s, 0), (s, m)).copy_from(&blk);
                }
                out
            })
            .collect();
        // G T restricted to receive polarization q: N x 2S
        let gt: Vec<CMatrix> = (0..2)
            .map(|q| {
                let mut out = CMatrix::zeros(n, 2 * s);
                for p in 0..2 {
                    let blk = g.view((q * n, p * m), (n, m)) * &t[p];
                    out.view_mut((0, p * s), (n, s)).copy_from(&blk);
                }
                out
            })
            .collect();

        let mut h = CMatrix::zeros(2 * s, 2 * s);
        for p in 0..2 {
            h.view_mut((0, p * s), (2 * s, s)).copy_from(&(&rg[p] * &t[p]));
        }

        // backward sweeps
        let mut bwd: [Vec<CMatrix>; 2] = [Vec::new(), Vec::new()];
        for p in 0..2 {
            let mut b = rg[p].clone();
            bwd[p].push(b.clone());
            for l in (0..l_count.saturating_sub(1)).rev() {
                b = scale_cols(&b, &stack.factors(Side::Tx, l + 1, p)) * &prop.tx_matrices[l + 1];
                bwd[p].push(b.clone());
            }
            bwd[p].reverse();
        }
        let backward_tx = (0..l_count).map(|l| [bwd[0][l].clone(), bwd[1][l].clone()]).collect();

        let mut bwd: [Vec<CMatrix>; 2] = [Vec::new(), Vec::new()];
        for q in 0..2 {
            let mut c = gt[q].clone();
            bwd[q].push(c.clone());
            for k in (0..k_count.saturating_sub(1)).rev() {
                c = &prop.rx_matrices[k + 1] * scale_rows(&c, &stack.factors(Side::Rx, k + 1, q));
                bwd[q].push(c.clone());
            }
            bwd[q].reverse();
        }
        let backward_rx = (0..k_count).map(|k| [bwd[0][k].clone(), bwd[1][k].clone()]).collect();

        self.caches = Some(Caches {
            revision: stack.revision(),
            forward_tx,
            backward_tx,
            forward_rx,
            backward_rx,
            h,
        });
        Ok(())
    }

    /// Refresh only when the caches do not belong to `stack`'s revision.
    pub fn ensure_fresh(&mut self, stack: &PhaseStack) -> Result<()> {
        match &self.caches {
            Some(c) if c.revision == stack.revision() => Ok(()),
            _ => self.refresh(stack),
        }
    }

    fn caches_for(&self, stack: &PhaseStack) -> Result<&Caches> {
        match &self.caches {
            Some(c) if c.revision == stack.revision() => Ok(c),
            Some(c) => Err(Error::StaleCache { cached: c.revision, current: stack.revision() }),
            None => Err(Error::StaleCache { cached: u64::MAX, current: stack.revision() }),
        }
    }

    /// Cached `H = R G T` for `stack`.
    pub fn cached_h(&self, stack: &PhaseStack) -> Result<&CMatrix> {
        Ok(&self.caches_for(stack)?.h)
    }

    /// Largest relative Frobenius error between `H` and every cached
    /// factorization `B^l Φ^l F^l` / `P^k Ψ^k C^k`.
    pub fn cache_consistency(&self, stack: &PhaseStack) -> Result<f64> {
        let c = self.caches_for(stack)?;
        let s = self.streams_per_pol();
        let h = &c.h;
        let scale = h.norm().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for (l, (f, b)) in c.forward_tx.iter().zip(&c.backward_tx).enumerate() {
            for p in 0..2 {
                let rebuilt = &b[p] * scale_rows(&f[p], &stack.factors(Side::Tx, l, p));
                let err = (rebuilt - h.view((0, p * s), (2 * s, s))).norm() / scale;
                worst = worst.max(err);
            }
        }
        for (k, (pk, ck)) in c.forward_rx.iter().zip(&c.backward_rx).enumerate() {
            for q in 0..2 {
                let rebuilt = scale_cols(&pk[q], &stack.factors(Side::Rx, k, q)) * &ck[q];
                let err = (rebuilt - h.view((q * s, 0), (s, 2 * s))).norm() / scale;
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// `‖α H − Λ‖²_F` for a given `H`.
pub fn residual_energy(alpha: C64, h: &CMatrix, target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            let mut e = alpha * h[(i, j)];
            if i == j {
                e -= target[i];
            }
            acc += e.norm_sqr();
        }
    }
    acc
}

/// `Γ` for `stack`, computed from scratch.
pub fn objective(stack: &PhaseStack, ctx: &ObjectiveContext) -> Result<f64> {
    let h = end_to_end_blocks(stack, ctx.prop, &ctx.channel.g)?;
    Ok(residual_energy(stack.alpha(), &h, &ctx.channel.target))
}

fn residual(alpha: C64, h: &CMatrix, target: &[f64]) -> CMatrix {
    let mut e = h * alpha;
    for (i, t) in target.iter().enumerate() {
        e[(i, i)] -= *t;
    }
    e
}

/// Analytic `∂Γ/∂θ^l_{p,m}` from fresh caches.
pub fn grad_tx_layer(stack: &PhaseStack, ctx: &ObjectiveContext, layer: usize) -> Result<LayerGradient> {
    let c = ctx.caches_for(stack)?;
    let s = ctx.streams_per_pol();
    let alpha = stack.alpha();
    let e = residual(alpha, &c.h, &ctx.channel.target);
    let mut values: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for p in 0..2 {
        let f = &c.forward_tx[layer][p];
        let b = &c.backward_tx[layer][p];
        // K = Bᴴ E_{:,p}, M x S
        let k = b.adjoint() * e.view((0, p * s), (2 * s, s));
        let phi = stack.factors(Side::Tx, layer, p);
        values[p] = (0..f.nrows())
            .map(|m| {
                let acc: C64 = (0..s).map(|j| k[(m, j)] * f[(m, j)].conj()).sum();
                2.0 * ((alpha * phi[m]).conj() * acc).im
            })
            .collect();
    }
    Ok(tie_if_needed(stack.mode(), values))
}

/// Analytic `∂Γ/∂ξ^k_{q,n}` from fresh caches.
pub fn grad_rx_layer(stack: &PhaseStack, ctx: &ObjectiveContext, layer: usize) -> Result<LayerGradient> {
    let c = ctx.caches_for(stack)?;
    let s = ctx.streams_per_pol();
    let alpha = stack.alpha();
    let e = residual(alpha, &c.h, &ctx.channel.target);
    let mut values: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for q in 0..2 {
        let pk = &c.forward_rx[layer][q];
        let ck = &c.backward_rx[layer][q];
        // K = Pᴴ E_{q,:}, N x 2S
        let k = pk.adjoint() * e.view((q * s, 0), (s, 2 * s));
        let psi = stack.factors(Side::Rx, layer, q);
        values[q] = (0..ck.nrows())
            .map(|n| {
                let acc: C64 = (0..2 * s).map(|j| k[(n, j)] * ck[(n, j)].conj()).sum();
                2.0 * ((alpha * psi[n]).conj() * acc).im
            })
            .collect();
    }
    Ok(tie_if_needed(stack.mode(), values))
}

/// Gradient of either side.
pub fn grad_layer(stack: &PhaseStack, ctx: &ObjectiveContext, side: Side, layer: usize) -> Result<LayerGradient> {
    match side {
        Side::Tx => grad_tx_layer(stack, ctx, layer),
        Side::Rx => grad_rx_layer(stack, ctx, layer),
    }
}

fn tie_if_needed(mode: StackMode, values: [Vec<f64>; 2]) -> LayerGradient {
    match mode {
        StackMode::DualPolarized => LayerGradient { values },
        StackMode::TiedSimBaseline => {
            let sum: Vec<f64> = values[0].iter().zip(&values[1]).map(|(a, b)| a + b).collect();
            LayerGradient { values: [sum.clone(), sum] }
        }
    }
}

/// Rescale so the largest magnitude over both polarizations is `π`. An
/// all-zero gradient is returned unchanged.
pub fn normalize_gradient(mut g: LayerGradient) -> LayerGradient {
    let max = g.max_abs();
    if max > 0.0 {
        for v in g.values.iter_mut().flatten() {
            *v = PI * *v / max;
        }
    }
    g
}

/// `θ ← θ − η g`, wrapped into `[0, 2π)`.
pub fn apply_update(stack: &mut PhaseStack, side: Side, layer: usize, g: &LayerGradient, lr: f64) -> Result<()> {
    let delta = [
        g.values[0].iter().map(|v| -lr * v).collect(),
        g.values[1].iter().map(|v| -lr * v).collect(),
    ];
    stack.shift_layer(side, layer, &delta)
}

/// Least-squares `α = Tr(Hᴴ Λ) / ‖H‖²_F` for a given `H`. Returns `None` when
/// `H` vanishes.
pub fn optimal_alpha(h: &CMatrix, target: &[f64]) -> Option<C64> {
    let energy = h.norm_squared();
    if energy == 0.0 || !energy.is_finite() {
        return None;
    }
    let num: C64 = target.iter().enumerate().map(|(i, t)| h[(i, i)].conj() * *t).sum();
    Some(num / energy)
}

/// Least-squares `α` for the current phases (uses the cached `H` when fresh).
/// If `H = 0` the current `α` is kept.
pub fn update_alpha(stack: &PhaseStack, ctx: &ObjectiveContext) -> Result<C64> {
    let h = match ctx.cached_h(stack) {
        Ok(h) => h.clone(),
        Err(_) => end_to_end_blocks(stack, ctx.prop, &ctx.channel.g)?,
    };
    Ok(optimal_alpha(&h, &ctx.channel.target).unwrap_or(stack.alpha()))
}

/// One epoch's learning-rate decay.
pub fn decay_lr(lr: f64, decay: f64) -> f64 {
    lr * decay
}

/// Draw `candidates` uniform phase sets and keep the one with the smallest
/// `Γ` at `α = alpha0`.
pub fn init_multistart<R: Rng + ?Sized>(
    rng: &mut R,
    candidates: usize,
    mode: StackMode,
    alpha0: C64,
    ctx: &ObjectiveContext,
) -> Result<(PhaseStack, f64)> {
    if candidates == 0 {
        return Err(Error::Validation(vec!["init_candidates must be at least 1".into()]));
    }
    let shape = StackShape::of(ctx.prop);
    let mut best: Option<(PhaseStack, f64)> = None;
    for _ in 0..candidates {
        let s = PhaseStack::random(rng, mode, shape, alpha0);
        let gamma = objective(&s, ctx)?;
        if best.as_ref().is_none_or(|(_, b)| gamma < *b) {
            best = Some((s, gamma));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// One row of the optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// 0 for the initialization, then 1-based epochs.
    pub epoch: usize,
    /// Global layer-step counter (0 for the initialization).
    pub step: usize,
    pub side: Option<Side>,
    pub layer: Option<usize>,
    pub gamma: f64,
    /// `Γ / ‖Λ‖²`.
    pub nmse: f64,
    pub alpha: C64,
    /// Learning rate used for this step.
    pub eta: f64,
    pub best_gamma: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: &str = "epoch,step,gamma,alpha_re,alpha_im,eta";

impl OptTrace {
    pub fn best_gamma(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.best_gamma)
    }

    pub fn initial(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, r.gamma, r.alpha.re, r.alpha.im, r.eta)?;
        }
        Ok(())
    }
}

/// Multi-start initialization followed by `max_epochs` layer-by-layer
/// sweeps. Returns the best stack seen (by `Γ`) and the full trace.
pub fn run_lgd<R: Rng + ?Sized>(
    rng: &mut R,
    sys: &SystemConfig,
    algo: &AlgoConfig,
    ctx: &mut ObjectiveContext,
) -> Result<(PhaseStack, OptTrace)> {
    let (init, gamma0) = init_multistart(rng, algo.init_candidates, sys.stack_mode, algo.initial_alpha, ctx)?;
    descend(init, gamma0, algo, ctx)
}

/// The descent loop from a given starting stack.
pub fn descend(
    init: PhaseStack,
    gamma0: f64,
    algo: &AlgoConfig,
    ctx: &mut ObjectiveContext,
) -> Result<(PhaseStack, OptTrace)> {
    let energy = ctx.target_energy();
    let nmse = |g: f64| if energy > 0.0 { g / energy } else { 0.0 };
    let mut stack = init;
    let mut best = (stack.clone(), gamma0);
    let mut lr = algo.initial_lr;
    let mut trace = OptTrace::default();
    trace.records.push(TraceRecord {
        epoch: 0,
        step: 0,
        side: None,
        layer: None,
        gamma: gamma0,
        nmse: nmse(gamma0),
        alpha: stack.alpha(),
        eta: lr,
        best_gamma: gamma0,
    });

    let sides = [(Side::Tx, ctx.prop.tx_layers()), (Side::Rx, ctx.prop.rx_layers())];
    let mut step = 0;
    for epoch in 1..=algo.max_epochs {
        for (side, layers) in sides {
            for layer in 0..layers {
                ctx.ensure_fresh(&stack)?;
                let g = normalize_gradient(grad_layer(&stack, ctx, side, layer)?);
                apply_update(&mut stack, side, layer, &g, lr)?;
                ctx.refresh(&stack)?;
                let alpha = update_alpha(&stack, ctx)?;
                stack.set_alpha(alpha);
                let gamma = residual_energy(alpha, ctx.cached_h(&stack)?, &ctx.channel.target);
                step += 1;
                if gamma < best.1 {
                    best = (stack.clone(), gamma);
                }
                trace.records.push(TraceRecord {
                    epoch,
                    step,
                    side: Some(side),
                    layer: Some(layer),
                    gamma,
                    nmse: nmse(gamma),
                    alpha,
                    eta: lr,
                    best_gamma: best.1,
                });
            }
        }
        lr = decay_lr(lr, algo.decay);
    }
    Ok((best.0, trace))
}


#[cfg(test)]
mod scale_tests {
    use super::*;
    use crate::channel::{draw_channel, ChannelRealization, CorrelationPair};
    use crate::geometry::build_propagation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn descent_is_invariant_to_channel_scale() {
        let sys = SystemConfig {
            streams_per_pol: 2,
            tx_layers: 2,
            rx_layers: 2,
            tx_units_per_layer: 16,
            rx_units_per_layer: 16,
            ..Default::default()
        };
        let algo = AlgoConfig { init_candidates: 10, max_epochs: 5, ..Default::default() };
        let prop = build_propagation(&sys).unwrap();
        let corr = CorrelationPair::for_system(&sys).unwrap();
        let base = draw_channel(&mut ChaCha12Rng::seed_from_u64(4), &sys, &corr, 1.0).unwrap();
        let mut finals = vec![];
        for scale in [1.0, 1e-7] {
            let ch = ChannelRealization::from_matrix(&base.g * C64::new(scale, 0.0), scale * scale, sys.total_streams()).unwrap();
            let mut ctx = ObjectiveContext::new(&ch, &prop).unwrap();
            let (_, trace) = run_lgd(&mut ChaCha12Rng::seed_from_u64(9), &sys, &algo, &mut ctx).unwrap();
            finals.push(trace.records.iter().map(|r| r.nmse).collect::<Vec<_>>());
        }
        for (a, b) in finals[0].iter().zip(&finals[1]) {
            assert!((a - b).abs() < 1e-6 * a.max(1e-3), "{a} vs {b}");
        }
    }
}
