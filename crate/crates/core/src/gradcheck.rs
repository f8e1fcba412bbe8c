//! Central finite-difference check of the analytic phase gradients.
//!
//! The numeric side evaluates `Γ` through the dense `R G T` product
//! ([`EndToEnd::assemble`]), not through the optimizer's cached block
//! products, so the two routes share nothing but the model definition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::channel::{draw_channel, CorrelationPair};
use crate::config::{StackMode, SystemConfig};
use crate::geometry::build_propagation;
use crate::optimizer::{grad_layer, optimal_alpha, residual_energy, LayerGradient, ObjectiveContext};
use crate::stack::{EndToEnd, PhaseStack, Side, StackShape};
use crate::{Result, C64};

fn dense_objective(stack: &PhaseStack, ctx: &ObjectiveContext) -> Result<f64> {
    let e = EndToEnd::assemble(stack, ctx.prop, &ctx.channel.g)?;
    Ok(residual_energy(stack.alpha(), &e.h, &ctx.channel.target))
}

/// `(Γ(θ + h) − Γ(θ − h)) / 2h` for every phase of one layer. In tied mode the
/// shared phase is perturbed, so both slots carry the same derivative.
pub fn finite_difference_layer(
    stack: &PhaseStack,
    ctx: &ObjectiveContext,
    side: Side,
    layer: usize,
    step: f64,
) -> Result<LayerGradient> {
    let units = stack.phases(side, layer, 0).len();
    let mut values = [vec![0.0; units], vec![0.0; units]];
    let pols = if stack.mode().is_tied() { 1 } else { 2 };
    for p in 0..pols {
        for u in 0..units {
            let base = stack.phases(side, layer, p)[u];
            let at = |k: f64| -> Result<f64> {
                let mut s = stack.clone();
                s.set_phase(side, layer, p, u, base + k * step);
                dense_objective(&s, ctx)
            };
            values[p][u] = (at(1.0)? - at(-1.0)?) / (2.0 * step);
        }
    }
    if pols == 1 {
        values[1] = values[0].clone();
    }
    Ok(LayerGradient { values })
}

/// Relative error with a floor on the denominator, so entries whose true
/// value is a vanishing fraction of the layer's gradient scale are compared
/// against that scale instead of against zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Fraction of a layer's largest gradient entry used as the relative-error
/// floor.
pub const FLOOR_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub instances: usize,
    pub entries: usize,
    pub max_relative_error: f64,
    /// `(instance, side, layer, polarization, unit)` of the worst entry.
    pub worst: Option<(usize, Side, usize, usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Check every layer, both sides and both polarizations on `instances`
/// random channel/stack pairs built from `sys`.
pub fn run_grad_check(sys: &SystemConfig, instances: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let prop = build_propagation(sys)?;
    let corr = CorrelationPair::for_system(sys)?;
    let mut report = GradCheckReport { instances, entries: 0, max_relative_error: 0.0, worst: None };
    for i in 0..instances {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let channel = draw_channel(&mut rng, sys, &corr, 1.0)?;
        let mut stack = PhaseStack::random(&mut rng, sys.stack_mode, StackShape::of(&prop), C64::new(1.0, 0.0));
        let mut ctx = ObjectiveContext::new(&channel, &prop)?;
        ctx.refresh(&stack)?;
        // Scatter α around its least-squares value so αH and Λ are of
        // comparable size, as they are throughout a descent. With α ≈ 1 the
        // objective is nearly all constant target energy and the difference
        // quotient measures roundoff rather than slope.
        let jitter = C64::from_polar(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0));
        let base = optimal_alpha(ctx.cached_h(&stack)?, &channel.target).unwrap_or(C64::new(1.0, 0.0));
        stack.set_alpha(base * jitter);
        for (side, layers) in [(Side::Tx, prop.tx_layers()), (Side::Rx, prop.rx_layers())] {
            for layer in 0..layers {
                let analytic = grad_layer(&stack, &ctx, side, layer)?;
                let numeric = finite_difference_layer(&stack, &ctx, side, layer, step)?;
                let floor = FLOOR_FRACTION * analytic.max_abs();
                let pols = if sys.stack_mode == StackMode::TiedSimBaseline { 1 } else { 2 };
                for p in 0..pols {
                    for (u, (a, n)) in analytic.values[p].iter().zip(&numeric.values[p]).enumerate() {
                        report.entries += 1;
                        let err = relative_error(*a, *n, floor);
                        if err > report.max_relative_error || report.worst.is_none() {
                            report.max_relative_error = report.max_relative_error.max(err);
                            report.worst = Some((i, side, layer, p, u));
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}
