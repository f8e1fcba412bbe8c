//! Trainable phase configuration and the stack transfer matrices.
//!
//! Phases are kept as raw angles in `[0, 2π)`; the diagonal transmission
//! matrices are rebuilt from them on demand so their entries always have unit
//! modulus. Both stacks are polarization-block-diagonal: polarization `p`
//! carries streams `p*S .. (p+1)*S`, and
//!
//! ```text
//! T_p = Φ^L_p V^L ··· Φ^1_p V^1          (M x S)
//! R_q = U^1 Ψ^1_q ··· U^K Ψ^K_q          (S x N)
//! H   = R G T,  H_qp = R_q G_qp T_p      (2S x 2S)
//! ```

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::StackMode;
use crate::geometry::PropagationSet;
use crate::{CMatrix, Error, Result, C64};

pub type CVector = DVector<C64>;

/// Reduce an angle into `[0, 2π)`.
pub fn wrap_phase(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Unit-modulus transmission coefficients of a phase vector.
pub fn phase_factors(angles: &[f64]) -> Vec<C64> {
    angles.iter().map(|&a| C64::new(a.cos(), a.sin())).collect()
}

/// `diag(d) · m`.
pub fn scale_rows(m: &CMatrix, d: &[C64]) -> CMatrix {
    let mut out = m.clone();
    for (r, &f) in d.iter().enumerate() {
        out.row_mut(r).apply(|z| *z *= f);
    }
    out
}

/// `m · diag(d)`.
pub fn scale_cols(m: &CMatrix, d: &[C64]) -> CMatrix {
    let mut out = m.clone();
    for (c, &f) in d.iter().enumerate() {
        out.column_mut(c).apply(|z| *z *= f);
    }
    out
}

/// Dimensions of a stack pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub tx_layers: usize,
    pub rx_layers: usize,
    pub tx_units: usize,
    pub rx_units: usize,
}

impl StackShape {
    pub fn of(prop: &PropagationSet) -> Self {
        StackShape {
            tx_layers: prop.tx_layers(),
            rx_layers: prop.rx_layers(),
            tx_units: prop.tx_units(),
            rx_units: prop.rx_units(),
        }
    }
}

/// Which stack a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Tx,
    Rx,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Tx => "tx",
            Side::Rx => "rx",
        }
    }
}

/// Per-unit phases of both stacks plus the complex scaling factor.
///
/// Fields are private so the wrap and tie invariants cannot be bypassed;
/// every phase mutation bumps [`PhaseStack::revision`].
#[derive(Debug, Clone)]
pub struct PhaseStack {
    mode: StackMode,
    /// `theta[l][p][m]`.
    theta: Vec<[Vec<f64>; 2]>,
    /// `xi[k][p][n]`.
    xi: Vec<[Vec<f64>; 2]>,
    alpha: C64,
    revision: u64,
}

impl PartialEq for PhaseStack {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.theta == other.theta
            && self.xi == other.xi
            && self.alpha == other.alpha
    }
}

impl PhaseStack {
    /// All phases zero.
    pub fn zeros(mode: StackMode, shape: StackShape, alpha: C64) -> Self {
        let layer = |units: usize| [vec![0.0; units], vec![0.0; units]];
        PhaseStack {
            mode,
            theta: (0..shape.tx_layers).map(|_| layer(shape.tx_units)).collect(),
            xi: (0..shape.rx_layers).map(|_| layer(shape.rx_units)).collect(),
            alpha,
            revision: 0,
        }
    }

    /// Independent uniform phases; in tied mode one draw per unit.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, mode: StackMode, shape: StackShape, alpha: C64) -> Self {
        let mut s = Self::zeros(mode, shape, alpha);
        for layers in [&mut s.theta, &mut s.xi] {
            for layer in layers.iter_mut() {
                for p in 0..2 {
                    if p == 1 && mode.is_tied() {
                        layer[1] = layer[0].clone();
                    } else {
                        for a in layer[p].iter_mut() {
                            *a = rng.random_range(0.0..TAU);
                        }
                    }
                }
            }
        }
        s
    }

    pub fn mode(&self) -> StackMode {
        self.mode
    }

    pub fn shape(&self) -> StackShape {
        StackShape {
            tx_layers: self.theta.len(),
            rx_layers: self.xi.len(),
            tx_units: self.theta.first().map_or(0, |l| l[0].len()),
            rx_units: self.xi.first().map_or(0, |l| l[0].len()),
        }
    }

    /// Phase mutation counter, used to detect stale gradient caches.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn alpha(&self) -> C64 {
        self.alpha
    }

    /// Changing `α` does not touch the phases, so the revision is kept.
    pub fn set_alpha(&mut self, alpha: C64) {
        self.alpha = alpha;
    }

    /// Phases of layer `layer` (0-based) and polarization `pol`.
    pub fn phases(&self, side: Side, layer: usize, pol: usize) -> &[f64] {
        match side {
            Side::Tx => &self.theta[layer][pol],
            Side::Rx => &self.xi[layer][pol],
        }
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Tx => self.theta.len(),
            Side::Rx => self.xi.len(),
        }
    }

    fn layer_mut(&mut self, side: Side, layer: usize) -> &mut [Vec<f64>; 2] {
        match side {
            Side::Tx => &mut self.theta[layer],
            Side::Rx => &mut self.xi[layer],
        }
    }

    /// Set one phase. In tied mode both polarizations of the unit move.
    pub fn set_phase(&mut self, side: Side, layer: usize, pol: usize, unit: usize, angle: f64) {
        let tied = self.mode.is_tied();
        let l = self.layer_mut(side, layer);
        let a = wrap_phase(angle);
        l[pol][unit] = a;
        if tied {
            l[1 - pol][unit] = a;
        }
        self.revision += 1;
    }

    /// Add `delta[p][u]` to every phase of a layer and re-wrap. In tied mode
    /// `delta[0]` is applied to both polarizations.
    pub fn shift_layer(&mut self, side: Side, layer: usize, delta: &[Vec<f64>; 2]) -> Result<()> {
        let tied = self.mode.is_tied();
        let l = self.layer_mut(side, layer);
        for p in 0..2 {
            if delta[p].len() != l[p].len() {
                return Err(Error::Shape(format!(
                    "layer has {} units, update has {}",
                    l[p].len(),
                    delta[p].len()
                )));
            }
        }
        for p in 0..2 {
            let d = if tied { &delta[0] } else { &delta[p] };
            for (a, dd) in l[p].iter_mut().zip(d) {
                *a = wrap_phase(*a + dd);
            }
        }
        self.revision += 1;
        Ok(())
    }

    /// Diagonal of `Φ^l_p` (or `Ψ^k_p`).
    pub fn factors(&self, side: Side, layer: usize, pol: usize) -> Vec<C64> {
        phase_factors(self.phases(side, layer, pol))
    }

    /// True when every unit carries the same phase on both polarizations.
    pub fn is_tied(&self) -> bool {
        self.theta.iter().chain(&self.xi).all(|l| l[0] == l[1])
    }

    /// Text checkpoint: a small header followed by one
    /// `side,polarization,layer,unit,angle` row per phase.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "alpha = {},{}", self.alpha.re, self.alpha.im);
        let _ = writeln!(out, "side,polarization,layer,unit,angle");
        for side in [Side::Tx, Side::Rx] {
            for l in 0..self.layers(side) {
                for p in 0..2 {
                    for (u, a) in self.phases(side, l, p).iter().enumerate() {
                        let _ = writeln!(out, "{},{p},{l},{u},{a}", side.as_str());
                    }
                }
            }
        }
        out
    }

    pub fn from_text<R: BufRead>(input: R) -> Result<Self> {
        let mut mode = None;
        let mut alpha = None;
        let mut rows: Vec<(Side, usize, usize, usize, f64)> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let bad = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
            if line.is_empty() || line.starts_with('#') || line.starts_with("side,") {
                continue;
            }
            if let Some(v) = line.strip_prefix("mode = ") {
                mode = Some(v.parse::<StackMode>().map_err(|e| bad(&e))?);
                continue;
            }
            if let Some(v) = line.strip_prefix("alpha = ") {
                let (re, im) = v.split_once(',').ok_or_else(|| bad("alpha needs re,im"))?;
                let re = re.trim().parse().map_err(|_| bad("bad alpha"))?;
                let im = im.trim().parse().map_err(|_| bad("bad alpha"))?;
                alpha = Some(C64::new(re, im));
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected side,polarization,layer,unit,angle"));
            }
            let side = match f[0] {
                "tx" => Side::Tx,
                "rx" => Side::Rx,
                _ => return Err(bad("side must be tx or rx")),
            };
            let p: usize = f[1].parse().map_err(|_| bad("bad polarization"))?;
            let l: usize = f[2].parse().map_err(|_| bad("bad layer"))?;
            let u: usize = f[3].parse().map_err(|_| bad("bad unit"))?;
            let a: f64 = f[4].parse().map_err(|_| bad("bad angle"))?;
            if p > 1 {
                return Err(bad("polarization must be 0 or 1"));
            }
            rows.push((side, p, l, u, a));
        }
        let mode = mode.ok_or_else(|| Error::Format("missing mode line".into()))?;
        let alpha = alpha.ok_or_else(|| Error::Format("missing alpha line".into()))?;
        let dim = |side: Side, f: fn(&(Side, usize, usize, usize, f64)) -> usize| {
            rows.iter().filter(|r| r.0 == side).map(|r| f(r) + 1).max().unwrap_or(0)
        };
        let shape = StackShape {
            tx_layers: dim(Side::Tx, |r| r.2),
            rx_layers: dim(Side::Rx, |r| r.2),
            tx_units: dim(Side::Tx, |r| r.3),
            rx_units: dim(Side::Rx, |r| r.3),
        };
        let expected = 2 * (shape.tx_layers * shape.tx_units + shape.rx_layers * shape.rx_units);
        if rows.len() != expected {
            return Err(Error::Format(format!("{} phase rows, expected {expected}", rows.len())));
        }
        let mut s = PhaseStack::zeros(StackMode::DualPolarized, shape, alpha);
        for (side, p, l, u, a) in rows {
            s.layer_mut(side, l)[p][u] = wrap_phase(a);
        }
        s.mode = mode;
        if mode.is_tied() && !s.is_tied() {
            return Err(Error::Format("tied stack with differing polarization phases".into()));
        }
        s.revision = 0;
        Ok(s)
    }
}

fn check_shape(stack: &PhaseStack, prop: &PropagationSet) -> Result<()> {
    let (a, b) = (stack.shape(), StackShape::of(prop));
    if a != b {
        return Err(Error::Shape(format!("phase stack {a:?} vs propagation {b:?}")));
    }
    Ok(())
}

/// `T_p = Φ^L_p V^L ··· Φ^1_p V^1`, `M x S`.
pub fn tx_block(stack: &PhaseStack, prop: &PropagationSet, pol: usize) -> CMatrix {
    let mut acc = scale_rows(&prop.tx_matrices[0], &stack.factors(Side::Tx, 0, pol));
    for l in 1..prop.tx_layers() {
        acc = scale_rows(&(&prop.tx_matrices[l] * acc), &stack.factors(Side::Tx, l, pol));
    }
    acc
}

/// `R_q = U^1 Ψ^1_q ··· U^K Ψ^K_q`, `S x N`.
pub fn rx_block(stack: &PhaseStack, prop: &PropagationSet, pol: usize) -> CMatrix {
    let mut acc = scale_cols(&prop.rx_matrices[0], &stack.factors(Side::Rx, 0, pol));
    for k in 1..prop.rx_layers() {
        acc = scale_cols(&(acc * &prop.rx_matrices[k]), &stack.factors(Side::Rx, k, pol));
    }
    acc
}

fn block_diag(blocks: [CMatrix; 2]) -> CMatrix {
    let (r, c) = blocks[0].shape();
    let mut out = CMatrix::zeros(2 * r, 2 * c);
    for (p, b) in blocks.iter().enumerate() {
        out.view_mut((p * r, p * c), (r, c)).copy_from(b);
    }
    out
}

/// Transmit stack matrix, `2M x 2S`.
pub fn assemble_t(stack: &PhaseStack, prop: &PropagationSet) -> Result<CMatrix> {
    check_shape(stack, prop)?;
    Ok(block_diag([tx_block(stack, prop, 0), tx_block(stack, prop, 1)]))
}

/// Receive stack matrix, `2S x 2N`.
pub fn assemble_r(stack: &PhaseStack, prop: &PropagationSet) -> Result<CMatrix> {
    check_shape(stack, prop)?;
    Ok(block_diag([rx_block(stack, prop, 0), rx_block(stack, prop, 1)]))
}

/// `H = R G T`.
pub fn end_to_end(t: &CMatrix, g: &CMatrix, r: &CMatrix) -> Result<CMatrix> {
    if r.ncols() != g.nrows() || g.ncols() != t.nrows() {
        return Err(Error::Shape(format!(
            "R {:?} · G {:?} · T {:?}",
            r.shape(),
            g.shape(),
            t.shape()
        )));
    }
    Ok(r * g * t)
}

/// `H` computed block-wise without materializing the zero blocks of `T`, `R`.
pub fn end_to_end_blocks(stack: &PhaseStack, prop: &PropagationSet, g: &CMatrix) -> Result<CMatrix> {
    check_shape(stack, prop)?;
    let (m, n) = (prop.tx_units(), prop.rx_units());
    if g.shape() != (2 * n, 2 * m) {
        return Err(Error::Shape(format!("channel {:?}, expected {:?}", g.shape(), (2 * n, 2 * m))));
    }
    let s = prop.streams_per_pol();
    let t = [tx_block(stack, prop, 0), tx_block(stack, prop, 1)];
    let r = [rx_block(stack, prop, 0), rx_block(stack, prop, 1)];
    let mut h = CMatrix::zeros(2 * s, 2 * s);
    for q in 0..2 {
        for p in 0..2 {
            let blk = &r[q] * g.view((q * n, p * m), (n, m)) * &t[p];
            h.view_mut((q * s, p * s), (s, s)).copy_from(&blk);
        }
    }
    Ok(h)
}

/// All three matrices of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEnd {
    pub t: CMatrix,
    pub r: CMatrix,
    pub h: CMatrix,
}

impl EndToEnd {
    pub fn assemble(stack: &PhaseStack, prop: &PropagationSet, g: &CMatrix) -> Result<Self> {
        let t = assemble_t(stack, prop)?;
        let r = assemble_r(stack, prop)?;
        let h = end_to_end(&t, g, &r)?;
        Ok(EndToEnd { t, r, h })
    }
}

/// Linear reception `y = α H diag(√p) x + n` with `n ~ CN(0, σ² I)`.
///
/// `alpha = None` leaves the channel unscaled.
pub fn simulate_reception<R: Rng + ?Sized>(
    rng: &mut R,
    h: &CMatrix,
    alpha: Option<C64>,
    p: &[f64],
    x: &CVector,
    noise_power: f64,
) -> Result<CVector> {
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativePower { index, value });
    }
    if p.len() != h.ncols() || x.len() != h.ncols() {
        return Err(Error::Shape(format!(
            "H is {:?}, p has {} entries, x has {}",
            h.shape(),
            p.len(),
            x.len()
        )));
    }
    let scaled = CVector::from_fn(x.len(), |i, _| x[i] * p[i].sqrt());
    let mut y = h * scaled;
    if let Some(a) = alpha {
        y *= a;
    }
    if noise_power > 0.0 {
        let s = (noise_power / 2.0).sqrt();
        for v in y.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *v += C64::new(s * re, s * im);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::geometry::build_propagation;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_prop(layers: usize) -> PropagationSet {
        let sys = SystemConfig {
            streams_per_pol: 2,
            tx_layers: layers,
            rx_layers: layers,
            tx_units_per_layer: 9,
            rx_units_per_layer: 4,
            ..Default::default()
        };
        build_propagation(&sys).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    fn zero() -> C64 {
        C64::new(0.0, 0.0)
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_phase(0.0), 0.0);
        assert_eq!(wrap_phase(TAU), 0.0);
        assert!((wrap_phase(-0.5) - (TAU - 0.5)).abs() < 1e-15);
        assert!(wrap_phase(-1e-300) < TAU);
        assert!((wrap_phase(7.0) - (7.0 - TAU)).abs() < 1e-15);
    }

    #[test]
    fn zero_phase_single_layer() {
        let prop = small_prop(1);
        let stack = PhaseStack::zeros(StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        let t = assemble_t(&stack, &prop).unwrap();
        let v = &prop.tx_matrices[0];
        assert_eq!(t.shape(), (18, 4));
        assert_eq!(t.view((0, 0), (9, 2)).clone_owned(), *v);
        assert_eq!(t.view((9, 2), (9, 2)).clone_owned(), *v);
        let r = assemble_r(&stack, &prop).unwrap();
        assert_eq!(r.shape(), (4, 8));
        assert_eq!(r.view((0, 0), (2, 4)).clone_owned(), prop.rx_matrices[0]);
        assert_eq!(r.view((2, 4), (2, 4)).clone_owned(), prop.rx_matrices[0]);
    }

    #[test]
    fn cross_blocks_are_exactly_zero() {
        let prop = small_prop(3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        let t = assemble_t(&stack, &prop).unwrap();
        assert!(t.view((0, 2), (9, 2)).iter().all(|z| *z == zero()));
        assert!(t.view((9, 0), (9, 2)).iter().all(|z| *z == zero()));
        let r = assemble_r(&stack, &prop).unwrap();
        assert!(r.view((0, 4), (2, 4)).iter().all(|z| *z == zero()));
        assert!(r.view((2, 0), (2, 4)).iter().all(|z| *z == zero()));
    }

    #[test]
    fn tied_mode_gives_identical_blocks() {
        let prop = small_prop(2);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let stack = PhaseStack::random(&mut rng, StackMode::TiedSimBaseline, StackShape::of(&prop), C64::new(1.0, 0.0));
        assert!(stack.is_tied());
        assert_eq!(tx_block(&stack, &prop, 0), tx_block(&stack, &prop, 1));
        assert_eq!(rx_block(&stack, &prop, 0), rx_block(&stack, &prop, 1));
    }

    #[test]
    fn tied_mutations_stay_tied() {
        let prop = small_prop(2);
        let mut stack = PhaseStack::zeros(StackMode::TiedSimBaseline, StackShape::of(&prop), C64::new(1.0, 0.0));
        stack.set_phase(Side::Tx, 1, 1, 3, 1.25);
        assert_eq!(stack.phases(Side::Tx, 1, 0)[3], 1.25);
        stack.shift_layer(Side::Rx, 0, &[vec![0.3; 4], vec![0.3; 4]]).unwrap();
        assert!(stack.is_tied());
    }

    #[test]
    fn unit_modulus_factors() {
        let prop = small_prop(2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        for side in [Side::Tx, Side::Rx] {
            for l in 0..2 {
                for p in 0..2 {
                    for f in stack.factors(side, l, p) {
                        assert!((f.norm() - 1.0).abs() <= 2.0 * f64::EPSILON);
                    }
                }
            }
        }
    }

    /// Naive triple-loop product oracle.
    fn naive_product(a: &CMatrix, b: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = zero();
                for k in 0..a.ncols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn end_to_end_matches_naive_product() {
        let prop = small_prop(2);
        let stack = PhaseStack::zeros(StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        // identity-padded diagonal channel, 8 x 18
        let g = CMatrix::from_fn(8, 18, |i, j| if i == j { C64::new(1.0 + i as f64, 0.0) } else { zero() });
        let e = EndToEnd::assemble(&stack, &prop, &g).unwrap();
        let oracle = naive_product(&naive_product(&e.r, &g), &e.t);
        assert!((&e.h - &oracle).norm() <= 1e-13 * oracle.norm());
        let blocks = end_to_end_blocks(&stack, &prop, &g).unwrap();
        assert!((&e.h - &blocks).norm() <= 1e-13 * oracle.norm());
    }

    #[test]
    fn end_to_end_is_linear_and_checks_shapes() {
        let prop = small_prop(2);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        let g = random_matrix(&mut rng, 8, 18);
        let h = end_to_end_blocks(&stack, &prop, &g).unwrap();
        let c = C64::new(-1.5, 0.25);
        let hc = end_to_end_blocks(&stack, &prop, &(&g * c)).unwrap();
        assert!((hc - h * c).norm() < 1e-12);
        assert!(end_to_end_blocks(&stack, &prop, &random_matrix(&mut rng, 8, 8)).is_err());
        let t = CMatrix::zeros(18, 4);
        assert!(end_to_end(&t, &g, &CMatrix::zeros(4, 7)).is_err());
    }

    #[test]
    fn zero_cross_channel_gives_block_diagonal_h() {
        let prop = small_prop(2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        let mut g = random_matrix(&mut rng, 8, 18);
        g.view_mut((0, 9), (4, 9)).fill(zero());
        g.view_mut((4, 0), (4, 9)).fill(zero());
        let h = end_to_end_blocks(&stack, &prop, &g).unwrap();
        assert!(h.view((0, 2), (2, 2)).iter().all(|z| *z == zero()));
        assert!(h.view((2, 0), (2, 2)).iter().all(|z| *z == zero()));
    }

    #[test]
    fn permuting_units_leaves_h_unchanged() {
        let prop = small_prop(1);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
        let g = random_matrix(&mut rng, 8, 18);
        let h = end_to_end_blocks(&stack, &prop, &g).unwrap();

        // reverse the transmit unit order in V¹, the phases and G's columns
        let perm: Vec<usize> = (0..9).rev().collect();
        let mut prop2 = prop.clone();
        prop2.tx_matrices[0] = CMatrix::from_fn(9, 2, |r, c| prop.tx_matrices[0][(perm[r], c)]);
        let mut stack2 = stack.clone();
        for p in 0..2 {
            for u in 0..9 {
                stack2.set_phase(Side::Tx, 0, p, u, stack.phases(Side::Tx, 0, p)[perm[u]]);
            }
        }
        let g2 = CMatrix::from_fn(8, 18, |r, c| g[(r, (c / 9) * 9 + perm[c % 9])]);
        let h2 = end_to_end_blocks(&stack2, &prop2, &g2).unwrap();
        assert!((h - h2).norm() < 1e-14 * g.norm());
    }

    #[test]
    fn noiseless_identity_reception() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let h = CMatrix::identity(4, 4);
        let x = CVector::from_fn(4, |i, _| C64::new(i as f64, -1.0));
        let y = simulate_reception(&mut rng, &h, None, &[1.0; 4], &x, 0.0).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            simulate_reception(&mut rng, &h, None, &[1.0, -0.1, 1.0, 1.0], &x, 0.0),
            Err(Error::NegativePower { index: 1, .. })
        ));
    }

    #[test]
    fn transmit_energy_matches_power() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let p = [0.5, 1.5, 0.25, 2.0];
        let h = CMatrix::identity(4, 4);
        let trials = 100_000;
        let mut energy = 0.0;
        for _ in 0..trials {
            let x = CVector::from_fn(4, |_, _| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                C64::new(a, b) / 2f64.sqrt()
            });
            energy += simulate_reception(&mut rng, &h, None, &p, &x, 0.0).unwrap().norm_squared();
        }
        let mean = energy / trials as f64;
        let total: f64 = p.iter().sum();
        assert!((mean / total - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn zero_channel_gives_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let h = CMatrix::zeros(2, 2);
        let x = CVector::from_element(2, C64::new(1.0, 0.0));
        let sigma2 = 3e-3;
        let trials = 50_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            acc += simulate_reception(&mut rng, &h, None, &[1.0, 1.0], &x, sigma2).unwrap().norm_squared();
        }
        let per_entry = acc / (2 * trials) as f64;
        assert!((per_entry / sigma2 - 1.0).abs() < 0.02, "{per_entry}");
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(seed in any::<u64>(), tied in any::<bool>()) {
            let prop = small_prop(2);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mode = if tied { StackMode::TiedSimBaseline } else { StackMode::DualPolarized };
            let alpha = C64::new(rng.random(), -rng.random::<f64>());
            let stack = PhaseStack::random(&mut rng, mode, StackShape::of(&prop), alpha);
            let back = PhaseStack::from_text(stack.to_text().as_bytes()).unwrap();
            prop_assert_eq!(back, stack);
        }

        #[test]
        fn phases_stay_wrapped(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let prop = small_prop(1);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut stack = PhaseStack::random(&mut rng, StackMode::DualPolarized, StackShape::of(&prop), C64::new(1.0, 0.0));
            stack.shift_layer(Side::Tx, 0, &[vec![shift; 9], vec![-shift; 9]]).unwrap();
            for p in 0..2 {
                prop_assert!(stack.phases(Side::Tx, 0, p).iter().all(|a| (0.0..TAU).contains(a)));
            }
        }
    }
}
