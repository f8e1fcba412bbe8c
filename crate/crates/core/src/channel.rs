//! Dual-polarized spatially correlated Rayleigh channels.
//!
//! `G` is `2N x 2M` with polarization blocks `G_qp` (transmit polarization `p`
//! to receive polarization `q`). Co-polar blocks carry `(1 - ε)` of the
//! large-scale gain, cross-polar blocks `ε`. Spatial correlation follows the
//! isotropic-scattering sinc model over the unit grid.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{CorrelationPlacement, SystemConfig};
use crate::geometry::{build_layer_grid, LayerGeometry};
use crate::{CMatrix, Error, RMatrix, Result, C64};

/// Eigenvalues below this are treated as a genuinely indefinite matrix.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Normalized sinc, `sin(πx)/(πx)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Spatial correlation `[R]_ij = sinc(2 r_ij / λ)` between the elements of a
/// planar layer.
pub fn correlation_matrix(geom: &LayerGeometry, wavelength: f64) -> RMatrix {
    let n = geom.len();
    let mut r = RMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (geom.positions[i], geom.positions[j]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let v = sinc(2.0 * d / wavelength);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Symmetric PSD square root through an eigendecomposition. Slightly negative
/// eigenvalues (round-off) are clamped to zero.
pub fn psd_sqrt(r: &RMatrix) -> Result<RMatrix> {
    let n = r.nrows();
    if n != r.ncols() {
        return Err(Error::Shape(format!("psd_sqrt of a {}x{} matrix", n, r.ncols())));
    }
    if n == 0 {
        return Ok(RMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(r.clone());
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let mut s = q * RMatrix::from_diagonal(&roots) * q.transpose();
    // exact symmetry
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Transmit/receive correlation matrices with their square roots.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPair {
    pub tx: RMatrix,
    pub rx: RMatrix,
    pub tx_sqrt: RMatrix,
    pub rx_sqrt: RMatrix,
}

impl CorrelationPair {
    /// Sinc correlation over the configured unit grids.
    pub fn for_system(sys: &SystemConfig) -> Result<Self> {
        let tx_grid = build_layer_grid(sys.tx_units_per_layer, sys.unit_spacing, 0.0)?;
        let rx_grid = build_layer_grid(sys.rx_units_per_layer, sys.unit_spacing, 0.0)?;
        Self::from_matrices(
            correlation_matrix(&tx_grid, sys.wavelength),
            correlation_matrix(&rx_grid, sys.wavelength),
        )
    }

    pub fn from_matrices(tx: RMatrix, rx: RMatrix) -> Result<Self> {
        let tx_sqrt = psd_sqrt(&tx)?;
        let rx_sqrt = psd_sqrt(&rx)?;
        Ok(CorrelationPair { tx, rx, tx_sqrt, rx_sqrt })
    }

    /// Uncorrelated units.
    pub fn identity(tx_units: usize, rx_units: usize) -> Self {
        let tx = RMatrix::identity(tx_units, tx_units);
        let rx = RMatrix::identity(rx_units, rx_units);
        CorrelationPair { tx_sqrt: tx.clone(), rx_sqrt: rx.clone(), tx, rx }
    }
}

/// Log-distance path loss in dB with a supplied shadowing term.
pub fn path_loss_db(distance: f64, sys: &SystemConfig, shadowing_db: f64) -> Result<f64> {
    let d0 = sys.pathloss_ref_distance;
    if distance < d0 {
        return Err(Error::DistanceBelowReference { distance, reference: d0 });
    }
    let free_space = 20.0 * (4.0 * PI * d0 / sys.wavelength).log10();
    Ok(free_space + 10.0 * sys.pathloss_exponent * (distance / d0).log10() + shadowing_db)
}

/// Draw one shadowing realization and return the link path loss in dB.
pub fn draw_path_loss_db<R: Rng + ?Sized>(rng: &mut R, sys: &SystemConfig) -> Result<f64> {
    let shadowing = if sys.shadowing_std > 0.0 {
        Normal::new(0.0, sys.shadowing_std)
            .map_err(|e| Error::Format(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    path_loss_db(sys.link_distance, sys, shadowing)
}

/// Linear power gain of a loss given in dB.
pub fn db_to_gain(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// One channel draw with its singular values and truncated target.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `2N x 2M` channel.
    pub g: CMatrix,
    pub pathloss_linear: f64,
    /// All `min(2M, 2N)` singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Diagonal of the `2S x 2S` target, i.e. the top `2S` singular values.
    pub target: Vec<f64>,
}

impl ChannelRealization {
    pub fn from_matrix(g: CMatrix, pathloss_linear: f64, streams: usize) -> Result<Self> {
        let (singular_values, target) = svd_target(&g, streams)?;
        Ok(ChannelRealization { g, pathloss_linear, singular_values, target })
    }

    /// The target as a dense `2S x 2S` matrix.
    pub fn target_matrix(&self) -> CMatrix {
        let n = self.target.len();
        CMatrix::from_fn(n, n, |i, j| if i == j { C64::new(self.target[i], 0.0) } else { C64::new(0.0, 0.0) })
    }

    /// `‖Λ_{1:2S}‖²_F`.
    pub fn target_energy(&self) -> f64 {
        self.target.iter().map(|x| x * x).sum()
    }

    pub fn streams(&self) -> usize {
        self.target.len()
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    if variance == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

/// Draw the i.i.d. `2N x 2M` small-scale matrix `G̃` (before correlation).
pub fn draw_iid_blocks<R: Rng + ?Sized>(
    rng: &mut R,
    tx_units: usize,
    rx_units: usize,
    epsilon: f64,
    pathloss_linear: f64,
) -> CMatrix {
    let co = (1.0 - epsilon) * pathloss_linear;
    let cross = epsilon * pathloss_linear;
    // column-major fill keeps the draw order independent of matrix layout
    // changes in the block routines
    let mut g = CMatrix::zeros(2 * rx_units, 2 * tx_units);
    for c in 0..2 * tx_units {
        for r in 0..2 * rx_units {
            let same_pol = (r < rx_units) == (c < tx_units);
            g[(r, c)] = complex_gaussian(rng, if same_pol { co } else { cross });
        }
    }
    g
}

fn real_to_complex(m: &RMatrix) -> CMatrix {
    m.map(|x| C64::new(x, 0.0))
}

/// Apply spatial correlation to `G̃`.
pub fn correlate(g_iid: &CMatrix, corr: &CorrelationPair, placement: CorrelationPlacement) -> CMatrix {
    let n = corr.rx_sqrt.nrows();
    let m = corr.tx_sqrt.nrows();
    let rx = real_to_complex(&corr.rx_sqrt);
    let tx = real_to_complex(&corr.tx_sqrt);
    match placement {
        CorrelationPlacement::BlockDiagonal => {
            let mut g = CMatrix::zeros(2 * n, 2 * m);
            for q in 0..2 {
                for p in 0..2 {
                    let block = g_iid.view((q * n, p * m), (n, m));
                    let out = &rx * block * &tx;
                    g.view_mut((q * n, p * m), (n, m)).copy_from(&out);
                }
            }
            g
        }
        CorrelationPlacement::LiteralEq8 => {
            let mut left = CMatrix::zeros(2 * n, 2 * n);
            let mut right = CMatrix::zeros(2 * m, 2 * m);
            for a in 0..2 {
                for b in 0..2 {
                    left.view_mut((a * n, b * n), (n, n)).copy_from(&rx);
                    right.view_mut((a * m, b * m), (m, m)).copy_from(&tx);
                }
            }
            left * g_iid * right
        }
    }
}

/// Draw a channel realization for a fixed large-scale gain.
pub fn draw_channel<R: Rng + ?Sized>(
    rng: &mut R,
    sys: &SystemConfig,
    corr: &CorrelationPair,
    pathloss_linear: f64,
) -> Result<ChannelRealization> {
    let m = sys.tx_units_per_layer;
    let n = sys.rx_units_per_layer;
    if corr.tx.nrows() != m || corr.rx.nrows() != n {
        return Err(Error::Shape(format!(
            "correlation sizes {}/{} do not match M={m}, N={n}",
            corr.tx.nrows(),
            corr.rx.nrows()
        )));
    }
    let g_iid = draw_iid_blocks(rng, m, n, sys.pol_conversion_ratio, pathloss_linear);
    let g = correlate(&g_iid, corr, sys.correlation_placement);
    ChannelRealization::from_matrix(g, pathloss_linear, sys.total_streams())
}

/// Singular values of `g` (nonincreasing) and the top `streams` of them.
pub fn svd_target(g: &CMatrix, streams: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let available = g.nrows().min(g.ncols());
    if streams > available {
        return Err(Error::TooManyStreams { requested: streams, available });
    }
    let mut sv: Vec<f64> = g.clone().singular_values().iter().map(|x| x.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let target = sv[..streams].to_vec();
    Ok((sv, target))
}
