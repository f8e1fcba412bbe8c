//! Unit coordinates and Rayleigh-Sommerfeld inter-layer diffraction.
//!
//! Both stacks share one coordinate convention: the layers are parallel to the
//! xy-plane, stacked along +z, with the port array (feed or receive antennas)
//! at `z = 0` and layer `l` at `z = l * spacing`. On the receive side layer 1
//! is the one next to the ports and layer K faces the channel.

use std::f64::consts::PI;

use crate::config::SystemConfig;
use crate::{CMatrix, Error, Result, C64};

pub type Point = [f64; 3];

/// Unit (or antenna) positions of one planar layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry {
    pub positions: Vec<Point>,
    /// Unit normal of the layer plane.
    pub normal: Point,
    /// Area of one element, m².
    pub element_area: f64,
}

impl LayerGeometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Signed offset of the layer plane along its normal.
    pub fn axial_offset(&self) -> f64 {
        self.positions.first().map_or(0.0, |p| dot(p, &self.normal))
    }
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

const AXIS: Point = [0.0, 0.0, 1.0];

/// Centered `√count x √count` grid with the given pitch in the plane
/// `z = plane_offset`. Element area is `pitch²`.
pub fn build_layer_grid(count: usize, pitch: f64, plane_offset: f64) -> Result<LayerGeometry> {
    let side = (count as f64).sqrt().round() as usize;
    if count == 0 || side * side != count {
        return Err(Error::Geometry(format!(
            "unit count {count} is not a perfect square"
        )));
    }
    let center = (side as f64 - 1.0) / 2.0;
    let positions = (0..side)
        .flat_map(|row| {
            (0..side).map(move |col| {
                [
                    (col as f64 - center) * pitch,
                    (row as f64 - center) * pitch,
                    plane_offset,
                ]
            })
        })
        .collect();
    Ok(LayerGeometry { positions, normal: AXIS, element_area: pitch * pitch })
}

/// Centered uniform linear array along x in the plane `z = plane_offset`.
pub fn build_linear_array(
    count: usize,
    pitch: f64,
    plane_offset: f64,
    element_area: f64,
) -> LayerGeometry {
    let center = (count as f64 - 1.0) / 2.0;
    let positions = (0..count)
        .map(|i| [(i as f64 - center) * pitch, 0.0, plane_offset])
        .collect();
    LayerGeometry { positions, normal: AXIS, element_area }
}

/// Rayleigh-Sommerfeld transmission coefficient for one element pair at
/// distance `r` with axial separation `axial`.
pub fn diffraction_coefficient(area: f64, axial: f64, r: f64, wavelength: f64) -> C64 {
    let cos_chi = axial / r;
    let amplitude = area * cos_chi / r;
    let near_far = C64::new(1.0 / (2.0 * PI * r), -1.0 / wavelength);
    amplitude * near_far * C64::from_polar(1.0, 2.0 * PI * r / wavelength)
}

/// Diffraction matrix from `src` to `dst`, shape `|dst| x |src|`.
///
/// Entry `(m, m̃)` couples source element `m̃` to destination element `m`; the
/// obliquity factor is taken against the layer normal and the source element
/// area weights the contribution.
pub fn diffraction_matrix(
    src: &LayerGeometry,
    dst: &LayerGeometry,
    wavelength: f64,
) -> Result<CMatrix> {
    if src.normal != dst.normal {
        return Err(Error::Geometry("layers are not parallel".into()));
    }
    let separation = (dst.axial_offset() - src.axial_offset()).abs();
    if separation <= 0.0 || !separation.is_finite() {
        return Err(Error::Geometry(
            "source and destination layers are coplanar".into(),
        ));
    }
    Ok(CMatrix::from_fn(dst.len(), src.len(), |m, mt| {
        let r = distance(&dst.positions[m], &src.positions[mt]);
        diffraction_coefficient(src.element_area, separation, r, wavelength)
    }))
}

/// Frozen propagation matrices of both stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationSet {
    /// `[V¹ (M x S), V² (M x M), …, V^L]`.
    pub tx_matrices: Vec<CMatrix>,
    /// `[U¹ (S x N), U² (N x N), …, U^K]`.
    pub rx_matrices: Vec<CMatrix>,
}

impl PropagationSet {
    pub fn tx_layers(&self) -> usize {
        self.tx_matrices.len()
    }

    pub fn rx_layers(&self) -> usize {
        self.rx_matrices.len()
    }

    /// Units per transmit layer `M`.
    pub fn tx_units(&self) -> usize {
        self.tx_matrices[0].nrows()
    }

    pub fn rx_units(&self) -> usize {
        self.rx_matrices[0].ncols()
    }

    /// Streams per polarization `S`.
    pub fn streams_per_pol(&self) -> usize {
        self.tx_matrices[0].ncols()
    }
}

/// Transmit-side port array, layers 1..L.
pub fn tx_layout(sys: &SystemConfig) -> Result<(LayerGeometry, Vec<LayerGeometry>)> {
    stack_layout(
        sys.streams_per_pol,
        sys.tx_units_per_layer,
        sys.tx_layers,
        sys.tx_layer_spacing(),
        sys,
    )
}

/// Receive-side port array, layers 1..K (layer 1 next to the ports).
pub fn rx_layout(sys: &SystemConfig) -> Result<(LayerGeometry, Vec<LayerGeometry>)> {
    stack_layout(
        sys.streams_per_pol,
        sys.rx_units_per_layer,
        sys.rx_layers,
        sys.rx_layer_spacing(),
        sys,
    )
}

fn stack_layout(
    ports: usize,
    units: usize,
    layers: usize,
    spacing: f64,
    sys: &SystemConfig,
) -> Result<(LayerGeometry, Vec<LayerGeometry>)> {
    let area = sys.unit_spacing * sys.unit_spacing;
    let port_array = build_linear_array(ports, sys.wavelength / 2.0, 0.0, area);
    let layers = (1..=layers)
        .map(|l| build_layer_grid(units, sys.unit_spacing, l as f64 * spacing))
        .collect::<Result<Vec<_>>>()?;
    Ok((port_array, layers))
}

/// Build `V¹..V^L` and `U¹..U^K` for a configuration. The same matrices serve
/// both polarizations.
pub fn build_propagation(sys: &SystemConfig) -> Result<PropagationSet> {
    let lambda = sys.wavelength;

    let (feed, tx_layers) = tx_layout(sys)?;
    let mut tx_matrices = Vec::with_capacity(tx_layers.len());
    tx_matrices.push(diffraction_matrix(&feed, &tx_layers[0], lambda)?);
    for pair in tx_layers.windows(2) {
        tx_matrices.push(diffraction_matrix(&pair[0], &pair[1], lambda)?);
    }

    let (ports, rx_layers) = rx_layout(sys)?;
    let mut rx_matrices = Vec::with_capacity(rx_layers.len());
    rx_matrices.push(diffraction_matrix(&rx_layers[0], &ports, lambda)?);
    for pair in rx_layers.windows(2) {
        rx_matrices.push(diffraction_matrix(&pair[1], &pair[0], lambda)?);
    }

    Ok(PropagationSet { tx_matrices, rx_matrices })
}
