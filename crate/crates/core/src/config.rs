//! System and algorithm parameters.
//!
//! Configuration files are plain `key = value` lines with `#` comments. Every
//! key is optional; omitted keys take the reference defaults (28 GHz, 2S = 6
//! streams, 3 + 3 layers of 10 x 10 units, 250 m link, ...). Quantities with a
//! physical unit accept an optional suffix:
//!
//! | kind      | suffixes                 | bare number means |
//! |-----------|--------------------------|-------------------|
//! | power     | `dBm`, `W`, `mW`         | dBm               |
//! | length    | `m`, `mm`, `cm`, `lambda`| meters            |
//! | frequency | `Hz`, `kHz`, `MHz`, `GHz`| hertz             |
//!
//! Powers are held in watts, the wavelength is derived from the carrier
//! frequency unless `wavelength` is given explicitly, and the unit spacing
//! defaults to half a wavelength.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// How the two polarizations of each unit are controlled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    /// Independent phases per polarization.
    DualPolarized,
    /// Single-polarization SIM emulated by tying both polarizations of a unit
    /// to the same phase.
    TiedSimBaseline,
}

/// Where the spatial correlation square roots enter the channel model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationPlacement {
    /// `diag(R_rx^½, R_rx^½) · G̃ · diag(R_tx^½, R_tx^½)`.
    BlockDiagonal,
    /// Every 2 x 2 block of both correlation factors filled with the square
    /// root, as the model is sometimes printed. Collapses the rank of `G`.
    LiteralEq8,
}

impl StackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StackMode::DualPolarized => "dual_polarized",
            StackMode::TiedSimBaseline => "tied_sim_baseline",
        }
    }

    pub fn is_tied(self) -> bool {
        self == StackMode::TiedSimBaseline
    }
}

impl CorrelationPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationPlacement::BlockDiagonal => "block_diagonal",
            CorrelationPlacement::LiteralEq8 => "literal_eq8",
        }
    }
}

impl fmt::Display for StackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for CorrelationPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dual_polarized" | "dpsim" => Ok(StackMode::DualPolarized),
            "tied_sim_baseline" | "sim" => Ok(StackMode::TiedSimBaseline),
            other => Err(format!("unknown stack_mode `{other}`")),
        }
    }
}

impl FromStr for CorrelationPlacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "block_diagonal" => Ok(CorrelationPlacement::BlockDiagonal),
            "literal_eq8" => Ok(CorrelationPlacement::LiteralEq8),
            other => Err(format!("unknown correlation_placement `{other}`")),
        }
    }
}

/// Physical parameters of the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Streams per polarization `S`; the link carries `2S` streams.
    pub streams_per_pol: usize,
    pub tx_layers: usize,
    pub rx_layers: usize,
    pub tx_units_per_layer: usize,
    pub rx_units_per_layer: usize,
    /// Pitch of the unit grid, meters.
    pub unit_spacing: f64,
    /// Total stack thickness on the transmit side, meters.
    pub tx_thickness: f64,
    pub rx_thickness: f64,
    pub link_distance: f64,
    /// Total transmit power, watts.
    pub transmit_power: f64,
    /// Receiver noise power, watts.
    pub noise_power: f64,
    pub carrier_frequency: f64,
    pub wavelength: f64,
    /// Fraction of power converted between polarizations, in `[0, 1]`.
    pub pol_conversion_ratio: f64,
    pub pathloss_ref_distance: f64,
    pub pathloss_exponent: f64,
    /// Shadowing standard deviation, dB.
    pub shadowing_std: f64,
    pub stack_mode: StackMode,
    pub correlation_placement: CorrelationPlacement,
}

impl SystemConfig {
    /// Total number of data streams `2S`.
    pub fn total_streams(&self) -> usize {
        2 * self.streams_per_pol
    }

    /// Axial distance between consecutive transmit layers.
    pub fn tx_layer_spacing(&self) -> f64 {
        self.tx_thickness / self.tx_layers as f64
    }

    pub fn rx_layer_spacing(&self) -> f64 {
        self.rx_thickness / self.rx_layers as f64
    }
}

/// Parameters of the layer-by-layer gradient descent and the Monte Carlo
/// campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    /// Random phase sets drawn for the multi-start initialization.
    pub init_candidates: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    /// Per-epoch learning-rate decay factor, in `(0, 1)`.
    pub decay: f64,
    pub monte_carlo_trials: usize,
    pub initial_alpha: C64,
    pub master_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        resolve(RawConfig::default()).expect("defaults resolve").0
    }
}

impl Default for AlgoConfig {
    fn default() -> Self {
        resolve(RawConfig::default()).expect("defaults resolve").1
    }
}

/// `10^((dBm - 30) / 10)` watts.
///
/// Integral exponents go through `powi`, so round dBm values such as 20 dBm
/// map to the nearest double of the exact power (0.1 W).
pub fn dbm_to_watts(dbm: f64) -> f64 {
    pow10((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// `10^x` with exact handling of integer exponents.
pub(crate) fn pow10(x: f64) -> f64 {
    if x.fract() == 0.0 && x.abs() < 300.0 {
        let n = x as i32;
        if n >= 0 {
            10f64.powi(n)
        } else {
            1.0 / 10f64.powi(-n)
        }
    } else {
        10f64.powf(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Length {
    Meters(f64),
    Wavelengths(f64),
}

/// Every key as it appeared in a document (or `None` when omitted).
#[derive(Debug, Clone, Default, PartialEq)]
struct RawConfig {
    streams_per_pol: Option<usize>,
    tx_layers: Option<usize>,
    rx_layers: Option<usize>,
    tx_units_per_layer: Option<usize>,
    rx_units_per_layer: Option<usize>,
    unit_spacing: Option<Length>,
    tx_thickness: Option<f64>,
    rx_thickness: Option<f64>,
    link_distance: Option<f64>,
    transmit_power: Option<f64>,
    noise_power: Option<f64>,
    carrier_frequency: Option<f64>,
    wavelength: Option<f64>,
    pol_conversion_ratio: Option<f64>,
    pathloss_ref_distance: Option<f64>,
    pathloss_exponent: Option<f64>,
    shadowing_std: Option<f64>,
    stack_mode: Option<StackMode>,
    correlation_placement: Option<CorrelationPlacement>,
    init_candidates: Option<usize>,
    max_epochs: Option<usize>,
    initial_lr: Option<f64>,
    decay: Option<f64>,
    monte_carlo_trials: Option<usize>,
    initial_alpha: Option<C64>,
    master_seed: Option<u64>,
}

/// All recognised keys, in render order.
pub const KEYS: &[&str] = &[
    "streams_per_pol",
    "tx_layers",
    "rx_layers",
    "tx_units_per_layer",
    "rx_units_per_layer",
    "unit_spacing",
    "tx_thickness",
    "rx_thickness",
    "link_distance",
    "transmit_power",
    "noise_power",
    "carrier_frequency",
    "wavelength",
    "pol_conversion_ratio",
    "pathloss_ref_distance",
    "pathloss_exponent",
    "shadowing_std",
    "stack_mode",
    "correlation_placement",
    "init_candidates",
    "max_epochs",
    "initial_lr",
    "decay",
    "monte_carlo_trials",
    "initial_alpha",
    "master_seed",
];

/// Split `"20 dBm"` into `(20.0, "dBm")` using the longest numeric prefix.
fn split_unit(value: &str) -> (f64, &str) {
    let value = value.trim();
    let cuts = std::iter::once(value.len()).chain(value.char_indices().rev().map(|(i, _)| i));
    for i in cuts.filter(|&i| i > 0) {
        let (head, tail) = value.split_at(i);
        if let Ok(x) = head.trim().parse::<f64>() {
            let tail = tail.trim();
            if tail.chars().all(|c| c.is_ascii_alphabetic()) {
                return (x, tail);
            }
        }
    }
    (f64::NAN, value)
}

fn number(value: &str) -> std::result::Result<f64, String> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("expected a number, found `{}`", value.trim()))
}

fn integer<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| format!("expected a non-negative integer, found `{}`", value.trim()))
}

fn power(value: &str) -> std::result::Result<f64, String> {
    let (x, unit) = split_unit(value);
    if x.is_nan() {
        return Err(format!("expected a power, found `{}`", value.trim()));
    }
    match unit {
        "" | "dBm" | "dbm" => Ok(dbm_to_watts(x)),
        "W" => Ok(x),
        "mW" => Ok(x * 1e-3),
        other => Err(format!("unknown power unit `{other}`")),
    }
}

fn length(value: &str) -> std::result::Result<Length, String> {
    let (x, unit) = split_unit(value);
    if x.is_nan() {
        return Err(format!("expected a length, found `{}`", value.trim()));
    }
    match unit {
        "" | "m" => Ok(Length::Meters(x)),
        "mm" => Ok(Length::Meters(x * 1e-3)),
        "cm" => Ok(Length::Meters(x * 1e-2)),
        "lambda" => Ok(Length::Wavelengths(x)),
        other => Err(format!("unknown length unit `{other}`")),
    }
}

fn meters(value: &str) -> std::result::Result<f64, String> {
    match length(value)? {
        Length::Meters(x) => Ok(x),
        Length::Wavelengths(_) => Err("this key does not accept wavelength units".into()),
    }
}

fn frequency(value: &str) -> std::result::Result<f64, String> {
    let (x, unit) = split_unit(value);
    if x.is_nan() {
        return Err(format!("expected a frequency, found `{}`", value.trim()));
    }
    match unit {
        "" | "Hz" => Ok(x),
        "kHz" => Ok(x * 1e3),
        "MHz" => Ok(x * 1e6),
        "GHz" => Ok(x * 1e9),
        other => Err(format!("unknown frequency unit `{other}`")),
    }
}

fn complex(value: &str) -> std::result::Result<C64, String> {
    let v = value.trim().replace('j', "i");
    C64::from_str(&v).map_err(|_| format!("expected a complex number, found `{}`", value.trim()))
}

impl RawConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn put<T>(slot: &mut Option<T>, v: T, key: &str) -> std::result::Result<(), String> {
            if slot.is_some() {
                return Err(format!("duplicate key `{key}`"));
            }
            *slot = Some(v);
            Ok(())
        }
        match key {
            "streams_per_pol" => put(&mut self.streams_per_pol, integer(value)?, key),
            "tx_layers" => put(&mut self.tx_layers, integer(value)?, key),
            "rx_layers" => put(&mut self.rx_layers, integer(value)?, key),
            "tx_units_per_layer" => put(&mut self.tx_units_per_layer, integer(value)?, key),
            "rx_units_per_layer" => put(&mut self.rx_units_per_layer, integer(value)?, key),
            "unit_spacing" => put(&mut self.unit_spacing, length(value)?, key),
            "tx_thickness" => put(&mut self.tx_thickness, meters(value)?, key),
            "rx_thickness" => put(&mut self.rx_thickness, meters(value)?, key),
            "link_distance" => put(&mut self.link_distance, meters(value)?, key),
            "transmit_power" => put(&mut self.transmit_power, power(value)?, key),
            "noise_power" => put(&mut self.noise_power, power(value)?, key),
            "carrier_frequency" => put(&mut self.carrier_frequency, frequency(value)?, key),
            "wavelength" => put(&mut self.wavelength, meters(value)?, key),
            "pol_conversion_ratio" => put(&mut self.pol_conversion_ratio, number(value)?, key),
            "pathloss_ref_distance" => put(&mut self.pathloss_ref_distance, meters(value)?, key),
            "pathloss_exponent" => put(&mut self.pathloss_exponent, number(value)?, key),
            "shadowing_std" => {
                let (x, unit) = split_unit(value);
                if x.is_nan() || !matches!(unit, "" | "dB") {
                    return Err(format!("expected a value in dB, found `{}`", value.trim()));
                }
                put(&mut self.shadowing_std, x, key)
            }
            "stack_mode" => put(&mut self.stack_mode, value.trim().parse()?, key),
            "correlation_placement" => {
                put(&mut self.correlation_placement, value.trim().parse()?, key)
            }
            "init_candidates" => put(&mut self.init_candidates, integer(value)?, key),
            "max_epochs" => put(&mut self.max_epochs, integer(value)?, key),
            "initial_lr" => put(&mut self.initial_lr, number(value)?, key),
            "decay" => put(&mut self.decay, number(value)?, key),
            "monte_carlo_trials" => put(&mut self.monte_carlo_trials, integer(value)?, key),
            "initial_alpha" => put(&mut self.initial_alpha, complex(value)?, key),
            "master_seed" => put(&mut self.master_seed, integer(value)?, key),
            other => Err(format!("unknown key `{other}`")),
        }
    }

    /// Inverse of [`resolve`]: derived quantities that equal their defaults
    /// are left implicit so later overrides (of the frequency, say) propagate.
    fn from_resolved(sys: &SystemConfig, algo: &AlgoConfig) -> Self {
        let derived_lambda = SPEED_OF_LIGHT / sys.carrier_frequency;
        let wavelength = (sys.wavelength != derived_lambda).then_some(sys.wavelength);
        let unit_spacing =
            (sys.unit_spacing != sys.wavelength / 2.0).then_some(Length::Meters(sys.unit_spacing));
        RawConfig {
            streams_per_pol: Some(sys.streams_per_pol),
            tx_layers: Some(sys.tx_layers),
            rx_layers: Some(sys.rx_layers),
            tx_units_per_layer: Some(sys.tx_units_per_layer),
            rx_units_per_layer: Some(sys.rx_units_per_layer),
            unit_spacing,
            tx_thickness: Some(sys.tx_thickness),
            rx_thickness: Some(sys.rx_thickness),
            link_distance: Some(sys.link_distance),
            transmit_power: Some(sys.transmit_power),
            noise_power: Some(sys.noise_power),
            carrier_frequency: Some(sys.carrier_frequency),
            wavelength,
            pol_conversion_ratio: Some(sys.pol_conversion_ratio),
            pathloss_ref_distance: Some(sys.pathloss_ref_distance),
            pathloss_exponent: Some(sys.pathloss_exponent),
            shadowing_std: Some(sys.shadowing_std),
            stack_mode: Some(sys.stack_mode),
            correlation_placement: Some(sys.correlation_placement),
            init_candidates: Some(algo.init_candidates),
            max_epochs: Some(algo.max_epochs),
            initial_lr: Some(algo.initial_lr),
            decay: Some(algo.decay),
            monte_carlo_trials: Some(algo.monte_carlo_trials),
            initial_alpha: Some(algo.initial_alpha),
            master_seed: Some(algo.master_seed),
        }
    }
}

fn resolve(raw: RawConfig) -> Result<(SystemConfig, AlgoConfig)> {
    let carrier_frequency = raw.carrier_frequency.unwrap_or(28e9);
    let wavelength = raw
        .wavelength
        .unwrap_or(SPEED_OF_LIGHT / carrier_frequency);
    let unit_spacing = match raw.unit_spacing.unwrap_or(Length::Wavelengths(0.5)) {
        Length::Meters(x) => x,
        Length::Wavelengths(0.5) => wavelength / 2.0,
        Length::Wavelengths(k) => k * wavelength,
    };
    let sys = SystemConfig {
        streams_per_pol: raw.streams_per_pol.unwrap_or(3),
        tx_layers: raw.tx_layers.unwrap_or(3),
        rx_layers: raw.rx_layers.unwrap_or(3),
        tx_units_per_layer: raw.tx_units_per_layer.unwrap_or(100),
        rx_units_per_layer: raw.rx_units_per_layer.unwrap_or(100),
        unit_spacing,
        tx_thickness: raw.tx_thickness.unwrap_or(0.05),
        rx_thickness: raw.rx_thickness.unwrap_or(0.05),
        link_distance: raw.link_distance.unwrap_or(250.0),
        transmit_power: raw.transmit_power.unwrap_or_else(|| dbm_to_watts(20.0)),
        noise_power: raw.noise_power.unwrap_or_else(|| dbm_to_watts(-110.0)),
        carrier_frequency,
        wavelength,
        pol_conversion_ratio: raw.pol_conversion_ratio.unwrap_or(0.2),
        pathloss_ref_distance: raw.pathloss_ref_distance.unwrap_or(1.0),
        pathloss_exponent: raw.pathloss_exponent.unwrap_or(3.5),
        shadowing_std: raw.shadowing_std.unwrap_or(9.0),
        stack_mode: raw.stack_mode.unwrap_or(StackMode::DualPolarized),
        correlation_placement: raw
            .correlation_placement
            .unwrap_or(CorrelationPlacement::BlockDiagonal),
    };
    let algo = AlgoConfig {
        init_candidates: raw.init_candidates.unwrap_or(100),
        max_epochs: raw.max_epochs.unwrap_or(20),
        initial_lr: raw.initial_lr.unwrap_or(0.1),
        decay: raw.decay.unwrap_or(0.5),
        monte_carlo_trials: raw.monte_carlo_trials.unwrap_or(100),
        initial_alpha: raw.initial_alpha.unwrap_or(C64::new(1.0, 0.0)),
        master_seed: raw.master_seed.unwrap_or(0),
    };
    validate(sys, algo)
}

/// Parse a configuration document and validate the result.
pub fn parse_config(text: &str) -> Result<(SystemConfig, AlgoConfig)> {
    let mut raw = RawConfig::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        raw.set(key.trim(), value)
            .map_err(|message| Error::Parse { line: idx + 1, message })?;
    }
    resolve(raw)
}

/// Render a configuration so that [`parse_config`] reproduces it exactly.
pub fn render_config(sys: &SystemConfig, algo: &AlgoConfig) -> String {
    let raw = RawConfig::from_resolved(sys, algo);
    let mut out = String::new();
    macro_rules! line {
        ($key:literal, $val:expr) => {
            if let Some(v) = $val {
                let _ = writeln!(out, "{} = {}", $key, v);
            }
        };
    }
    line!("streams_per_pol", raw.streams_per_pol);
    line!("tx_layers", raw.tx_layers);
    line!("rx_layers", raw.rx_layers);
    line!("tx_units_per_layer", raw.tx_units_per_layer);
    line!("rx_units_per_layer", raw.rx_units_per_layer);
    line!(
        "unit_spacing",
        raw.unit_spacing.map(|l| match l {
            Length::Meters(x) => format!("{x} m"),
            Length::Wavelengths(k) => format!("{k} lambda"),
        })
    );
    line!("tx_thickness", raw.tx_thickness.map(|x| format!("{x} m")));
    line!("rx_thickness", raw.rx_thickness.map(|x| format!("{x} m")));
    line!("link_distance", raw.link_distance.map(|x| format!("{x} m")));
    line!("transmit_power", raw.transmit_power.map(|x| format!("{x} W")));
    line!("noise_power", raw.noise_power.map(|x| format!("{x} W")));
    line!("carrier_frequency", raw.carrier_frequency.map(|x| format!("{x} Hz")));
    line!("wavelength", raw.wavelength.map(|x| format!("{x} m")));
    line!("pol_conversion_ratio", raw.pol_conversion_ratio);
    line!("pathloss_ref_distance", raw.pathloss_ref_distance.map(|x| format!("{x} m")));
    line!("pathloss_exponent", raw.pathloss_exponent);
    line!("shadowing_std", raw.shadowing_std.map(|x| format!("{x} dB")));
    line!("stack_mode", raw.stack_mode);
    line!("correlation_placement", raw.correlation_placement);
    line!("init_candidates", raw.init_candidates);
    line!("max_epochs", raw.max_epochs);
    line!("initial_lr", raw.initial_lr);
    line!("decay", raw.decay);
    line!("monte_carlo_trials", raw.monte_carlo_trials);
    line!("initial_alpha", raw.initial_alpha);
    line!("master_seed", raw.master_seed);
    out
}

/// Replace one key of an existing configuration, re-deriving dependent
/// quantities and re-validating.
pub fn with_override(
    sys: &SystemConfig,
    algo: &AlgoConfig,
    key: &str,
    value: &str,
) -> Result<(SystemConfig, AlgoConfig)> {
    let mut raw = RawConfig::from_resolved(sys, algo);
    // Clear the slot first so `set` does not report a duplicate.
    let mut blank = RawConfig::default();
    blank
        .set(key, value)
        .map_err(|message| Error::Parse { line: 0, message })?;
    macro_rules! take {
        ($($f:ident),*) => {
            $(if blank.$f.is_some() { raw.$f = blank.$f; })*
        };
    }
    take!(
        streams_per_pol, tx_layers, rx_layers, tx_units_per_layer, rx_units_per_layer,
        unit_spacing, tx_thickness, rx_thickness, link_distance, transmit_power, noise_power,
        carrier_frequency, wavelength, pol_conversion_ratio, pathloss_ref_distance,
        pathloss_exponent, shadowing_std, stack_mode, correlation_placement, init_candidates,
        max_epochs, initial_lr, decay, monte_carlo_trials, initial_alpha, master_seed
    );
    resolve(raw)
}

fn is_perfect_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

/// Check every invariant and return the inputs unchanged, or an error listing
/// all violations.
pub fn validate(sys: SystemConfig, algo: AlgoConfig) -> Result<(SystemConfig, AlgoConfig)> {
    let mut errs = Vec::new();
    let s = sys.streams_per_pol;
    if s == 0 {
        errs.push("streams_per_pol must be positive".to_string());
    }
    if sys.tx_layers == 0 {
        errs.push("tx_layers must be positive".into());
    }
    if sys.rx_layers == 0 {
        errs.push("rx_layers must be positive".into());
    }
    for (name, count) in [
        ("tx_units_per_layer", sys.tx_units_per_layer),
        ("rx_units_per_layer", sys.rx_units_per_layer),
    ] {
        if count == 0 || !is_perfect_square(count) {
            errs.push(format!("{name}: units_per_layer must be a perfect square"));
        }
    }
    if sys.tx_units_per_layer < s {
        errs.push("M ≥ S violated".into());
    }
    if sys.rx_units_per_layer < s {
        errs.push("N ≥ S violated".into());
    }
    if !(0.0..=1.0).contains(&sys.pol_conversion_ratio) {
        errs.push("pol_conversion_ratio out of [0,1]".into());
    }
    for (name, v) in [
        ("unit_spacing", sys.unit_spacing),
        ("tx_thickness", sys.tx_thickness),
        ("rx_thickness", sys.rx_thickness),
        ("link_distance", sys.link_distance),
        ("transmit_power", sys.transmit_power),
        ("noise_power", sys.noise_power),
        ("carrier_frequency", sys.carrier_frequency),
        ("wavelength", sys.wavelength),
        ("pathloss_ref_distance", sys.pathloss_ref_distance),
        ("pathloss_exponent", sys.pathloss_exponent),
    ] {
        if !(v.is_finite() && v > 0.0) {
            errs.push(format!("{name} must be positive and finite"));
        }
    }
    if !(sys.shadowing_std.is_finite() && sys.shadowing_std >= 0.0) {
        errs.push("shadowing_std must be non-negative".into());
    }
    if sys.link_distance < sys.pathloss_ref_distance {
        errs.push("link_distance below pathloss_ref_distance".into());
    }
    if algo.init_candidates == 0 {
        errs.push("init_candidates must be at least 1".into());
    }
    if algo.max_epochs == 0 {
        errs.push("max_epochs must be at least 1".into());
    }
    if !(algo.initial_lr.is_finite() && algo.initial_lr > 0.0) {
        errs.push("initial_lr must be positive".into());
    }
    if !(algo.decay > 0.0 && algo.decay < 1.0) {
        errs.push("decay out of (0,1)".into());
    }
    if algo.monte_carlo_trials == 0 {
        errs.push("monte_carlo_trials must be at least 1".into());
    }
    if !(algo.initial_alpha.re.is_finite() && algo.initial_alpha.im.is_finite()) {
        errs.push("initial_alpha must be finite".into());
    }
    if errs.is_empty() {
        Ok((sys, algo))
    } else {
        Err(Error::Validation(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE_DOC: &str = "\
# reference parameter set
streams_per_pol = 3
tx_layers = 3
rx_layers = 3
tx_units_per_layer = 100
rx_units_per_layer = 100
unit_spacing = 0.5 lambda
tx_thickness = 0.05
rx_thickness = 0.05 m
link_distance = 250
transmit_power = 20 dBm
noise_power = -110 dBm
carrier_frequency = 28 GHz
pol_conversion_ratio = 0.2
pathloss_ref_distance = 1
pathloss_exponent = 3.5
shadowing_std = 9 dB
init_candidates = 100
max_epochs = 20
initial_lr = 0.1
decay = 0.5
monte_carlo_trials = 100
initial_alpha = 1
";

    #[test]
    fn reference_document() {
        let (sys, algo) = parse_config(REFERENCE_DOC).unwrap();
        assert_eq!(sys.streams_per_pol, 3);
        assert_eq!(sys.total_streams(), 6);
        assert_eq!(sys.tx_layer_spacing(), 0.05 / 3.0);
        assert_eq!(sys.rx_layer_spacing(), 0.05 / 3.0);
        assert_eq!(sys.transmit_power, 0.1);
        assert_eq!(sys.noise_power, 1e-14);
        assert_eq!(sys.wavelength, SPEED_OF_LIGHT / 28e9);
        assert_eq!(sys.unit_spacing, sys.wavelength / 2.0);
        assert_eq!(algo.init_candidates, 100);
        assert_eq!(algo.max_epochs, 20);
        assert_eq!(algo.decay, 0.5);
        assert_eq!(algo.initial_alpha, C64::new(1.0, 0.0));
    }

    #[test]
    fn empty_document_is_defaults() {
        let empty = parse_config("").unwrap();
        assert_eq!(empty, parse_config(REFERENCE_DOC).unwrap());
        assert_eq!(empty.0, SystemConfig::default());
        assert_eq!(empty.1, AlgoConfig::default());
    }

    #[test]
    fn dbm_conversion() {
        assert_eq!(dbm_to_watts(20.0), 0.1);
        assert_eq!(dbm_to_watts(30.0), 1.0);
        assert_eq!(dbm_to_watts(-110.0), 1e-14);
        assert!((dbm_to_watts(12.5) - 10f64.powf(-1.75)).abs() < 1e-18);
        assert!((watts_to_dbm(0.1) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_out_of_range() {
        let err = parse_config("pol_conversion_ratio = 1.3").unwrap_err();
        assert!(err.to_string().contains("pol_conversion_ratio out of [0,1]"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn validation_collects_every_violation() {
        let sys = SystemConfig { tx_units_per_layer: 2, rx_units_per_layer: 2, ..Default::default() };
        let Err(Error::Validation(errs)) = validate(sys, AlgoConfig::default()) else {
            panic!("expected validation error");
        };
        assert!(errs.iter().any(|e| e.contains("units_per_layer must be a perfect square")));
        assert!(errs.iter().any(|e| e.contains("M ≥ S violated")));
        assert!(errs.iter().any(|e| e.contains("N ≥ S violated")));
    }

    #[test]
    fn n_below_s() {
        let sys = SystemConfig { rx_units_per_layer: 1, ..Default::default() };
        let err = validate(sys, AlgoConfig::default()).unwrap_err().to_string();
        assert!(err.contains("N ≥ S violated"), "{err}");
    }

    #[test]
    fn valid_reference_passes_unchanged() {
        let sys = SystemConfig::default();
        let algo = AlgoConfig::default();
        let (s2, a2) = validate(sys.clone(), algo.clone()).unwrap();
        assert_eq!((s2, a2), (sys, algo));
    }

    #[test]
    fn decay_bounds() {
        for bad in ["decay = 1", "decay = 0", "decay = 1.5"] {
            assert!(parse_config(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_config("tx_layers = 3\n\nbogus_key = 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_config("tx_layers 3").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_config("tx_layers = 3\ntx_layers = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = parse_config("tx_layers = three").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn explicit_wavelength_override() {
        let (sys, _) = parse_config("wavelength = 10.7 mm").unwrap();
        assert_eq!(sys.wavelength, 10.7e-3);
        assert_eq!(sys.unit_spacing, 10.7e-3 / 2.0);
    }

    #[test]
    fn units_and_modes() {
        let (sys, algo) = parse_config(
            "transmit_power = 0.25 W\nnoise_power = 1 mW\nstack_mode = tied_sim_baseline\n\
             correlation_placement = literal_eq8\ninitial_alpha = 0.5-2j\nunit_spacing = 4 mm",
        )
        .unwrap();
        assert_eq!(sys.transmit_power, 0.25);
        assert_eq!(sys.noise_power, 1e-3);
        assert_eq!(sys.stack_mode, StackMode::TiedSimBaseline);
        assert_eq!(sys.correlation_placement, CorrelationPlacement::LiteralEq8);
        assert_eq!(algo.initial_alpha, C64::new(0.5, -2.0));
        assert_eq!(sys.unit_spacing, 4e-3);
    }

    #[test]
    fn override_rederives_wavelength() {
        let (sys, algo) = (SystemConfig::default(), AlgoConfig::default());
        let (s2, _) = with_override(&sys, &algo, "carrier_frequency", "14 GHz").unwrap();
        assert_eq!(s2.wavelength, SPEED_OF_LIGHT / 14e9);
        assert_eq!(s2.unit_spacing, s2.wavelength / 2.0);
        let (s3, _) = with_override(&sys, &algo, "transmit_power", "30").unwrap();
        assert_eq!(s3.transmit_power, 1.0);
        assert!(with_override(&sys, &algo, "decay", "2").is_err());
    }

    #[test]
    fn render_parse_round_trip() {
        let sys = SystemConfig {
            transmit_power: dbm_to_watts(17.3),
            wavelength: 10.7e-3,
            unit_spacing: 5.1e-3,
            pol_conversion_ratio: 0.37,
            stack_mode: StackMode::TiedSimBaseline,
            ..Default::default()
        };
        let algo = AlgoConfig {
            initial_alpha: C64::new(-0.3, 1e-7),
            master_seed: u64::MAX,
            ..Default::default()
        };
        let text = render_config(&sys, &algo);
        assert_eq!(parse_config(&text).unwrap(), (sys, algo));
    }
}
