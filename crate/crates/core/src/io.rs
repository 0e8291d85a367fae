//! File formats and run configuration.
//!
//! Three little-endian binary formats, each with a four-byte magic and a
//! `u32` version (currently 1):
//!
//! Grid (`LNSG`):
//!
//! ```text
//! offset  size   field
//! 0       4      magic "LNSG"
//! 4       4      version u32
//! 8       12     dims, 3 x u32
//! 20      8      spacing f64
//! 28      24     origin, 3 x f64
//! 52      4      components u32 (1 scalar, D vector)
//! 56      8*n    payload f64, x-fastest, node-major components
//! ```
//!
//! Particles (`LNSP`):
//!
//! ```text
//! 0       4      magic "LNSP"
//! 4       4      version u32
//! 8       4      count u32
//! 12      4      dim u32 (2 or 3)
//! 16      4      channel count u32
//! ...            per channel: name_len u32, name bytes, offset u64
//! ...            positions, count*dim f64
//! ...            channel payloads (count f64 each) at the recorded offsets
//! ```
//!
//! Filter bank (`LNSB`):
//!
//! ```text
//! 0       4      magic "LNSB"
//! 4       4      version u32
//! 8       4      layer count u32
//! ...            per layer: c_in, c_out, k, pool, style (u32 each), style weight f64
//! ...            per layer: weights (out, in, row, col order) then biases, f64
//! ```
//!
//! Raster images are 8-bit grayscale or RGB PNG mapped to reals in [0, 1];
//! run configurations are JSON documents rejecting unknown keys.

use std::fs;
use std::io::{Cursor, Read, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::adam::AdamParams;
use crate::bank::{ConvLayer, FilterBank, StyleLayer};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarGrid, VectorGrid};
use crate::image::Image;
use crate::particles::ParticleSet;
use crate::render::{Axis, RenderConfig, RenderMode, ViewConfig};
use crate::resim::MultiScaleParams;
use crate::stylize::{Attribute, AttributeSelection, StylizeConfig, TemporalConfig};

pub const GRID_MAGIC: &[u8; 4] = b"LNSG";
pub const PARTICLE_MAGIC: &[u8; 4] = b"LNSP";
pub const BANK_MAGIC: &[u8; 4] = b"LNSB";
pub const FORMAT_VERSION: u32 = 1;

/// Seed of the built-in filter bank when a run config names no bank file.
pub const DEFAULT_BANK_SEED: u64 = 0x5EED_BA2C;

fn truncated(what: &str) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}

fn check_magic(cursor: &mut Cursor<&[u8]>, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != expected {
        return Err(Error::Format(format!(
            "bad magic {:?}: expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

fn check_version(cursor: &mut Cursor<&[u8]>) -> Result<()> {
    let version = cursor.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { expected: FORMAT_VERSION, found: version });
    }
    Ok(())
}

fn read_f64s(cursor: &mut Cursor<&[u8]>, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut values = vec![0.0; count];
    cursor
        .read_f64_into::<LittleEndian>(&mut values)
        .map_err(truncated(what))?;
    Ok(values)
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

fn write_grid_header(buf: &mut Vec<u8>, spec: &GridSpec, components: u32) {
    buf.extend_from_slice(GRID_MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    for d in spec.dims {
        buf.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    buf.write_f64::<LittleEndian>(spec.spacing).unwrap();
    for o in spec.origin {
        buf.write_f64::<LittleEndian>(o).unwrap();
    }
    buf.write_u32::<LittleEndian>(components).unwrap();
}

fn read_grid_header(cursor: &mut Cursor<&[u8]>) -> Result<(GridSpec, u32)> {
    check_magic(cursor, GRID_MAGIC)?;
    check_version(cursor)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cursor.read_u32::<LittleEndian>().map_err(truncated("dims"))? as usize;
    }
    let spacing = cursor.read_f64::<LittleEndian>().map_err(truncated("spacing"))?;
    let mut origin = [0.0; 3];
    for o in &mut origin {
        *o = cursor.read_f64::<LittleEndian>().map_err(truncated("origin"))?;
    }
    let components = cursor.read_u32::<LittleEndian>().map_err(truncated("components"))?;
    Ok((GridSpec::new(dims, spacing, origin)?, components))
}

pub fn write_grid(path: impl AsRef<Path>, grid: &ScalarGrid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(56 + grid.values.len() * 8);
    write_grid_header(&mut buf, &grid.spec, 1);
    for &v in &grid.values {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::from(e).with_path(path))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    let path = path.as_ref();
    (|| {
        let data = fs::read(path)?;
        let mut cursor = Cursor::new(data.as_slice());
        let (spec, components) = read_grid_header(&mut cursor)?;
        if components != 1 {
            return Err(Error::Format(format!(
                "expected a scalar grid, file has {components} components"
            )));
        }
        let values = read_f64s(&mut cursor, spec.len(), "grid payload")?;
        ScalarGrid::new(spec, values)
    })()
    .map_err(|e| e.with_path(path))
}

pub fn write_vector_grid(path: impl AsRef<Path>, grid: &VectorGrid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(56 + grid.values.len() * 8);
    write_grid_header(&mut buf, &grid.spec, grid.components as u32);
    for &v in &grid.values {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::from(e).with_path(path))
}

pub fn read_vector_grid(path: impl AsRef<Path>) -> Result<VectorGrid> {
    let path = path.as_ref();
    (|| {
        let data = fs::read(path)?;
        let mut cursor = Cursor::new(data.as_slice());
        let (spec, components) = read_grid_header(&mut cursor)?;
        if components as usize != spec.dim() {
            return Err(Error::Format(format!(
                "vector grid has {components} components for a {}D grid",
                spec.dim()
            )));
        }
        let values = read_f64s(&mut cursor, spec.len() * components as usize, "grid payload")?;
        VectorGrid::new(spec, components as usize, values)
    })()
    .map_err(|e| e.with_path(path))
}

// ---------------------------------------------------------------------------
// Particles
// ---------------------------------------------------------------------------

pub fn write_particles(path: impl AsRef<Path>, set: &ParticleSet) -> Result<()> {
    let path = path.as_ref();
    let names: Vec<&str> = set.channel_names().collect();
    // Directory size: fixed header + per-entry (4 + name + 8).
    let dir_len: usize = names.iter().map(|n| 12 + n.len()).sum();
    let positions_at = 20 + dir_len;
    let positions_len = set.len() * set.dim() * 8;

    let mut buf = Vec::new();
    buf.extend_from_slice(PARTICLE_MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(set.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(set.dim() as u32).unwrap();
    buf.write_u32::<LittleEndian>(names.len() as u32).unwrap();
    let mut offset = positions_at + positions_len;
    for name in &names {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u64::<LittleEndian>(offset as u64).unwrap();
        offset += set.len() * 8;
    }
    debug_assert_eq!(buf.len(), positions_at);
    for &v in set.positions() {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    for name in &names {
        for &v in set.channel(name)? {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    fs::write(path, buf).map_err(|e| Error::from(e).with_path(path))
}

pub fn read_particles(path: impl AsRef<Path>) -> Result<ParticleSet> {
    let path = path.as_ref();
    (|| {
        let data = fs::read(path)?;
        let mut cursor = Cursor::new(data.as_slice());
        check_magic(&mut cursor, PARTICLE_MAGIC)?;
        check_version(&mut cursor)?;
        let count = cursor.read_u32::<LittleEndian>().map_err(truncated("count"))? as usize;
        let dim = cursor.read_u32::<LittleEndian>().map_err(truncated("dim"))? as usize;
        let channel_count =
            cursor.read_u32::<LittleEndian>().map_err(truncated("channel count"))? as usize;
        let mut directory = Vec::with_capacity(channel_count);
        for _ in 0..channel_count {
            let name_len =
                cursor.read_u32::<LittleEndian>().map_err(truncated("channel name"))? as usize;
            let mut name = vec![0u8; name_len];
            cursor.read_exact(&mut name).map_err(truncated("channel name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("channel name is not valid UTF-8".into()))?;
            let offset =
                cursor.read_u64::<LittleEndian>().map_err(truncated("channel offset"))? as usize;
            directory.push((name, offset));
        }
        let positions = read_f64s(&mut cursor, count * dim, "positions")?;
        let mut set = ParticleSet::new(dim, positions)?;
        for (name, offset) in directory {
            let end = offset
                .checked_add(count * 8)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| {
                    Error::Truncated(format!(
                        "channel {name:?}: {count} values at offset {offset}"
                    ))
                })?;
            let mut chan = Cursor::new(&data[offset..end]);
            let values = read_f64s(&mut chan, count, "channel payload")?;
            set.set_channel(name, values)?;
        }
        Ok(set)
    })()
    .map_err(|e| e.with_path(path))
}

// ---------------------------------------------------------------------------
// Filter banks
// ---------------------------------------------------------------------------

pub fn write_bank(path: impl AsRef<Path>, bank: &FilterBank) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(bank.layers.len() as u32).unwrap();
    for (l, layer) in bank.layers.iter().enumerate() {
        let style = bank.style_layers.iter().find(|sl| sl.layer == l);
        buf.write_u32::<LittleEndian>(layer.in_channels as u32).unwrap();
        buf.write_u32::<LittleEndian>(layer.out_channels as u32).unwrap();
        buf.write_u32::<LittleEndian>(layer.kernel_size as u32).unwrap();
        buf.write_u32::<LittleEndian>(layer.pool as u32).unwrap();
        buf.write_u32::<LittleEndian>(style.is_some() as u32).unwrap();
        buf.write_f64::<LittleEndian>(style.map_or(0.0, |sl| sl.weight)).unwrap();
    }
    for layer in &bank.layers {
        for &w in &layer.weights {
            buf.write_f64::<LittleEndian>(w).unwrap();
        }
        for &b in &layer.bias {
            buf.write_f64::<LittleEndian>(b).unwrap();
        }
    }
    fs::write(&path, buf).map_err(|e| Error::from(e).with_path(path.as_ref()))
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    (|| {
        let data = fs::read(path)?;
        let mut cursor = Cursor::new(data.as_slice());
        check_magic(&mut cursor, BANK_MAGIC)?;
        check_version(&mut cursor)?;
        let layer_count =
            cursor.read_u32::<LittleEndian>().map_err(truncated("layer count"))? as usize;
        let mut table = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let c_in = cursor.read_u32::<LittleEndian>().map_err(truncated("layer table"))? as usize;
            let c_out = cursor.read_u32::<LittleEndian>().map_err(truncated("layer table"))? as usize;
            let k = cursor.read_u32::<LittleEndian>().map_err(truncated("layer table"))? as usize;
            let pool = cursor.read_u32::<LittleEndian>().map_err(truncated("layer table"))? != 0;
            let style = cursor.read_u32::<LittleEndian>().map_err(truncated("layer table"))? != 0;
            let weight = cursor.read_f64::<LittleEndian>().map_err(truncated("layer table"))?;
            table.push((c_in, c_out, k, pool, style, weight));
        }
        let mut layers = Vec::with_capacity(layer_count);
        let mut style_layers = Vec::new();
        for (l, (c_in, c_out, k, pool, style, weight)) in table.into_iter().enumerate() {
            let weights = read_f64s(&mut cursor, c_out * c_in * k * k, "layer weights")?;
            let bias = read_f64s(&mut cursor, c_out, "layer biases")?;
            layers.push(ConvLayer {
                in_channels: c_in,
                out_channels: c_out,
                kernel_size: k,
                weights,
                bias,
                pool,
            });
            if style {
                style_layers.push(StyleLayer { layer: l, weight });
            }
        }
        FilterBank::new(layers, style_layers)
    })()
    .map_err(|e| e.with_path(path))
}

// ---------------------------------------------------------------------------
// Images (PNG)
// ---------------------------------------------------------------------------

/// Decode an 8-bit grayscale or RGB PNG to reals in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    (|| {
        let file = fs::File::open(path)?;
        let decoder = png::Decoder::new(file);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("unsupported png bit depth {:?}", info.bit_depth)));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::Format(format!("unsupported png color type {other:?}"))),
        };
        let pixels = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(info.width as usize, info.height as usize, channels, pixels)
    })()
    .map_err(|e| e.with_path(path))
}

/// Encode as 8-bit grayscale or RGB PNG, clamping values to [0, 1].
pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    (|| {
        let file = fs::File::create(path)?;
        let mut encoder = png::Encoder::new(file, image.width as u32, image.height as u32);
        encoder.set_color(if image.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        let bytes: Vec<u8> = image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        Ok(())
    })()
    .map_err(|e: Error| e.with_path(path))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpecConfig {
    pub dims: [usize; 3],
    pub spacing: f64,
    #[serde(default)]
    pub origin: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_emission")]
    pub emission: f64,
}

fn default_mode() -> String {
    "smoke".into()
}
fn default_gamma() -> f64 {
    1.0
}
fn default_emission() -> f64 {
    1.0
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection { mode: default_mode(), gamma: default_gamma(), emission: default_emission() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSection {
    pub attribute: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSection {
    #[serde(default)]
    pub density: f64,
    #[serde(default)]
    pub position: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalSection {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_stride")]
    pub keyframe_stride: usize,
}

fn default_sigma() -> f64 {
    1.5
}
fn default_radius() -> usize {
    3
}
fn default_stride() -> usize {
    1
}

impl Default for TemporalSection {
    fn default() -> Self {
        TemporalSection {
            sigma: default_sigma(),
            radius: default_radius(),
            keyframe_stride: default_stride(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiScaleSection {
    #[serde(default = "default_coarse_radius")]
    pub coarse_radius: f64,
    #[serde(default = "default_subdivisions")]
    pub subdivisions: usize,
}

fn default_coarse_radius() -> f64 {
    2.0
}
fn default_subdivisions() -> usize {
    3
}

impl Default for MultiScaleSection {
    fn default() -> Self {
        MultiScaleSection {
            coarse_radius: default_coarse_radius(),
            subdivisions: default_subdivisions(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSection {
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub redistribute_steps: usize,
    #[serde(default = "default_step_size")]
    pub redistribute_step_size: f64,
}

fn default_dt() -> f64 {
    1.0
}
fn default_step_size() -> f64 {
    1e-3
}

impl Default for ResampleSection {
    fn default() -> Self {
        ResampleSection {
            threshold: 0.0,
            dt: default_dt(),
            redistribute_steps: 0,
            redistribute_step_size: default_step_size(),
        }
    }
}

/// Input file patterns; `{frame}` (or `{frame:04}` for zero padding)
/// expands to the frame number.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub density: Option<String>,
    pub velocity: Option<String>,
    pub particles: Option<String>,
    pub reference: Option<String>,
}

/// JSON run configuration driving the CLI pipelines. Unknown keys are
/// rejected to catch typos early.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Option<GridSpecConfig>,
    pub style_image: Option<String>,
    pub bank: Option<String>,
    pub bank_seed: Option<u64>,
    #[serde(default)]
    pub views: Vec<String>,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub attributes: Vec<AttributeSection>,
    #[serde(default = "default_splat_support")]
    pub splat_support: f64,
    #[serde(default)]
    pub regularizers: RegularizerSection,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub temporal: TemporalSection,
    #[serde(default)]
    pub multiscale: MultiScaleSection,
    #[serde(default)]
    pub resample: ResampleSection,
    #[serde(default)]
    pub inputs: InputsSection,
}

fn default_splat_support() -> f64 {
    1.5
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for section in &self.attributes {
            parse_attribute(&section.attribute)?;
            if !(section.weight.is_finite() && section.weight >= 0.0) {
                return Err(Error::Config(format!(
                    "attribute {:?}: weight must be >= 0",
                    section.attribute
                )));
            }
        }
        for v in &self.views {
            Axis::parse(v).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.regularizers.density >= 0.0 && self.regularizers.position >= 0.0) {
            return Err(Error::Config("regularizer weights must be >= 0".into()));
        }
        parse_mode(&self.render.mode)?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let section = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Config("missing \"grid\" section".into()))?;
        GridSpec::new(section.dims, section.spacing, section.origin)
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn render_config(&self) -> Result<RenderConfig> {
        let config = RenderConfig {
            mode: parse_mode(&self.render.mode)?,
            gamma: self.render.gamma,
            emission: self.render.emission,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn view_configs(&self) -> Result<Vec<ViewConfig>> {
        if self.views.is_empty() {
            return Ok(vec![ViewConfig { axis: Axis::ZPos }]);
        }
        self.views
            .iter()
            .map(|v| Ok(ViewConfig { axis: Axis::parse(v).map_err(|e| Error::Config(e.to_string()))? }))
            .collect()
    }

    pub fn stylize_config(&self) -> Result<StylizeConfig> {
        let attributes = if self.attributes.is_empty() {
            vec![AttributeSelection { attribute: Attribute::Density, weight: 1.0 }]
        } else {
            self.attributes
                .iter()
                .map(|a| {
                    Ok(AttributeSelection { attribute: parse_attribute(&a.attribute)?, weight: a.weight })
                })
                .collect::<Result<_>>()?
        };
        let config = StylizeConfig {
            views: self.view_configs()?,
            attributes,
            render: self.render_config()?,
            splat_support: self.splat_support,
            reg_density_weight: self.regularizers.density,
            reg_position_weight: self.regularizers.position,
            iterations: self.iterations,
            adam: AdamParams {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn temporal_config(&self) -> Result<TemporalConfig> {
        let config = TemporalConfig {
            sigma: self.temporal.sigma,
            radius: self.temporal.radius,
            keyframe_stride: self.temporal.keyframe_stride,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn multiscale_params(&self) -> MultiScaleParams {
        MultiScaleParams {
            coarse_radius: self.multiscale.coarse_radius,
            subdivisions: self.multiscale.subdivisions,
        }
    }

    /// Load the configured bank file, or build the default bank.
    pub fn load_bank(&self) -> Result<FilterBank> {
        match &self.bank {
            Some(path) => read_bank(path),
            None => Ok(FilterBank::default_bank(self.bank_seed.unwrap_or(DEFAULT_BANK_SEED))),
        }
    }
}

fn parse_mode(s: &str) -> Result<RenderMode> {
    match s {
        "smoke" => Ok(RenderMode::Smoke),
        "liquid" => Ok(RenderMode::Liquid),
        other => Err(Error::Config(format!("unknown render mode {other:?}"))),
    }
}

fn parse_attribute(s: &str) -> Result<Attribute> {
    match s {
        "density" => Ok(Attribute::Density),
        "color" => Ok(Attribute::Color),
        "position" => Ok(Attribute::Position),
        other => Err(Error::Config(format!("unknown attribute {other:?}"))),
    }
}

/// Expand `{frame}` / `{frame:0N}` placeholders in a file pattern.
pub fn expand_pattern(pattern: &str, frame: usize) -> Result<String> {
    if let Some(start) = pattern.find("{frame") {
        let rest = &pattern[start..];
        let end = rest
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed {{frame}} in pattern {pattern:?}")))?;
        let spec = &rest[6..end];
        let formatted = if spec.is_empty() {
            frame.to_string()
        } else if let Some(width) = spec.strip_prefix(":0").and_then(|w| w.parse::<usize>().ok()) {
            format!("{frame:0width$}")
        } else {
            return Err(Error::Config(format!("bad frame placeholder {{frame{spec}}}")));
        };
        Ok(format!("{}{}{}", &pattern[..start], formatted, &pattern[start + end + 1..]))
    } else {
        Ok(pattern.to_string())
    }
}

/// Write a loss trace as CSV (`iteration,style_loss,reg_density,reg_position,total`).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[crate::stylize::LossTrace]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "iteration,style_loss,reg_density,reg_position,total")?;
    for row in trace {
        writeln!(
            file,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            row.iteration, row.style, row.reg_density, row.reg_position, row.total
        )?;
    }
    Ok(())
}
