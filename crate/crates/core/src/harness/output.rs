//! On-disk formats: CSV tables with a provenance line, raw grid dumps and
//! rendered PNGs.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Magic bytes opening a raw grid dump.
pub const GRID_MAGIC: [u8; 4] = *b"RXG1";

/// Marker written in place of a value that does not exist.
pub const UNDEFINED: &str = "undefined";

/// Write `grid` as a 16-byte header (magic, channels, height, width as
/// little-endian `u32`) followed by little-endian `f32` values.
pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let dims = [grid.channels(), grid.height(), grid.width()];
    let mut bytes = Vec::with_capacity(16 + 4 * grid.len());
    bytes.extend_from_slice(&GRID_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..4] != GRID_MAGIC {
        return Err(Error::Format(format!("{} is not a grid dump", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (word(0), word(1), word(2));
    let body = &bytes[16..];
    if body.len() != 4 * c * h * w {
        return Err(Error::Format(format!(
            "{}: header says {c}x{h}x{w} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Grid::new(c, h, w, data)
}

/// Display range mapped onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self { min: -3.0, max: 3.0 }
    }
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        if !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Parameter(format!("render window [{}, {}] is empty", self.min, self.max)));
        }
        Ok(())
    }

    /// Clip to the window, then quantize.
    pub fn encode(&self, v: f64) -> u8 {
        let u = ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }

    pub fn decode(&self, p: u8) -> f64 {
        self.min + (self.max - self.min) * p as f64 / 255.0
    }
}

/// Render a one- or three-channel grid to an 8-bit PNG.
pub fn render_png(grid: &Grid, path: &Path, window: Window) -> Result<()> {
    window.validate()?;
    let (c, h, w) = grid.shape();
    let (wu, hu) = (w as u32, h as u32);
    let result = match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(wu, hu, |x, y| {
            Luma([window.encode(grid.get(0, y as usize, x as usize))])
        })
        .save_with_format(path, image::ImageFormat::Png),
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(wu, hu, |x, y| {
            Rgb(std::array::from_fn(|ch| window.encode(grid.get(ch, y as usize, x as usize))))
        })
        .save_with_format(path, image::ImageFormat::Png),
        _ => return Err(Error::Format(format!("only 1- or 3-channel grids can be rendered, got {c}"))),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

/// Read a rendered PNG back into grid values through `window`.
pub fn decode_png(path: &Path, window: Window) -> Result<Grid> {
    window.validate()?;
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            Ok(Grid::from_fn((1, h, w), |_, y, x| window.decode(buf.get_pixel(x as u32, y as u32)[0])))
        }
        image::DynamicImage::ImageRgb8(buf) => {
            Ok(Grid::from_fn((3, h, w), |c, y, x| window.decode(buf.get_pixel(x as u32, y as u32)[c])))
        }
        _ => Err(Error::Format(format!("{}: unsupported pixel format", path.display()))),
    }
}

/// Format a metric value, writing [`UNDEFINED`] for missing or non-finite ones.
pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => UNDEFINED.to_string(),
    }
}

/// A CSV table preceded by a `# resx <version> spec_sha256=<hex>` line.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path, spec_hash: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# resx {} spec_sha256={spec_hash}", env!("CARGO_PKG_VERSION"))
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read a table written by [`CsvTable::write`], skipping the comment line.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

/// Create `dir` and check that files can be written there.
pub fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".resx-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
    Ok(dir.to_path_buf())
}
