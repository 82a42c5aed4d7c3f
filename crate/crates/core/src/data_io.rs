//! Netpbm image I/O, dataset manifests and the synthetic shape dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::check_input_size;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::SaliencySample;

/// A decoded 8-bit Netpbm raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Decode {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.fail(format!("{what} out of range")))
    }
}

/// Decodes a binary P5 (gray) or P6 (RGB) file with maxval 255.
pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut h = Header {
        bytes,
        pos: 0,
        path,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(h.fail("expected P5 or P6 magic")),
    };
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.fail("zero image dimension"));
    }
    if maxval != 255 {
        return Err(h.fail(format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.fail("expected a single whitespace byte after maxval"));
    }
    h.pos += 1;
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        h.pos = bytes.len();
        return Err(h.fail(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode_netpbm(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Planar `[C, H, W]` in `[0, 1]` from an interleaved raster; gray is replicated to 3 channels.
pub fn raster_to_image(r: &Raster) -> Tensor {
    let (h, w) = (r.height, r.width);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let src = if r.channels == 1 { p } else { p * 3 + c };
        r.pixels[src] as f64 / 255.0
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(raster_to_image(&read_raster(path.as_ref())?))
}

/// Reads a P5 mask; pixels `>= 128` become 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            offset: 0,
            message: "masks must be P5 (grayscale)".into(),
        });
    }
    let data = r
        .pixels
        .iter()
        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, r.height, r.width], data)
}

/// Reads a P5 saliency map as `[1, H, W]` in `[0, 1]`.
pub fn read_saliency(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            offset: 0,
            message: "saliency maps must be P5 (grayscale)".into(),
        });
    }
    let data = r.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![1, r.height, r.width], data)
}

/// `round(v * 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn unit_range(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::InvalidTensor(format!("value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Writes a `[1, H, W]` map in `[0, 1]` as a P5 file.
pub fn write_saliency(path: impl AsRef<Path>, s: &Tensor) -> Result<()> {
    let (c, h, w) = s.dims3()?;
    if c != 1 {
        return Err(Error::InvalidTensor(format!(
            "saliency map must have 1 channel, got {c}"
        )));
    }
    unit_range(s)?;
    let raster = Raster {
        width: w,
        height: h,
        channels: 1,
        pixels: s.data().iter().map(|&v| quantize(v)).collect(),
    };
    write_bytes(path.as_ref(), &encode_netpbm(&raster))
}

/// Writes a `[3, H, W]` image in `[0, 1]` as a P6 file.
pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::InvalidTensor(format!(
            "image must have 3 channels, got {c}"
        )));
    }
    unit_range(image)?;
    let mut pixels = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            pixels.push(quantize(image.data()[ch * h * w + p]));
        }
    }
    let raster = Raster {
        width: w,
        height: h,
        channels: 3,
        pixels,
    };
    write_bytes(path.as_ref(), &encode_netpbm(&raster))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/mask pairs. On disk this is a bare JSON array of entries; relative
/// paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: String,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            entries,
            split,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        write_bytes(path.as_ref(), text.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Decodes every pair, checking that files exist and sizes agree.
    pub fn load_samples(&self) -> Result<Vec<SaliencySample>> {
        self.entries
            .iter()
            .map(|e| {
                let image = read_image(self.resolve(&e.image))?;
                let mask = read_mask(self.resolve(&e.mask))?;
                SaliencySample::new(image, mask)
            })
            .collect()
    }
}

/// A filled shape in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Triangle {
        pts: [(f64, f64); 3],
    },
}

impl Shape {
    /// Whether point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [
                    edge(pts[0], pts[1]),
                    edge(pts[1], pts[2]),
                    edge(pts[2], pts[0]),
                ];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// One generated sample together with the shapes that define its mask.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub shapes: Vec<Shape>,
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

fn random_shape(rng: &mut ChaCha8Rng, size: f64) -> Shape {
    let cx = rng.gen_range(0.15..0.85) * size;
    let cy = rng.gen_range(0.15..0.85) * size;
    match rng.gen_range(0..3) {
        0 => Shape::Ellipse {
            cx,
            cy,
            rx: rng.gen_range(0.08..0.3) * size,
            ry: rng.gen_range(0.08..0.3) * size,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        },
        1 => {
            let hw = rng.gen_range(0.06..0.25) * size;
            let hh = rng.gen_range(0.06..0.25) * size;
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        _ => {
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let a = rng.gen_range(0.0..0.6) + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                let rad = rng.gen_range(0.12..0.32) * size;
                *p = (cx + rad * a.cos(), cy + rad * a.sin());
            }
            Shape::Triangle { pts }
        }
    }
}

/// Pixel-center rasterization of a shape union into a `[1, size, size]` mask.
pub fn rasterize(shapes: &[Shape], size: usize) -> Tensor {
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        if shapes.iter().any(|s| s.contains(x, y)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Generates one image: smooth textured background plus 1–3 shapes whose
/// colors are drawn away from the background's.
pub fn synth_sample(rng: &mut ChaCha8Rng, size: usize) -> SynthSample {
    let sz = size as f64;
    let (shapes, mask) = loop {
        let count = rng.gen_range(1..=3);
        let shapes: Vec<Shape> = (0..count).map(|_| random_shape(rng, sz)).collect();
        let mask = rasterize(&shapes, size);
        let frac = mask.mean();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (shapes, mask);
        }
    };

    let bg_base: [f64; 3] = [
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
    ];
    let fg_base: [f64; 3] = [
        rng.gen_range(0.55..0.9),
        rng.gen_range(0.55..0.9),
        rng.gen_range(0.55..0.9),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.5..4.0) * 2.0 * std::f64::consts::PI / sz,
                rng.gen_range(0.5..4.0) * 2.0 * std::f64::consts::PI / sz,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.08),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..3 * size * size)
        .map(|_| rng.gen_range(-0.04..0.04))
        .collect();
    let plane = size * size;
    let image = Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let texture: f64 = waves
            .iter()
            .enumerate()
            .map(|(k, &(fx, fy, ph, amp))| {
                amp * (fx * x + fy * y + ph + c as f64 * (k as f64 + 1.0)).sin()
            })
            .sum();
        let base = if mask.data()[p] > 0.5 {
            fg_base[c]
        } else {
            bg_base[c]
        };
        (base + texture + noise[i]).clamp(0.0, 1.0)
    });
    SynthSample {
        image,
        mask,
        shapes,
    }
}

/// Writes `n` synthetic samples under `dir` (`images/`, `masks/`) and a
/// `manifest.json`. Byte-identical output for a given seed.
pub fn synth_dataset(
    dir: impl AsRef<Path>,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    check_input_size(size, size)?;
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(&mut rng, size);
        let image = PathBuf::from(format!("images/{i:05}.ppm"));
        let mask = PathBuf::from(format!("masks/{i:05}.pgm"));
        write_image(dir.join(&image), &s.image)?;
        write_saliency(dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry { image, mask });
    }
    let manifest = DatasetManifest {
        entries,
        split: "synth".into(),
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
