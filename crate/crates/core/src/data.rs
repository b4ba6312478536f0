//! Binary PPM/PGM images, input normalization and on-disk datasets.
//!
//! A dataset directory holds `images/<stem>.ppm` (P6, RGB) and
//! `labels/<stem>.pgm` (P5, one class id per pixel, 255 = ignore).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, LabelMap, Tensor, IGNORE_INDEX};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &buf[start..*pos])
}

/// Parses a binary netpbm header; returns (width, height, payload).
fn parse_pnm<'a>(buf: &'a [u8], magic: &[u8], channels: usize) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    let mut pos = 0;
    if header_token(buf, &mut pos) != Some(magic) {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let tok = header_token(buf, &mut pos).ok_or_else(|| format!("missing {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} `{}`", String::from_utf8_lossy(tok)))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err(format!("empty image {w}x{h}"));
    }
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    pos += 1;
    let need = w * h * channels;
    let payload = &buf[pos..];
    if payload.len() != need {
        return Err(format!("payload is {} bytes, expected {need}", payload.len()));
    }
    Ok((w, h, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn image_err(path: &Path, detail: String) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail,
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let buf = read(path)?;
    let (width, height, data) = parse_pnm(&buf, b"P6", 3).map_err(|d| image_err(path, d))?;
    Ok(RgbImage {
        width,
        height,
        data: data.to_vec(),
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let buf = read(path)?;
    let (width, height, data) = parse_pnm(&buf, b"P5", 1).map_err(|d| image_err(path, d))?;
    Ok(GrayImage {
        width,
        height,
        data: data.to_vec(),
    })
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_pnm(path.as_ref(), "P6", img.width, img.height, &img.data)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    write_pnm(path.as_ref(), "P5", img.width, img.height, &img.data)
}

/// Per-channel standardization applied after scaling bytes to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    /// `[1, 3, H, W]` tensor from an RGB image.
    pub fn apply<T: Scalar>(&self, img: &RgbImage) -> Tensor<T> {
        let p = img.width * img.height;
        let mut data = vec![T::zero(); 3 * p];
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            for (i, px) in img.data.chunks_exact(3).enumerate() {
                data[c * p + i] = T::from_f64_lossy((px[c] as f64 / 255.0 - m) / s);
            }
        }
        Tensor::from_vec(Dims::new(1, 3, img.height, img.width), data).expect("sized above")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub labels: GrayImage,
}

impl Sample {
    pub fn label_map(&self) -> LabelMap {
        LabelMap::new(1, self.labels.height, self.labels.width, self.labels.data.clone()).expect("dims checked on load")
    }

    pub fn check(&self, num_classes: usize) -> Result<()> {
        if (self.image.width, self.image.height) != (self.labels.width, self.labels.height) {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{}: image {}x{} vs labels {}x{}",
                    self.name, self.image.width, self.image.height, self.labels.width, self.labels.height
                ),
            ));
        }
        if let Some((i, &l)) = self
            .labels
            .data
            .iter()
            .enumerate()
            .find(|(_, &l)| l != IGNORE_INDEX && l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: l,
                index: i,
                classes: num_classes,
            });
        }
        Ok(())
    }
}

/// Loads `dir/images/*.ppm` with matching `dir/labels/*.pgm`, sorted by stem.
pub fn load_dataset(dir: impl AsRef<Path>, num_classes: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let mut stems: Vec<(String, PathBuf)> = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Invalid(format!("no .ppm images under {}", images.display())));
    }
    stems
        .into_iter()
        .map(|(name, img_path)| {
            let label_path = dir.join("labels").join(format!("{name}.pgm"));
            let sample = Sample {
                image: read_ppm(&img_path)?,
                labels: read_pgm(&label_path)?,
                name,
            };
            sample.check(num_classes).map_err(|e| match e {
                Error::LabelOutOfRange { .. } | Error::Shape { .. } => image_err(&label_path, e.to_string()),
                other => other,
            })?;
            Ok(sample)
        })
        .collect()
}

/// Writes a sample in dataset layout.
pub fn write_sample(dir: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_ppm(dir.join("images").join(format!("{}.ppm", sample.name)), &sample.image)?;
    write_pgm(dir.join("labels").join(format!("{}.pgm", sample.name)), &sample.labels)
}

/// Images of a rectangle and a disk on a textured background.
///
/// Labels: 0 background, 1 rectangle, 2 disk (drawn last, on top).
pub fn synthetic_shapes(count: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let palette = [[40u8, 60, 90], [200, 60, 40], [60, 190, 80]];
    (0..count)
        .map(|i| {
            let (rh, rw) = (rng.random_range(h / 4..=h / 2), rng.random_range(w / 4..=w / 2));
            let (ry, rx) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            let r = rng.random_range(h.min(w) / 8..=h.min(w) / 4) as f64;
            let cy = rng.random_range(r..h as f64 - r);
            let cx = rng.random_range(r..w as f64 - r);
            let mut labels = vec![0u8; h * w];
            let mut data = vec![0u8; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut k = 0;
                    if (ry..ry + rh).contains(&y) && (rx..rx + rw).contains(&x) {
                        k = 1;
                    }
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        k = 2;
                    }
                    labels[y * w + x] = k as u8;
                    for c in 0..3 {
                        let noise: i16 = rng.random_range(-20..=20);
                        data[3 * (y * w + x) + c] = (palette[k][c] as i16 + noise).clamp(0, 255) as u8;
                    }
                }
            }
            Sample {
                name: format!("shape{i:03}"),
                image: RgbImage {
                    width: w,
                    height: h,
                    data,
                },
                labels: GrayImage {
                    width: w,
                    height: h,
                    data: labels,
                },
            }
        })
        .collect()
}
