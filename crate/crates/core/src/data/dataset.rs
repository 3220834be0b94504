//! Multi-shape, multi-view supervision sets and their binary file format.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MarfError, Result};
use crate::geometry::{Ray, Vec3};
use crate::rng::stream;

use super::shapes::ShapeSource;
use super::views::{approximate_silhouettes, render_view, sample_views, Pixel, PixelStatus, ViewMap};

pub const DATASET_MAGIC: &[u8; 8] = b"MARFDS1\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeData {
    pub normalization: [f64; 4],
    pub views: Vec<ViewMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub shapes: Vec<String>,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub view_sampling: String,
    pub silhouette: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeData>,
    pub provenance: Provenance,
}

/// One strided sub-image: pixels `(a + i·stride, b + j·stride)` of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubImage {
    pub shape: usize,
    pub view: usize,
    pub a: usize,
    pub b: usize,
}

/// Ground truth for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionSample {
    pub ray: Ray,
    pub shape: usize,
    pub p_gt: Option<Vec3>,
    pub n_gt: Option<Vec3>,
    pub s_gt: Option<f64>,
}

impl SupervisionSample {
    pub fn from_pixel(ray: Ray, shape: usize, px: &Pixel) -> Self {
        match px.status {
            PixelStatus::Hit => Self {
                ray,
                shape,
                p_gt: Some(px.point()),
                n_gt: Some(px.normal()),
                s_gt: None,
            },
            PixelStatus::Miss => Self {
                ray,
                shape,
                p_gt: None,
                n_gt: None,
                s_gt: Some(px.s as f64),
            },
            PixelStatus::Missing => Self {
                ray,
                shape,
                p_gt: None,
                n_gt: None,
                s_gt: None,
            },
        }
    }

    /// `(h_gt, m_gt)`: hit when a target point exists, miss when the target
    /// silhouette is positive, `(0, 0)` for pixels without data.
    pub fn gates(&self) -> (bool, bool) {
        (self.p_gt.is_some(), self.s_gt.is_some_and(|s| s > 0.0))
    }
}

impl Dataset {
    /// Renders every view of every shape and fills silhouettes.
    pub fn generate(shapes: &[ShapeSource], views: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 || views == 0 || shapes.is_empty() {
            return Err(MarfError::InvalidInput(
                "dataset needs at least one shape, one view and a non-empty canvas".into(),
            ));
        }
        let dirs = sample_views(views);
        let data = shapes
            .iter()
            .map(|s| {
                let mut maps: Vec<ViewMap> = dirs.iter().map(|d| render_view(s, d, width, height)).collect();
                approximate_silhouettes(&mut maps);
                ShapeData {
                    normalization: s.normalization,
                    views: maps,
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            shapes: data,
            provenance: Provenance {
                seed,
                shapes: shapes.iter().map(|s| s.spec.clone()).collect(),
                views,
                width,
                height,
                view_sampling: "fibonacci".into(),
                silhouette: "quarter-step march over all hit points".into(),
            },
        })
    }

    pub fn view_count(&self) -> usize {
        self.shapes.first().map_or(0, |s| s.views.len())
    }

    pub fn ray(&self, shape: usize, view: usize, row: usize, col: usize) -> Ray {
        self.shapes[shape].views[view].camera().ray(row, col)
    }

    pub fn sample(&self, shape: usize, view: usize, row: usize, col: usize) -> SupervisionSample {
        let v = &self.shapes[shape].views[view];
        SupervisionSample::from_pixel(v.camera().ray(row, col), shape, &v.pixels[row * self.width + col])
    }

    /// Every sub-image for a stride.
    pub fn sub_images(&self, stride: usize) -> Vec<SubImage> {
        let mut out = Vec::new();
        for shape in 0..self.shapes.len() {
            for view in 0..self.shapes[shape].views.len() {
                for a in 0..stride {
                    for b in 0..stride {
                        out.push(SubImage { shape, view, a, b });
                    }
                }
            }
        }
        out
    }

    /// Supervision rows of a sub-image in row-major order.
    pub fn sub_image_samples(&self, sub: &SubImage, stride: usize) -> Vec<SupervisionSample> {
        stride_split_indices(self.width, self.height, stride, sub.a, sub.b)
            .into_iter()
            .map(|(r, c)| self.sample(sub.shape, sub.view, r, c))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.shapes.len() as u32,
            self.view_count() as u32,
            self.width as u32,
            self.height as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.shapes {
            for v in s.normalization {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for view in &s.views {
                for k in 0..3 {
                    buf.extend_from_slice(&view.direction[k].to_le_bytes());
                }
                for px in &view.pixels {
                    buf.push(px.status as u8);
                    for v in px.p.iter().chain(&px.n).chain(std::iter::once(&px.s)) {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.provenance)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, at: 0 };
        if r.take(8)? != DATASET_MAGIC {
            return Err(MarfError::Format("not a MARFDS1 dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(MarfError::Format(format!("unsupported dataset version {version}")));
        }
        let shape_count = r.u32()? as usize;
        let view_count = r.u32()? as usize;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let record = 1 + 7 * 4;
        let expected = 8 + 20 + shape_count * (32 + view_count * (24 + width * height * record));
        if bytes.len() != expected {
            return Err(MarfError::Format(format!(
                "dataset size {} does not match header (expected {expected})",
                bytes.len()
            )));
        }
        let mut shapes = Vec::with_capacity(shape_count);
        for _ in 0..shape_count {
            let mut normalization = [0.0; 4];
            for v in &mut normalization {
                *v = r.f64()?;
            }
            let mut views = Vec::with_capacity(view_count);
            for _ in 0..view_count {
                let direction = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
                let mut pixels = Vec::with_capacity(width * height);
                for _ in 0..width * height {
                    let code = r.take(1)?[0];
                    let status = PixelStatus::from_u8(code)
                        .ok_or_else(|| MarfError::Format(format!("bad pixel status {code}")))?;
                    let p = [r.f32()?, r.f32()?, r.f32()?];
                    let n = [r.f32()?, r.f32()?, r.f32()?];
                    let s = r.f32()?;
                    pixels.push(Pixel { status, p, n, s });
                }
                views.push(ViewMap {
                    direction,
                    width,
                    height,
                    pixels,
                });
            }
            shapes.push(ShapeData {
                normalization,
                views,
            });
        }
        let sidecar = sidecar_path(path);
        let provenance = if sidecar.exists() {
            serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?
        } else {
            Provenance {
                seed: 0,
                shapes: Vec::new(),
                views: view_count,
                width,
                height,
                view_sampling: "unknown".into(),
                silhouette: "unknown".into(),
            }
        };
        Ok(Self {
            width,
            height,
            shapes,
            provenance,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(MarfError::Format("dataset file is truncated".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Pixel coordinates of sub-image `(a, b)`.
pub fn stride_split_indices(width: usize, height: usize, stride: usize, a: usize, b: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut r = a;
    while r < height {
        let mut c = b;
        while c < width {
            out.push((r, c));
            c += stride;
        }
        r += stride;
    }
    out
}

/// Splits a view into `stride²` sub-images of pixels.
pub fn stride_split(view: &ViewMap, stride: usize) -> Vec<Vec<Pixel>> {
    let mut out = Vec::with_capacity(stride * stride);
    for a in 0..stride {
        for b in 0..stride {
            out.push(
                stride_split_indices(view.width, view.height, stride, a, b)
                    .into_iter()
                    .map(|(r, c)| view.pixels[r * view.width + c])
                    .collect(),
            );
        }
    }
    out
}

/// Shuffles all sub-images of the dataset for one epoch and groups them.
/// The last batch may be short.
pub fn make_batches(dataset: &Dataset, stride: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<SubImage>> {
    let mut subs = dataset.sub_images(stride);
    let mut rng = stream(seed, &[epoch as u64], "batches");
    subs.shuffle(&mut rng);
    subs.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
