//! PNG output and on-disk reference sets.
//!
//! A reference set directory holds `manifest.toml` plus, per entry, the
//! density grid as little-endian `f32` and the mask as one byte per cell,
//! both in x-fastest cell order. The manifest stores SHA-256 digests of both
//! files and every latent inline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::generator::LatentCode;
use crate::geometry::{GridGeometry, IsoRule, MaskGrid, VoxelGrid};
use crate::math::Vec3;
use crate::regularizer::{ReferenceEntry, ReferenceSet};
use crate::renderer::Image;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Tiles equally sized images into rows of `cols`.
pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidDimension("contact sheet of no images".into()))?;
    let (w, h) = (first.width, first.height);
    if cols == 0 || images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::ShapeMismatch("contact sheet needs equally sized images".into()));
    }
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::new(w * cols, h * rows);
    for (n, img) in images.iter().enumerate() {
        let (ox, oy) = ((n % cols) * w, (n / cols) * h);
        for r in 0..h {
            let src = &img.data[3 * r * w..3 * (r + 1) * w];
            let start = 3 * ((oy + r) * sheet.width + ox);
            sheet.data[start..start + 3 * w].copy_from_slice(src);
        }
    }
    Ok(sheet)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn grid_bytes(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 * grid.data.len());
    for &v in &grid.data {
        let f = v as f32;
        if f as f64 != v {
            return Err(Error::InvalidGrid("grid value not representable as f32; quantize first".into()));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn write_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let q = grid.clone().quantized();
    fs::write(path, grid_bytes(&q)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub latent: Vec<f64>,
    pub iso: f64,
    pub grid: String,
    pub mask: String,
    pub grid_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSetManifest {
    pub version: u32,
    pub k: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub iso_rule: IsoRule,
    pub dilation: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn save_reference_set(set: &ReferenceSet, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(set.len());
    for (i, e) in set.entries.iter().enumerate() {
        let gname = format!("ref_{i:03}.grid.f32");
        let mname = format!("ref_{i:03}.mask.u8");
        let gbytes = grid_bytes(&e.grid)?;
        let mbytes: Vec<u8> = e.mask.data.iter().map(|&b| b as u8).collect();
        fs::write(dir.join(&gname), &gbytes).map_err(|err| Error::io(dir.join(&gname), err))?;
        fs::write(dir.join(&mname), &mbytes).map_err(|err| Error::io(dir.join(&mname), err))?;
        entries.push(ManifestEntry {
            seed: e.seed,
            latent: e.latent.0.clone(),
            iso: e.iso,
            grid: gname,
            mask: mname,
            grid_sha256: sha256_hex(&gbytes),
            mask_sha256: sha256_hex(&mbytes),
        });
    }
    let g = set.geometry;
    let manifest = ReferenceSetManifest {
        version: MANIFEST_VERSION,
        k: g.k,
        lo: g.lo.to_array(),
        hi: g.hi.to_array(),
        iso_rule: set.iso_rule,
        dilation: set.dilation,
        entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_checked(dir: &Path, name: &str, expected: &str, entry: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(Error::ChecksumMismatch {
            entry: entry.to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(bytes)
}

pub fn load_reference_set(dir: &Path) -> Result<ReferenceSet> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ReferenceSetManifest = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: m.version,
        });
    }
    let geometry = GridGeometry::new(m.k, Vec3::from_slice(&m.lo), Vec3::from_slice(&m.hi))?;
    let n = geometry.len();
    let mut entries = Vec::with_capacity(m.entries.len());
    for (i, e) in m.entries.iter().enumerate() {
        let label = format!("entry {i} ({})", e.grid);
        let gbytes = read_checked(dir, &e.grid, &e.grid_sha256, &label)?;
        let mbytes = read_checked(dir, &e.mask, &e.mask_sha256, &label)?;
        if gbytes.len() != 4 * n || mbytes.len() != n {
            return Err(Error::GeometryMismatch(format!(
                "{label}: files hold {} grid bytes and {} mask bytes, k = {} needs {} and {n}",
                gbytes.len(),
                mbytes.len(),
                m.k,
                4 * n
            )));
        }
        let data = gbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mask = mbytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::InvalidGrid(format!("{label}: mask byte {b}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        entries.push(ReferenceEntry {
            latent: LatentCode(e.latent.clone()),
            seed: e.seed,
            grid: VoxelGrid::from_data(geometry, data)?,
            mask: MaskGrid { geometry, data: mask },
            iso: e.iso,
        });
    }
    ReferenceSet::new(geometry, m.iso_rule, m.dilation, entries)
}
