//! Whole-model conversion between a host-friendly weight blob and a
//! PIM-aware image.
//!
//! The blob holds every linear matrix in execution order, each column-major
//! (`data[k * M + m]`), as raw little-endian BF16. The image is the
//! row-band stack of [`ModelLayout`] starting at DRAM row 0.

use half::bf16;
use serde::Serialize;
use thiserror::Error;

use crate::address_map::AddressMap;
use crate::layout::{convert_to_pim_aware, smc_copy, LayoutError, ModelLayout, PimPlacement, PlacementPolicy, SmcDestination, WeightMatrix};
use crate::memory::{AgentId, Attribute, MemoryConfig, MemoryError, MemorySystem, RegionKind};
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConvertError {
    #[error("weight blob has {actual} bytes, model needs {expected}")]
    BlobSize { expected: u64, actual: u64 },
    #[error("image has {actual} bytes, layout spans {expected}")]
    ImageSize { expected: u64, actual: u64 },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub tag: String,
    pub out_dim: u64,
    pub in_dim: u64,
    pub padded_out: u64,
    pub base_offset: u64,
    pub span_bytes: u64,
    pub padding_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub model: ModelSpec,
    pub map: AddressMap,
    pub policy: PlacementPolicy,
    pub host_bytes: u64,
    pub padded_bytes: u64,
    pub padding_bytes: u64,
    pub padding_fraction: f64,
    pub image_bytes: u64,
    pub matrices: Vec<ManifestEntry>,
}

pub fn manifest(model: &ModelSpec, map: &AddressMap, policy: PlacementPolicy) -> Result<(Manifest, ModelLayout), ConvertError> {
    let layout = ModelLayout::new(model, map, policy, 0)?;
    let matrices: Vec<ManifestEntry> = layout
        .entries
        .iter()
        .map(|(shape, p)| ManifestEntry {
            tag: shape.tag(),
            out_dim: p.out_dim,
            in_dim: p.in_dim,
            padded_out: p.padded_out(),
            base_offset: p.base(),
            span_bytes: p.span_bytes(),
            padding_bytes: p.padding_bytes(),
        })
        .collect();
    let padded_bytes: u64 = layout.entries.iter().map(|(_, p)| p.padded_bytes()).sum();
    let host_bytes = model.host_bytes();
    let m = Manifest {
        model: model.clone(),
        map: map.clone(),
        policy,
        host_bytes,
        padded_bytes,
        padding_bytes: padded_bytes - host_bytes,
        padding_fraction: (padded_bytes - host_bytes) as f64 / host_bytes.max(1) as f64,
        image_bytes: layout.span_bytes(map),
        matrices,
    };
    Ok((m, layout))
}

fn matrix_from_blob(blob: &[u8], offset: usize, out_dim: u64, in_dim: u64) -> Result<WeightMatrix, LayoutError> {
    let n = (out_dim * in_dim) as usize;
    let data = blob[offset..offset + 2 * n].chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]])).collect();
    WeightMatrix::host_friendly(out_dim, in_dim, data)
}

fn check_blob(model: &ModelSpec, blob: &[u8]) -> Result<(), ConvertError> {
    if blob.len() as u64 != model.host_bytes() {
        return Err(ConvertError::BlobSize { expected: model.host_bytes(), actual: blob.len() as u64 });
    }
    Ok(())
}

/// Converts a host-friendly blob into the PIM-aware image.
pub fn convert_blob(
    model: &ModelSpec,
    map: &AddressMap,
    policy: PlacementPolicy,
    blob: &[u8],
) -> Result<(Vec<u8>, Manifest), ConvertError> {
    check_blob(model, blob)?;
    let (manifest, layout) = manifest(model, map, policy)?;
    let mut image = vec![0u8; manifest.image_bytes as usize];
    let mut offset = 0usize;
    for (_, p) in &layout.entries {
        let w = matrix_from_blob(blob, offset, p.out_dim, p.in_dim)?;
        offset += (p.out_dim * p.in_dim * 2) as usize;
        let img = convert_to_pim_aware(&w, p)?;
        let at = img.base as usize;
        image[at..at + img.bytes.len()].copy_from_slice(&img.bytes);
    }
    Ok((image, manifest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub ok: bool,
    pub matrices: u64,
    pub copied_bytes: u64,
    pub source_reads: u64,
    /// First mismatch as `(matrix tag, m, k)`.
    pub first_mismatch: Option<(String, u64, u64)>,
}

/// Loads the image into a non-cacheable region, swizzle-copies every matrix
/// into a cacheable buffer of `H x I` elements (row chunks when larger) and
/// compares the host-friendly result with the blob.
pub fn verify_blob(
    model: &ModelSpec,
    map: &AddressMap,
    policy: PlacementPolicy,
    blob: &[u8],
    image: &[u8],
) -> Result<VerifyReport, ConvertError> {
    check_blob(model, blob)?;
    let (manifest, layout) = manifest(model, map, policy)?;
    if image.len() as u64 != manifest.image_bytes {
        return Err(ConvertError::ImageSize { expected: manifest.image_bytes, actual: image.len() as u64 });
    }
    let buffer_bytes = model.buffer_unit_bytes();
    let mut config = MemoryConfig::new(manifest.image_bytes + buffer_bytes + 2 * 4096);
    config.pool_cap = config.address_space;
    let mut mem = MemorySystem::new(config)?;
    let weights = mem.allocate_region(RegionKind::ContiguousPool, Attribute::NonCacheable, manifest.image_bytes.max(1))?;
    let buffer = mem.allocate_region(RegionKind::General, Attribute::Cacheable, buffer_bytes)?;
    mem.load(weights.base, image)?;

    let mut report = VerifyReport { ok: true, matrices: 0, copied_bytes: 0, source_reads: 0, first_mismatch: None };
    let mut offset = 0usize;
    let mut scratch = vec![0u8; buffer_bytes as usize];
    for ((_, p), entry) in layout.entries.iter().zip(&manifest.matrices) {
        let expected = matrix_from_blob(blob, offset, p.out_dim, p.in_dim)?;
        offset += (p.out_dim * p.in_dim * 2) as usize;
        let rows_per_chunk = (buffer_bytes / (p.in_dim * 2)).max(1);
        let mut m0 = 0;
        while m0 < p.out_dim {
            let m1 = (m0 + rows_per_chunk).min(p.out_dim);
            let out = smc_copy(
                &mut mem,
                p,
                SmcDestination { addr: buffer.base, capacity: buffer.size },
                m0..m1,
                0..p.in_dim,
                AgentId(1),
            )?;
            report.copied_bytes += out.copied_bytes;
            report.source_reads += out.source_reads;
            let used = &mut scratch[..out.copied_bytes as usize];
            mem.read(buffer.base, used, AgentId::HOST)?;
            if report.first_mismatch.is_none() {
                report.first_mismatch = first_mismatch(&expected, used, m0..m1, &entry.tag);
            }
            m0 = m1;
        }
        report.matrices += 1;
    }
    report.ok = report.first_mismatch.is_none();
    Ok(report)
}

fn first_mismatch(expected: &WeightMatrix, got: &[u8], rows: std::ops::Range<u64>, tag: &str) -> Option<(String, u64, u64)> {
    let n = rows.end - rows.start;
    for k in 0..expected.in_dim {
        for m in rows.clone() {
            let at = (2 * (k * n + m - rows.start)) as usize;
            if bf16::from_le_bytes([got[at], got[at + 1]]).to_bits() != expected.at(m, k).to_bits() {
                return Some((tag.to_string(), m, k));
            }
        }
    }
    None
}

/// Placement of one matrix of the layout, by tag.
pub fn placement_of<'a>(layout: &'a ModelLayout, tag: &str) -> Option<&'a PimPlacement> {
    layout.entries.iter().find(|(s, _)| s.tag() == tag).map(|(_, p)| p)
}
