//! Attentive region boxes, their per-region weights, and region providers.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, DomainSample, ImageTensor};
use crate::error::{Error, Result};

pub const WHOLE_LABEL: &str = "whole";

/// One labeled normalized box: (x, y) top-left corner, then width and height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub bbox: [f32; 4],
}

impl Region {
    pub fn new(label: impl Into<String>, bbox: [f32; 4]) -> Self {
        Region {
            label: label.into(),
            bbox,
        }
    }

    fn whole() -> Self {
        Region::new(WHOLE_LABEL, [0.0, 0.0, 1.0, 1.0])
    }

    fn validate(&self) -> Result<()> {
        let [x, y, w, h] = self.bbox;
        if x < 0.0 || y < 0.0 || w <= 0.0 || h <= 0.0 || x + w > 1.0 || y + h > 1.0 {
            return Err(Error::Validation(format!(
                "bbox {:?} violates the unit-square box invariants",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// Ordered region list; entry 0 is always the whole image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    entries: Vec<Region>,
}

impl RegionSet {
    /// The degenerate set containing only the whole-image entry.
    pub fn whole_only() -> Self {
        RegionSet {
            entries: vec![Region::whole()],
        }
    }

    /// Build a set from facial regions, prefixing the mandatory whole-image
    /// entry.
    pub fn with_regions(regions: Vec<Region>) -> Result<Self> {
        let mut entries = vec![Region::whole()];
        for region in regions {
            region.validate()?;
            entries.push(region);
        }
        Ok(RegionSet { entries })
    }

    /// Validate an explicit entry list, including the whole-image head.
    pub fn from_entries(entries: Vec<Region>) -> Result<Self> {
        match entries.first() {
            Some(first) if *first == Region::whole() => {}
            _ => {
                return Err(Error::Validation(
                    "entry 0 must be the whole image [0,0,1,1]".into(),
                ))
            }
        }
        for region in &entries {
            region.validate()?;
        }
        Ok(RegionSet { entries })
    }

    pub fn entries(&self) -> &[Region] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }
}

/// Per-region loss weights, aligned with a RegionSet by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub lambda: Vec<f32>,
}

/// The default rule: the whole image weighs 1, every facial component 0.5.
pub fn default_weights(region_set: &RegionSet) -> AttentionWeights {
    let lambda = region_set
        .entries()
        .iter()
        .map(|r| if r.label == WHOLE_LABEL { 1.0 } else { 0.5 })
        .collect();
    AttentionWeights { lambda }
}

/// Source of facial regions for a selfie sample. Implementations return the
/// facial entries only; the whole-image entry is added by `detect_regions`.
pub trait RegionProvider {
    fn regions_for(&self, sample: &DomainSample) -> Result<Vec<Region>>;
}

/// Provider backed by sidecar annotations keyed by corpus-relative path.
pub struct SidecarProvider {
    annotations: std::collections::HashMap<String, RegionSet>,
}

impl SidecarProvider {
    pub fn new(annotations: std::collections::HashMap<String, RegionSet>) -> Self {
        SidecarProvider { annotations }
    }
}

impl RegionProvider for SidecarProvider {
    fn regions_for(&self, sample: &DomainSample) -> Result<Vec<Region>> {
        Ok(self
            .annotations
            .get(&sample.source_path)
            .map(|set| set.entries()[1..].to_vec())
            .unwrap_or_default())
    }
}

/// Landmark-style adapter that assumes a centered portrait layout. Stands in
/// for a learned detector when no sidecar annotations exist.
pub struct CenteredFaceProvider;

impl RegionProvider for CenteredFaceProvider {
    fn regions_for(&self, _sample: &DomainSample) -> Result<Vec<Region>> {
        Ok(vec![
            Region::new("eyes", [0.2, 0.3, 0.6, 0.15]),
            Region::new("nose", [0.375, 0.45, 0.25, 0.2]),
            Region::new("mouth", [0.3, 0.65, 0.4, 0.15]),
        ])
    }
}

/// Produce the region set for a selfie. Provider failures and empty results
/// degrade to the whole-image-only set so training can proceed.
pub fn detect_regions(sample: &DomainSample, provider: &dyn RegionProvider) -> Result<RegionSet> {
    if sample.domain != Domain::ASelfie {
        return Err(Error::Argument(
            "regions are only detected for selfie-domain samples".into(),
        ));
    }
    match provider.regions_for(sample) {
        Ok(regions) if regions.is_empty() => Ok(RegionSet::whole_only()),
        Ok(regions) => match RegionSet::with_regions(regions) {
            Ok(set) => Ok(set),
            Err(err) => {
                log::warn!(
                    "invalid regions for {}: {err}; falling back to whole image",
                    sample.source_path
                );
                Ok(RegionSet::whole_only())
            }
        },
        Err(err) => {
            log::warn!(
                "region provider failed for {}: {err}; falling back to whole image",
                sample.source_path
            );
            Ok(RegionSet::whole_only())
        }
    }
}

/// Convert a normalized box to pixel bounds on an (height, width) grid:
/// floor for offsets, round-then-clamp for extents, minimum size one pixel.
pub fn bbox_to_pixels(bbox: [f32; 4], height: usize, width: usize) -> (usize, usize, usize, usize) {
    let [x, y, w, h] = bbox;
    let i0 = ((y * height as f32).floor() as usize).min(height - 1);
    let j0 = ((x * width as f32).floor() as usize).min(width - 1);
    let ext_i = ((h * height as f32).round() as usize).max(1);
    let ext_j = ((w * width as f32).round() as usize).max(1);
    let i1 = (i0 + ext_i).min(height);
    let j1 = (j0 + ext_j).min(width);
    (i0, i1, j0, j1)
}

/// Crop the sub-tensor covered by a normalized box. The whole-image box
/// returns a bit-exact copy of the input.
pub fn crop_region(image: &ImageTensor, bbox: [f32; 4]) -> Result<ImageTensor> {
    Region::new("crop", bbox).validate()?;
    let (i0, i1, j0, j1) = bbox_to_pixels(bbox, image.height(), image.width());
    let data = image.data().slice(s![.., i0..i1, j0..j1]).to_owned();
    ImageTensor::from_parts(data, image.range())
}
