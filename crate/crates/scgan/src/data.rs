//! Image tensors, corpus loading and preprocessing, annotation sidecars, and
//! unpaired batch sampling.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::regions::{Region, RegionSet};

/// Closed interval every tensor element must lie in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for ValueRange {
    fn default() -> Self {
        ValueRange { lo: -1.0, hi: 1.0 }
    }
}

impl ValueRange {
    pub fn width(self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A channels x height x width image with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
    range: ValueRange,
}

impl ImageTensor {
    /// Full-invariant constructor for pipeline images: 1 or 3 channels,
    /// at least 8x8, all elements inside `range`.
    pub fn new(data: Array3<f32>, range: ValueRange) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!(
                "image must be at least 8x8, got {h}x{w}"
            )));
        }
        Self::from_parts(data, range)
    }

    /// Constructor for derived tensors (region crops, metric maps) that may
    /// be smaller than the pipeline minimum; channel and range invariants
    /// still hold.
    pub fn from_parts(data: Array3<f32>, range: ValueRange) -> Result<Self> {
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        if range.width() <= 0.0 {
            return Err(Error::Argument("value range must be non-degenerate".into()));
        }
        if let Some(bad) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Validation(format!(
                "element {bad} outside value range [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(ImageTensor { data, range })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Which side of the unpaired translation a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    ASelfie,
    BCartoon,
}

/// One corpus image with its domain label and optional region annotations.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub image: ImageTensor,
    pub domain: Domain,
    pub regions: Option<RegionSet>,
    pub source_path: String,
}

impl DomainSample {
    pub fn new(
        image: ImageTensor,
        domain: Domain,
        regions: Option<RegionSet>,
        source_path: String,
    ) -> Result<Self> {
        if regions.is_some() && domain != Domain::ASelfie {
            return Err(Error::Validation(
                "region annotations are only valid for selfie-domain samples".into(),
            ));
        }
        Ok(DomainSample {
            image,
            domain,
            regions,
            source_path,
        })
    }
}

/// Reproducibility token identifying the draw that produced a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedState {
    pub seed: u64,
    pub call_index: u64,
}

/// One training batch: equally many independent draws from each domain.
/// Index alignment between the two lists carries no pairing meaning.
#[derive(Debug, Clone)]
pub struct UnpairedBatch {
    pub batch_a: Vec<DomainSample>,
    pub batch_b: Vec<DomainSample>,
    pub seed_state: SeedState,
}

fn map_u8_to_range(p: u8, range: ValueRange) -> f32 {
    range.lo + range.width() * (p as f32 / 255.0)
}

fn map_range_to_u8(v: f32, range: ValueRange) -> u8 {
    let unit = (v - range.lo) / range.width();
    (unit * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decode an image file, center-crop it to the target aspect ratio, resize
/// bilinearly, and map 8-bit values linearly into `range`. Grayscale files
/// become 1-channel tensors, everything else 3-channel.
pub fn load_image_with_range(
    path: &Path,
    target_size: (usize, usize),
    range: ValueRange,
) -> Result<ImageTensor> {
    let (th, tw) = target_size;
    if th == 0 || tw == 0 {
        return Err(Error::Argument("target size must be positive".into()));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
    );
    let (w, h) = (img.width() as u64, img.height() as u64);
    // Center-crop to the target aspect ratio before resizing.
    let (crop_w, crop_h) = if w * th as u64 >= h * tw as u64 {
        (((h * tw as u64 + th as u64 / 2) / th as u64).max(1), h)
    } else {
        (w, ((w * th as u64 + tw as u64 / 2) / tw as u64).max(1))
    };
    let x0 = (w - crop_w) / 2;
    let y0 = (h - crop_h) / 2;
    let cropped = img.crop_imm(x0 as u32, y0 as u32, crop_w as u32, crop_h as u32);
    let resized = cropped.resize_exact(tw as u32, th as u32, image::imageops::FilterType::Triangle);
    let tensor = if gray {
        let buf = resized.to_luma8();
        Array3::from_shape_fn((1, th, tw), |(_, i, j)| {
            map_u8_to_range(buf.get_pixel(j as u32, i as u32)[0], range)
        })
    } else {
        let buf = resized.to_rgb8();
        Array3::from_shape_fn((3, th, tw), |(c, i, j)| {
            map_u8_to_range(buf.get_pixel(j as u32, i as u32)[c], range)
        })
    };
    ImageTensor::new(tensor, range)
}

/// [`load_image_with_range`] with the default [-1, 1] range.
pub fn load_image(path: &Path, target_size: (usize, usize)) -> Result<ImageTensor> {
    load_image_with_range(path, target_size, ValueRange::default())
}

/// Decode an image at its native dimensions, mapped into the default range;
/// used by inference and evaluation, which preserve input sizes.
pub fn load_image_native(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
    );
    let (h, w) = (img.height() as usize, img.width() as usize);
    let range = ValueRange::default();
    let tensor = if gray {
        let buf = img.to_luma8();
        Array3::from_shape_fn((1, h, w), |(_, i, j)| {
            map_u8_to_range(buf.get_pixel(j as u32, i as u32)[0], range)
        })
    } else {
        let buf = img.to_rgb8();
        Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            map_u8_to_range(buf.get_pixel(j as u32, i as u32)[c], range)
        })
    };
    ImageTensor::new(tensor, range)
}

/// Quantize a tensor back to 8 bits and write it as PNG or JPEG.
pub fn save_image(tensor: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = tensor.data.dim();
    let range = tensor.range;
    let save = |buf: Vec<u8>, color| {
        image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    };
    if c == 1 {
        let mut buf = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                buf.push(map_range_to_u8(tensor.data[[0, i, j]], range));
            }
        }
        save(buf, image::ColorType::L8)
    } else {
        let mut buf = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    buf.push(map_range_to_u8(tensor.data[[ch, i, j]], range));
                }
            }
        }
        save(buf, image::ColorType::Rgb8)
    }
}

/// Nearest-neighbor resize for tensors; used where quantization through the
/// 8-bit image path would be lossy.
pub fn resize_nearest(data: &Array3<f32>, target: (usize, usize)) -> Array3<f32> {
    let (c, h, w) = data.dim();
    let (th, tw) = target;
    assert!(th > 0 && tw > 0, "resize target must be positive");
    Array3::from_shape_fn((c, th, tw), |(ch, i, j)| {
        let si = (i * h / th).min(h - 1);
        let sj = (j * w / tw).min(w - 1);
        data[[ch, si, sj]]
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

/// Deterministically ordered list of image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Load a corpus subdirectory into domain samples, attaching sidecar
/// regions by corpus-relative path when provided.
pub fn load_domain_dir(
    root: &Path,
    subdir: &str,
    domain: Domain,
    target_size: (usize, usize),
    annotations: Option<&HashMap<String, RegionSet>>,
) -> Result<Vec<DomainSample>> {
    let dir = root.join(subdir);
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "corpus is missing the {subdir} directory under {}",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    for path in list_images(&dir)? {
        let image = load_image(&path, target_size)?;
        let rel = format!(
            "{subdir}/{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("")
        );
        let regions = match domain {
            Domain::ASelfie => annotations.and_then(|m| m.get(&rel)).cloned(),
            Domain::BCartoon => None,
        };
        samples.push(DomainSample::new(image, domain, regions, rel)?);
    }
    Ok(samples)
}

/// Draw `batch_size` samples independently and uniformly from each domain.
/// The draw is a pure function of (seed, call_index): domain A indices are
/// drawn first, then domain B.
pub fn unpaired_batch(
    dataset_a: &[DomainSample],
    dataset_b: &[DomainSample],
    batch_size: usize,
    seed: u64,
    call_index: u64,
) -> Result<UnpairedBatch> {
    if dataset_a.is_empty() || dataset_b.is_empty() {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(call_index);
    let batch_a = (0..batch_size)
        .map(|_| dataset_a[rng.gen_range(0..dataset_a.len())].clone())
        .collect();
    let batch_b = (0..batch_size)
        .map(|_| dataset_b[rng.gen_range(0..dataset_b.len())].clone())
        .collect();
    Ok(UnpairedBatch {
        batch_a,
        batch_b,
        seed_state: SeedState { seed, call_index },
    })
}

/// How `preprocess_corpus` crops before writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    None,
    CenterSquare,
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub min_size: u32,
    pub crop_mode: CropMode,
    pub dedup: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            min_size: 64,
            crop_mode: CropMode::CenterSquare,
            dedup: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Undecodable,
    TooSmall,
    Duplicate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub kept: usize,
    pub rejected: usize,
    pub reasons: Vec<(String, RejectReason)>,
}

/// Filter, crop, deduplicate, and re-encode a raw image directory.
/// `kept + rejected` always equals the number of image files seen.
pub fn preprocess_corpus(
    raw_dir: &Path,
    out_dir: &Path,
    options: &PreprocessOptions,
) -> Result<PreprocessReport> {
    let inputs = list_images(raw_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = PreprocessReport {
        kept: 0,
        rejected: 0,
        reasons: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    for path in inputs {
        let name = path
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("image")
            .to_string();
        let reject = |report: &mut PreprocessReport, reason| {
            report.rejected += 1;
            report.reasons.push((name.clone(), reason));
        };
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(_) => {
                reject(&mut report, RejectReason::Undecodable);
                continue;
            }
        };
        if img.width() < options.min_size || img.height() < options.min_size {
            reject(&mut report, RejectReason::TooSmall);
            continue;
        }
        let processed = match options.crop_mode {
            CropMode::None => img,
            CropMode::CenterSquare => {
                let side = img.width().min(img.height());
                let x0 = (img.width() - side) / 2;
                let y0 = (img.height() - side) / 2;
                img.crop_imm(x0, y0, side, side)
            }
        };
        let rgb = processed.to_rgb8();
        if options.dedup {
            let digest = Sha256::digest(rgb.as_raw());
            if !seen.insert(digest) {
                reject(&mut report, RejectReason::Duplicate);
                continue;
            }
        }
        let out_path = out_dir.join(format!("{name}.png"));
        rgb.save(&out_path).map_err(|e| Error::Decode {
            path: out_path.clone(),
            reason: e.to_string(),
        })?;
        report.kept += 1;
    }
    Ok(report)
}

#[derive(Deserialize)]
struct AnnotationRegion {
    label: String,
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct AnnotationRecord {
    image: String,
    regions: Vec<AnnotationRegion>,
}

/// Parse a newline-delimited annotation sidecar into per-image region sets.
/// Repeated records for one image merge their regions in file order. Every
/// returned set carries the mandatory whole-image entry first.
pub fn load_annotations(path: &Path) -> Result<HashMap<String, RegionSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: HashMap<String, Vec<Region>> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let entry = raw.entry(record.image.clone()).or_insert_with(|| {
            order.push(record.image.clone());
            Vec::new()
        });
        for region in record.regions {
            let [x, y, w, h] = region.bbox;
            if !(0.0..=1.0).contains(&x)
                || !(0.0..=1.0).contains(&y)
                || w <= 0.0
                || h <= 0.0
                || x + w > 1.0
                || y + h > 1.0
            {
                return Err(Error::Validation(format!(
                    "{}:{}: bbox {:?} outside the normalized unit square",
                    path.display(),
                    idx + 1,
                    region.bbox
                )));
            }
            entry.push(Region::new(region.label, region.bbox));
        }
    }
    let mut map = HashMap::new();
    for (image, regions) in raw {
        map.insert(image, RegionSet::with_regions(regions)?);
    }
    Ok(map)
}
