//! Quantitative evaluation: average image gradient, per-pixel gradient maps,
//! and five-point survey aggregation.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array3;

use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Display scale that expresses gradients in 8-bit intensity units, making
/// values comparable across images with different tensor ranges.
pub const DISPLAY_SCALE: f32 = 255.0;

/// Mean anisotropic L1 gradient magnitude of `image`, measured after mapping
/// its value range onto `0..scale`.
///
/// The metric sums absolute horizontal and vertical forward differences over
/// every channel and divides by the element count, so a spatially constant
/// image scores exactly zero and sharper images score higher.
pub fn average_gradient(image: &ImageTensor, scale: f32) -> Result<f32> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Argument(format!(
            "display scale must be positive and finite, got {scale}"
        )));
    }
    let data = image.data();
    let (c, h, w) = data.dim();
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!(
            "gradient metrics need at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    // Differences cancel the range offset; only the range width rescales.
    let factor = (scale / image.range().width()) as f64;
    let mut sum = 0.0f64;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = data[[ch, i, j]] as f64;
                if j + 1 < w {
                    sum += (data[[ch, i, j + 1]] as f64 - v).abs();
                }
                if i + 1 < h {
                    sum += (data[[ch, i + 1, j]] as f64 - v).abs();
                }
            }
        }
    }
    Ok((sum * factor / ((c * h * w) as f64)) as f32)
}

/// Mean of [`average_gradient`] over a set of images: the corpus-level
/// summary reported by the evaluation command.
pub fn mean_average_gradient<'a, I>(images: I, scale: f32) -> Result<f32>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for image in images {
        sum += average_gradient(image, scale)? as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument(
            "mean average gradient needs at least one image".into(),
        ));
    }
    Ok((sum / count as f64) as f32)
}

/// Per-pixel L1 gradient magnitude (forward differences, summed over
/// channels), normalized onto the input's value range for visualization.
///
/// The strongest gradient maps to the range maximum; a spatially constant
/// image maps to the range minimum everywhere. The result is single-channel
/// and can be written with the standard image writer.
pub fn gradient_map(image: &ImageTensor) -> Result<ImageTensor> {
    let data = image.data();
    let (c, h, w) = data.dim();
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!(
            "gradient metrics need at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    let mut mag = Array3::<f32>::zeros((1, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = data[[ch, i, j]];
                let mut m = 0.0f32;
                if j + 1 < w {
                    m += (data[[ch, i, j + 1]] - v).abs();
                }
                if i + 1 < h {
                    m += (data[[ch, i + 1, j]] - v).abs();
                }
                mag[[0, i, j]] += m;
            }
        }
    }
    let range = image.range();
    let max = mag.iter().fold(0.0f32, |a, &b| a.max(b));
    let out = if max > 0.0 {
        mag.mapv(|m| (range.lo + (m / max) * range.width()).min(range.hi))
    } else {
        Array3::from_elem((1, h, w), range.lo)
    };
    ImageTensor::from_parts(out, range)
}

/// Scored-survey table: one row per method with the fraction of responses
/// that awarded each of the five scores, kept in presentation order.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyTable {
    rows: Vec<(String, [f64; 5])>,
}

impl SurveyTable {
    /// Build a table, validating every distribution.
    pub fn new(rows: Vec<(String, [f64; 5])>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, dist) in &rows {
            if name.is_empty() {
                return Err(Error::Validation("method name must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate method '{name}'")));
            }
            validate_distribution(name, dist)?;
        }
        Ok(SurveyTable { rows })
    }

    /// Parse a comma-separated table: one `method,f1,f2,f3,f4,f5` row per
    /// line, blank lines and `#` comments skipped. `origin` labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let fail = |line: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut rows = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(fail(
                    idx + 1,
                    format!("expected 6 comma-separated fields, got {}", fields.len()),
                ));
            }
            let mut dist = [0.0f64; 5];
            for (slot, field) in dist.iter_mut().zip(&fields[1..]) {
                *slot = field
                    .parse()
                    .map_err(|e| fail(idx + 1, format!("bad fraction '{field}': {e}")))?;
            }
            rows.push((fields[0].to_string(), dist));
        }
        Self::new(rows)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn rows(&self) -> &[(String, [f64; 5])] {
        &self.rows
    }
}

/// The user-study score distributions bundled with the CLI.
pub fn bundled_survey() -> SurveyTable {
    SurveyTable::parse(
        include_str!("../data/survey.csv"),
        Path::new("<bundled survey>"),
    )
    .expect("bundled survey table is well formed")
}

fn validate_distribution(name: &str, dist: &[f64; 5]) -> Result<()> {
    for &f in dist {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Validation(format!(
                "method '{name}': fraction {f} outside [0, 1]"
            )));
        }
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "method '{name}': fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Mean score per method at full precision, in table order. Scores run 1..5,
/// so every valid distribution averages into [1, 5].
pub fn aggregate_survey(table: &SurveyTable) -> Result<Vec<(String, f64)>> {
    table
        .rows
        .iter()
        .map(|(name, dist)| {
            validate_distribution(name, dist)?;
            let avg: f64 = dist
                .iter()
                .zip(1..)
                .map(|(f, score)| f * f64::from(score))
                .sum();
            Ok((name.clone(), avg))
        })
        .collect()
}

/// Half-up rounding to two decimals, the survey display convention.
pub fn round_display(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
