//! IDX-format digit loading with per-class subsetting.
//!
//! Reads the big-endian IDX containers used by the classic digit datasets
//! (magic `0x00000803` for image stacks, `0x00000801` for label vectors),
//! picks a seed-deterministic subset per class, area-downsamples each image,
//! and scales pixels to `[0, 1]`.

use std::path::Path;

use super::{DataError, DomainTag, LabeledDataset, Result};
use crate::rng::Rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a str,
    data: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn read_u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let bytes = self.data.get(self.offset..end).ok_or(DataError::IdxTruncated {
            path: self.path.to_string(),
            offset: self.offset as u64,
        })?;
        self.offset = end;
        Ok(u32::from_be_bytes(bytes.try_into().expect("4-byte slice")))
    }

    fn read_bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.offset + len;
        let bytes = self.data.get(self.offset..end).ok_or(DataError::IdxTruncated {
            path: self.path.to_string(),
            offset: self.offset as u64,
        })?;
        self.offset = end;
        Ok(bytes)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn parse_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let data = read_file(path)?;
    let path_str = path.display().to_string();
    let mut cur = Cursor { path: &path_str, data: &data, offset: 0 };
    let magic = cur.read_u32()?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::IdxMagic { path: path_str, offset: 0, found: magic, expected: IMAGES_MAGIC });
    }
    let count = cur.read_u32()? as usize;
    let rows = cur.read_u32()? as usize;
    let cols = cur.read_u32()? as usize;
    let pixels = cur.read_bytes(count * rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

fn parse_labels(path: &Path) -> Result<Vec<u8>> {
    let data = read_file(path)?;
    let path_str = path.display().to_string();
    let mut cur = Cursor { path: &path_str, data: &data, offset: 0 };
    let magic = cur.read_u32()?;
    if magic != LABELS_MAGIC {
        return Err(DataError::IdxMagic { path: path_str, offset: 0, found: magic, expected: LABELS_MAGIC });
    }
    let count = cur.read_u32()? as usize;
    Ok(cur.read_bytes(count)?.to_vec())
}

/// Area-weighted downsampling of one grayscale image to `size x size`. Each
/// output pixel averages the source region it covers, with fractional edge
/// pixels weighted by overlap, so output values stay within the input range.
fn area_downsample(pixels: &[u8], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let sy = rows as f64 / size as f64;
    let sx = cols as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    for oy in 0..size {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..size {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let mut y = y0;
            while y < y1 - 1e-12 {
                let yi = y.floor() as usize;
                let y_next = (yi as f64 + 1.0).min(y1);
                let hy = y_next - y;
                let mut x = x0;
                while x < x1 - 1e-12 {
                    let xi = x.floor() as usize;
                    let x_next = (xi as f64 + 1.0).min(x1);
                    let hx = x_next - x;
                    let w = hx * hy;
                    acc += w * f64::from(pixels[yi.min(rows - 1) * cols + xi.min(cols - 1)]);
                    area += w;
                    x = x_next;
                }
                y = y_next;
            }
            out[oy * size + ox] = acc / area / 255.0;
        }
    }
    out
}

/// Loads `per_class` samples of each digit from an IDX image/label pair,
/// resized to `resize_to x resize_to` and flattened row-major. Selection is a
/// seed-deterministic shuffle within each class. The result plays the source
/// role; call [`LabeledDataset::into_target_sealed`] for target use.
pub fn load_idx_subset(
    images_path: &Path,
    labels_path: &Path,
    per_class: usize,
    resize_to: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = parse_images(images_path)?;
    let labels = parse_labels(labels_path)?;
    if labels.len() != count {
        return Err(DataError::IdxCountMismatch { images: count, labels: labels.len() });
    }
    let num_classes = 10;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) < num_classes {
            by_class[l as usize].push(i);
        }
    }
    let mut rng = Rng::seeded(seed, "idx/subset");
    let mut chosen = Vec::with_capacity(per_class * num_classes);
    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < per_class {
            return Err(DataError::InsufficientClassSamples {
                class,
                have: indices.len(),
                need: per_class,
            });
        }
        rng.shuffle(indices);
        chosen.extend(indices[..per_class].iter().map(|&i| (i, class)));
    }
    chosen.sort_unstable();

    let dim = resize_to * resize_to;
    let mut features = Vec::with_capacity(chosen.len() * dim);
    let mut out_labels = Vec::with_capacity(chosen.len());
    for &(i, class) in &chosen {
        let img = &pixels[i * rows * cols..(i + 1) * rows * cols];
        features.extend(area_downsample(img, rows, cols, resize_to));
        out_labels.push(class);
    }
    Ok(LabeledDataset::from_parts(
        images_path.file_name().map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned()),
        DomainTag::Source,
        dim,
        num_classes,
        seed,
        features,
        Some(out_labels),
    ))
}
