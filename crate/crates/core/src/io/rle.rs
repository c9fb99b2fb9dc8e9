//! Importer for SA-1B style annotation files, whose masks are COCO run-length
//! encodings (column-major runs, alternating background and foreground,
//! starting with background). Both the compressed string form and plain
//! integer lists are accepted.

use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::MaskLabelMap;

/// Decodes the compressed COCO counts string.
pub fn decode_counts(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let (mut x, mut k, mut more) = (0i64, 0u32, true);
        while more {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::invalid("truncated RLE string"));
            };
            if !(48..48 + 64).contains(&b) {
                return Err(Error::invalid(format!("invalid RLE character {:?}", b as char)));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && c & 0x10 != 0 {
                x |= -1i64 << (5 * k);
            }
            if k > 12 {
                return Err(Error::invalid("RLE count overflows"));
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::invalid("negative RLE count")))
        .collect()
}

/// Inverse of [`decode_counts`].
pub fn encode_counts(counts: &[u64]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        let mut more = true;
        while more {
            let mut c = x & 0x1f;
            x >>= 5;
            more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
        }
    }
    out
}

/// Expands column-major runs into a row-major binary mask.
pub fn counts_to_mask(h: usize, w: usize, counts: &[u64]) -> Result<Vec<bool>> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::invalid(format!("RLE covers {total} pixels, expected {}", h * w)));
    }
    let mut mask = vec![false; h * w];
    let mut idx = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        for j in idx..idx + run as usize {
            if i % 2 == 1 {
                let (x, y) = (j / h, j % h);
                mask[y * w + x] = true;
            }
        }
        idx += run as usize;
    }
    Ok(mask)
}

fn segmentation(ann: &Value) -> Result<(usize, usize, Vec<u64>)> {
    let seg = ann.get("segmentation").ok_or_else(|| Error::invalid("annotation lacks `segmentation`"))?;
    let size = seg
        .get("size")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::invalid("segmentation lacks `size: [h, w]`"))?;
    let dim = |v: &Value| v.as_u64().map(|x| x as usize).ok_or_else(|| Error::invalid("size entries must be integers"));
    let (h, w) = (dim(&size[0])?, dim(&size[1])?);
    let counts = match seg.get("counts") {
        Some(Value::String(s)) => decode_counts(s)?,
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_u64().ok_or_else(|| Error::invalid("counts must be non-negative integers")))
            .collect::<Result<_>>()?,
        _ => return Err(Error::invalid("segmentation lacks `counts`")),
    };
    Ok((h, w, counts))
}

/// Converts an annotation file into a partition label map (smaller masks
/// win where masks overlap; uncovered pixels get 0).
pub fn masks_from_annotations(json: &str) -> Result<MaskLabelMap> {
    let doc: Value = serde_json::from_str(json).map_err(|e| Error::invalid(format!("annotation JSON: {e}")))?;
    let anns = doc
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid("no `annotations` array"))?;
    let mut size = None;
    let mut masks = Vec::with_capacity(anns.len());
    for ann in anns {
        let (h, w, counts) = segmentation(ann)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(Error::invalid("annotations disagree on the image size"));
        }
        masks.push(counts_to_mask(h, w, &counts)?);
    }
    let (h, w) = size.ok_or_else(|| Error::invalid("annotation file has no masks"))?;
    MaskLabelMap::from_overlapping(h, w, &masks)
}
