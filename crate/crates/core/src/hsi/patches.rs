//! Sliding-window patch extraction with mirror (symmetric) border padding.

use ndarray::{Array2, Array4};

use super::{HyperspectralCube, LabelMap, PatchSet};
use crate::error::{Error, Result};

/// Which pixels become patch centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchScope {
    /// Only pixels with a nonzero label.
    Labeled,
    /// Every pixel.
    All,
}

/// Symmetric reflection of an out-of-range index into `0..n`
/// (the edge pixel is repeated, so a single pixel pads to itself).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Extracts one S×S×K patch centered on each selected pixel.
pub fn extract_patches(
    cube: &HyperspectralCube,
    labels: &LabelMap,
    window: usize,
    scope: PatchScope,
) -> Result<PatchSet> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Validation(format!("window must be odd, got {window}")));
    }
    let (h, w, k) = cube.data.dim();
    if labels.labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "label map {:?} does not match cube {h}x{w}",
            labels.labels.dim()
        )));
    }
    let half = (window / 2) as isize;
    let mut centers = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if scope == PatchScope::All || labels.labels[[r, c]] > 0 {
                centers.push((r, c));
            }
        }
    }
    let n = centers.len();
    let mut patches = Array4::<f32>::zeros((n, window, window, k));
    let mut coords = Array2::<u32>::zeros((n, 2));
    let mut out_labels = Vec::with_capacity(n);
    for (p, &(r, c)) in centers.iter().enumerate() {
        for dy in -half..=half {
            let sy = mirror(r as isize + dy, h);
            let py = (dy + half) as usize;
            for dx in -half..=half {
                let sx = mirror(c as isize + dx, w);
                let px = (dx + half) as usize;
                for b in 0..k {
                    patches[[p, py, px, b]] = cube.data[[sy, sx, b]];
                }
            }
        }
        coords[[p, 0]] = r as u32;
        coords[[p, 1]] = c as u32;
        out_labels.push(labels.labels[[r, c]]);
    }
    Ok(PatchSet { patches, coords, labels: out_labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, array};

    fn labels_2class(h: usize, w: usize) -> LabelMap {
        let mut l = Array2::<i32>::zeros((h, w));
        l[[0, 0]] = 1;
        if h * w > 1 {
            l[[h - 1, w - 1]] = 2;
        }
        LabelMap { labels: l }
    }

    #[test]
    fn single_pixel_mirror_fills_patch() {
        let data = Array3::from_elem((1, 1, 3), 7.5f32);
        let cube = HyperspectralCube::new(data, "one").unwrap();
        let labels = LabelMap { labels: array![[1]] };
        let set = extract_patches(&cube, &labels, 3, PatchScope::All).unwrap();
        assert_eq!(set.patches.dim(), (1, 3, 3, 3));
        assert!(set.patches.iter().all(|&v| v == 7.5));
        assert_eq!(set.coords[[0, 0]], 0);
        assert_eq!(set.labels, vec![1]);
    }

    #[test]
    fn corner_patch_matches_hand_unrolled_mirror_oracle() {
        // 5x5 single-band ramp: value = 10*r + c.
        let data = Array3::from_shape_fn((5, 5, 1), |(r, c, _)| (10 * r + c) as f32);
        let cube = HyperspectralCube::new(data, "ramp").unwrap();
        let set = extract_patches(&cube, &labels_2class(5, 5), 3, PatchScope::All).unwrap();
        // First patch is centered at (0,0). Symmetric padding maps index -1 -> 0.
        let expect = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [10.0, 10.0, 11.0]];
        for (dy, row) in expect.iter().enumerate() {
            for (dx, want) in row.iter().enumerate() {
                assert_eq!(set.patches[[0, dy, dx, 0]], *want, "at ({dy},{dx})");
            }
        }
    }

    #[test]
    fn patch_center_equals_cube_value() {
        let data = Array3::from_shape_fn((4, 6, 2), |(r, c, b)| (100 * r + 10 * c + b) as f32);
        let cube = HyperspectralCube::new(data.clone(), "ctr").unwrap();
        let set = extract_patches(&cube, &labels_2class(4, 6), 5, PatchScope::All).unwrap();
        for p in 0..set.len() {
            let (r, c) = (set.coords[[p, 0]] as usize, set.coords[[p, 1]] as usize);
            for b in 0..2 {
                assert_eq!(set.patches[[p, 2, 2, b]], data[[r, c, b]]);
            }
        }
    }

    #[test]
    fn salinas_protocol_patch_shape() {
        // Reduced SA-style cube with 15 channels: patch shape is 27x27x15.
        let data = Array3::from_shape_fn((40, 40, 15), |(r, c, b)| (r + c + b) as f32);
        let cube = HyperspectralCube::new(data, "sa").unwrap();
        let mut l = Array2::<i32>::zeros((40, 40));
        l[[5, 5]] = 1;
        l[[30, 30]] = 2;
        let labels = LabelMap { labels: l };
        let set = extract_patches(&cube, &labels, 27, PatchScope::Labeled).unwrap();
        assert_eq!(set.patches.dim(), (2, 27, 27, 15));
    }

    #[test]
    fn labeled_scope_count_matches_nonzero_labels() {
        let data = Array3::from_elem((6, 6, 2), 1.0f32);
        let cube = HyperspectralCube::new(data, "cnt").unwrap();
        let mut l = Array2::<i32>::zeros((6, 6));
        for i in 0..6 {
            l[[i, i]] = 1 + (i % 3) as i32;
        }
        let labels = LabelMap { labels: l };
        let set = extract_patches(&cube, &labels, 3, PatchScope::Labeled).unwrap();
        assert_eq!(set.len(), 6);
        let all = extract_patches(&cube, &labels, 3, PatchScope::All).unwrap();
        assert_eq!(all.len(), 36);
    }

    #[test]
    fn even_window_rejected() {
        let data = Array3::from_elem((3, 3, 1), 0.0f32);
        let cube = HyperspectralCube::new(data, "even").unwrap();
        let err = extract_patches(&cube, &labels_2class(3, 3), 4, PatchScope::All).unwrap_err();
        assert_eq!(err.category(), "validation");
    }
}
