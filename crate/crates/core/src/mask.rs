//! Binary segmentation masks: run-length coding, morphology, bounding boxes
//! and deterministic PNG round-trips.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A per-pixel 0/1 mask tied to the image it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub image_id: String,
    pub data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(image_id: impl Into<String>, data: Array2<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1), "mask values must be 0/1");
        BinaryMask { image_id: image_id.into(), data }
    }

    pub fn zeros(image_id: impl Into<String>, h: usize, w: usize) -> Self {
        BinaryMask { image_id: image_id.into(), data: Array2::zeros((h, w)) }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Inclusive bounding box `(r0, c0, r1, c1)` of the foreground, if any.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut c0) = (usize::MAX, usize::MAX);
        let (mut r1, mut c1) = (0usize, 0usize);
        let mut any = false;
        for ((r, c), &v) in self.data.indexed_iter() {
            if v != 0 {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
        any.then_some((r0, c0, r1, c1))
    }

    /// Fraction of pixels that differ from `other` (same shape required).
    pub fn change_fraction(&self, other: &BinaryMask) -> f64 {
        assert_eq!(self.data.dim(), other.data.dim(), "mask shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(other.data.iter())
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / self.data.len() as f64
    }

    /// Morphological dilation with a Euclidean disc of radius `r`.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        self.morph(r as i64, true)
    }

    /// Morphological erosion with a Euclidean disc of radius `r`.
    pub fn erode(&self, r: usize) -> BinaryMask {
        self.morph(r as i64, false)
    }

    fn morph(&self, r: i64, dilate: bool) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let (h, w) = self.data.dim();
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    offsets.push((dy, dx));
                }
            }
        }
        let mut out = Array2::<u8>::zeros((h, w));
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut hit = !dilate;
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    let v = if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        0
                    } else {
                        self.data[[ny as usize, nx as usize]]
                    };
                    if dilate {
                        if v != 0 {
                            hit = true;
                            break;
                        }
                    } else if v == 0 {
                        hit = false;
                        break;
                    }
                }
                out[[y as usize, x as usize]] = hit as u8;
            }
        }
        BinaryMask { image_id: self.image_id.clone(), data: out }
    }

    /// Row-major run lengths, starting with a (possibly zero) run of
    /// background. Runs always sum to `h * w`.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut count = 0u32;
        for &v in self.data.iter() {
            let v = (v != 0) as u8;
            if v == current {
                count += 1;
            } else {
                runs.push(count);
                current = v;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    pub fn from_rle(image_id: impl Into<String>, h: usize, w: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::Protocol(format!(
                "rle covers {total} pixels, mask is {h}x{w}"
            )));
        }
        let mut flat = Vec::with_capacity(h * w);
        let mut value = 0u8;
        for &run in runs {
            flat.extend(std::iter::repeat(value).take(run as usize));
            value ^= 1;
        }
        let data = Array2::from_shape_vec((h, w), flat).expect("rle length checked");
        Ok(BinaryMask { image_id: image_id.into(), data })
    }

    /// Encode as an 8-bit grayscale PNG with foreground = 255.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w) = self.data.dim();
        let buf: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from mask");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn write_png(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Decode a grayscale PNG; any value above 127 is foreground.
    pub fn from_png_bytes(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("png decode: {e}")))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            (img.get_pixel(c as u32, r as u32)[0] > 127) as u8
        });
        Ok(BinaryMask { image_id: image_id.into(), data })
    }

    pub fn read_png(image_id: impl Into<String>, path: &std::path::Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_png_bytes(image_id, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = Array2::from_shape_fn((h, w), |(r, c)| rows[r][c]);
        BinaryMask::new("m", data)
    }

    #[test]
    fn rle_round_trip_and_boundaries() {
        let m = mask(&[&[0, 0, 1], &[1, 1, 0], &[0, 0, 0]]);
        let rle = m.to_rle();
        assert_eq!(rle, vec![2, 3, 4]);
        let back = BinaryMask::from_rle("m", 3, 3, &rle).unwrap();
        assert_eq!(back.data, m.data);

        // all-ones starts with a zero-length background run
        let ones = mask(&[&[1, 1], &[1, 1]]);
        assert_eq!(ones.to_rle(), vec![0, 4]);
        assert_eq!(BinaryMask::from_rle("m", 2, 2, &[0, 4]).unwrap().data, ones.data);

        assert!(BinaryMask::from_rle("m", 2, 2, &[1, 2]).is_err());
    }

    #[test]
    fn bbox_inclusive_single_pixel() {
        let mut data = Array2::<u8>::zeros((8, 8));
        data[[3, 5]] = 1;
        let m = BinaryMask::new("m", data);
        assert_eq!(m.bbox(), Some((3, 5, 3, 5)));
        assert_eq!(BinaryMask::zeros("m", 4, 4).bbox(), None);
    }

    #[test]
    fn dilate_then_erode_recovers_disc() {
        // a compact blob is (nearly) invariant under dilate-then-erode
        let mut data = Array2::<u8>::zeros((21, 21));
        for r in 0..21i64 {
            for c in 0..21i64 {
                if (r - 10) * (r - 10) + (c - 10) * (c - 10) <= 25 {
                    data[[r as usize, c as usize]] = 1;
                }
            }
        }
        let m = BinaryMask::new("m", data);
        let closed = m.dilate(2).erode(2);
        assert_eq!(closed.data, m.data);
        assert!(m.dilate(2).area() > m.area());
        assert!(m.erode(2).area() < m.area());
    }

    #[test]
    fn png_round_trip_is_exact_and_deterministic() {
        let m = mask(&[&[0, 1, 0], &[1, 1, 1], &[0, 1, 0]]);
        let b1 = m.to_png_bytes().unwrap();
        let b2 = m.to_png_bytes().unwrap();
        assert_eq!(b1, b2);
        let back = BinaryMask::from_png_bytes("m", &b1).unwrap();
        assert_eq!(back.data, m.data);
    }

    #[test]
    fn change_fraction_counts_flips() {
        let a = mask(&[&[0, 1], &[1, 0]]);
        let b = mask(&[&[0, 1], &[0, 0]]);
        assert_eq!(a.change_fraction(&b), 0.25);
        assert_eq!(a.change_fraction(&a), 0.0);
        let _ = array![[0u8]]; // keep ndarray macro import exercised
    }
}
