use super::TextureImage;
use crate::error::{Error, Result};

/// Projective map `(u, v) -> (x, y)` stored as the 8 free entries of a 3×3
/// matrix whose last entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 8]);

impl Homography {
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * u + h[7] * v + 1.0;
        ((h[0] * u + h[1] * v + h[2]) / w, (h[3] * u + h[4] * v + h[5]) / w)
    }
}

fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = a[i][8] / a[i][i];
    }
    Some(x)
}

/// Homography taking the four points `src` onto `dst`.
pub fn homography(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Result<Homography> {
    for pts in [&src, &dst] {
        let scale = pts
            .iter()
            .flat_map(|&(x, y)| [x.abs(), y.abs()])
            .fold(1.0f64, f64::max);
        for skip in 0..4 {
            let t: Vec<(f64, f64)> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
            let cross = (t[1].0 - t[0].0) * (t[2].1 - t[0].1) - (t[1].1 - t[0].1) * (t[2].0 - t[0].0);
            if cross.abs() <= 1e-9 * scale * scale {
                return Err(Error::Geometry(format!("three of the corners {pts:?} are collinear")));
            }
        }
    }
    let mut a = [[0.0; 9]; 8];
    for (k, (&(u, v), &(x, y))) in src.iter().zip(&dst).enumerate() {
        a[2 * k] = [u, v, 1.0, 0.0, 0.0, 0.0, -u * x, -v * x, x];
        a[2 * k + 1] = [0.0, 0.0, 0.0, u, v, 1.0, -u * y, -v * y, y];
    }
    solve8(a)
        .map(Homography)
        .ok_or_else(|| Error::Geometry("corner configuration gives a singular homography".into()))
}

/// Bilinear RGB sample at continuous image coordinates (x along columns,
/// y along rows, pixel centers at half-integers), clamped at the borders.
pub fn bilinear_rgb(img: &TextureImage, x: f64, y: f64) -> [f64; 3] {
    let fx = (x - 0.5).clamp(0.0, (img.width - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (img.height - 1) as f64);
    let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(img.width - 1), (r0 + 1).min(img.height - 1));
    let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
    let p = |r: usize, c: usize, ch: usize| f64::from(img.pixels[(r * img.width + c) * 3 + ch]);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = p(r0, c0, ch) * (1.0 - tx) + p(r0, c1, ch) * tx;
        let bottom = p(r1, c0, ch) * (1.0 - tx) + p(r1, c1, ch) * tx;
        *o = top * (1.0 - ty) + bottom * ty;
    }
    out
}

/// Maps the quad `corners` (top-left, top-right, bottom-right, bottom-left, in
/// image coordinates) onto an `out_height × out_width` rectangle.
pub fn rectify_image(
    img: &TextureImage,
    corners: [(f64, f64); 4],
    out_height: usize,
    out_width: usize,
) -> Result<TextureImage> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Parameter("output size must be non-zero".into()));
    }
    let unit = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let h = homography(unit, corners)?;
    let mut pixels = Vec::with_capacity(out_height * out_width * 3);
    for i in 0..out_height {
        let v = (i as f64 + 0.5) / out_height as f64;
        for j in 0..out_width {
            let u = (j as f64 + 0.5) / out_width as f64;
            let (x, y) = h.apply(u, v);
            pixels.extend(bilinear_rgb(img, x, y).map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    TextureImage::new(out_height, out_width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(h: usize, w: usize) -> TextureImage {
        let px = (0..h * w * 3).map(|i| ((i * 7919) % 251) as u8).collect();
        TextureImage::new(h, w, px).unwrap()
    }

    #[test]
    fn identity_corners_reproduce_image() {
        let img = noise_image(13, 9);
        let corners = [(0.0, 0.0), (9.0, 0.0), (9.0, 13.0), (0.0, 13.0)];
        let out = rectify_image(&img, corners, 13, 9).unwrap();
        assert_eq!(out, img);
        assert_eq!(rectify_image(&out, corners, 13, 9).unwrap(), out);
    }

    #[test]
    fn axis_aligned_subrectangle_is_a_crop() {
        let img = noise_image(20, 16);
        let out = rectify_image(&img, [(4.0, 3.0), (12.0, 3.0), (12.0, 13.0), (4.0, 13.0)], 10, 8).unwrap();
        for r in 0..10 {
            for c in 0..8 {
                assert_eq!(out.pixel(r, c), img.pixel(r + 3, c + 4));
            }
        }
    }

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let dst = [(10.0, 5.0), (90.0, 12.0), (80.0, 70.0), (3.0, 60.0)];
        let h = homography(src, dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (x, y) = h.apply(s.0, s.1);
            assert!((x - d.0).abs() < 1e-9 && (y - d.1).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_corners_are_rejected() {
        let img = noise_image(4, 4);
        let bad = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 3.0)];
        assert!(matches!(rectify_image(&img, bad, 4, 4), Err(Error::Geometry(_))));
    }
}
