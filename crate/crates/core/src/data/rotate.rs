//! In-plane rotation of square grayscale images.

use super::IMAGE_SIDE;

/// Rotates a `side`×`side` row-major image by `angle_deg` about its center
/// `((side-1)/2, (side-1)/2)`. Bilinear sampling; samples falling outside the
/// frame read as 0.
pub fn rotate_square(img: &[f32], side: usize, angle_deg: f64) -> Vec<f32> {
    assert_eq!(img.len(), side * side, "image is not {side}x{side}");
    if angle_deg == 0.0 {
        return img.to_vec();
    }
    let center = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let fetch = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= side as isize || c >= side as isize {
            0.0
        } else {
            f64::from(img[r as usize * side + c as usize])
        }
    };

    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            // Inverse map: where does output pixel (r, c) come from?
            let y = r as f64 - center;
            let x = c as f64 - center;
            let src_x = cos * x + sin * y + center;
            let src_y = -sin * x + cos * y + center;
            let r0 = src_y.floor();
            let c0 = src_x.floor();
            let fy = src_y - r0;
            let fx = src_x - c0;
            let (r0, c0) = (r0 as isize, c0 as isize);
            let v = fetch(r0, c0) * (1.0 - fy) * (1.0 - fx)
                + fetch(r0, c0 + 1) * (1.0 - fy) * fx
                + fetch(r0 + 1, c0) * fy * (1.0 - fx)
                + fetch(r0 + 1, c0 + 1) * fy * fx;
            out[r * side + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Rotates a flattened 28×28 digit.
pub fn rotate_image(img: &[f32], angle_deg: f64) -> Vec<f32> {
    rotate_square(img, IMAGE_SIDE, angle_deg)
}
