//! Square crops from facial keypoints, then a resize to a fixed size.

use crossnorm::data::{apply_crop, crop_from_keypoints, hull_mask, resize, Resample};
use crossnorm::Tensor;

fn main() -> crossnorm::Result<()> {
    let points = [(10.0, 10.0), (30.0, 10.0), (20.0, 40.0)];
    let crop = crop_from_keypoints(&points, 64, 64)?;
    println!("bbox {:?}  l {}  center {:?}  edge {}", crop.bbox, crop.l, crop.center, crop.edge);
    println!("x {:?}  y {:?}", crop.x_range(), crop.y_range());

    // near the border the square shifts inward rather than shrinking
    let shifted = crop_from_keypoints(&[(1.0, 1.0), (21.0, 1.0), (1.0, 21.0)], 40, 40)?;
    println!("border case: x {:?}  y {:?}", shifted.x_range(), shifted.y_range());

    let image = Tensor::from_vec(&[1, 1, 64, 64], (0..64 * 64).map(|i| (i % 64) as f32 / 63.0).collect())?;
    let patch = resize(&apply_crop(&image, &crop)?, 32, 32, Resample::Bilinear)?;
    println!("patch shape {:?}", patch.shape());
    let mask = hull_mask(&points, 64, 64)?;
    let inside = mask.data().iter().filter(|&&v| v > 0.5).count();
    println!("hull mask covers {inside} pixels");
    Ok(())
}
