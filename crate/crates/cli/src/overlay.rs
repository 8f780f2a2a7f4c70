use image::{Rgb, RgbImage};
use skinseg_core::BinaryMask;

pub const PREDICTION: Rgb<u8> = Rgb([255, 0, 0]);
pub const GROUND_TRUTH: Rgb<u8> = Rgb([0, 0, 255]);

/// Draws mask contours over a copy of `image`: ground truth in blue, then the
/// prediction in red on top.
pub fn draw_contours(image: &RgbImage, pred: &BinaryMask, gt: Option<&BinaryMask>) -> RgbImage {
    let mut out = image.clone();
    let layers = gt.map(|g| (g, GROUND_TRUTH)).into_iter().chain([(pred, PREDICTION)]);
    for (mask, colour) in layers {
        let edge = mask.boundary();
        for y in 0..edge.height() {
            for x in 0..edge.width() {
                if edge.get(y, x) {
                    out.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prediction_leaves_image_untouched() {
        let img = RgbImage::from_fn(6, 5, |x, y| Rgb([x as u8 * 10, y as u8 * 20, 7]));
        assert_eq!(draw_contours(&img, &BinaryMask::zeros(5, 6), None), img);
    }

    #[test]
    fn prediction_drawn_over_ground_truth() {
        let img = RgbImage::new(4, 4);
        let mut m = BinaryMask::zeros(4, 4);
        m.set(1, 1, true);
        m.set(1, 2, true);
        let out = draw_contours(&img, &m, Some(&m));
        assert_eq!(*out.get_pixel(1, 1), PREDICTION);
        assert_eq!(*out.get_pixel(0, 0), Rgb([0, 0, 0]));
        let mut gt = BinaryMask::zeros(4, 4);
        gt.set(3, 3, true);
        let out = draw_contours(&img, &m, Some(&gt));
        assert_eq!(*out.get_pixel(3, 3), GROUND_TRUTH);
    }
}
