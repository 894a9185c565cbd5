#![allow(dead_code)]

use segqc::dataset::Case;
use segqc::raster::GrayImage;
use segqc::retrieval::EmbeddingVector;
use segqc::synthval::{degrade_mask, SeededRng};
use segqc::LabelMask;

/// Ellipse phantom with a soft edge and mild texture.
pub fn phantom(n: usize, rng: &mut SeededRng) -> (GrayImage<f64>, LabelMask) {
    let c = n as f64 / 2.0;
    let cx = c + (rng.next_f64() - 0.5) * n as f64 * 0.15;
    let cy = c + (rng.next_f64() - 0.5) * n as f64 * 0.15;
    let rx = n as f64 * (0.2 + 0.1 * rng.next_f64());
    let ry = n as f64 * (0.2 + 0.1 * rng.next_f64());
    let inside = |x: usize, y: usize| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        (dx * dx + dy * dy).sqrt()
    };
    let phase = rng.next_f64() * 6.0;
    let image = GrayImage::from_fn(n, n, |x, y| {
        let r = inside(x, y);
        let body = 0.7 / (1.0 + ((r - 1.0) * 12.0).exp());
        0.15 + body + 0.03 * ((x as f64 * 0.4 + phase).sin() * (y as f64 * 0.3).cos())
    });
    let mask = LabelMask::from_fn(n, n, 2, |x, y| u8::from(inside(x, y) <= 1.0));
    (image, mask)
}

/// 8x8 block means of the image as a 64-dim embedding.
pub fn embed(id: &str, img: &GrayImage<f64>) -> EmbeddingVector {
    let (w, h) = img.dims();
    let mut v = vec![0f32; 64];
    for y in 0..h {
        for x in 0..w {
            v[(y * 8 / h) * 8 + x * 8 / w] += img.get(x, y) as f32;
        }
    }
    EmbeddingVector::new(id, v).unwrap()
}

/// A phantom case whose prediction is the ground truth degraded `severity` times.
pub fn phantom_case(id: &str, n: usize, severity: usize, seed: u64) -> Case<f64> {
    let mut rng = SeededRng::new(seed);
    let (image, gt) = phantom(n, &mut rng);
    let prediction = degrade_mask(&gt, severity, &mut rng);
    Case {
        id: id.to_string(),
        embedding: Some(embed(id, &image)),
        image,
        gt: Some(gt),
        prediction: Some(prediction),
    }
}
