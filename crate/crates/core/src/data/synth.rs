use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSpec, Sample};
use crate::autodiff::Tensor;
use crate::data::pnm::{from_byte, to_byte};
use crate::error::{Error, Result};
use crate::eval::BBox;

/// Filled shape outlines available to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Triangle,
    Ellipse,
    Cross,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Ellipse,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Membership test in the shape's unit frame, `u, v ∈ [-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeKind::Rectangle => au <= 1.0 && av <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Cross => (au <= 1.0 && av <= 0.35) || (au <= 0.35 && av <= 1.0),
            ShapeKind::Diamond => au + av <= 1.0,
            ShapeKind::Ring => (0.25..=1.0).contains(&(u * u + v * v)),
        }
    }
}

/// Saturated object colours. Background pixels are always grey, so an
/// object pixel is exactly one whose channels differ.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.80, 0.15],
    [0.15, 0.25, 0.90],
    [0.90, 0.85, 0.10],
];

/// Largest class count the generator can produce.
pub const MAX_CLASSES: usize = ShapeKind::ALL.len() * PALETTE.len();

/// Shape and colour of a class. Consecutive classes cycle through colours
/// first, so any two shapes appear in every colour.
pub fn class_style(class: usize) -> (ShapeKind, [f64; 3]) {
    (ShapeKind::ALL[class / PALETTE.len()], PALETTE[class % PALETTE.len()])
}

/// A generated sample together with its rasterized object mask.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub sample: Sample,
    /// Row-major `S×S` object membership.
    pub mask: Vec<bool>,
}

fn quantize(v: f64) -> f64 {
    from_byte(to_byte(v))
}

/// Renders sample `index` of the dataset described by `spec`.
pub fn render(spec: &DatasetSpec, index: usize) -> Result<Rendered> {
    spec.validate()?;
    let s = spec.image_size;
    let label = index / spec.samples_per_class;
    if label >= spec.num_classes {
        return Err(Error::Index(format!("sample {index} is beyond the dataset")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (shape, color) = class_style(label);
    let sf = s as f64;

    let mask = loop {
        let rx = rng.random_range(0.15 * sf..0.3 * sf);
        let ry = rng.random_range(0.15 * sf..0.3 * sf);
        let cx = rng.random_range(rx..sf - rx);
        let cy = rng.random_range(ry..sf - ry);
        let mask: Vec<bool> = (0..s * s)
            .map(|i| {
                let u = ((i % s) as f64 + 0.5 - cx) / rx;
                let v = ((i / s) as f64 + 0.5 - cy) / ry;
                shape.contains(u, v)
            })
            .collect();
        // Tiny draws can miss every pixel centre; draw again.
        if mask.iter().any(|&m| m) {
            break mask;
        }
    };
    let gt_box = BBox::bounding(&mask, s).expect("mask is non-empty");

    let base = rng.random_range(0.3..0.7);
    let noise = spec.noise_level;
    let plane = s * s;
    let mut data = vec![0.0; 3 * plane];
    for (i, &inside) in mask.iter().enumerate() {
        if inside {
            for (c, &cv) in color.iter().enumerate() {
                data[c * plane + i] = quantize(cv + 0.1 * noise * rng.random_range(-1.0..1.0));
            }
        } else {
            let g = quantize(base + 0.5 * noise * rng.random_range(-1.0..1.0));
            for c in 0..3 {
                data[c * plane + i] = g;
            }
        }
    }
    let image = Tensor::new([3, s, s], data)?;
    Ok(Rendered { sample: Sample { image, label, gt_box: Some(gt_box) }, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_is_symmetric_about_the_vertical_axis() {
        for shape in ShapeKind::ALL {
            for k in 0..200 {
                let u = (k as f64 * 0.37).sin();
                let v = (k as f64 * 0.61).cos();
                assert_eq!(shape.contains(u, v), shape.contains(-u, v), "{shape:?}");
            }
        }
    }

    #[test]
    fn class_styles_are_distinct() {
        let styles: Vec<_> = (0..MAX_CLASSES).map(class_style).collect();
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                assert_ne!(styles[i], styles[j]);
            }
        }
    }

    #[test]
    fn values_are_quantized_to_bytes() {
        let spec = DatasetSpec { samples_per_class: 1, num_classes: 2, ..DatasetSpec::default() };
        let r = render(&spec, 1).unwrap();
        for &v in r.sample.image.data() {
            assert_eq!(from_byte(to_byte(v)), v);
        }
    }
}
