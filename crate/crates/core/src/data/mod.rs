//! Synthetic shapes dataset and the on-disk directory format.
//!
//! A dataset directory holds `index.txt` plus the images it references.
//! Each index line is `relative/path.ppm class [x0 y0 x1 y1]`; blank lines
//! and lines starting with `#` are ignored.

pub mod pnm;
pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::BBox;

pub const INDEX_FILE: &str = "index.txt";

/// One image with its image-level label. `gt_box` is for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3,S,S]`, values in `[0,1]`.
    pub image: Tensor,
    pub label: usize,
    pub gt_box: Option<BBox>,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.image.shape().last().copied().unwrap_or(0)
    }
}

/// Copies of `samples` with every box removed.
pub fn strip_boxes(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().map(|s| Sample { gt_box: None, ..s.clone() }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Background noise amplitude in `[0,1]`.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { num_classes: 8, samples_per_class: 64, image_size: 64, noise_level: 0.2, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {} must be at least 2", self.num_classes)));
        }
        if self.num_classes > synth::MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes = {} exceeds the {} available shape/colour pairs",
                self.num_classes,
                synth::MAX_CLASSES
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size = {} must be at least 16", self.image_size)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level = {} is outside [0, 1]", self.noise_level)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates the dataset in class-major order. Each sample draws from its
/// own stream of the seeded generator, so the result does not depend on
/// generation order.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.len()).map(|i| synth::render(spec, i).map(|r| r.sample)).collect()
}

fn image_name(i: usize) -> String {
    format!("images/{i:05}.ppm")
}

/// Writes `samples` as `dir/images/NNNNN.ppm` plus `dir/index.txt`.
pub fn save(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::from("# path class [x0 y0 x1 y1]\n");
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i);
        pnm::write_ppm(&dir.join(&name), &s.image)?;
        match &s.gt_box {
            Some(b) => writeln!(index, "{name} {} {b}", s.label),
            None => writeln!(index, "{name} {}", s.label),
        }
        .expect("writing to a String");
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory written by [`save`] or by hand.
pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| Error::load(&index_path, format!("line {}: {msg}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 6 {
            return Err(fail(format!("expected 2 or 6 fields, found {}", fields.len())));
        }
        let label: usize = fields[1].parse().map_err(|_| fail(format!("bad class id {:?}", fields[1])))?;
        let image = pnm::read_ppm(&dir.join(fields[0])).map_err(|e| fail(e.to_string()))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h != w {
            return Err(fail(format!("image is {w}x{h}, expected a square")));
        }
        let gt_box = if fields.len() == 6 {
            let mut v = [0usize; 4];
            for (slot, f) in v.iter_mut().zip(&fields[2..]) {
                *slot = f.parse().map_err(|_| fail(format!("bad box coordinate {f:?}")))?;
            }
            let [x0, y0, x1, y1] = v;
            if x1 <= x0 || y1 <= y0 || x1 > w || y1 > h {
                return Err(fail(format!("box {x0} {y0} {x1} {y1} is empty or outside the {w}x{h} image")));
            }
            Some(BBox { x0, y0, x1, y1 })
        } else {
            None
        };
        samples.push(Sample { image, label, gt_box });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { num_classes: 3, samples_per_class: 4, image_size: 32, ..DatasetSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DatasetSpec { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn classes_are_balanced_and_ordered() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.len(), 12);
        for k in 0..3 {
            assert_eq!(s.iter().filter(|x| x.label == k).count(), 4);
        }
        assert!(s.windows(2).all(|w| w[0].label <= w[1].label));
    }

    #[test]
    fn boxes_match_a_channel_difference_scan() {
        // background pixels are grey, object pixels are not
        let spec = DatasetSpec { num_classes: 8, samples_per_class: 6, ..DatasetSpec::default() };
        for s in generate(&spec).unwrap() {
            let n = spec.image_size;
            let plane = n * n;
            let d = s.image.data();
            let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
            for i in 0..plane {
                if d[i] != d[plane + i] || d[i] != d[2 * plane + i] {
                    let (x, y) = (i % n, i / n);
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
            assert_eq!(s.gt_box, Some(BBox { x0, y0, x1, y1 }));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            DatasetSpec { num_classes: 1, ..small() },
            DatasetSpec { num_classes: 25, ..small() },
            DatasetSpec { image_size: 15, ..small() },
            DatasetSpec { noise_level: 1.5, ..small() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small()).unwrap();
        save(dir.path(), &samples).unwrap();
        assert_eq!(load(dir.path()).unwrap(), samples);

        let first = fs::read(dir.path().join(INDEX_FILE)).unwrap();
        save(dir.path(), &samples).unwrap();
        assert_eq!(fs::read(dir.path().join(INDEX_FILE)).unwrap(), first);
    }

    fn index_error(lines: &str) -> String {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small()).unwrap();
        save(dir.path(), &samples[..1]).unwrap();
        fs::write(dir.path().join(INDEX_FILE), lines).unwrap();
        load(dir.path()).unwrap_err().to_string()
    }

    #[test]
    fn index_without_box_leaves_it_absent() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small()).unwrap();
        save(dir.path(), &samples[..1]).unwrap();
        fs::write(dir.path().join(INDEX_FILE), "\n# c\nimages/00000.ppm 0\n").unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].gt_box, None);
    }

    #[test]
    fn load_errors_name_the_line() {
        let e = index_error("# header\nimages/00000.ppm 0 5 2 5 9\n");
        assert!(e.contains("line 2"), "{e}");
        let e = index_error("images/00000.ppm 0 0 0 33 4\n");
        assert!(e.contains("line 1") && e.contains("outside"), "{e}");
        let e = index_error("images/00000.ppm 0\nimages/missing.ppm 1\n");
        assert!(e.contains("line 2"), "{e}");
        let e = index_error("images/00000.ppm zero\n");
        assert!(e.contains("line 1"), "{e}");
        let e = index_error("images/00000.ppm 0 1 2\n");
        assert!(e.contains("fields"), "{e}");
    }
}
