//! Labelled image datasets and the synthetic shapes task.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::tensor::Tensor;

/// Images stored `[c, h, w]` per sample with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    /// `shape` is `[c, h, w]`; `pixels` holds `labels.len()` samples in that layout.
    pub fn new(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self, TrainError> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(TrainError::Data(format!(
                "{} labels need {} pixels of shape {shape:?}, got {}",
                labels.len(),
                per * labels.len(),
                pixels.len()
            )));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.shape.iter().product::<usize>();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Stacks the given samples into an `[n, c, h, w]` batch, optionally
    /// mirroring some of them left to right.
    pub fn batch(&self, idx: &[usize], flip: &[bool]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for (k, &i) in idx.iter().enumerate() {
            let s = self.sample(i);
            if flip.get(k).copied().unwrap_or(false) {
                for row in s.chunks_exact(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(s);
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![idx.len(), c, h, w], data).expect("batch size"), labels)
    }

    /// CSV rows of `label` followed by the pixels in row-major `h, w, c`
    /// order, values in `[0, 1]`. `hwc` is the per-sample image shape.
    pub fn read_csv(input: impl Read, hwc: [usize; 3]) -> Result<Self, TrainError> {
        let [h, w, c] = hwc;
        let per = h * w * c;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let bad = |what: String| TrainError::Data(format!("row {}: {what}", row + 1));
            if row == 0 && record.get(0) == Some("label") {
                continue;
            }
            if record.len() != per + 1 {
                return Err(bad(format!("expected {} fields, got {}", per + 1, record.len())));
            }
            let label = record[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("bad label {:?}", &record[0])))?;
            let mut hwc_vals = Vec::with_capacity(per);
            for f in record.iter().skip(1) {
                let v = f.trim().parse::<f64>().map_err(|_| bad(format!("bad pixel {f:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("pixel {v} outside [0, 1]")));
                }
                hwc_vals.push(v);
            }
            for ch in 0..c {
                for i in 0..h * w {
                    pixels.push(hwc_vals[i * c + ch]);
                }
            }
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(TrainError::EmptyData);
        }
        Self::new([c, h, w], pixels, labels)
    }

    pub fn load_csv(path: impl AsRef<Path>, hwc: [usize; 3]) -> Result<Self, TrainError> {
        Self::read_csv(std::fs::File::open(path)?, hwc)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), TrainError> {
        let [c, h, w] = self.shape;
        let mut wr = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    header.push(format!("p{r}_{col}_{ch}"));
                }
            }
        }
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let s = self.sample(i);
            let mut rec = vec![self.labels[i].to_string()];
            for p in 0..h * w {
                for ch in 0..c {
                    rec.push(format!("{}", s[ch * h * w + p]));
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub const SHAPE_CLASSES: [&str; 4] = ["horizontal_bar", "vertical_bar", "square", "cross"];

/// Grayscale `side x side` images of four left-right symmetric shapes at
/// random positions and sizes, with additive noise clamped to `[0, 1]` and
/// quantised to steps of 0.01.
pub fn synthetic_shapes(n: usize, side: usize, seed: u64) -> Dataset {
    assert!(side >= 6, "shapes need at least 6x6 pixels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SHAPE_CLASSES.len();
        let mut img = vec![0.0; side * side];
        let mut set = |r: usize, c: usize, v: f64| img[r * side + c] = v;
        let intensity = rng.random_range(0.5..1.0);
        let len = rng.random_range(3..=side - 2);
        match label {
            0 | 1 => {
                let fixed = rng.random_range(0..side);
                let start = rng.random_range(0..=side - len);
                for k in start..start + len {
                    if label == 0 {
                        set(fixed, k, intensity);
                    } else {
                        set(k, fixed, intensity);
                    }
                }
            }
            2 => {
                let size = len.min(side - 1);
                let (r0, c0) = (rng.random_range(0..=side - size), rng.random_range(0..=side - size));
                for k in 0..size {
                    set(r0, c0 + k, intensity);
                    set(r0 + size - 1, c0 + k, intensity);
                    set(r0 + k, c0, intensity);
                    set(r0 + k, c0 + size - 1, intensity);
                }
            }
            _ => {
                let arm = rng.random_range(1..=(side - 1) / 2);
                let (r, c) = (rng.random_range(arm..side - arm), rng.random_range(arm..side - arm));
                for k in 0..=2 * arm {
                    set(r, c + k - arm, intensity);
                    set(r + k - arm, c, intensity);
                }
            }
        }
        for v in &mut img {
            let noisy = (*v + rng.random_range(-0.4..0.4)).clamp(0.0, 1.0);
            *v = (noisy * 100.0).round() / 100.0;
        }
        pixels.extend(img);
        labels.push(label);
    }
    Dataset::new([1, side, side], pixels, labels).expect("consistent sizes")
}
