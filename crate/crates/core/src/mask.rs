//! Binary masks and 4-connected component labeling.

use std::collections::VecDeque;

use crate::{Error, Result};

/// Binary `height x width` raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Component labels of a mask: `0` is background, components are `1..=count`
/// numbered in raster order of their first pixel.
#[derive(Clone, Debug)]
pub struct Components {
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    /// Foreground pixel coordinates `(row, col)` in raster order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// 4-connected components via breadth-first flood fill.
    pub fn components(&self) -> Components {
        let (h, w) = (self.height, self.width);
        let mut labels = vec![0u32; h * w];
        let mut count = 0usize;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            count += 1;
            let label = count as u32;
            labels[start] = label;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (r, c) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if self.data[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                };
                if r > 0 {
                    visit(i - w);
                }
                if r + 1 < h {
                    visit(i + w);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < w {
                    visit(i + 1);
                }
            }
        }
        Components { labels, count }
    }

    /// The 4-connected component containing `(row, col)`, or `None` when the
    /// pixel is background.
    pub fn component_at(&self, row: usize, col: usize) -> Option<Mask> {
        if row >= self.height || col >= self.width || !self.get(row, col) {
            return None;
        }
        let comps = self.components();
        let label = comps.labels[row * self.width + col];
        Some(Mask {
            height: self.height,
            width: self.width,
            data: comps.labels.iter().map(|&l| l == label).collect(),
        })
    }
}

impl Components {
    /// Mask of component `label` (1-based).
    pub fn mask(&self, label: u32, height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            data: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Pixel indices of each component, index `k` holding label `k + 1`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}
