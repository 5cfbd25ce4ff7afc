//! Flat parameter vectors with named tensor layouts.
//!
//! Networks store their parameters as one contiguous `Vec<f64>` plus a
//! layout describing each tensor's name, shape, and offset. The layout is
//! the contract between initialization, tape leaves, per-tensor optimizer
//! scaling, and checkpoints.

use ndarray::Array2;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, idx: usize) -> &TensorSpec {
        &self.specs[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Copy tensor `idx` out of a flat vector as a (rows × cols) matrix,
    /// row-major.
    pub fn tensor(&self, flat: &[f64], idx: usize) -> Array2<f64> {
        let spec = &self.specs[idx];
        Array2::from_shape_vec((spec.rows, spec.cols), flat[spec.range()].to_vec())
            .expect("layout shape")
    }

    /// Write a (rows × cols) matrix back into the flat vector.
    pub fn write_tensor(&self, flat: &mut [f64], idx: usize, value: &Array2<f64>) {
        let spec = &self.specs[idx];
        assert_eq!(value.dim(), (spec.rows, spec.cols), "tensor {} shape", spec.name);
        for (slot, v) in flat[spec.range()].iter_mut().zip(value.iter()) {
            *slot = *v;
        }
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    /// Register a tensor; returns its index in the layout.
    pub fn tensor(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let spec = TensorSpec { name: name.into(), rows, cols, offset: self.offset };
        self.offset += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn finish(self) -> ParamLayout {
        ParamLayout { specs: self.specs, total: self.offset }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_and_roundtrip() {
        let mut b = ParamLayout::builder();
        let w = b.tensor("w", 2, 3);
        let bias = b.tensor("b", 1, 2);
        let layout = b.finish();
        assert_eq!(layout.total(), 8);
        assert_eq!(layout.spec(w).offset, 0);
        assert_eq!(layout.spec(bias).offset, 6);
        assert_eq!(layout.index_of("b"), Some(bias));

        let mut flat = vec![0.0; layout.total()];
        let m = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        layout.write_tensor(&mut flat, w, &m);
        assert_eq!(layout.tensor(&flat, w), m);
        assert_eq!(&flat[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
