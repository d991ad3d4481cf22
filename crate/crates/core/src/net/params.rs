use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Name and shape of one parameter tensor inside a flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor shapes. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
}

/// Handle to a tensor in a [`Layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(usize);

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let spec = ParamSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
        };
        self.total += spec.len();
        self.specs.push(spec);
        Slot(self.specs.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn spec(&self, slot: Slot) -> &ParamSpec {
        &self.specs[slot.0]
    }
}

/// Flat parameter (or gradient) buffer with a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layout: Layout,
    pub values: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    /// Weights `N(0, std^2)`, tensors whose name ends in `bias` start at zero.
    pub fn init_normal(layout: Layout, std: f64, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(layout);
        for spec in p.layout.specs.clone() {
            if spec.name.ends_with("bias") {
                continue;
            }
            for v in &mut p.values[spec.offset..spec.offset + spec.len()] {
                *v = std * rng.normal();
            }
        }
        p
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn mat(&self, slot: Slot) -> ArrayView2<'_, f64> {
        let s = self.layout.spec(slot);
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.offset..s.offset + s.len()])
            .expect("layout shapes are consistent")
    }

    pub fn mat_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        let s = self.layout.spec(slot).clone();
        ArrayViewMut2::from_shape(
            (s.rows, s.cols),
            &mut self.values[s.offset..s.offset + s.len()],
        )
        .expect("layout shapes are consistent")
    }

    pub fn vec(&self, slot: Slot) -> ArrayView1<'_, f64> {
        let s = self.layout.spec(slot);
        ArrayView1::from(&self.values[s.offset..s.offset + s.len()])
    }

    pub fn vec_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, f64> {
        let s = self.layout.spec(slot).clone();
        ArrayViewMut1::from(&mut self.values[s.offset..s.offset + s.len()])
    }

    /// `self += other`, requiring identical layouts.
    pub fn add_assign(&mut self, other: &Params) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn check_same(&self, other: &Params) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    pub fn l2_distance(&self, other: &Params) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.layout
            .specs
            .iter()
            .map(|s| TensorRecord {
                name: s.name.clone(),
                shape: [s.rows, s.cols],
                values: self.values[s.offset..s.offset + s.len()].to_vec(),
            })
            .collect()
    }

    /// Fill from named records; every tensor of the layout must be present with its shape.
    pub fn from_records(layout: Layout, records: &[TensorRecord]) -> Result<Self> {
        let mut p = Self::zeros(layout);
        if records.len() != p.layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                p.layout.specs.len(),
                records.len()
            )));
        }
        for spec in p.layout.specs.clone() {
            let rec = records
                .iter()
                .find(|r| r.name == spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if rec.shape != [spec.rows, spec.cols] || rec.values.len() != spec.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} ({} values), expected [{}, {}]",
                    spec.name,
                    rec.shape,
                    rec.values.len(),
                    spec.rows,
                    spec.cols
                )));
            }
            p.values[spec.offset..spec.offset + spec.len()].copy_from_slice(&rec.values);
        }
        if !p.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(p)
    }
}

/// Serialized tensor: row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: version tag, network kind, its config and tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub params: Vec<TensorRecord>,
}

impl<C: Serialize + for<'de> Deserialize<'de>> Checkpoint<C> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    hint: format!("{kind} checkpoint not found"),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                ck.kind
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> (Layout, Slot, Slot) {
        let mut l = Layout::default();
        let w = l.add("w", 2, 3);
        let b = l.add("bias", 1, 3);
        (l, w, b)
    }

    #[test]
    fn views_index_the_flat_buffer() {
        let (l, w, b) = layout();
        let mut p = Params::zeros(l);
        p.mat_mut(w)[[1, 2]] = 5.0;
        p.vec_mut(b)[0] = 7.0;
        assert_eq!(p.values[5], 5.0);
        assert_eq!(p.values[6], 7.0);
        assert_eq!(p.len(), 9);
    }

    #[test]
    fn init_leaves_biases_at_zero() {
        let (l, _, b) = layout();
        let p = Params::init_normal(l, 0.02, &mut SeededRng::new(0, 0));
        assert!(p.vec(b).iter().all(|&v| v == 0.0));
        assert!(p.values[..6].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn records_validate_shapes() {
        let (l, _, _) = layout();
        let p = Params::init_normal(l.clone(), 1.0, &mut SeededRng::new(1, 0));
        let recs = p.to_records();
        assert_eq!(Params::from_records(l.clone(), &recs).unwrap(), p);
        let mut bad = recs.clone();
        bad[0].shape = [3, 2];
        assert!(Params::from_records(l.clone(), &bad).is_err());
        assert!(Params::from_records(l, &recs[..1]).is_err());
    }
}
