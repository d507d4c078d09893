//! The seven-axis `(N,T,F,C,D,H,W)` batch format, its mapping from native
//! dataset layouts, per-channel normalization and the on-disk container.

mod container;
mod descriptor;
mod revin;

pub use container::{Container, ContainerMeta};
pub use descriptor::{builtin, scalar_fields, Axis, DatasetDescriptor, FieldSpec, NativeLayout, BUILTIN_NAMES};
pub use revin::{compute_revin_stats, RevinStats, StatRecord, REVIN_EPS};

use crate::error::{Error, Result};
use crate::tensor::{inverse_permutation, DenseArray};

/// Dense `(B,T,F,C,D,H,W)` array together with the native component count
/// of each field.
#[derive(Clone, Debug, PartialEq)]
pub struct UptfTensor {
    data: DenseArray,
    components: Vec<usize>,
}

impl UptfTensor {
    pub fn new(data: DenseArray, components: Vec<usize>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 7 || s.contains(&0) {
            return Err(Error::shape(format!("UPTF tensor needs 7 non-empty axes, got {s:?}")));
        }
        if components.len() != s[2] || components.iter().any(|&c| c != 1 && c != s[3]) {
            return Err(Error::shape(format!("field components {components:?} incompatible with F={} C={}", s[2], s[3])));
        }
        Ok(Self { data, components })
    }

    /// A tensor whose every field carries all `C` components natively.
    pub fn dense(data: DenseArray) -> Result<Self> {
        let (f, c) = match data.shape() {
            s if s.len() == 7 => (s[2], s[3]),
            s => return Err(Error::shape(format!("UPTF tensor needs 7 axes, got {s:?}"))),
        };
        Self::new(data, vec![c; f])
    }

    pub fn shape(&self) -> [usize; 7] {
        self.data.shape().try_into().expect("seven axes")
    }

    pub fn data(&self) -> &DenseArray {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DenseArray {
        &mut self.data
    }

    pub fn into_array(self) -> DenseArray {
        self.data
    }

    pub fn components(&self) -> &[usize] {
        &self.components
    }

    /// Same field composition, new values.
    pub fn with_data(&self, data: DenseArray) -> Result<Self> {
        Self::new(data, self.components.clone())
    }

    /// `(F, C)` flags: true where the entry is native rather than a broadcast copy.
    pub fn canonical_mask(&self) -> Vec<bool> {
        let c = self.shape()[3];
        self.components.iter().flat_map(|&k| (0..c).map(move |j| j < k)).collect()
    }

    /// Full-shape 0/1 weights selecting canonical entries.
    pub fn mask_weights(&self) -> DenseArray {
        let s = self.shape();
        let mask = self.canonical_mask();
        let vol = s[4] * s[5] * s[6];
        let fc = s[2] * s[3];
        DenseArray::from_fn(&s, |i| if mask[(i / vol) % fc] { 1.0 } else { 0.0 })
    }

    /// Time steps `[start, start+len)`.
    pub fn narrow_time(&self, start: usize, len: usize) -> Result<Self> {
        self.with_data(self.data.narrow(1, start, len)?)
    }

    /// Trajectories `[start, start+len)`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        self.with_data(self.data.narrow(0, start, len)?)
    }

    /// Stacks tensors with identical composition along the batch axis.
    pub fn concat_batch(parts: &[UptfTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("no tensors to stack".into()))?;
        if parts.iter().any(|p| p.components != first.components) {
            return Err(Error::shape("stacking tensors with different field composition"));
        }
        let arrays: Vec<&DenseArray> = parts.iter().map(|p| &p.data).collect();
        Self::new(DenseArray::concat(&arrays, 0)?, first.components.clone())
    }

    /// Joins tensors with identical composition along the time axis.
    pub fn concat_time(parts: &[UptfTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("no tensors to join".into()))?;
        if parts.iter().any(|p| p.components != first.components) {
            return Err(Error::shape("joining tensors with different field composition"));
        }
        let arrays: Vec<&DenseArray> = parts.iter().map(|p| &p.data).collect();
        Self::new(DenseArray::concat(&arrays, 1)?, first.components.clone())
    }

    /// Copies broadcast components from their canonical entry, so that
    /// scalar fields are exactly replicated along `C`.
    pub fn rebroadcast(&mut self) {
        let s = self.shape();
        let vol = s[4] * s[5] * s[6];
        let c = s[3];
        let comps = self.components.clone();
        let data = self.data.data_mut();
        for bt in 0..s[0] * s[1] {
            for (f, &k) in comps.iter().enumerate() {
                let base = (bt * s[2] + f) * c * vol;
                for j in k..c {
                    data.copy_within(base..base + vol, base + j * vol);
                }
            }
        }
    }
}

/// A batch in a dataset's native layout.
#[derive(Clone, Debug, PartialEq)]
pub enum NativeBatch {
    Packed(DenseArray),
    Fields(Vec<DenseArray>),
}

impl NativeBatch {
    pub fn arrays(&self) -> Vec<&DenseArray> {
        match self {
            NativeBatch::Packed(a) => vec![a],
            NativeBatch::Fields(v) => v.iter().collect(),
        }
    }

    /// `(batch, time)` extents.
    pub fn batch_time(&self) -> (usize, usize) {
        let a = self.arrays()[0];
        (a.shape()[0], a.shape().get(1).copied().unwrap_or(0))
    }
}

/// Packed axes sorted into canonical order, with the permutation taking the
/// native array `[b, axes...]` to that order.
fn canonical_order(axes: &[crate::uptf::Axis]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..axes.len()).collect();
    order.sort_by_key(|&i| axes[i].canonical());
    std::iter::once(0).chain(order.into_iter().map(|i| i + 1)).collect()
}

fn check_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got.len() != want.len() || got[2..] != want[2..] {
        return Err(Error::Descriptor(format!("{what}: got shape {got:?}, expected {want:?} (batch and time free)")));
    }
    Ok(())
}

/// Converts a native batch to UPTF, broadcasting scalar fields to `C_max`
/// and inserting singleton axes for missing dimensions.
pub fn to_uptf(batch: &NativeBatch, desc: &DatasetDescriptor) -> Result<UptfTensor> {
    let comps: Vec<usize> = desc.fields.iter().map(|f| f.components).collect();
    match (batch, &desc.layout) {
        (NativeBatch::Packed(a), NativeLayout::Packed { axes }) => {
            let s = a.shape();
            if s.len() != axes.len() + 1 {
                return Err(Error::Descriptor(format!("{}: rank {} for axes {axes:?}", desc.name, s.len())));
            }
            let t_pos = 1 + axes.iter().position(|&x| x == Axis::T).expect("validated");
            let want = {
                let mut w = desc.native_shapes(s[0], s[t_pos]).remove(0);
                // move time next to batch so `check_shape` can skip both
                let t = w.remove(t_pos);
                w.insert(1, t);
                w
            };
            let mut got = s.to_vec();
            let t = got.remove(t_pos);
            got.insert(1, t);
            check_shape(&desc.name, &got, &want)?;
            let permuted = a.permute(&canonical_order(axes))?;
            UptfTensor::new(permuted.into_reshape(&desc.uptf_shape(s[0], s[t_pos]))?, comps)
        }
        (NativeBatch::Fields(arrays), NativeLayout::PerField) => {
            if arrays.len() != desc.num_fields() {
                return Err(Error::Descriptor(format!("{}: {} field arrays for {} fields", desc.name, arrays.len(), desc.num_fields())));
            }
            let (b, t) = (arrays[0].shape()[0], arrays[0].shape()[1]);
            let shapes = desc.native_shapes(b, t);
            for (a, want) in arrays.iter().zip(&shapes) {
                if a.shape() != want.as_slice() {
                    return Err(Error::Descriptor(format!("{}: field array {:?}, expected {want:?}", desc.name, a.shape())));
                }
            }
            let shape = desc.uptf_shape(b, t);
            let (nf, c) = (shape[2], shape[3]);
            let vol: usize = desc.spatial.iter().product();
            let mut out = vec![0.0; shape.iter().product()];
            for bt in 0..b * t {
                for (f, a) in arrays.iter().enumerate() {
                    let k = comps[f];
                    let src = &a.data()[bt * k * vol..(bt + 1) * k * vol];
                    for j in 0..c {
                        let s = if k == 1 { &src[..vol] } else { &src[j * vol..(j + 1) * vol] };
                        let o = ((bt * nf + f) * c + j) * vol;
                        out[o..o + vol].copy_from_slice(s);
                    }
                }
            }
            UptfTensor::new(DenseArray::new(shape.to_vec(), out)?, comps)
        }
        _ => Err(Error::Descriptor(format!("{}: batch kind does not match native layout", desc.name))),
    }
}

/// Inverse of [`to_uptf`]. Broadcast copies are ignored: each scalar field
/// is read from its canonical component.
pub fn from_uptf(x: &UptfTensor, desc: &DatasetDescriptor) -> Result<NativeBatch> {
    let s = x.shape();
    let want = desc.uptf_shape(s[0], s[1]);
    if s != want {
        return Err(Error::Descriptor(format!("{}: UPTF shape {s:?}, expected {want:?}", desc.name)));
    }
    match &desc.layout {
        NativeLayout::Packed { axes } => {
            let order = canonical_order(axes);
            let native = desc.native_shapes(s[0], s[1]).remove(0);
            let sorted: Vec<usize> = order.iter().map(|&i| native[i]).collect();
            let a = x.data().reshape(&sorted)?.permute(&inverse_permutation(&order))?;
            Ok(NativeBatch::Packed(a))
        }
        NativeLayout::PerField => {
            let shapes = desc.native_shapes(s[0], s[1]);
            let vol: usize = desc.spatial.iter().product();
            let (nf, c) = (s[2], s[3]);
            let src = x.data().data();
            let arrays = desc
                .fields
                .iter()
                .enumerate()
                .map(|(f, spec)| {
                    let k = spec.components;
                    let mut out = Vec::with_capacity(s[0] * s[1] * k * vol);
                    for bt in 0..s[0] * s[1] {
                        let o = (bt * nf + f) * c * vol;
                        out.extend_from_slice(&src[o..o + k * vol]);
                    }
                    DenseArray::new(shapes[f].clone(), out)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NativeBatch::Fields(arrays))
        }
    }
}
