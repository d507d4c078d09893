use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled native array axis. The batch axis is implicit and always first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    T,
    F,
    C,
    D,
    H,
    W,
}

impl Axis {
    /// Position of the axis in the canonical `(N,T,F,C,D,H,W)` order.
    pub fn canonical(self) -> usize {
        match self {
            Axis::T => 1,
            Axis::F => 2,
            Axis::C => 3,
            Axis::D => 4,
            Axis::H => 5,
            Axis::W => 6,
        }
    }
}

/// How a dataset stores its arrays on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NativeLayout {
    /// A single array `[N, axes...]`. All fields share one component count.
    Packed { axes: Vec<Axis> },
    /// One array per field, shaped `[N, T, 1, C_f, spatial...]` where the
    /// spatial axes are the dataset's trailing `dims` of `(D, H, W)`.
    PerField,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub components: usize,
}

impl FieldSpec {
    pub fn new(name: &str, components: usize) -> Self {
        Self { name: name.to_string(), components }
    }
}

/// Per-dataset metadata: native layout, field composition and grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub layout: NativeLayout,
    pub fields: Vec<FieldSpec>,
    /// Spatial extents `(D, H, W)`; absent axes are 1.
    pub spatial: [usize; 3],
    /// Number of spatial dimensions stored natively (1, 2 or 3).
    pub dims: usize,
    /// Trajectory count N of the full dataset.
    pub trajectories: usize,
}

impl DatasetDescriptor {
    /// Checks internal consistency. Called by every constructor path that
    /// accepts external input.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Descriptor(format!("{}: {m}", self.name)));
        if self.fields.is_empty() {
            return bad("no fields".into());
        }
        if !(1..=3).contains(&self.dims) {
            return bad(format!("dims {} not in 1..=3", self.dims));
        }
        if self.spatial.contains(&0) {
            return bad(format!("zero spatial extent {:?}", self.spatial));
        }
        if self.spatial[..3 - self.dims].iter().any(|&s| s != 1) {
            return bad(format!("{}-D dataset with spatial {:?}", self.dims, self.spatial));
        }
        let cmax = self.max_components();
        for f in &self.fields {
            if f.components == 0 || (f.components != 1 && f.components != cmax) {
                return bad(format!("field {} has {} components; must be 1 or {cmax}", f.name, f.components));
            }
        }
        if let NativeLayout::Packed { axes } = &self.layout {
            let mut seen = [false; 7];
            for a in axes {
                if std::mem::replace(&mut seen[a.canonical()], true) {
                    return bad(format!("axis {a:?} listed twice"));
                }
            }
            if !seen[1] {
                return bad("packed layout has no time axis".into());
            }
            let spatial: Vec<Axis> = axes.iter().copied().filter(|a| matches!(a, Axis::D | Axis::H | Axis::W)).collect();
            let expect = &[Axis::D, Axis::H, Axis::W][3 - self.dims..];
            if spatial != expect {
                return bad(format!("spatial axes {spatial:?} do not match {}-D grid", self.dims));
            }
            if !seen[2] && self.fields.len() != 1 {
                return bad("several fields but no F axis".into());
            }
            if !seen[3] && cmax != 1 {
                return bad("vector field but no C axis".into());
            }
            if self.fields.iter().any(|f| f.components != cmax) {
                return bad("packed layout cannot mix scalar and vector fields".into());
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// Largest component count; scalar fields are broadcast to it.
    pub fn max_components(&self) -> usize {
        self.fields.iter().map(|f| f.components).max().unwrap_or(1)
    }

    /// `(F, C_max)` flags marking entries that carry native data; broadcast
    /// copies of scalars are `false` except for component 0.
    pub fn canonical_mask(&self) -> Vec<bool> {
        let c = self.max_components();
        self.fields.iter().flat_map(|f| (0..c).map(move |j| j < f.components)).collect()
    }

    /// Number of native `(field, component)` channels.
    pub fn native_channels(&self) -> usize {
        self.fields.iter().map(|f| f.components).sum()
    }

    /// UPTF shape `(b, t, F, C, D, H, W)`.
    pub fn uptf_shape(&self, b: usize, t: usize) -> [usize; 7] {
        let [d, h, w] = self.spatial;
        [b, t, self.num_fields(), self.max_components(), d, h, w]
    }

    /// The UPTF layout as a string, e.g. `(b,t,3,2,1,512,512)`.
    pub fn shape_string(&self) -> String {
        let [d, h, w] = self.spatial;
        format!("(b,t,{},{},{},{},{})", self.num_fields(), self.max_components(), d, h, w)
    }

    fn axis_len(&self, a: Axis, t: usize) -> usize {
        match a {
            Axis::T => t,
            Axis::F => self.num_fields(),
            Axis::C => self.max_components(),
            Axis::D => self.spatial[0],
            Axis::H => self.spatial[1],
            Axis::W => self.spatial[2],
        }
    }

    fn live_spatial(&self) -> &[usize] {
        &self.spatial[3 - self.dims..]
    }

    /// Native array shapes for a batch of `b` trajectories with `t` steps:
    /// one entry for packed layouts, one per field otherwise.
    pub fn native_shapes(&self, b: usize, t: usize) -> Vec<Vec<usize>> {
        match &self.layout {
            NativeLayout::Packed { axes } => {
                let mut s = vec![b];
                s.extend(axes.iter().map(|&a| self.axis_len(a, t)));
                vec![s]
            }
            NativeLayout::PerField => self
                .fields
                .iter()
                .map(|f| {
                    let mut s = vec![b, t, 1, f.components];
                    s.extend_from_slice(self.live_spatial());
                    s
                })
                .collect(),
        }
    }

    /// Values per trajectory per time step across all native arrays.
    pub fn values_per_step(&self) -> usize {
        self.native_channels() * self.spatial.iter().product::<usize>()
    }
}

fn packed(name: &str, axes: &[Axis], fields: &[(&str, usize)], spatial: [usize; 3], dims: usize, n: usize) -> DatasetDescriptor {
    DatasetDescriptor {
        name: name.to_string(),
        layout: NativeLayout::Packed { axes: axes.to_vec() },
        fields: fields.iter().map(|&(f, c)| FieldSpec::new(f, c)).collect(),
        spatial,
        dims,
        trajectories: n,
    }
}

fn per_field(name: &str, fields: &[(&str, usize)], spatial: [usize; 3], dims: usize, n: usize) -> DatasetDescriptor {
    DatasetDescriptor {
        name: name.to_string(),
        layout: NativeLayout::PerField,
        fields: fields.iter().map(|&(f, c)| FieldSpec::new(f, c)).collect(),
        spatial,
        dims,
        trajectories: n,
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 13] = [
    "1d-cfd",
    "2d-dr",
    "2d-cfd-ic",
    "2d-sw",
    "3d-mhd",
    "3d-cfd",
    "1d-dr",
    "1d-be",
    "2d-fns-kf",
    "2d-cfd",
    "2d-gsdr",
    "3d-cfd-turb",
    "3d-tgc",
];

/// Descriptors of the public benchmark datasets at their published
/// resolutions. Only their layouts are used here; the data is not shipped.
pub fn builtin(name: &str) -> Result<DatasetDescriptor> {
    use Axis::*;
    let d = match name.to_ascii_lowercase().as_str() {
        "1d-cfd" => packed("1d-cfd", &[T, F, W], &[("vx", 1), ("density", 1), ("pressure", 1)], [1, 1, 1024], 1, 10_000),
        "1d-dr" => packed("1d-dr", &[T, W], &[("u", 1)], [1, 1, 1024], 1, 10_000),
        "1d-be" => packed("1d-be", &[T, W], &[("u", 1)], [1, 1, 1024], 1, 10_000),
        "2d-dr" => packed("2d-dr", &[T, F, H, W], &[("u", 1), ("v", 1)], [1, 128, 128], 2, 1_000),
        "2d-gsdr" => packed("2d-gsdr", &[T, F, H, W], &[("u", 1), ("v", 1)], [1, 128, 128], 2, 200),
        "2d-sw" => packed("2d-sw", &[T, H, W], &[("h", 1)], [1, 128, 128], 2, 1_000),
        "2d-fns-kf" => packed("2d-fns-kf", &[T, C, H, W], &[("velocity", 2)], [1, 128, 128], 2, 20_000),
        "2d-cfd-ic" => packed("2d-cfd-ic", &[T, C, H, W], &[("velocity", 2)], [1, 512, 512], 2, 80),
        "2d-cfd" => per_field("2d-cfd", &[("velocity", 2), ("density", 1), ("pressure", 1)], [1, 512, 512], 2, 10_000),
        "3d-mhd" => per_field("3d-mhd", &[("velocity", 3), ("magnetic", 3), ("density", 1)], [64, 64, 64], 3, 97),
        "3d-cfd" => per_field("3d-cfd", &[("velocity", 3), ("density", 1), ("pressure", 1)], [128, 128, 128], 3, 200),
        "3d-cfd-turb" => {
            per_field("3d-cfd-turb", &[("velocity", 3), ("density", 1), ("pressure", 1)], [64, 64, 64], 3, 500)
        }
        "3d-tgc" => per_field("3d-tgc", &[("velocity", 3), ("pressure", 1), ("temperature", 1)], [64, 64, 64], 3, 20_000),
        other => return Err(Error::Descriptor(format!("unknown built-in dataset '{other}'"))),
    };
    Ok(d)
}

/// Descriptor for a single-field scalar dataset on a `dims`-D grid, packed
/// as `[N, T, (F,) spatial...]`.
pub fn scalar_fields(name: &str, field_names: &[&str], spatial: [usize; 3], dims: usize, n: usize) -> Result<DatasetDescriptor> {
    let mut axes = vec![Axis::T];
    if field_names.len() > 1 {
        axes.push(Axis::F);
    }
    axes.extend_from_slice(&[Axis::D, Axis::H, Axis::W][3 - dims..]);
    let fields: Vec<(&str, usize)> = field_names.iter().map(|&f| (f, 1)).collect();
    let d = packed(name, &axes, &fields, spatial, dims, n);
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_layouts_match_listing() {
        let expect = [
            ("1d-cfd", "(b,t,3,1,1,1,1024)"),
            ("2d-dr", "(b,t,2,1,1,128,128)"),
            ("2d-cfd-ic", "(b,t,1,2,1,512,512)"),
            ("2d-sw", "(b,t,1,1,1,128,128)"),
            ("3d-mhd", "(b,t,3,3,64,64,64)"),
            ("3d-cfd", "(b,t,3,3,128,128,128)"),
            ("1d-dr", "(b,t,1,1,1,1,1024)"),
            ("1d-be", "(b,t,1,1,1,1,1024)"),
            ("2d-fns-kf", "(b,t,1,2,1,128,128)"),
            ("2d-cfd", "(b,t,3,2,1,512,512)"),
            ("2d-gsdr", "(b,t,2,1,1,128,128)"),
            ("3d-cfd-turb", "(b,t,3,3,64,64,64)"),
            ("3d-tgc", "(b,t,3,3,64,64,64)"),
        ];
        assert_eq!(expect.len(), BUILTIN_NAMES.len());
        for (name, shape) in expect {
            let d = builtin(name).unwrap();
            d.validate().unwrap();
            assert_eq!(d.shape_string(), shape, "{name}");
        }
        assert!(builtin("4d-foo").is_err());
    }

    #[test]
    fn canonical_mask_marks_one_entry_per_scalar() {
        let d = builtin("2d-cfd").unwrap();
        assert_eq!(d.canonical_mask(), vec![true, true, true, false, true, false]);
        let d = builtin("3d-mhd").unwrap();
        assert_eq!(d.canonical_mask().iter().filter(|&&m| m).count(), 7);
    }

    #[test]
    fn per_field_native_shapes() {
        let d = builtin("3d-mhd").unwrap();
        let s = d.native_shapes(4, 100);
        assert_eq!(s[2], vec![4, 100, 1, 1, 64, 64, 64]);
        assert_eq!(s[0], vec![4, 100, 1, 3, 64, 64, 64]);
        let d = builtin("2d-cfd").unwrap();
        assert_eq!(d.native_shapes(2, 21)[0], vec![2, 21, 1, 2, 512, 512]);
    }

    #[test]
    fn validation_rejects_inconsistent_layouts() {
        let mut d = builtin("2d-dr").unwrap();
        d.layout = NativeLayout::Packed { axes: vec![Axis::T, Axis::H, Axis::W] };
        assert!(d.validate().is_err());
        let mut d = builtin("1d-dr").unwrap();
        d.spatial = [1, 4, 1024];
        assert!(d.validate().is_err());
        let mut d = builtin("3d-mhd").unwrap();
        d.fields[0].components = 2;
        assert!(d.validate().is_err());
    }
}
