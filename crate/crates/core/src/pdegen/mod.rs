//! Small finite-difference/finite-volume solvers that produce multi-
//! dimensional training corpora in the container format.

mod burgers;
mod diffreact;
mod fhn;
mod heat;

pub use burgers::{burgers_rhs, burgers_step};
pub use diffreact::{diffreact_step, logistic_exact};
pub use fhn::{fhn_laplacian, fhn_step, FhnStep};
pub use heat::heat_step;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::{split_range, Split};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, DenseArray, Rng};
use crate::uptf::{compute_revin_stats, scalar_fields, Container, DatasetDescriptor, NativeBatch};

/// Retries with a halved time step before giving up.
pub const MAX_DT_HALVINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pde {
    Burgers1d,
    Diffreact1d,
    Fhn2d,
    Heat3d,
}

pub const PDE_NAMES: [&str; 4] = ["burgers1d", "diffreact1d", "fhn2d", "heat3d"];

impl Pde {
    pub fn name(self) -> &'static str {
        match self {
            Pde::Burgers1d => "burgers1d",
            Pde::Diffreact1d => "diffreact1d",
            Pde::Fhn2d => "fhn2d",
            Pde::Heat3d => "heat3d",
        }
    }

    pub fn dims(self) -> usize {
        match self {
            Pde::Burgers1d | Pde::Diffreact1d => 1,
            Pde::Fhn2d => 2,
            Pde::Heat3d => 3,
        }
    }

    pub fn fields(self) -> &'static [&'static str] {
        match self {
            Pde::Fhn2d => &["u", "v"],
            _ => &["u"],
        }
    }
}

impl FromStr for Pde {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "burgers1d" => Ok(Pde::Burgers1d),
            "diffreact1d" => Ok(Pde::Diffreact1d),
            "fhn2d" => Ok(Pde::Fhn2d),
            "heat3d" => Ok(Pde::Heat3d),
            o => Err(Error::invalid(format!("unknown PDE '{o}' (expected one of {PDE_NAMES:?})"))),
        }
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator settings. `grid` is `(D, H, W)` with unused axes 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub pde: Pde,
    /// Trajectories.
    pub n: usize,
    /// Saved frames per trajectory, the initial condition included.
    pub steps: usize,
    pub grid: [usize; 3],
    /// Final time; frames are saved at `j * t_end / (steps - 1)`.
    pub t_end: f64,
    /// Largest internal step; `None` picks one from the scheme's
    /// stability bound.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Burgers: the equation's `nu` (diffusion is `nu/pi`); reaction and
    /// heat: diffusivity.
    pub nu: f64,
    /// Logistic reaction rate.
    pub rho: f64,
    pub du: f64,
    pub dv: f64,
    /// FitzHugh-Nagumo constant `k`.
    pub k: f64,
    /// Sine modes in sinusoidal initial conditions.
    pub modes: usize,
    /// Wavenumbers are drawn from `1..=max_wavenumber`.
    pub max_wavenumber: usize,
    pub seed: u64,
}

impl GenSpec {
    /// Small grids for CPU runs: W=128, 32x32, 16^3; 64 trajectories of 32
    /// frames.
    pub fn desk(pde: Pde) -> Self {
        let base = Self {
            pde,
            n: 64,
            steps: 32,
            grid: [1, 1, 128],
            t_end: 1.0,
            dt: None,
            nu: 0.01,
            rho: 1.0,
            du: 1e-3,
            dv: 5e-3,
            k: 5e-3,
            modes: 2,
            max_wavenumber: 8,
            seed: 0,
        };
        match pde {
            Pde::Burgers1d => Self { t_end: 2.0, nu: 0.001, ..base },
            Pde::Diffreact1d => Self { nu: 0.5, ..base },
            Pde::Fhn2d => Self { grid: [1, 32, 32], t_end: 5.0, ..base },
            Pde::Heat3d => Self { grid: [16, 16, 16], max_wavenumber: 2, ..base },
        }
    }

    /// Published resolutions and sizes; not used for CPU runs.
    pub fn full_scale(pde: Pde) -> Self {
        let d = Self::desk(pde);
        match pde {
            Pde::Burgers1d => Self { n: 10_000, steps: 201, grid: [1, 1, 1024], ..d },
            Pde::Diffreact1d => Self { n: 10_000, steps: 101, grid: [1, 1, 1024], ..d },
            Pde::Fhn2d => Self { n: 1_000, steps: 101, grid: [1, 128, 128], ..d },
            Pde::Heat3d => Self { n: 1_000, steps: 21, grid: [64, 64, 64], ..d },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.pde.dims();
        for (i, &g) in self.grid.iter().enumerate() {
            let used = i >= 3 - dims;
            if used && g < 3 {
                return Err(Error::invalid(format!("{}: grid axis {i} needs at least 3 points", self.pde)));
            }
            if !used && g != 1 {
                return Err(Error::invalid(format!("{}: grid axis {i} must be 1 for a {dims}-D problem", self.pde)));
            }
        }
        if self.n == 0 || self.steps < 2 {
            return Err(Error::invalid("need at least one trajectory and two saved steps"));
        }
        if !(self.t_end > 0.0) || self.dt.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::invalid("t_end and dt must be positive"));
        }
        if [self.nu, self.rho, self.du, self.dv].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("physical constants must be non-negative"));
        }
        if self.modes == 0 || self.max_wavenumber == 0 {
            return Err(Error::invalid("modes and max_wavenumber must be positive"));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> Result<DatasetDescriptor> {
        scalar_fields(self.pde.name(), self.pde.fields(), self.grid, self.pde.dims(), self.n)
    }

    pub fn save_interval(&self) -> f64 {
        self.t_end / (self.steps - 1) as f64
    }

    /// Finest grid spacing over the used axes.
    fn spacing(&self) -> f64 {
        let len = if self.pde == Pde::Fhn2d { 2.0 } else { 1.0 };
        len / *self.grid.iter().max().expect("three axes") as f64
    }

    /// Stability-bounded default internal step.
    pub fn stable_dt(&self, max_abs_u: f64) -> f64 {
        let dx = self.spacing();
        match self.pde {
            Pde::Burgers1d => {
                let visc = self.nu / std::f64::consts::PI;
                let adv = if max_abs_u > 0.0 { 0.4 * dx / max_abs_u } else { f64::INFINITY };
                let dif = if visc > 0.0 { 0.25 * dx * dx / visc } else { f64::INFINITY };
                adv.min(dif).min(self.save_interval())
            }
            Pde::Diffreact1d => {
                if self.nu > 0.0 {
                    (0.4 * dx * dx / self.nu).min(self.save_interval())
                } else {
                    self.save_interval()
                }
            }
            Pde::Fhn2d => {
                let d = self.du.max(self.dv);
                let dif = if d > 0.0 { 0.5 * dx * dx / d } else { f64::INFINITY };
                dif.min(0.01).min(self.save_interval())
            }
            Pde::Heat3d => {
                if self.nu > 0.0 {
                    (0.15 * dx * dx / self.nu).min(self.save_interval())
                } else {
                    self.save_interval()
                }
            }
        }
    }
}

/// A generated corpus in its native packed layout.
#[derive(Clone, Debug)]
pub struct Generated {
    pub descriptor: DatasetDescriptor,
    pub data: NativeBatch,
}

/// `sum_i A_i sin(2 pi k_i x + phi_i)` on cell centers of `(0, 1)`.
pub fn random_sines(rng: &mut Rng, w: usize, modes: usize, max_k: usize) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (0..modes)
        .map(|_| {
            let a = rng.random_range(-1.0..=1.0);
            let k = rng.random_range(1..=max_k) as f64;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            (a, k, phi)
        })
        .collect();
    (0..w)
        .map(|i| {
            let x = (i as f64 + 0.5) / w as f64;
            terms.iter().map(|(a, k, phi)| a * (std::f64::consts::TAU * k * x + phi).sin()).sum()
        })
        .collect()
}

fn trajectory_rng(seed: u64, traj: usize) -> Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(traj as u64);
    rng
}

/// Integrates `state` to every save time with `step(state, dt)`, choosing
/// `substeps` per interval. Fails if any value becomes non-finite.
fn integrate(
    state: Vec<f64>,
    spec: &GenSpec,
    dt_max: f64,
    mut step: impl FnMut(&mut Vec<f64>, f64),
) -> Option<Vec<f64>> {
    let interval = spec.save_interval();
    let substeps = (interval / dt_max).ceil().max(1.0) as usize;
    let dt = interval / substeps as f64;
    let mut s = state;
    let mut out = Vec::with_capacity(s.len() * spec.steps);
    out.extend_from_slice(&s);
    for _ in 1..spec.steps {
        for _ in 0..substeps {
            step(&mut s, dt);
        }
        if !s.iter().all(|v| v.is_finite()) {
            return None;
        }
        out.extend_from_slice(&s);
    }
    Some(out)
}

/// Runs one trajectory from `ic`, halving the step up to
/// [`MAX_DT_HALVINGS`] times if the state blows up.
pub fn solve_trajectory(spec: &GenSpec, ic: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    let max_abs = ic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut dt = spec.dt.unwrap_or_else(|| spec.stable_dt(max_abs));
    let [d, h, w] = spec.grid;
    for _ in 0..=MAX_DT_HALVINGS {
        let out = match spec.pde {
            Pde::Burgers1d => integrate(ic.to_vec(), spec, dt, |u, dt| burgers_step(u, dt, spec.nu, 1.0 / w as f64)),
            Pde::Diffreact1d => integrate(ic.to_vec(), spec, dt, |u, dt| diffreact_step(u, dt, spec.nu, spec.rho, 1.0 / w as f64)),
            Pde::Fhn2d => integrate(ic.to_vec(), spec, dt, |s, dt| {
                let next = fhn_step(s, h, w, dt, spec.du, spec.dv, spec.k);
                s.copy_from_slice(&next.state);
            }),
            Pde::Heat3d => integrate(ic.to_vec(), spec, dt, |u, dt| heat_step(u, [d, h, w], dt, spec.nu)),
        };
        if let Some(out) = out {
            return Ok(out);
        }
        dt *= 0.5;
    }
    Err(Error::Unstable(format!(
        "{} became non-finite after {MAX_DT_HALVINGS} step halvings (final dt {:.3e}, nu {}, grid {:?})",
        spec.pde,
        dt * 2.0,
        spec.nu,
        spec.grid
    )))
}

/// Initial condition of trajectory `traj`; for FHN the two fields are
/// stacked `[u; v]`.
pub fn initial_condition(spec: &GenSpec, traj: usize) -> Vec<f64> {
    let mut rng = trajectory_rng(spec.seed, traj);
    let [d, h, w] = spec.grid;
    match spec.pde {
        Pde::Burgers1d => random_sines(&mut rng, w, spec.modes, spec.max_wavenumber),
        Pde::Diffreact1d => {
            let s = random_sines(&mut rng, w, spec.modes, spec.max_wavenumber);
            let m = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            s.iter().map(|v| if m > 0.0 { v.abs() / m } else { 0.0 }).collect()
        }
        Pde::Fhn2d => (0..2 * h * w).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        Pde::Heat3d => {
            let mut u = vec![0.0; d * h * w];
            for _ in 0..spec.modes {
                let a: f64 = rng.random_range(-1.0..=1.0);
                let k: Vec<f64> = (0..3).map(|_| rng.random_range(0..=spec.max_wavenumber) as f64).collect();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let k = if k.iter().all(|&v| v == 0.0) { vec![0.0, 0.0, 1.0] } else { k };
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let arg = k[0] * (z as f64 + 0.5) / d as f64 + k[1] * (y as f64 + 0.5) / h as f64 + k[2] * (x as f64 + 0.5) / w as f64;
                            u[(z * h + y) * w + x] += a * (std::f64::consts::TAU * arg + phi).sin();
                        }
                    }
                }
            }
            u
        }
    }
}

/// Generates every trajectory. Output is packed `[N, T, (F,) spatial...]`.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let descriptor = spec.descriptor()?;
    let vol: usize = spec.grid.iter().product();
    let nf = spec.pde.fields().len();
    let mut data = Vec::with_capacity(spec.n * spec.steps * nf * vol);
    for traj in 0..spec.n {
        let ic = initial_condition(spec, traj);
        data.extend(solve_trajectory(spec, &ic)?);
    }
    let mut shape = vec![spec.n, spec.steps];
    if nf > 1 {
        shape.push(nf);
    }
    shape.extend_from_slice(&spec.grid[3 - spec.pde.dims()..]);
    Ok(Generated { descriptor, data: NativeBatch::Packed(DenseArray::new(shape, data)?) })
}

/// Generates a corpus and writes it to `dir` with normalization stats
/// computed on the training split.
pub fn write_dataset(spec: &GenSpec, dir: &Path) -> Result<Container> {
    let g = generate(spec)?;
    let mut c = Container::write(dir, &g.descriptor, &g.data, None)?;
    let train = split_range(spec.n, Split::Train);
    let range = if train.is_empty() { 0..spec.n } else { train };
    let stats = compute_revin_stats([c.read_uptf(range)?], &g.descriptor)?;
    c.write_stats(&stats)?;
    Ok(c)
}
