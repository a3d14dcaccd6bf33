//! Reduced transient heat-conduction model of a single scan.
//!
//! The part is cut along the x–z midplane through the scan track. On that
//! rectangle the solver integrates `rho Cp(T) dT/dt = div(kappa(T) grad T) + Q`
//! with a vertex-centred finite-volume discretization and explicit Euler
//! stepping. `Q` is the y = 0 slice of the moving Gaussian beam. The top
//! surface radiates to the chamber; the other three sides are insulated.
//!
//! Units inside the solver: mm, s, W, J, degrees Celsius (Kelvin for
//! radiation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stefan–Boltzmann constant in W mm^-2 K^-4.
pub const STEFAN_BOLTZMANN: f64 = 5.670_374e-14;
const KELVIN: f64 = 273.15;

/// Number of probe snapshot instants.
pub const SNAPSHOT_LEN: usize = 31;
/// Stress/peak grid points along the length.
pub const GRID_NX: usize = 32;
/// Stress/peak grid points along the height.
pub const GRID_NZ: usize = 14;
pub const GRID_LEN: usize = GRID_NX * GRID_NZ;

/// Bulk density used to interpret the sampled density as a relative factor.
const REFERENCE_DENSITY: f64 = 4300.0;
/// Midpoint of the sampled density range.
const DENSITY_MIDPOINT: f64 = 612.0;

/// Scanning speed (mm/s) and beam power (W).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub v: f64,
    pub p: f64,
}

impl DesignPoint {
    pub fn new(v: f64, p: f64) -> Self {
        Self { v, p }
    }
}

/// One realization of the uncertain inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInputs {
    /// Preheating temperature, °C.
    pub t0: f64,
    /// Yield strength, MPa.
    pub y: f64,
    /// Elastic modulus, GPa.
    pub e: f64,
    /// Sampled density, kg/m^3.
    pub rho: f64,
}

impl RandomInputs {
    /// Midpoint of the default uncertainty box.
    pub fn nominal() -> Self {
        Self {
            t0: 650.0,
            y: 825.0,
            e: 110.0,
            rho: 612.0,
        }
    }

    /// Density handed to the conduction solver, kg/m^3.
    ///
    /// The sampled range (550.8–673.2) sits far below the alloy density, so it
    /// is read as a relative factor that maps its midpoint onto 4300 kg/m^3.
    pub fn solver_density(&self) -> f64 {
        self.rho * REFERENCE_DENSITY / DENSITY_MIDPOINT
    }
}

/// Deterministic material, beam and geometry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Specific heat `a0 + a1 T + a2 T^2`, J/(kg K).
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    /// Conductivity `b0 + b1 T + b2 T^2`, W/(m K).
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    /// Powder absorptivity.
    pub absorptivity: f64,
    /// Beam spot radius, mm.
    pub beam_radius: f64,
    /// Beam penetration depth, mm.
    pub penetration_depth: f64,
    pub emissivity: f64,
    /// Chamber temperature, °C.
    pub chamber_temp: f64,
    /// Liquidus temperature, °C.
    pub liquidus_temp: f64,
    /// Part length, width and height, mm.
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Thermal expansion coefficient, 1/K.
    pub thermal_expansion: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            a0: 540.0,
            a1: 0.43,
            a2: -3.2e-5,
            b0: 7.2,
            b1: 0.011,
            b2: 1.4e-6,
            absorptivity: 0.203,
            beam_radius: 0.1,
            penetration_depth: 0.05,
            emissivity: 0.35,
            chamber_temp: 650.0,
            liquidus_temp: 1650.0,
            length: 2.0,
            width: 1.5,
            height: 0.65,
            thermal_expansion: 1e-5,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let lo = self.chamber_temp;
        let hi = 1.1 * self.liquidus_temp;
        let (cp_min, _) = quadratic_range(self.a0, self.a1, self.a2, lo, hi);
        let (k_min, _) = quadratic_range(self.b0, self.b1, self.b2, lo, hi);
        if cp_min <= 0.0 || k_min <= 0.0 {
            return Err(Error::invalid(format!(
                "specific heat and conductivity must stay positive on [{lo}, {hi}] °C"
            )));
        }
        if self.beam_radius <= 0.0 {
            return Err(Error::invalid("beam radius must be positive"));
        }
        if !(self.penetration_depth > 0.0 && self.penetration_depth <= self.height) {
            return Err(Error::invalid("penetration depth must lie in (0, height]"));
        }
        if !(self.absorptivity > 0.0 && self.absorptivity <= 1.0) {
            return Err(Error::invalid("absorptivity must lie in (0, 1]"));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::invalid("part dimensions must be positive"));
        }
        Ok(())
    }
}

/// Spatial resolution of the conduction solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimGridConfig {
    pub cells_x: usize,
    pub cells_z: usize,
    /// Fraction of the explicit stability limit used as time step, in (0, 1].
    pub cfl_factor: f64,
}

impl Default for SimGridConfig {
    fn default() -> Self {
        Self {
            cells_x: 64,
            cells_z: 26,
            cfl_factor: 0.4,
        }
    }
}

/// Probe history and peak-temperature field of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSnapshot {
    pub times: Vec<f64>,
    /// Probe temperature at the centre of the top surface, °C.
    pub temps: Vec<f64>,
    pub t_scan: f64,
    /// Running maximum over the scan on the 32×14 grid (row-major, x fastest,
    /// bottom row first), °C.
    pub peak_field: Vec<f64>,
}

impl TemperatureSnapshot {
    pub fn max_temp(&self) -> f64 {
        self.temps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn quadratic_range(c0: f64, c1: f64, c2: f64, lo: f64, hi: f64) -> (f64, f64) {
    let f = |t: f64| c0 + c1 * t + c2 * t * t;
    let mut vals = vec![f(lo), f(hi)];
    if c2 != 0.0 {
        let vertex = -c1 / (2.0 * c2);
        if vertex > lo && vertex < hi {
            vals.push(f(vertex));
        }
    }
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |i| if i == n - 1 { hi } else { lo + step * i as f64 })
}

/// The 31 probe instants: 10 on `[0, 0.405 t]`, 10 on `[0.45 t, 0.54 t]`,
/// 11 on `[0.55 t, t]`, all inclusive, with `t = length / v`.
pub fn snapshot_times(v: f64, length: f64) -> Result<Vec<f64>> {
    if !(v > 0.0) {
        return Err(Error::invalid(format!("scanning speed must be positive, got {v}")));
    }
    let t = length / v;
    let times: Vec<f64> = linspace(0.0, 0.405 * t, 10)
        .chain(linspace(0.45 * t, 0.54 * t, 10))
        .chain(linspace(0.55 * t, t, 11))
        .collect();
    debug_assert_eq!(times.len(), SNAPSHOT_LEN);
    Ok(times)
}

/// Depth profile of the beam, `(-3 s^2 - 2 s + 5) / 5` for `s = depth / z0`
/// in `[0, 1]`, zero below.
fn depth_profile(depth: f64, z0: f64) -> f64 {
    if !(0.0..=z0).contains(&depth) {
        return 0.0;
    }
    let s = depth / z0;
    (-3.0 * s * s - 2.0 * s + 5.0) / 5.0
}

/// Antiderivative of [`depth_profile`] in depth, clipped to `[0, z0]`.
fn depth_profile_integral(depth: f64, z0: f64) -> f64 {
    let s = depth.clamp(0.0, z0) / z0;
    z0 * (-s * s * s - s * s + 5.0 * s) / 5.0
}

/// Volumetric beam flux in W/mm^3 at `(x, y, z)` where `z` is the depth below
/// the top surface. The beam starts at `x = 0` and moves in `+x`.
pub fn heat_flux(x: f64, y: f64, z: f64, t: f64, d: &DesignPoint, p: &ModelParams) -> f64 {
    let r = p.beam_radius;
    let z0 = p.penetration_depth;
    let peak = 2.0 * p.absorptivity * d.p / (std::f64::consts::PI * r * r * z0);
    let dx = x - d.v * t;
    peak * (-2.0 * (dx * dx + y * y) / (r * r)).exp() * depth_profile(z, z0)
}

/// Specific heat (J/(kg K)) and conductivity (W/(m K)) at `temp` °C.
pub fn material_props(temp: f64, p: &ModelParams) -> (f64, f64) {
    let cp = p.a0 + p.a1 * temp + p.a2 * temp * temp;
    let kappa = p.b0 + p.b1 * temp + p.b2 * temp * temp;
    (cp, kappa)
}

struct Mesh {
    nx: usize,
    nz: usize,
    dx: f64,
    dz: f64,
    /// Control-volume widths per column / row.
    wx: Vec<f64>,
    wz: Vec<f64>,
}

impl Mesh {
    fn new(grid: &SimGridConfig, p: &ModelParams) -> Result<Self> {
        if grid.cells_x < 2 || grid.cells_z < 2 {
            return Err(Error::invalid("grid needs at least 2 cells per direction"));
        }
        if grid.cells_x % 2 != 0 {
            return Err(Error::invalid("cells_x must be even so a node sits under the probe"));
        }
        let (nx, nz) = (grid.cells_x, grid.cells_z);
        let dx = p.length / nx as f64;
        let dz = p.height / nz as f64;
        let widths = |n: usize, h: f64| {
            (0..=n)
                .map(|i| if i == 0 || i == n { 0.5 * h } else { h })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            nx,
            nz,
            dx,
            dz,
            wx: widths(nx, dx),
            wz: widths(nz, dz),
        })
    }

    fn cols(&self) -> usize {
        self.nx + 1
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.cols() + i
    }

    fn len(&self) -> usize {
        (self.nx + 1) * (self.nz + 1)
    }

    /// Bilinear interpolation of a nodal field at `(x, z)`.
    fn sample(&self, field: &[f64], x: f64, z: f64) -> f64 {
        let fx = (x / self.dx).clamp(0.0, self.nx as f64);
        let fz = (z / self.dz).clamp(0.0, self.nz as f64);
        let i = (fx.floor() as usize).min(self.nx - 1);
        let j = (fz.floor() as usize).min(self.nz - 1);
        let (tx, tz) = (fx - i as f64, fz - j as f64);
        let f00 = field[self.idx(i, j)];
        let f10 = field[self.idx(i + 1, j)];
        let f01 = field[self.idx(i, j + 1)];
        let f11 = field[self.idx(i + 1, j + 1)];
        (1.0 - tz) * ((1.0 - tx) * f00 + tx * f10) + tz * ((1.0 - tx) * f01 + tx * f11)
    }
}

/// Resamples a nodal field onto the uniform 32×14 grid spanning the whole
/// midplane, endpoints included.
fn resample_to_stress_grid(mesh: &Mesh, field: &[f64], p: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(GRID_LEN);
    for j in 0..GRID_NZ {
        let z = p.height * j as f64 / (GRID_NZ - 1) as f64;
        for i in 0..GRID_NX {
            let x = p.length * i as f64 / (GRID_NX - 1) as f64;
            out.push(mesh.sample(field, x, z));
        }
    }
    out
}

/// Time step and the bound it was derived from.
fn time_step(mesh: &Mesh, grid: &SimGridConfig, rho_mm: f64, z: &RandomInputs, p: &ModelParams) -> Result<(f64, f64)> {
    let (lo, hi) = temperature_window(z, p);
    let (cp_min, _) = quadratic_range(p.a0, p.a1, p.a2, lo, hi);
    let (_, k_max) = quadratic_range(p.b0, p.b1, p.b2, lo, hi);
    if cp_min <= 0.0 {
        return Err(Error::invalid("specific heat is non-positive inside the solver window"));
    }
    let k_max = k_max * 1e-3;
    let h = mesh.dx.min(mesh.dz);
    let nominal = rho_mm * cp_min * h * h / (4.0 * k_max);
    let dt = grid.cfl_factor * nominal;

    // Exact explicit bound, including the linearized radiation sink on the top row.
    let conduction = 2.0 * k_max * (1.0 / (mesh.dx * mesh.dx) + 1.0 / (mesh.dz * mesh.dz));
    let t_k = hi + KELVIN;
    let radiation = 4.0 * STEFAN_BOLTZMANN * p.emissivity * t_k.powi(3) / (0.5 * mesh.dz);
    let limit = rho_mm * cp_min / (conduction + radiation);
    if !(grid.cfl_factor > 0.0) || dt > limit {
        return Err(Error::Unstable { dt, limit });
    }
    Ok((dt, limit))
}

/// Admissible temperature range; leaving it aborts the run.
fn temperature_window(z: &RandomInputs, p: &ModelParams) -> (f64, f64) {
    (z.t0.min(p.chamber_temp) - 50.0, 3.0 * p.liquidus_temp)
}

/// Runs one scan and records the probe history and the peak field.
pub fn simulate(
    d: &DesignPoint,
    z: &RandomInputs,
    p: &ModelParams,
    grid: &SimGridConfig,
) -> Result<TemperatureSnapshot> {
    p.validate()?;
    let times = snapshot_times(d.v, p.length)?;
    if !(d.p >= 0.0) {
        return Err(Error::invalid(format!("beam power must be non-negative, got {}", d.p)));
    }
    let mesh = Mesh::new(grid, p)?;
    let rho_mm = z.solver_density() * 1e-9; // kg/mm^3
    let (dt_max, _) = time_step(&mesh, grid, rho_mm, z, p)?;
    let t_scan = p.length / d.v;
    let steps = (t_scan / dt_max).ceil().max(1.0) as usize;
    let dt = t_scan / steps as f64;
    let (t_lo, t_hi) = temperature_window(z, p);

    let n = mesh.len();
    let cols = mesh.cols();
    let (nx, nz) = (mesh.nx, mesh.nz);
    let mut temp = vec![z.t0; n];
    let mut next = vec![0.0; n];
    let mut peak = temp.clone();
    let mut kappa = vec![0.0; n];
    let mut heat_cap = vec![0.0; n];

    // Depth-averaged beam profile per row, and Gaussian weight per column for
    // the current beam position.
    let z0 = p.penetration_depth;
    let row_profile: Vec<f64> = (0..=nz)
        .map(|j| {
            let zc = j as f64 * mesh.dz;
            let top = (zc + 0.5 * mesh.dz).min(p.height);
            let bottom = (zc - 0.5 * mesh.dz).max(0.0);
            let (d_lo, d_hi) = (p.height - top, p.height - bottom);
            (depth_profile_integral(d_hi, z0) - depth_profile_integral(d_lo, z0)) / mesh.wz[j]
        })
        .collect();
    let beam_rows: Vec<usize> = (0..=nz).filter(|&j| row_profile[j] > 0.0).collect();
    let flux_peak = 2.0 * p.absorptivity * d.p / (std::f64::consts::PI * p.beam_radius * p.beam_radius * z0);
    let r2 = p.beam_radius * p.beam_radius;
    let rad_coeff = STEFAN_BOLTZMANN * p.emissivity;
    let chamber_k4 = (p.chamber_temp + KELVIN).powi(4);

    let probe = mesh.idx(nx / 2, nz);
    let mut probe_hist = Vec::with_capacity(steps + 1);
    probe_hist.push(temp[probe]);

    for step in 0..steps {
        let t = step as f64 * dt;
        for k in 0..n {
            let (cp, kap) = material_props(temp[k], p);
            kappa[k] = kap * 1e-3;
            heat_cap[k] = rho_mm * cp;
        }
        for j in 0..=nz {
            let wz = mesh.wz[j];
            for i in 0..=nx {
                let k = j * cols + i;
                let tk = temp[k];
                let mut flow = 0.0;
                if i > 0 {
                    let nb = k - 1;
                    flow += 0.5 * (kappa[k] + kappa[nb]) * wz * (temp[nb] - tk) / mesh.dx;
                }
                if i < nx {
                    let nb = k + 1;
                    flow += 0.5 * (kappa[k] + kappa[nb]) * wz * (temp[nb] - tk) / mesh.dx;
                }
                let wx = mesh.wx[i];
                if j > 0 {
                    let nb = k - cols;
                    flow += 0.5 * (kappa[k] + kappa[nb]) * wx * (temp[nb] - tk) / mesh.dz;
                }
                if j < nz {
                    let nb = k + cols;
                    flow += 0.5 * (kappa[k] + kappa[nb]) * wx * (temp[nb] - tk) / mesh.dz;
                } else {
                    let tk_k = tk + KELVIN;
                    flow -= rad_coeff * (tk_k * tk_k * tk_k * tk_k - chamber_k4) * wx;
                }
                next[k] = tk + dt * flow / (heat_cap[k] * wx * wz);
            }
        }
        if flux_peak > 0.0 {
            let xb = d.v * t;
            for i in 0..=nx {
                let dxb = i as f64 * mesh.dx - xb;
                let g = (-2.0 * dxb * dxb / r2).exp();
                if g < 1e-300 {
                    continue;
                }
                for &j in &beam_rows {
                    let k = mesh.idx(i, j);
                    next[k] += dt * flux_peak * g * row_profile[j] / heat_cap[k];
                }
            }
        }
        std::mem::swap(&mut temp, &mut next);

        let tp = temp[probe];
        if !tp.is_finite() || tp < t_lo || tp > t_hi {
            return Err(Error::Diverged {
                step: step + 1,
                reason: format!("probe temperature {tp} °C outside [{t_lo}, {t_hi}]"),
            });
        }
        for (pk, &tk) in peak.iter_mut().zip(&temp) {
            if tk > *pk {
                *pk = tk;
            } else if tk.is_nan() {
                return Err(Error::Diverged {
                    step: step + 1,
                    reason: "non-finite temperature in field".into(),
                });
            }
        }
        probe_hist.push(tp);
    }

    let temps = times
        .iter()
        .map(|&t| {
            let f = (t / dt).clamp(0.0, steps as f64);
            let i = (f.floor() as usize).min(steps - 1);
            let w = f - i as f64;
            (1.0 - w) * probe_hist[i] + w * probe_hist[i + 1]
        })
        .collect();
    let peak_field = resample_to_stress_grid(&mesh, &peak, p);
    Ok(TemperatureSnapshot {
        times,
        temps,
        t_scan,
        peak_field,
    })
}
