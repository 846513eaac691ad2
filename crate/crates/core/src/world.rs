//! Synthetic vehicle trajectories, measurement corruption and client
//! datasets, plus the CSV/JSON files they are exchanged in.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Measurement, Vec3};
use crate::seeds::derive_seed;

/// Velocity-noise std never drops below this (m/s) when noise is enabled.
pub const VELOCITY_NOISE_FLOOR: f64 = 0.01;
/// Largest pitch of a velocity segment, radians.
const MAX_PITCH: f64 = 0.02;
/// Largest heading change between segments, radians.
const MAX_TURN: f64 = PI / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    #[serde(default = "default_segment_min")]
    pub segment_min: usize,
    #[serde(default = "default_segment_max")]
    pub segment_max: usize,
    #[serde(default)]
    pub start: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    0.1
}
fn default_segment_min() -> usize {
    20
}
fn default_segment_max() -> usize {
    60
}

impl TrajectorySpec {
    pub fn new(steps: usize, speed_min: f64, speed_max: f64, seed: u64) -> Self {
        Self {
            steps,
            dt: default_dt(),
            speed_min,
            speed_max,
            segment_min: default_segment_min(),
            segment_max: default_segment_max(),
            start: [0.0; 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("trajectory needs at least one step".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidDt(self.dt));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad(format!("bad speed range [{}, {}]", self.speed_min, self.speed_max));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return bad(format!("bad segment range [{}, {}]", self.segment_min, self.segment_max));
        }
        Ok(())
    }
}

/// Client trajectories mirroring four vehicles with lengths 1550, 4600, 1450
/// and 1420 steps and their observed speed ranges.
pub fn default_client_specs(seed: u64) -> Vec<TrajectorySpec> {
    [
        (1550, 8.9, 10.8),
        (4600, 9.2, 10.9),
        (1450, 0.7, 10.7),
        (1420, 3.6, 10.7),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(steps, lo, hi))| TrajectorySpec::new(steps, lo, hi, derive_seed(seed, "client-trajectory", i as u64)))
    .collect()
}

/// 900-step ego trajectory spanning the clients' combined speed range.
pub fn default_test_spec(seed: u64) -> TrajectorySpec {
    TrajectorySpec::new(900, 0.7, 10.9, derive_seed(seed, "test-trajectory", 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dt: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Integrates a piecewise-constant velocity profile:
/// `X[t] = X[t−1] + dt·V[t]` with `X[−1] = start`.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut velocities = Vec::with_capacity(spec.steps);
    let mut heading: f64 = rng.random_range(0.0..2.0 * PI);
    while velocities.len() < spec.steps {
        let len = rng.random_range(spec.segment_min..=spec.segment_max);
        let speed = if spec.speed_max > spec.speed_min {
            rng.random_range(spec.speed_min..=spec.speed_max)
        } else {
            spec.speed_min
        };
        let pitch: f64 = rng.random_range(-MAX_PITCH..=MAX_PITCH);
        let v = Vec3::new(
            pitch.cos() * heading.cos(),
            pitch.cos() * heading.sin(),
            pitch.sin(),
        ) * speed;
        for _ in 0..len.min(spec.steps - velocities.len()) {
            velocities.push(v);
        }
        heading += rng.random_range(-MAX_TURN..=MAX_TURN);
    }
    Ok(integrate(Vec3::from(spec.start), &velocities, spec.dt))
}

pub fn integrate(start: Vec3, velocities: &[Vec3], dt: f64) -> GroundTruth {
    let mut x = start;
    let positions = velocities
        .iter()
        .map(|v| {
            x += v * dt;
            x
        })
        .collect();
    GroundTruth {
        dt,
        positions,
        velocities: velocities.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Position noise std per axis, meters.
    pub position_std: f64,
    /// Velocity noise std as a fraction of the true per-axis speed.
    pub velocity_fraction: f64,
    /// Constant position bias, each axis drawn from `U[lo, hi]`.
    #[serde(default)]
    pub bias: Option<[f64; 2]>,
}

impl NoiseSpec {
    /// σ_p = 1.5 m, 10 % velocity noise, no bias.
    pub fn training() -> Self {
        Self {
            position_std: 1.5,
            velocity_fraction: 0.10,
            bias: None,
        }
    }

    /// σ_p = 1.8 m, 15 % velocity noise, bias U[0.5, 1] m.
    pub fn test() -> Self {
        Self {
            position_std: 1.8,
            velocity_fraction: 0.15,
            bias: Some([0.5, 1.0]),
        }
    }

    pub fn none() -> Self {
        Self {
            position_std: 0.0,
            velocity_fraction: 0.0,
            bias: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position_std >= 0.0 && self.position_std.is_finite()) {
            return Err(Error::Config(format!("position_std {} must be >= 0", self.position_std)));
        }
        if !(self.velocity_fraction >= 0.0 && self.velocity_fraction.is_finite()) {
            return Err(Error::Config(format!(
                "velocity_fraction {} must be >= 0",
                self.velocity_fraction
            )));
        }
        if let Some([lo, hi]) = self.bias {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("bias range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// Velocity noise std for one axis of a true velocity.
    pub fn velocity_std(&self, axis_velocity: f64) -> f64 {
        if self.velocity_fraction == 0.0 {
            0.0
        } else {
            (self.velocity_fraction * axis_velocity.abs()).max(VELOCITY_NOISE_FLOOR)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub measurements: Vec<Measurement>,
    pub bias: Vec3,
}

/// Adds white Gaussian noise (and an optional constant bias) to positions and
/// velocities.
pub fn corrupt(truth: &GroundTruth, noise: &NoiseSpec, seed: u64) -> Result<Corrupted> {
    noise.validate()?;
    if truth.positions.len() != truth.velocities.len() {
        return Err(Error::LengthMismatch {
            what: "positions vs velocities",
            left: truth.positions.len(),
            right: truth.velocities.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = match noise.bias {
        Some([lo, hi]) if hi > lo => Vec3::from_fn(|_, _| rng.random_range(lo..=hi)),
        Some([lo, _]) => Vec3::repeat(lo),
        None => Vec3::zeros(),
    };
    let mut gauss = |std: f64| -> f64 {
        let n: f64 = StandardNormal.sample(&mut rng);
        if std == 0.0 {
            0.0
        } else {
            n * std
        }
    };
    let measurements = truth
        .positions
        .iter()
        .zip(&truth.velocities)
        .map(|(x, v)| {
            let position = x + bias + Vec3::from_fn(|_, _| gauss(noise.position_std));
            let velocity = Vec3::from_fn(|i, _| v[i] + gauss(noise.velocity_std(v[i])));
            Measurement::with_velocity(position, velocity)
        })
        .collect();
    Ok(Corrupted { measurements, bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// A length-`len` subtrajectory starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub split: Split,
}

/// Tiles `⌊T/L⌋` disjoint windows and assigns a seeded `ratio` share of them
/// (rounded, at least one) to training. Leftover steps are dropped.
pub fn split_windows(total: usize, len: usize, ratio: f64, seed: u64) -> Result<Vec<Window>> {
    if len == 0 {
        return Err(Error::Config("subtrajectory length must be positive".into()));
    }
    if total < len {
        return Err(Error::Config(format!(
            "trajectory of {total} steps is shorter than the subtrajectory length {len}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n = total / len;
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut windows: Vec<Window> = (0..n)
        .map(|k| Window {
            start: k * len,
            len,
            split: Split::Validation,
        })
        .collect();
    for &k in &order[..n_train] {
        windows[k].split = Split::Train;
    }
    Ok(windows)
}

/// Borrowed view of one window.
#[derive(Debug, Clone, Copy)]
pub struct Subtrajectory<'a> {
    pub measurements: &'a [Measurement],
    pub truth: &'a [Vec3],
    pub dt: f64,
}

impl Subtrajectory<'_> {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

/// A client's private data: noisy measurements, ground truth, and its split
/// into windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: u32,
    pub dt: f64,
    pub window_len: usize,
    pub measurements: Vec<Measurement>,
    pub truth: Vec<Vec3>,
    pub windows: Vec<Window>,
}

impl ClientDataset {
    pub fn new(
        id: u32,
        dt: f64,
        window_len: usize,
        measurements: Vec<Measurement>,
        truth: Vec<Vec3>,
        split_ratio: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if measurements.len() != truth.len() {
            return Err(Error::LengthMismatch {
                what: "measurements vs ground truth",
                left: measurements.len(),
                right: truth.len(),
            });
        }
        if measurements.iter().any(|m| m.velocity.is_none()) {
            return Err(Error::Empty("measurement velocity"));
        }
        let windows = split_windows(measurements.len(), window_len, split_ratio, split_seed)?;
        Ok(Self {
            id,
            dt,
            window_len,
            measurements,
            truth,
            windows,
        })
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn window(&self, w: &Window) -> Subtrajectory<'_> {
        Subtrajectory {
            measurements: &self.measurements[w.start..w.start + w.len],
            truth: &self.truth[w.start..w.start + w.len],
            dt: self.dt,
        }
    }

    pub fn windows_in(&self, split: Split) -> impl Iterator<Item = Subtrajectory<'_>> + '_ {
        self.windows
            .iter()
            .filter(move |w| w.split == split)
            .map(|w| self.window(w))
    }

    pub fn count(&self, split: Split) -> usize {
        self.windows.iter().filter(|w| w.split == split).count()
    }

    /// All clients' data back to back, keeping each client's windows and
    /// split. Pooling a single dataset returns it unchanged.
    pub fn pooled(datasets: &[ClientDataset]) -> Result<ClientDataset> {
        let first = datasets.first().ok_or(Error::Empty("dataset list"))?;
        let mut pooled = first.clone();
        for d in &datasets[1..] {
            if d.dt != first.dt {
                return Err(Error::Config(format!(
                    "cannot pool datasets with dt {} and {}",
                    first.dt, d.dt
                )));
            }
            let offset = pooled.measurements.len();
            pooled.measurements.extend_from_slice(&d.measurements);
            pooled.truth.extend_from_slice(&d.truth);
            pooled.windows.extend(d.windows.iter().map(|w| Window {
                start: w.start + offset,
                ..*w
            }));
        }
        Ok(pooled)
    }
}

/// Generates and corrupts one trajectory per spec. Client `i` gets id `i`,
/// noise seed and split seed derived from `seed`.
pub fn make_client_datasets(
    specs: &[TrajectorySpec],
    noise: &NoiseSpec,
    window_len: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let truth = generate_trajectory(spec)?;
            let corrupted = corrupt(&truth, noise, derive_seed(seed, "client-noise", i as u64))?;
            ClientDataset::new(
                i as u32,
                spec.dt,
                window_len,
                corrupted.measurements,
                truth.positions,
                split_ratio,
                derive_seed(seed, "client-split", i as u64),
            )
        })
        .collect()
}

/// Contents of a trajectory CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub times: Vec<f64>,
    pub measurements: Vec<Measurement>,
    pub truth: Option<GroundTruth>,
}

impl TrajectoryFile {
    /// Sampling interval from the first two time stamps (0.1 s for a single row).
    pub fn dt(&self) -> f64 {
        match self.times.as_slice() {
            [a, b, ..] => b - a,
            _ => default_dt(),
        }
    }
}

const MEAS_COLUMNS: [&str; 7] = ["t", "x", "y", "z", "vx", "vy", "vz"];
const TRUTH_COLUMNS: [&str; 6] = ["gx", "gy", "gz", "gvx", "gvy", "gvz"];

/// Writes `t,x,y,z,vx,vy,vz` and, with ground truth, `gx,gy,gz,gvx,gvy,gvz`.
/// Values use the shortest representation that parses back exactly.
pub fn save_trajectory_file(
    path: impl AsRef<Path>,
    dt: f64,
    measurements: &[Measurement],
    truth: Option<&GroundTruth>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(g) = truth {
        if g.len() != measurements.len() {
            return Err(Error::LengthMismatch {
                what: "measurements vs ground truth",
                left: measurements.len(),
                right: g.len(),
            });
        }
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = MEAS_COLUMNS.to_vec();
    if truth.is_some() {
        header.extend(TRUTH_COLUMNS);
    }
    w.write_record(&header).map_err(io)?;
    for (t, m) in measurements.iter().enumerate() {
        let v = m.velocity.unwrap_or_else(Vec3::zeros);
        let mut row = vec![(t as f64 * dt).to_string()];
        row.extend(m.position.iter().chain(v.iter()).map(f64::to_string));
        if let Some(g) = truth {
            row.extend(g.positions[t].iter().chain(g.velocities[t].iter()).map(f64::to_string));
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trajectory_file(path: impl AsRef<Path>) -> Result<TrajectoryFile> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let headers = r.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h.trim() == name) };
    let mut meas_idx = Vec::new();
    for name in MEAS_COLUMNS {
        meas_idx.push(col(name).ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })?);
    }
    let present: Vec<Option<usize>> = TRUTH_COLUMNS.iter().map(|n| col(n)).collect();
    let truth_idx: Option<Vec<usize>> = if present.iter().all(Option::is_none) {
        None
    } else {
        let mut idx = Vec::new();
        for (name, p) in TRUTH_COLUMNS.iter().zip(&present) {
            idx.push(p.ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })?);
        }
        Some(idx)
    };

    let mut times = Vec::new();
    let mut measurements = Vec::new();
    let mut gp = Vec::new();
    let mut gv = Vec::new();
    for (k, record) in r.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        let num = |i: usize| -> Result<f64> {
            let s = record.get(i).unwrap_or("").trim();
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("`{s}` in column `{}` is not a finite number", &headers[i]),
            })
        };
        let m: Vec<f64> = meas_idx.iter().map(|&i| num(i)).collect::<Result<_>>()?;
        if let Some(&prev) = times.last() {
            if m[0] <= prev {
                return Err(Error::NonMonotoneTime {
                    path: path.to_path_buf(),
                    line,
                });
            }
        }
        times.push(m[0]);
        measurements.push(Measurement::with_velocity(
            Vec3::new(m[1], m[2], m[3]),
            Vec3::new(m[4], m[5], m[6]),
        ));
        if let Some(idx) = &truth_idx {
            let g: Vec<f64> = idx.iter().map(|&i| num(i)).collect::<Result<_>>()?;
            gp.push(Vec3::new(g[0], g[1], g[2]));
            gv.push(Vec3::new(g[3], g[4], g[5]));
        }
    }
    if measurements.is_empty() {
        return Err(Error::Empty("trajectory file"));
    }
    let mut file = TrajectoryFile {
        times,
        measurements,
        truth: None,
    };
    if truth_idx.is_some() {
        file.truth = Some(GroundTruth {
            dt: file.dt(),
            positions: gp,
            velocities: gv,
        });
    }
    Ok(file)
}

/// Index of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub window_len: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub clients: Vec<ManifestEntry>,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    pub path: PathBuf,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Loads every client file; relative paths resolve against `base`.
    pub fn load_clients(&self, base: &Path) -> Result<Vec<ClientDataset>> {
        self.clients
            .iter()
            .map(|entry| {
                let file = load_trajectory_file(Self::resolve(base, &entry.path))?;
                let truth = file.truth.as_ref().ok_or_else(|| Error::MissingColumn {
                    path: entry.path.clone(),
                    column: "gx".into(),
                })?;
                ClientDataset::new(
                    entry.id,
                    file.dt(),
                    self.window_len,
                    file.measurements.clone(),
                    truth.positions.clone(),
                    self.split_ratio,
                    derive_seed(self.split_seed, "client-split", entry.id as u64),
                )
            })
            .collect()
    }

    pub fn load_test(&self, base: &Path) -> Result<TrajectoryFile> {
        let path = Self::resolve(base, &self.test);
        let file = load_trajectory_file(&path)?;
        if file.truth.is_none() {
            return Err(Error::MissingColumn {
                path,
                column: "gx".into(),
            });
        }
        Ok(file)
    }
}
