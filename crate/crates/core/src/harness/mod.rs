//! Synthetic WRF-like workload: a 3D grid split over ranks in x and y, a
//! smooth deterministic field per variable, and the drivers that run, check
//! and sweep it.

mod report;
mod run;
mod sweep;
mod verify;

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::types::{Dtype, Selection, Topology, VariableDef};

pub use report::{RunReport, StepRow, Totals, STEPS_CSV_HEADER};
pub use run::{run, run_rank, Launch, RankResult, RunConfig, CAPTURE_NAME};
pub use sweep::{bench_sweep, preset, table_one_order, Cell, SweepReport, SweepRow, SWEEP_CSV_HEADER};
pub use verify::{verify, Mismatch, VerifyOutcome};

const NAMES: [&str; 8] = ["T", "U", "V", "W", "QVAPOR", "P", "PH", "QCLOUD"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    /// (nx, ny, nz); arrays are laid out with z fastest.
    pub global_shape: [u64; 3],
    pub nvars: u32,
    pub dtype: Dtype,
    pub steps: u64,
    pub compute_ms: u64,
    pub ranks: u32,
    pub ranks_per_node: u32,
    pub seed: u64,
    /// Noise amplitude relative to the summed wave amplitudes.
    pub noise: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            global_shape: [256, 192, 32],
            nvars: 8,
            dtype: Dtype::F32,
            steps: 4,
            compute_ms: 0,
            ranks: 8,
            ranks_per_node: 4,
            seed: 1,
            noise: 1e-3,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.global_shape.contains(&0) {
            return Err(Error::config("global_shape dimensions must be positive"));
        }
        if self.nvars == 0 {
            return Err(Error::config("nvars must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be a finite non-negative number"));
        }
        self.topology()?;
        self.grid()?;
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.ranks, self.ranks_per_node)
    }

    pub fn grid(&self) -> Result<(u32, u32)> {
        decompose(self.ranks, self.global_shape[0], self.global_shape[1])
    }

    pub fn var_name(&self, v: u32) -> String {
        NAMES
            .get(v as usize)
            .map_or_else(|| format!("F{v}"), |n| n.to_string())
    }

    pub fn defs(&self) -> Vec<VariableDef> {
        (0..self.nvars)
            .map(|v| VariableDef::new(self.var_name(v), self.dtype, self.global_shape.to_vec()))
            .collect()
    }

    pub fn raw_bytes_per_step(&self) -> u64 {
        self.global_shape.iter().product::<u64>() * self.dtype.elem_size() as u64 * self.nvars as u64
    }

    /// The x/y patch owned by `rank`, full in z.
    pub fn patch(&self, rank: u32) -> Result<Selection> {
        let (px, py) = self.grid()?;
        let (ix, iy) = (rank % px, rank / px);
        let (x0, nx) = split(self.global_shape[0], px, ix);
        let (y0, ny) = split(self.global_shape[1], py, iy);
        Ok(Selection::new(vec![x0, y0, 0], vec![nx, ny, self.global_shape[2]]))
    }

    /// Encoded values of variable `v` over `sel` at `step`.
    pub fn fill(&self, v: u32, step: u64, sel: &Selection) -> Vec<u8> {
        let f = Field::new(self.seed, v, self.noise);
        let table = |a: usize| -> Vec<[f64; 3]> {
            (sel.start[a]..sel.start[a] + sel.count[a])
                .map(|i| f.axis_terms(a, i, step))
                .collect()
        };
        let (tx, ty, tz) = (table(0), table(1), table(2));
        let es = self.dtype.elem_size();
        let col = sel.count[2] as usize;
        let ny = sel.count[1] as usize;
        let mut out = vec![0u8; sel.num_elements() as usize * es];
        let dtype = self.dtype;
        par::fill_chunks(&mut out, col * es, |base, chunk| {
            let c = base / (col * es);
            let (ix, iy) = (c / ny, c % ny);
            let x = sel.start[0] + ix as u64;
            let y = sel.start[1] + iy as u64;
            let mut buf = Vec::with_capacity(chunk.len());
            for (k, az) in tz.iter().enumerate() {
                let s = f.combine(&tx[ix], &ty[iy], az);
                dtype.encode_value(f.finish(s, x, y, sel.start[2] + k as u64, step), &mut buf);
            }
            chunk.copy_from_slice(&buf);
        });
        out
    }
}

/// Factors `ranks` into px × py, picking the split whose patches are
/// closest to square.
pub fn decompose(ranks: u32, nx: u64, ny: u64) -> Result<(u32, u32)> {
    (1..=ranks)
        .filter(|px| ranks % px == 0)
        .map(|px| (px, ranks / px))
        .filter(|&(px, py)| px as u64 <= nx && py as u64 <= ny)
        .min_by(|a, b| {
            let skew = |(px, py): (u32, u32)| {
                let r = (nx as f64 / px as f64) / (ny as f64 / py as f64);
                r.max(1.0 / r)
            };
            skew(*a).total_cmp(&skew(*b))
        })
        .ok_or_else(|| Error::config(format!("{ranks} ranks cannot tile a {nx}x{ny} grid")))
}

/// Start and length of part `i` of `n` cells over `p` parts; the remainder
/// goes to the low parts.
pub fn split(n: u64, p: u32, i: u32) -> (u64, u64) {
    let (base, rem) = (n / p as u64, n % p as u64);
    let i = i as u64;
    (i * base + i.min(rem), base + u64::from(i < rem))
}

// splitmix64 finalizer, used as a stateless hash
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// One separable standing wave: a sinusoid along each axis, the x one
/// drifting with the step.
#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    k: [f64; 3],
    phase: [f64; 3],
    drift: f64,
}

impl Wave {
    fn axis(&self, a: usize, i: u64, t: u64) -> f64 {
        let arg = self.k[a] * i as f64 + self.phase[a];
        if a == 0 {
            (arg + self.drift * t as f64).sin()
        } else {
            arg.cos()
        }
    }
}

/// Parameters of one variable's field.
#[derive(Clone, Debug)]
pub struct Field {
    waves: [Wave; 3],
    noise: f64,
    /// Output resolution: the power of two at or below the noise amplitude.
    quantum: f64,
    key: u64,
}

impl Field {
    pub fn new(seed: u64, var: u32, noise: f64) -> Self {
        let key = mix(seed ^ mix(var as u64 + 1));
        let mut n = 0u64;
        let mut next = || {
            n += 1;
            unit(mix(key ^ n.wrapping_mul(0xa076_1d64_78bd_642f)))
        };
        let waves = [(); 3].map(|_| Wave {
            amp: 1.0 + 4.0 * next(),
            // wavelengths between 16 and 64 cells
            k: [(); 3].map(|_| TAU / (16.0 + 48.0 * next())),
            phase: [(); 3].map(|_| TAU * next()),
            drift: 0.2 + 0.6 * next(),
        });
        let amp: f64 = waves.iter().map(|w| w.amp).sum();
        let noise = noise * amp;
        let quantum = if noise > 0.0 { noise.log2().floor().exp2() } else { 0.0 };
        Self {
            waves,
            noise,
            quantum,
            key,
        }
    }

    /// Each wave's factor along axis `a` at coordinate `i`.
    fn axis_terms(&self, a: usize, i: u64, t: u64) -> [f64; 3] {
        [0, 1, 2].map(|w| self.waves[w].axis(a, i, t))
    }

    fn combine(&self, ax: &[f64; 3], ay: &[f64; 3], az: &[f64; 3]) -> f64 {
        self.waves
            .iter()
            .enumerate()
            .map(|(w, wave)| wave.amp * ax[w] * ay[w] * az[w])
            .sum()
    }

    pub fn smooth(&self, x: u64, y: u64, z: u64, t: u64) -> f64 {
        self.combine(
            &self.axis_terms(0, x, t),
            &self.axis_terms(1, y, t),
            &self.axis_terms(2, z, t),
        )
    }

    fn finish(&self, s: f64, x: u64, y: u64, z: u64, t: u64) -> f64 {
        if self.noise == 0.0 {
            return s;
        }
        let cell = (x << 42) ^ (y << 21) ^ z;
        let h = mix(self.key ^ mix(cell ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let v = s + self.noise * (2.0 * unit(h) - 1.0);
        (v / self.quantum).round() * self.quantum
    }

    pub fn value(&self, x: u64, y: u64, z: u64, t: u64) -> f64 {
        self.finish(self.smooth(x, y, z, t), x, y, z, t)
    }
}

/// Value of variable `var` at grid point (x, y, z) and step `t`.
pub fn field_value(var: u32, x: u64, y: u64, z: u64, t: u64, seed: u64, noise: f64) -> f64 {
    Field::new(seed, var, noise).value(x, y, z, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, Codec, CodecSpec};
    use proptest::prelude::*;

    #[test]
    fn deterministic_bits() {
        let a = field_value(3, 10, 20, 3, 7, 42, 1e-3);
        let b = field_value(3, 10, 20, 3, 7, 42, 1e-3);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, field_value(3, 10, 20, 3, 7, 43, 1e-3));
    }

    #[test]
    fn zero_noise_is_the_wave_sum() {
        let f = Field::new(9, 1, 0.0);
        for (x, y, z, t) in [(0, 0, 0, 0), (5, 17, 3, 2), (63, 1, 7, 11)] {
            let oracle: f64 = f
                .waves
                .iter()
                .map(|w| {
                    let sx = (w.k[0] * x as f64 + w.phase[0] + w.drift * t as f64).sin();
                    let cy = (w.k[1] * y as f64 + w.phase[1]).cos();
                    let cz = (w.k[2] * z as f64 + w.phase[2]).cos();
                    w.amp * sx * cy * cz
                })
                .sum();
            assert_eq!(field_value(1, x, y, z, t, 9, 0.0), oracle);
        }
    }

    #[test]
    fn noise_stays_small() {
        let f = Field::new(3, 0, 1e-3);
        let amp: f64 = f.waves.iter().map(|w| w.amp).sum();
        for i in 0..1000 {
            let d = (f.value(i, 2 * i, i % 8, 1) - f.smooth(i, 2 * i, i % 8, 1)).abs();
            assert!(d <= 1.5e-3 * amp);
            let q = f.value(i, 2 * i, i % 8, 1) / f.quantum;
            assert_eq!(q, q.round());
        }
    }

    #[test]
    fn smooth_field_compresses() {
        let spec = WorkloadSpec {
            global_shape: [64, 64, 8],
            nvars: 1,
            ..Default::default()
        };
        let raw = spec.fill(0, 0, &Selection::new(vec![0, 0, 0], vec![64, 64, 8]));
        let stored = encode(&raw, 4, CodecSpec::with_default_level(Codec::Zstd, true))
            .unwrap()
            .body
            .len();
        let ratio = raw.len() as f64 / stored as f64;
        assert!(ratio > 2.0, "ratio {ratio:.3}");
    }

    #[test]
    fn decomposition_examples() {
        assert_eq!(decompose(4, 16, 16).unwrap(), (2, 2));
        assert_eq!(decompose(8, 256, 192).unwrap(), (4, 2));
        assert_eq!(decompose(16, 64, 48).unwrap(), (4, 4));
        assert!(decompose(7, 4, 4).is_err());
        assert_eq!(split(10, 3, 0), (0, 4));
        assert_eq!(split(10, 3, 2), (7, 3));
    }

    #[test]
    fn fill_matches_pointwise_oracle() {
        let spec = WorkloadSpec {
            global_shape: [9, 7, 3],
            nvars: 2,
            ranks: 4,
            ..Default::default()
        };
        let sel = spec.patch(3).unwrap();
        let got = spec.fill(1, 2, &sel);
        let mut want = Vec::new();
        for x in sel.start[0]..sel.start[0] + sel.count[0] {
            for y in sel.start[1]..sel.start[1] + sel.count[1] {
                for z in 0..3 {
                    want.extend((field_value(1, x, y, z, 2, spec.seed, spec.noise) as f32).to_le_bytes());
                }
            }
        }
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn patches_tile_the_grid(ranks in 1u32..13, nx in 1u64..40, ny in 1u64..40, nz in 1u64..4) {
            let spec = WorkloadSpec { global_shape: [nx, ny, nz], ranks, ranks_per_node: ranks, ..Default::default() };
            prop_assume!(spec.grid().is_ok());
            let mut seen = vec![0u8; (nx * ny) as usize];
            let mut sizes = Vec::new();
            for r in 0..ranks {
                let p = spec.patch(r).unwrap();
                prop_assert_eq!(p.count[2], nz);
                sizes.push(p.count[0] * p.count[1]);
                for x in p.start[0]..p.start[0] + p.count[0] {
                    for y in p.start[1]..p.start[1] + p.count[1] {
                        seen[(x * ny + y) as usize] += 1;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let (px, py) = spec.grid().unwrap();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap()
                <= (nx / px as u64 + 1) * (ny / py as u64 + 1) - (nx / px as u64) * (ny / py as u64));
        }
    }
}
