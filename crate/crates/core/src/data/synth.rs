use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MaskVolume, Volume, VolumeMeta};
use crate::error::{Error, Result};

/// Layered synthetic survey settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Horizon relief relative to the nominal band thickness.
    pub horizon_waviness: f64,
    /// Defaults to the run seed when absent.
    pub texture_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slices: 24,
            height: 160,
            width: 240,
            num_classes: 7,
            horizon_waviness: 1.0,
            texture_seed: None,
        }
    }
}

/// A smooth surface `sum a sin(2 pi (c / lc + s / ls) + phase)`.
struct Surface {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Surface {
    /// `amplitude` bounds the surface's absolute value.
    fn random(rng: &mut ChaCha8Rng, amplitude: f64, width: f64, slices: f64, n: usize) -> Self {
        let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
        let waves = (0..n)
            .map(|i| {
                let a = amplitude / harmonic / (i + 1) as f64;
                let lc = width * rng.random_range(0.4..1.6) / (i + 1) as f64;
                let ls = slices * rng.random_range(1.5..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (a, lc, ls, rng.random_range(0.0..TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, s: f64, c: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(a, lc, ls, ph)| a * (TAU * (c / lc + s / ls) + ph).sin())
            .sum()
    }
}

/// Per-band reflector texture.
struct Texture {
    freq: f64,
    amplitude: f64,
    noise: f64,
    offset: f64,
    wobble: f64,
    wobble_len: f64,
}

/// Ordered wavy horizons with a distinct texture in every band. Labels are
/// band indices counted from the top.
pub fn generate_synthetic_volume(cfg: &SynthConfig, seed: u64) -> Result<(Volume, MaskVolume)> {
    let (ns, h, w, nc) = (cfg.slices, cfg.height, cfg.width, cfg.num_classes);
    if nc < 2 || nc > u8::MAX as usize {
        return Err(Error::config(format!(
            "synth.num_classes must be in [2, 255], got {nc}"
        )));
    }
    if ns == 0 || w == 0 || h < 2 * nc {
        return Err(Error::config(format!(
            "synth: a {ns}x{h}x{w} volume cannot hold {nc} bands of at least 2 pixels"
        )));
    }
    if !(cfg.horizon_waviness >= 0.0 && cfg.horizon_waviness.is_finite()) {
        return Err(Error::config("synth.horizon_waviness must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed.unwrap_or(seed));
    let t = h as f64 / nc as f64;
    let wv = cfg.horizon_waviness;
    let shared = Surface::random(&mut rng, 0.5 * wv * t, w as f64, ns as f64, 3);
    let own: Vec<Surface> = (1..nc)
        .map(|_| Surface::random(&mut rng, 0.15 * wv * t, w as f64, ns as f64, 2))
        .collect();

    let mut order: Vec<usize> = (0..nc).collect();
    order.shuffle(&mut rng);
    let textures: Vec<Texture> = order
        .iter()
        .map(|&rank| Texture {
            freq: 0.03 + 0.4 * (rank as f64 + 0.5) / nc as f64,
            amplitude: rng.random_range(0.3..1.0),
            noise: rng.random_range(0.05..0.3),
            offset: rng.random_range(-0.4..0.4),
            wobble: rng.random_range(0.0..2.0),
            wobble_len: rng.random_range(0.2..1.0) * w as f64,
        })
        .collect();

    let mut image = vec![0f32; ns * h * w];
    let mut labels = vec![0u8; ns * h * w];
    let mut tops = vec![0f64; nc];
    for s in 0..ns {
        for c in 0..w {
            let (sf, cf) = (s as f64, c as f64);
            let base = shared.at(sf, cf);
            for k in 1..nc {
                tops[k] = k as f64 * t + base + own[k - 1].at(sf, cf);
            }
            for k in 0..nc {
                let lower = if k + 1 < nc { tops[k + 1] } else { h as f64 };
                if lower - tops[k] < 2.0 {
                    return Err(Error::config(format!(
                        "synth: band {k} is thinner than 2 pixels at slice {s}, column {c}; lower horizon_waviness"
                    )));
                }
            }
            let mut band = 0;
            for r in 0..h {
                let rf = r as f64;
                while band + 1 < nc && rf >= tops[band + 1] {
                    band += 1;
                }
                let tx = &textures[band];
                let phase = tx.wobble * (TAU * cf / tx.wobble_len).sin();
                let v = tx.amplitude * (TAU * tx.freq * (rf - tops[band]) + phase).sin() + tx.offset;
                let idx = (s * h + r) * w + c;
                image[idx] = v as f32;
                labels[idx] = band as u8;
            }
        }
    }
    // Noise drawn in row-major order so the volume depends only on the seed.
    for (v, &l) in image.iter_mut().zip(&labels) {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = ((*v as f64 + textures[l as usize].noise * n) * 10_000.0) as f32;
    }
    let dims = [ns, h, w];
    Ok((
        Volume::new(
            dims,
            image,
            VolumeMeta::new(format!("synthetic:{}", cfg.texture_seed.unwrap_or(seed))),
        )?,
        MaskVolume::new(dims, labels, nc)?,
    ))
}
