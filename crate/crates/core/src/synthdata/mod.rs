//! Synthetic paired audio/video corpus: event-driven clips whose audio and
//! video are causally linked and whose timbre is self-similar within a clip.
//!
//! Each clip is 10 s long. Sound events are decaying harmonic bursts from one
//! timbre family per clip; the video shows a Gaussian blob at that family's
//! position pulsing at every event with the same decay.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use rayon::prelude::*;

use crate::dsp::{self, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::util::{derive_seed, seeded_rng};

pub const CLIP_SECONDS: f64 = 10.0;
pub const VIDEO_FPS: usize = 24;
pub const VIDEO_HW: usize = 16;
pub const VIDEO_FRAMES: usize = 240; // 24 fps × 10 s
pub const MIN_EVENT_GAP: f64 = 0.15;
pub const MAX_EVENTS: usize = 12;
pub const MIN_EVENTS: usize = 2;

/// A parameterized synthetic sound identity. The `family_id` doubles as the
/// categorical text label for the clip.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimbreFamily {
    pub family_id: usize,
    pub f0: f64,
    pub n_harmonics: usize,
    pub harmonic_weights: Vec<f64>,
    pub decay_rate: f64,
    pub noise_mix: f64,
    /// Blob centre in normalized [0,1]² image coordinates.
    pub blob: (f64, f64),
    /// RGB tint of the blob.
    pub tint: [f64; 3],
}

impl TimbreFamily {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(80.0..=2000.0).contains(&self.f0) {
            return Err(Error::InvalidInput(format!(
                "f0 {} outside [80, 2000] Hz",
                self.f0
            )));
        }
        if self.f0 * self.n_harmonics as f64 >= sample_rate as f64 / 2.0 {
            return Err(Error::InvalidInput(format!(
                "family {}: {} harmonics at f0 {} exceed Nyquist",
                self.family_id, self.n_harmonics, self.f0
            )));
        }
        if self.harmonic_weights.len() != self.n_harmonics
            || self.harmonic_weights.iter().any(|&w| w <= 0.0)
        {
            return Err(Error::InvalidInput(
                "harmonic weights must be positive, one per harmonic".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_mix) {
            return Err(Error::InvalidInput("noise_mix outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Eight default families, spaced in f0, spectral slope, decay and noisiness
/// so a small classifier can separate them.
pub fn default_families() -> Vec<TimbreFamily> {
    let spec: [(f64, usize, &[f64], f64, f64); 8] = [
        (110.0, 6, &[1.0, 0.8, 0.6, 0.45, 0.3, 0.2], 3.0, 0.04),
        (155.0, 5, &[1.0, 0.5, 0.25, 0.12, 0.06], 9.0, 0.0),
        (220.0, 5, &[1.0, 0.15, 0.8, 0.1, 0.5], 5.0, 0.10),
        (311.0, 4, &[0.6, 1.0, 0.5, 0.3], 13.0, 0.02),
        (440.0, 4, &[1.0, 0.9, 0.8, 0.7], 2.0, 0.18),
        (622.0, 3, &[1.0, 0.3, 0.1], 7.0, 0.0),
        (880.0, 2, &[1.0, 0.6], 11.0, 0.08),
        (1245.0, 2, &[1.0, 0.25], 4.0, 0.25),
    ];
    let positions = [
        (0.22, 0.22),
        (0.74, 0.24),
        (0.25, 0.74),
        (0.76, 0.72),
        (0.50, 0.28),
        (0.28, 0.48),
        (0.72, 0.50),
        (0.50, 0.76),
    ];
    let tints = [
        [1.0, 0.4, 0.3],
        [0.3, 1.0, 0.4],
        [0.35, 0.45, 1.0],
        [1.0, 0.95, 0.3],
        [0.95, 0.35, 1.0],
        [0.3, 1.0, 0.95],
        [1.0, 0.7, 0.45],
        [0.75, 0.75, 0.95],
    ];
    spec.iter()
        .enumerate()
        .map(|(i, (f0, nh, w, decay, noise))| TimbreFamily {
            family_id: i,
            f0: *f0,
            n_harmonics: *nh,
            harmonic_weights: w.to_vec(),
            decay_rate: *decay,
            noise_mix: *noise,
            blob: positions[i],
            tint: tints[i],
        })
        .collect()
}

/// One clip's schedule: event onsets, per-event amplitudes, and the timbre
/// family that renders every event.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipSpec {
    pub clip_id: u32,
    pub duration: f64,
    pub event_times: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub family: TimbreFamily,
    pub rng_seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.event_times.len();
        if !(MIN_EVENTS..=MAX_EVENTS).contains(&n) || self.amplitudes.len() != n {
            return Err(Error::InvalidInput(format!(
                "clip {}: bad event count {n}",
                self.clip_id
            )));
        }
        for w in self.event_times.windows(2) {
            if w[1] - w[0] < MIN_EVENT_GAP {
                return Err(Error::InvalidInput("events closer than the minimum gap".into()));
            }
        }
        if !self.event_times.iter().any(|&t| t < 8.0)
            || !self.event_times.iter().any(|&t| (8.0..10.0).contains(&t))
        {
            return Err(Error::InvalidInput(
                "clip must have an event in [0,8) and one in [8,10)".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a clip schedule satisfying the gap and coverage invariants by
/// rejection sampling (at most 1000 attempts).
pub fn sample_clip_spec(rng: &mut impl Rng, families: &[TimbreFamily]) -> Result<ClipSpec> {
    if families.is_empty() {
        return Err(Error::InvalidInput("no timbre families given".into()));
    }
    let family = families[rng.gen_range(0..families.len())].clone();
    for _attempt in 0..1000 {
        let n = rng.gen_range(MIN_EVENTS..=MAX_EVENTS);
        let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..=9.8)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gaps_ok = times.windows(2).all(|w| w[1] - w[0] >= MIN_EVENT_GAP);
        let coverage_ok =
            times.iter().any(|&t| t < 8.0) && times.iter().any(|&t| (8.0..10.0).contains(&t));
        if gaps_ok && coverage_ok {
            let amplitudes = (0..n).map(|_| rng.gen_range(0.3..=1.0)).collect();
            return Ok(ClipSpec {
                clip_id: 0,
                duration: CLIP_SECONDS,
                event_times: times,
                amplitudes,
                family,
                rng_seed: rng.gen(),
            });
        }
    }
    Err(Error::InvalidInput(
        "could not satisfy clip invariants in 1000 attempts".into(),
    ))
}

/// Renders a clip's audio: per event, a decaying harmonic stack plus
/// envelope-shaped noise, summed and soft-clipped with tanh.
pub fn render_audio(spec: &ClipSpec) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE;
    let n = (CLIP_SECONDS * sr as f64) as usize;
    let mut x = vec![0.0f64; n];
    let fam = &spec.family;
    for (e, (&t_e, &amp)) in spec.event_times.iter().zip(spec.amplitudes.iter()).enumerate() {
        let start = (t_e * sr as f64).ceil() as usize;
        let mut noise_rng = seeded_rng(derive_seed(spec.rng_seed, "event-noise", e as u64));
        for (i, xi) in x.iter_mut().enumerate().skip(start) {
            let tau = i as f64 / sr as f64 - t_e;
            let env = (-fam.decay_rate * tau).exp();
            let noise: f64 = noise_rng.gen_range(-1.0..1.0);
            if env < 1e-6 {
                break;
            }
            let mut s = 0.0;
            for (h, &w) in fam.harmonic_weights.iter().enumerate() {
                s += w * (2.0 * std::f64::consts::PI * fam.f0 * (h + 1) as f64 * tau).sin();
            }
            *xi += amp * env * (s + fam.noise_mix * noise);
        }
    }
    Waveform::new(x.into_iter().map(f64::tanh).collect(), sr)
}

/// `T_v × H × W × 3` pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    pub frames: Array4<f32>,
}

impl VideoFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

const VIDEO_BACKGROUND: f64 = 0.05;
const BLOB_SIGMA: f64 = 2.0; // pixels

/// Renders a clip's video: dark background; at each event the family's blob
/// pulses to the event amplitude and decays with the audio's decay rate.
pub fn render_video(spec: &ClipSpec) -> VideoFrames {
    let fam = &spec.family;
    let cx = fam.blob.0 * (VIDEO_HW - 1) as f64;
    let cy = fam.blob.1 * (VIDEO_HW - 1) as f64;
    let mut gauss = [[0.0f64; VIDEO_HW]; VIDEO_HW];
    for (y, row) in gauss.iter_mut().enumerate() {
        for (x, g) in row.iter_mut().enumerate() {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            *g = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
        }
    }
    let mut frames = Array4::from_elem(
        (VIDEO_FRAMES, VIDEO_HW, VIDEO_HW, 3),
        VIDEO_BACKGROUND as f32,
    );
    for k in 0..VIDEO_FRAMES {
        let t = k as f64 / VIDEO_FPS as f64;
        let mut pulse = 0.0;
        for (&t_e, &amp) in spec.event_times.iter().zip(spec.amplitudes.iter()) {
            if t >= t_e {
                pulse += amp * (-fam.decay_rate * (t - t_e)).exp();
            }
        }
        if pulse <= 1e-6 {
            continue;
        }
        for y in 0..VIDEO_HW {
            for x in 0..VIDEO_HW {
                let g = gauss[y][x];
                if g < 1e-6 {
                    continue;
                }
                for c in 0..3 {
                    let v = VIDEO_BACKGROUND + pulse * fam.tint[c] * g;
                    frames[(k, y, x, c)] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    VideoFrames { frames }
}

/// Raw-tensor video container: one line of JSON (shape/dtype/order) followed
/// by little-endian f32 data.
pub fn write_video(path: &Path, video: &VideoFrames) -> Result<()> {
    let shape = video.frames.shape();
    let header = format!(
        "{{\"shape\":[{},{},{},{}],\"dtype\":\"f32\",\"order\":\"thwc\"}}\n",
        shape[0], shape[1], shape[2], shape[3]
    );
    let mut buf = header.into_bytes();
    buf.reserve(video.frames.len() * 4);
    for &v in video.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<VideoFrames> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "missing header line".into(),
        })?;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?;
    let shape: Vec<usize> = header["shape"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64().map(|u| u as usize)).collect())
        .unwrap_or_default();
    if shape.len() != 4 || header["dtype"] != "f32" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected 4-d f32 tensor".into(),
        });
    }
    let body = &bytes[newline + 1..];
    let n: usize = shape.iter().product();
    if body.len() != n * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes of data, found {}", n * 4, body.len()),
        });
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let frames = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(VideoFrames { frames })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub clip_id: u32,
    pub family_id: usize,
    pub event_times: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub rng_seed: u64,
    pub audio_path: String,
    pub video_path: String,
    pub split: Split,
    pub spec: ClipSpec,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.audio_path)
    }

    pub fn video_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.video_path)
    }

    pub fn find(&self, clip_id: u32) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn load_audio(&self, entry: &ManifestEntry) -> Result<Waveform> {
        dsp::wav::read_wav(&self.audio_path(entry))
    }

    pub fn load_video(&self, entry: &ManifestEntry) -> Result<VideoFrames> {
        read_video(&self.video_path(entry))
    }
}

pub fn manifest_file(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

/// JSON Lines, one object per clip, UTF-8.
pub fn save_manifest(manifest: &Manifest) -> Result<()> {
    let path = manifest_file(&manifest.root);
    let mut out = String::new();
    for entry in &manifest.entries {
        out.push_str(&serde_json::to_string(entry).expect("manifest serializes"));
        out.push('\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_file(dir);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "manifest not found at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        entries.push(entry);
    }
    Ok(Manifest {
        entries,
        root: dir.to_path_buf(),
    })
}

/// 80/10/10 deterministic split by clip index: floor(n/10) each for val and
/// test, remainder to train.
pub fn split_for_index(i: usize, n: usize) -> Split {
    let tenth = n / 10;
    let train = n - 2 * tenth;
    if i < train {
        Split::Train
    } else if i < train + tenth {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates `n_clips` paired clips under `out_dir` and writes the manifest.
/// Byte-identical output for identical `(n_clips, families, seed)`.
pub fn build_corpus(
    n_clips: usize,
    families: &[TimbreFamily],
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::InvalidInput("n_clips must be >= 1".into()));
    }
    for fam in families {
        fam.validate(DEFAULT_SAMPLE_RATE)?;
    }
    let audio_dir = out_dir.join("audio");
    let video_dir = out_dir.join("video");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    std::fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;

    let mut specs = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut rng = seeded_rng(derive_seed(seed, "clip", i as u64));
        let mut spec = sample_clip_spec(&mut rng, families)?;
        spec.clip_id = i as u32;
        spec.validate()?;
        specs.push(spec);
    }

    let entries: Vec<ManifestEntry> = specs
        .par_iter()
        .map(|spec| -> Result<ManifestEntry> {
            let audio_rel = format!("audio/clip_{:05}.wav", spec.clip_id);
            let video_rel = format!("video/clip_{:05}.f32", spec.clip_id);
            let wave = render_audio(spec);
            dsp::wav::write_wav(&out_dir.join(&audio_rel), &wave)?;
            let video = render_video(spec);
            write_video(&out_dir.join(&video_rel), &video)?;
            Ok(ManifestEntry {
                clip_id: spec.clip_id,
                family_id: spec.family.family_id,
                event_times: spec.event_times.clone(),
                amplitudes: spec.amplitudes.clone(),
                rng_seed: spec.rng_seed,
                audio_path: audio_rel,
                video_path: video_rel,
                split: split_for_index(spec.clip_id as usize, n_clips),
                spec: spec.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    save_manifest(&manifest)?;
    Ok(manifest)
}
