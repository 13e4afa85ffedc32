//! Minimal RIFF/WAVE reader and writer: PCM 16-bit signed, mono,
//! little-endian. Round trips of quantized samples are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

const I16_SCALE: f64 = 32767.0;

pub fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * I16_SCALE).round() as i16
}

pub fn dequantize(q: i16) -> f64 {
    q as f64 / I16_SCALE
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let data_len = (wave.samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&wave.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        buf.extend_from_slice(&quantize(s).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk too short".into());
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(format!(
                        "unsupported format: pcm={format} channels={channels} bits={bits} (need PCM16 mono)"
                    ));
                }
                sample_rate = Some(u32::from_le_bytes(body[4..8].try_into().unwrap()));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = pos + 8 + size + (size & 1);
    }
    let sample_rate = sample_rate.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    let samples = data
        .chunks_exact(2)
        .map(|c| dequantize(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let raw = Waveform::new(
            (0..777).map(|i| ((i * 37 % 200) as f64 / 100.0) - 1.0).collect(),
            8000,
        );
        // Quantize once so the on-disk grid is the reference.
        let quantized = Waveform::new(raw.samples.iter().map(|&s| dequantize(quantize(s))).collect(), 8000);
        write_wav(&path, &quantized).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples, quantized.samples);

        // Writing the read-back samples again produces identical bytes.
        let path2 = dir.path().join("t2.wav");
        write_wav(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn read_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
