//! RIFF/WAVE PCM 16-bit reader and writer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Wav {
    pub sample_rate: u32,
    pub channels: u16,
    /// Interleaved frames.
    pub samples: Vec<i16>,
}

impl Wav {
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    /// Channel `ch` as floats in [-1, 1).
    pub fn channel(&self, ch: usize) -> Vec<f32> {
        let c = self.channels as usize;
        self.samples.iter().skip(ch).step_by(c).map(|s| *s as f32 / 32768.0).collect()
    }
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

fn u16_at(b: &[u8], o: usize) -> Result<u16> {
    b.get(o..o + 2).map(|s| u16::from_le_bytes([s[0], s[1]])).ok_or_else(|| err(o, "unexpected end of file"))
}

fn u32_at(b: &[u8], o: usize) -> Result<u32> {
    b.get(o..o + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| err(o, "unexpected end of file"))
}

pub fn parse_wav(bytes: &[u8]) -> Result<Wav> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() && id != b"data" {
            return Err(err(pos + 4, format!("chunk size {size} runs past end of file")));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(err(pos + 4, format!("fmt chunk too short ({size} bytes)")));
                }
                let format = u16_at(bytes, body)?;
                if format != 1 {
                    return Err(err(body, format!("unsupported format tag {format}, only PCM (1)")));
                }
                let channels = u16_at(bytes, body + 2)?;
                if channels == 0 {
                    return Err(err(body + 2, "zero channels"));
                }
                let rate = u32_at(bytes, body + 4)?;
                if rate == 0 {
                    return Err(err(body + 4, "zero sample rate"));
                }
                let bits = u16_at(bytes, body + 14)?;
                if bits != 16 {
                    return Err(err(body + 14, format!("unsupported bit depth {bits}, only 16")));
                }
                fmt = Some((channels, rate));
            }
            b"data" => {
                let (channels, sample_rate) = fmt.ok_or_else(|| err(pos, "data chunk before fmt chunk"))?;
                if body + size > bytes.len() {
                    return Err(err(pos + 4, format!("data chunk size {size} runs past end of file")));
                }
                let frame_bytes = 2 * channels as usize;
                if !size.is_multiple_of(frame_bytes) {
                    return Err(err(pos + 4, format!("data size {size} is not a whole number of frames")));
                }
                let samples = bytes[body..body + size].chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]])).collect();
                return Ok(Wav { sample_rate, channels, samples });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(err(pos.min(bytes.len()), if fmt.is_some() { "no data chunk" } else { "no fmt chunk" }))
}

pub fn write_wav(wav: &Wav) -> Vec<u8> {
    let data_len = wav.samples.len() * 2;
    let mut b = Vec::with_capacity(44 + data_len);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&wav.channels.to_le_bytes());
    b.extend_from_slice(&wav.sample_rate.to_le_bytes());
    let block = wav.channels as u32 * 2;
    b.extend_from_slice(&(wav.sample_rate * block).to_le_bytes());
    b.extend_from_slice(&(block as u16).to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &wav.samples {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b
}
