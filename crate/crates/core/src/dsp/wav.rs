//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;

/// Reads a 16-bit PCM mono wav file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Parses an in-memory wav file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedHeader("missing RIFF/WAVE tag".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::MalformedHeader("chunk runs past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::MalformedHeader("fmt chunk too short".into()));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format
                    .ok_or_else(|| Error::MalformedHeader("data chunk before fmt chunk".into()))?;
                if tag != PCM_FORMAT {
                    return Err(Error::UnsupportedFormat(format!("format tag {tag} is not PCM")));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, expected 16")));
                }
                if rate == 0 {
                    return Err(Error::MalformedHeader("sample rate is zero".into()));
                }
                if body.len() % 2 != 0 {
                    return Err(Error::MalformedHeader("odd data chunk length".into()));
                }
                let samples: Vec<f32> = body
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                    .collect();
                if samples.is_empty() {
                    return Err(Error::EmptyInput);
                }
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        // chunks are padded to even sizes
        pos = body_end + (size & 1);
    }
    Err(Error::MalformedHeader("no data chunk".into()))
}

/// Converts a float sample to int16: clamp to [-1, 1], scale by 32768, round, saturate.
pub fn to_i16(sample: f32) -> i16 {
    let scaled = (sample.clamp(-1.0, 1.0) * 32768.0).round();
    scaled.clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Serializes a clip as a canonical 44-byte-header wav file.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = (clip.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&to_i16(s).to_le_bytes());
    }
    out
}

/// Writes a clip as 16-bit PCM mono.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_with(tag: u16, channels: u16, bits: u16) -> Vec<u8> {
        let clip = AudioClip::new(vec![0.0; 4], 16000).unwrap();
        let mut bytes = encode_wav(&clip);
        bytes[20..22].copy_from_slice(&tag.to_le_bytes());
        bytes[22..24].copy_from_slice(&channels.to_le_bytes());
        bytes[34..36].copy_from_slice(&bits.to_le_bytes());
        bytes
    }

    #[test]
    fn silence_reads_as_zeros() {
        let clip = AudioClip::new(vec![0.0; 100], 16000).unwrap();
        let back = decode_wav(&encode_wav(&clip)).unwrap();
        assert!(back.samples.iter().all(|&s| s == 0.0));
        assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn int16_half_scale_reads_as_half() {
        let mut bytes = encode_wav(&AudioClip::new(vec![0.0], 16000).unwrap());
        bytes[44..46].copy_from_slice(&16384i16.to_le_bytes());
        assert_eq!(decode_wav(&bytes).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn write_clamps_and_rounds() {
        assert_eq!(to_i16(1.5), 32767);
        assert_eq!(to_i16(0.0), 0);
        assert_eq!(to_i16(-0.5), -16384);
        assert_eq!(to_i16(-1.0), -32768);
    }

    #[test]
    fn payload_round_trips_bit_exactly() {
        let payload: Vec<i16> = (0..2000).map(|i| ((i * 7919) % 65536 - 32768) as i16).collect();
        let clip = AudioClip::new(payload.iter().map(|&v| v as f32 / 32768.0).collect(), 8000).unwrap();
        let bytes = encode_wav(&clip);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(encode_wav(&back), bytes);
        let stored: Vec<i16> = bytes[44..]
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(stored, payload);
    }

    #[test]
    fn rejects_unsupported_layouts() {
        assert!(matches!(decode_wav(&header_with(1, 2, 16)), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_wav(&header_with(1, 1, 24)), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_wav(&header_with(3, 1, 16)), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(decode_wav(b"not a wav file"), Err(Error::MalformedHeader(_))));
        let bytes = encode_wav(&AudioClip::new(vec![0.1; 10], 16000).unwrap());
        assert!(matches!(decode_wav(&bytes[..50]), Err(Error::MalformedHeader(_))));
    }
}
