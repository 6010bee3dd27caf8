//! RIFF/WAVE reading and writing.
//!
//! Reads PCM-16 and IEEE float-32, mono or multichannel (channels averaged);
//! writes PCM-16 LE mono. Integer samples normalize as `q / 32768`; writing
//! quantizes as `round(clamp(x) * 32768)` clamped to ±32767 so that a
//! read-write cycle reproduces sample words exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;
const FMT_EXTENSIBLE: u16 = 0xFFFE;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WavParse {
                offset: self.pos,
                msg: format!("unexpected end of file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn tag(&mut self, what: &str) -> Result<[u8; 4]> {
        let b = self.take(4, what)?;
        Ok([b[0], b[1], b[2], b[3]])
    }
}

/// Reads a WAV file into a normalized mono buffer. Multichannel input is
/// averaged across channels; the sample rate is preserved.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.tag("RIFF magic")? != *b"RIFF" {
        return Err(Error::WavParse {
            offset: 0,
            msg: "missing RIFF magic".into(),
        });
    }
    r.u32("RIFF size")?;
    if r.tag("WAVE magic")? != *b"WAVE" {
        return Err(Error::WavParse {
            offset: 8,
            msg: "missing WAVE form type".into(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while r.pos + 8 <= bytes.len() {
        let chunk_off = r.pos;
        let id = r.tag("chunk id")?;
        let size = r.u32("chunk size")? as usize;
        let body = r.take(size, "chunk body")?;
        if size % 2 == 1 {
            let _ = r.take(1, "chunk pad");
        }
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavParse {
                        offset: chunk_off,
                        msg: format!("fmt chunk too small ({size} bytes)"),
                    });
                }
                let mut fr = Reader {
                    bytes: body,
                    pos: 0,
                };
                let mut format = fr.u16("audio format")?;
                let channels = fr.u16("channel count")?;
                let rate = fr.u32("sample rate")?;
                fr.u32("byte rate")?;
                fr.u16("block align")?;
                let bits = fr.u16("bits per sample")?;
                if format == FMT_EXTENSIBLE && size >= 40 {
                    // sub-format GUID starts with the real format code
                    fr.u16("extension size")?;
                    fr.u16("valid bits")?;
                    fr.u32("channel mask")?;
                    format = fr.u16("sub-format")?;
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
    }

    let (format, channels, rate, bits) = fmt.ok_or(Error::WavParse {
        offset: bytes.len(),
        msg: "no fmt chunk found".into(),
    })?;
    let data = data.ok_or(Error::WavParse {
        offset: bytes.len(),
        msg: "no data chunk found".into(),
    })?;
    if channels == 0 {
        return Err(Error::WavParse {
            offset: 0,
            msg: "fmt declares zero channels".into(),
        });
    }
    let ch = channels as usize;

    let interleaved: Vec<f64> = match (format, bits) {
        (FMT_PCM, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (FMT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "format code {format} with {bits} bits (PCM-16 and float-32 supported)"
            )))
        }
    };
    if interleaved.is_empty() || interleaved.len() < ch {
        return Err(Error::WavParse {
            offset: bytes.len(),
            msg: "data chunk holds no complete frame".into(),
        });
    }
    let frames = interleaved.len() / ch;
    let mono: Vec<f64> = (0..frames)
        .map(|f| interleaved[f * ch..(f + 1) * ch].iter().sum::<f64>() / ch as f64)
        .collect();
    AudioBuffer::new(mono, rate)
}

pub fn quantize_i16(x: f64) -> i16 {
    let clamped = x.clamp(-1.0, 1.0);
    (clamped * 32768.0).round().clamp(-32767.0, 32767.0) as i16
}

/// Writes PCM-16 LE mono.
pub fn write_wav(buf: &AudioBuffer, path: &Path) -> Result<()> {
    if !buf.samples.iter().all(|s| s.is_finite()) {
        return Err(Error::Constraint("refusing to write non-finite samples".into()));
    }
    let n = buf.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &buf.samples {
        out.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("diffvox-wav-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pcm16_normalization() {
        // stored [0, 16384, -16384] -> [0.0, 0.5, -0.5]
        let path = tmp("norm.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 6).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&22050u32.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&6u32.to_le_bytes());
        for q in [0i16, 16384, -16384] {
            bytes.extend_from_slice(&q.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let buf = read_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.0, 0.5, -0.5]);
        assert_eq!(buf.sample_rate_hz, 22050);
    }

    #[test]
    fn quantization_pins() {
        assert_eq!(quantize_i16(1.0), 32767);
        assert_eq!(quantize_i16(-1.0), -32767);
        assert_eq!(quantize_i16(2.0), 32767);
        assert_eq!(quantize_i16(0.0), 0);
        assert_eq!(quantize_i16(0.5), 16384);
    }

    #[test]
    fn write_then_read_round_trips_samples() {
        let path = tmp("rt.wav");
        let buf = AudioBuffer::new(vec![0.0, 0.25, -0.9, 1.0, -1.0, 0.123], 8000).unwrap();
        write_wav(&buf, &path).unwrap();
        let back = read_wav(&path).unwrap();
        // a second write must produce byte-identical data
        let path2 = tmp("rt2.wav");
        write_wav(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn stereo_inputs_average_to_mono() {
        let path = tmp("stereo.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        for q in [16384i16, -16384, 8192, 8192] {
            bytes.extend_from_slice(&q.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let buf = read_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.0, 0.25]);
    }

    #[test]
    fn float32_input_supported() {
        let path = tmp("f32.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&176400u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let buf = read_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.5, -0.25]);
    }

    #[test]
    fn malformed_header_reports_offset() {
        let path = tmp("bad.wav");
        fs::write(&path, b"RIFX....WAVE").unwrap();
        match read_wav(&path) {
            Err(Error::WavParse { offset: 0, .. }) => {}
            other => panic!("expected parse error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_codec_is_explicit() {
        let path = tmp("ulaw.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&7u16.to_le_bytes()); // mu-law
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8, 0]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedFormat(_))));
    }
}
