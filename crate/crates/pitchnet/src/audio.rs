//! Audio I/O, resampling, mu-law companding, and waveform augmentation.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub singer_id: Option<usize>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        AudioClip {
            samples,
            sample_rate,
            singer_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Clamp all samples into [-1, 1] in place.
    pub fn clamp(&mut self) {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
    }
}

/// 8-bit mu-law encoded waveform; codes in [0, mu].
#[derive(Clone, Debug, PartialEq)]
pub struct MuLawStream {
    pub codes: Vec<u8>,
    pub sample_rate: u32,
}

pub const MU: u32 = 255;

/// Mu-law code for silence under this rounding convention.
pub const SILENCE_CODE: u8 = 128;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Reverse,
    Invert,
    ReverseInvert,
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {}", path.display(), other)),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("wav reports zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "unsupported wav encoding: {:?} {} bits (want PCM-16 or float-32)",
                fmt, bits
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = interleaved[f * channels..(f + 1) * channels].iter().sum();
        samples.push((sum / channels as f64).clamp(-1.0, 1.0));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Format(e.to_string()))
}

/// Band-limited windowed-sinc resampling. Output samples are clamped to
/// [-1, 1] to absorb filter overshoot.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Argument("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = (clip.samples.len() as f64 * ratio).round() as usize;
    // cutoff at the lower of the two Nyquist frequencies
    let cutoff = ratio.min(1.0);
    let half_width = 16.0 / cutoff; // taps per side in source samples
    let mut out = Vec::with_capacity(out_len);
    let src = &clip.samples;
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let lo = ((center - half_width).ceil() as isize).max(0) as usize;
        let hi = ((center + half_width).floor() as isize).min(src.len() as isize - 1) as usize;
        let mut acc = 0.0;
        for m in lo..=hi {
            let t = m as f64 - center;
            let sinc = if t.abs() < 1e-12 {
                cutoff
            } else {
                (std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            // Hann window over the finite support
            let w = 0.5 * (1.0 + (std::f64::consts::PI * t / half_width).cos());
            acc += src[m] * sinc * w;
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    let mut res = AudioClip::new(out, target_rate);
    res.singer_id = clip.singer_id;
    Ok(res)
}

/// Encode one sample; caller guarantees x in [-1, 1].
#[inline]
pub fn mulaw_encode_sample(x: f64, mu: u32) -> u8 {
    let muf = mu as f64;
    let compressed = x.signum() * (1.0 + muf * x.abs()).ln() / (1.0 + muf).ln();
    let code = ((compressed + 1.0) / 2.0 * muf + 0.5).floor();
    code.clamp(0.0, muf) as u8
}

#[inline]
pub fn mulaw_decode_sample(code: u8, mu: u32) -> f64 {
    let muf = mu as f64;
    let y = 2.0 * code as f64 / muf - 1.0;
    y.signum() * ((1.0 + muf).powf(y.abs()) - 1.0) / muf
}

pub fn mulaw_encode(clip: &AudioClip, mu: u32) -> Result<MuLawStream> {
    for &s in &clip.samples {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!(
                "sample {} outside [-1, 1]; clamp before encoding",
                s
            )));
        }
    }
    Ok(MuLawStream {
        codes: clip
            .samples
            .iter()
            .map(|&s| mulaw_encode_sample(s, mu))
            .collect(),
        sample_rate: clip.sample_rate,
    })
}

pub fn mulaw_decode(stream: &MuLawStream, mu: u32) -> Result<AudioClip> {
    for &c in &stream.codes {
        if c as u32 > mu {
            return Err(Error::Domain(format!("code {} above mu = {}", c, mu)));
        }
    }
    Ok(AudioClip::new(
        stream
            .codes
            .iter()
            .map(|&c| mulaw_decode_sample(c, mu))
            .collect(),
        stream.sample_rate,
    ))
}

/// Time reversal and/or phase inversion; each mode is an involution.
pub fn augment(clip: &AudioClip, mode: AugmentMode) -> AudioClip {
    let mut samples = clip.samples.clone();
    match mode {
        AugmentMode::Reverse => samples.reverse(),
        AugmentMode::Invert => samples.iter_mut().for_each(|s| *s = -*s),
        AugmentMode::ReverseInvert => {
            samples.reverse();
            samples.iter_mut().for_each(|s| *s = -*s);
        }
    }
    let mut out = AudioClip::new(samples, clip.sample_rate);
    out.singer_id = clip.singer_id;
    out
}
