//! Pitch extraction at a fixed hop, log-scale normalization to [0, 1],
//! contour scaling, and rate conversion between pitch frames, latent
//! frames, and audio samples.

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct PitchConfig {
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub window: usize,
    /// Frames whose periodicity falls below this emit f0 = 0 (unvoiced).
    pub voicing_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            hop: 100,
            f_min: 50.0,
            f_max: 1100.0,
            window: 1024,
            voicing_threshold: 0.3,
        }
    }
}

/// Frame-rate f0 sequence; 0 denotes an unvoiced frame. Values are Hz
/// until `normalize` maps voiced frames onto [0, 1] in log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f64>,
    pub hop: usize,
    pub sample_rate: u32,
    pub normalized: bool,
}

impl PitchContour {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_frames(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.f0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, &v)| (i, v))
    }

    /// Median over voiced frames; None if fully unvoiced.
    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.f0.iter().copied().filter(|&x| x > 0.0).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    }
}

/// YIN-style f0 tracker: cumulative mean normalized difference function
/// with first-dip selection and parabolic lag interpolation, one estimate
/// per hop.
pub fn extract_pitch(clip: &AudioClip, cfg: &PitchConfig) -> Result<PitchContour> {
    if cfg.hop == 0 {
        return Err(Error::Argument("hop must be >= 1".into()));
    }
    if clip.len() < cfg.window {
        return Err(Error::InsufficientInput(format!(
            "clip of {} samples is shorter than one analysis window ({})",
            clip.len(),
            cfg.window
        )));
    }
    let sr = clip.sample_rate as f64;
    let tau_min = (sr / cfg.f_max).ceil() as usize;
    let tau_max = ((sr / cfg.f_min).floor() as usize).min(cfg.window / 2);
    if tau_min + 2 >= tau_max {
        return Err(Error::Argument(
            "f_min/f_max leave no usable lag range at this sample rate".into(),
        ));
    }
    let integ = cfg.window - tau_max;
    let n_frames = clip.len().div_ceil(cfg.hop);
    let mut f0 = vec![0.0; n_frames];

    let mut frame = vec![0.0f64; cfg.window];
    let mut d = vec![0.0f64; tau_max + 1];
    let mut cmnd = vec![0.0f64; tau_max + 1];
    for fi in 0..n_frames {
        let start = fi * cfg.hop;
        for (j, slot) in frame.iter_mut().enumerate() {
            *slot = clip.samples.get(start + j).copied().unwrap_or(0.0);
        }
        let energy: f64 = frame[..integ].iter().map(|x| x * x).sum();
        if energy < 1e-10 {
            continue; // silence
        }
        for (tau, slot) in d.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..integ {
                let diff = frame[i] - frame[i + tau];
                acc += diff * diff;
            }
            *slot = acc;
        }
        cmnd[0] = 1.0;
        let mut running = 0.0;
        for tau in 1..=tau_max {
            running += d[tau];
            cmnd[tau] = if running > 0.0 {
                d[tau] * tau as f64 / running
            } else {
                1.0
            };
        }
        // first local minimum below a dip threshold, else the global minimum
        let dip_threshold = 0.3;
        let mut tau_star = 0usize;
        for tau in tau_min..tau_max {
            if cmnd[tau] < dip_threshold && cmnd[tau] <= cmnd[tau + 1] {
                tau_star = tau;
                break;
            }
        }
        if tau_star == 0 {
            let mut best = f64::INFINITY;
            for tau in tau_min..=tau_max {
                if cmnd[tau] < best {
                    best = cmnd[tau];
                    tau_star = tau;
                }
            }
        }
        let periodicity = 1.0 - cmnd[tau_star].clamp(0.0, 1.0);
        if periodicity < cfg.voicing_threshold {
            continue;
        }
        // parabolic interpolation of the CMND minimum
        let tau_refined = if tau_star > tau_min && tau_star < tau_max {
            let (a, b, c) = (cmnd[tau_star - 1], cmnd[tau_star], cmnd[tau_star + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                tau_star as f64 + 0.5 * (a - c) / denom
            } else {
                tau_star as f64
            }
        } else {
            tau_star as f64
        };
        let hz = sr / tau_refined;
        if hz >= cfg.f_min && hz <= cfg.f_max {
            f0[fi] = hz;
        }
    }
    Ok(PitchContour {
        f0,
        hop: cfg.hop,
        sample_rate: clip.sample_rate,
        normalized: false,
    })
}

/// Log-scale normalization of voiced frames onto [0, 1]; unvoiced stay 0.
pub fn normalize_pitch(contour: &PitchContour, f_min: f64, f_max: f64) -> Result<PitchContour> {
    if contour.normalized {
        return Err(Error::Argument("contour is already normalized".into()));
    }
    if f_min >= f_max {
        return Err(Error::Argument(format!(
            "f_min {} must be below f_max {}",
            f_min, f_max
        )));
    }
    let span = f_max.ln() - f_min.ln();
    let f0 = contour
        .f0
        .iter()
        .map(|&hz| {
            if hz > 0.0 {
                ((hz.ln() - f_min.ln()) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(PitchContour {
        f0,
        hop: contour.hop,
        sample_rate: contour.sample_rate,
        normalized: true,
    })
}

/// Inverse of `normalize_pitch` on voiced frames.
pub fn denormalize_pitch(contour: &PitchContour, f_min: f64, f_max: f64) -> Result<PitchContour> {
    if !contour.normalized {
        return Err(Error::Argument("contour is not normalized".into()));
    }
    if f_min >= f_max {
        return Err(Error::Argument("f_min must be below f_max".into()));
    }
    let span = f_max.ln() - f_min.ln();
    let f0 = contour
        .f0
        .iter()
        .map(|&v| {
            if v > 0.0 {
                (f_min.ln() + v * span).exp()
            } else {
                0.0
            }
        })
        .collect();
    Ok(PitchContour {
        f0,
        hop: contour.hop,
        sample_rate: contour.sample_rate,
        normalized: false,
    })
}

/// Multiply voiced f0 by `factor`, clamping into [f_min, f_max].
pub fn scale_pitch(
    contour: &PitchContour,
    factor: f64,
    f_min: f64,
    f_max: f64,
) -> Result<PitchContour> {
    if factor <= 0.0 {
        return Err(Error::Argument("pitch scale factor must be positive".into()));
    }
    if contour.normalized {
        return Err(Error::Argument(
            "scale_pitch operates on Hz contours, not normalized ones".into(),
        ));
    }
    let f0 = contour
        .f0
        .iter()
        .map(|&hz| {
            if hz > 0.0 {
                (hz * factor).clamp(f_min, f_max)
            } else {
                0.0
            }
        })
        .collect();
    Ok(PitchContour {
        f0,
        hop: contour.hop,
        sample_rate: contour.sample_rate,
        normalized: false,
    })
}

/// Piecewise-linear interpolation of contour values onto `target_length`
/// evenly spaced positions; endpoints map exactly.
pub fn upsample_linear(contour: &PitchContour, target_length: usize) -> Result<Vec<f64>> {
    if contour.len() < 2 {
        return Err(Error::InsufficientInput(
            "upsample_linear needs at least 2 frames".into(),
        ));
    }
    if target_length < contour.len() {
        return Err(Error::Argument(
            "target length below contour length".into(),
        ));
    }
    let n = contour.len();
    let mut out = Vec::with_capacity(target_length);
    for i in 0..target_length {
        let pos = i as f64 * (n - 1) as f64 / (target_length - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        out.push(contour.f0[lo] * (1.0 - frac) + contour.f0[hi] * frac);
    }
    Ok(out)
}

/// Per-latent-frame regression targets: the mean of the pitch frames in
/// each non-overlapping window of `latent_stride / hop` frames.
pub fn downsample_to_latent(contour: &PitchContour, latent_stride: usize) -> Result<Vec<f64>> {
    if latent_stride == 0 || latent_stride % contour.hop != 0 {
        return Err(Error::Argument(format!(
            "latent stride {} not divisible by hop {}",
            latent_stride, contour.hop
        )));
    }
    let per = latent_stride / contour.hop;
    let mut out = Vec::with_capacity(contour.len().div_ceil(per));
    let mut i = 0;
    while i < contour.len() {
        let end = (i + per).min(contour.len());
        let mean: f64 = contour.f0[i..end].iter().sum::<f64>() / (end - i) as f64;
        out.push(mean);
        i = end;
    }
    Ok(out)
}

/// CSV rows `frame_index,f0_hz,normalized_value` for a contour pair.
pub fn contour_csv(hz: &PitchContour, normalized: &PitchContour) -> String {
    let mut out = String::from("frame_index,f0_hz,normalized_value\n");
    for i in 0..hz.len().max(normalized.len()) {
        let f = hz.f0.get(i).copied().unwrap_or(0.0);
        let n = normalized.f0.get(i).copied().unwrap_or(0.0);
        out.push_str(&format!("{},{:.6},{:.6}\n", i, f, n));
    }
    out
}

/// Parse the Hz column of a `contour_csv` file back into a contour.
pub fn contour_from_csv(text: &str, hop: usize, sample_rate: u32) -> Result<PitchContour> {
    let mut f0 = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.starts_with("frame_index") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let _frame = cols.next();
        let hz: f64 = cols
            .next()
            .ok_or_else(|| Error::Format(format!("line {}: missing f0 column", ln + 1)))?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: {}", ln + 1, e)))?;
        if hz < 0.0 || !hz.is_finite() {
            return Err(Error::Format(format!("line {}: invalid f0 {}", ln + 1, hz)));
        }
        f0.push(hz);
    }
    Ok(PitchContour {
        f0,
        hop,
        sample_rate,
        normalized: false,
    })
}

/// Render a sine with the given instantaneous frequency function.
#[cfg(test)]
pub fn sine_with_freq(sr: u32, n: usize, f: impl Fn(f64) -> f64) -> AudioClip {
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr as f64;
        phase += 2.0 * std::f64::consts::PI * f(t) / sr as f64;
        samples.push(phase.sin() * 0.8);
    }
    AudioClip::new(samples, sr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PitchConfig {
        PitchConfig::default()
    }

    #[test]
    fn sine_440_tracked_within_2_percent() {
        let clip = sine_with_freq(16000, 16000, |_| 440.0);
        let contour = extract_pitch(&clip, &cfg()).unwrap();
        assert_eq!(contour.len(), 160);
        let voiced: Vec<f64> = contour.f0.iter().copied().filter(|&v| v > 0.0).collect();
        let within = voiced
            .iter()
            .filter(|&&v| (v - 440.0).abs() / 440.0 <= 0.02)
            .count();
        assert!(
            within as f64 >= 0.95 * voiced.len() as f64 && !voiced.is_empty(),
            "{} of {} voiced frames within 2%",
            within,
            voiced.len()
        );
    }

    #[test]
    fn silence_is_unvoiced() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000);
        let contour = extract_pitch(&clip, &cfg()).unwrap();
        assert!(contour.f0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glide_is_monotone_within_band() {
        // 200 -> 400 Hz linear glide over 1 s
        let clip = sine_with_freq(16000, 16000, |t| 200.0 + 200.0 * t);
        let contour = extract_pitch(&clip, &cfg()).unwrap();
        // compare each voiced frame against the generator's frequency
        let mut ok = 0usize;
        let mut total = 0usize;
        for (i, hz) in contour.voiced_frames() {
            let t = (i * 100) as f64 / 16000.0;
            let truth = 200.0 + 200.0 * t;
            total += 1;
            if (hz - truth).abs() / truth <= 0.03 {
                ok += 1;
            }
        }
        assert!(total > 100, "too few voiced frames: {}", total);
        assert!(
            ok as f64 >= 0.9 * total as f64,
            "{}/{} frames within 3%",
            ok,
            total
        );
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip::new(vec![0.1; 512], 16000);
        assert!(matches!(
            extract_pitch(&clip, &cfg()),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let contour = PitchContour {
            f0: vec![50.0, 1100.0, 0.0, (50.0f64 * 1100.0).sqrt()],
            hop: 100,
            sample_rate: 16000,
            normalized: false,
        };
        let n = normalize_pitch(&contour, 50.0, 1100.0).unwrap();
        assert!((n.f0[0] - 0.0).abs() < 1e-12);
        assert!((n.f0[1] - 1.0).abs() < 1e-12);
        assert_eq!(n.f0[2], 0.0);
        assert!((n.f0[3] - 0.5).abs() < 1e-12);
        assert!(n.normalized);
        // round trip on voiced frames
        let d = denormalize_pitch(&n, 50.0, 1100.0).unwrap();
        for (a, b) in d.f0.iter().zip(&contour.f0) {
            if *b > 0.0 && *a > 0.0 {
                assert!((a - b).abs() / b < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_twice_rejected() {
        let contour = PitchContour {
            f0: vec![100.0],
            hop: 100,
            sample_rate: 16000,
            normalized: false,
        };
        let n = normalize_pitch(&contour, 50.0, 1100.0).unwrap();
        assert!(normalize_pitch(&n, 50.0, 1100.0).is_err());
        assert!(normalize_pitch(&contour, 1100.0, 50.0).is_err());
    }

    #[test]
    fn scale_pitch_factors() {
        let contour = PitchContour {
            f0: vec![300.0, 0.0],
            hop: 100,
            sample_rate: 16000,
            normalized: false,
        };
        let up = scale_pitch(&contour, 1.3, 50.0, 1100.0).unwrap();
        assert!((up.f0[0] - 390.0).abs() < 1e-12);
        assert_eq!(up.f0[1], 0.0);
        let down = scale_pitch(&contour, 0.7, 50.0, 1100.0).unwrap();
        assert!((down.f0[0] - 210.0).abs() < 1e-12);
        let same = scale_pitch(&contour, 1.0, 50.0, 1100.0).unwrap();
        assert_eq!(same.f0, contour.f0);
        assert!(scale_pitch(&contour, 0.0, 50.0, 1100.0).is_err());
        // inverse scaling recovers unclamped frames
        let back = scale_pitch(&up, 1.0 / 1.3, 50.0, 1100.0).unwrap();
        assert!((back.f0[0] - 300.0).abs() < 1e-9);
    }

    #[test]
    fn upsample_linear_examples() {
        let c = |f0: Vec<f64>| PitchContour {
            f0,
            hop: 100,
            sample_rate: 16000,
            normalized: true,
        };
        assert_eq!(
            upsample_linear(&c(vec![0.0, 1.0]), 3).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            upsample_linear(&c(vec![0.0, 1.0, 0.0]), 5).unwrap(),
            vec![0.0, 0.5, 1.0, 0.5, 0.0]
        );
        let constant = upsample_linear(&c(vec![0.3, 0.3, 0.3]), 10).unwrap();
        assert!(constant.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(upsample_linear(&c(vec![0.5]), 10).is_err());
        // no overshoot
        let out = upsample_linear(&c(vec![0.1, 0.9, 0.2, 0.6]), 31).unwrap();
        assert!(out.iter().all(|&v| (0.1..=0.9).contains(&v)));
    }

    #[test]
    fn downsample_to_latent_examples() {
        let c = |f0: Vec<f64>| PitchContour {
            f0,
            hop: 100,
            sample_rate: 16000,
            normalized: true,
        };
        let one = downsample_to_latent(&c(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]), 800)
            .unwrap();
        assert_eq!(one, vec![0.5]);
        let two = downsample_to_latent(&c((0..16).map(|i| i as f64).collect()), 800).unwrap();
        assert_eq!(two, vec![3.5, 11.5]);
        let constant = downsample_to_latent(&c(vec![0.5; 24]), 800).unwrap();
        assert!(constant.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(downsample_to_latent(&c(vec![0.5; 24]), 850).is_err());
    }

    #[test]
    fn contour_csv_round_trip() {
        let hz = PitchContour {
            f0: vec![0.0, 220.0, 440.0],
            hop: 100,
            sample_rate: 16000,
            normalized: false,
        };
        let norm = normalize_pitch(&hz, 50.0, 1100.0).unwrap();
        let text = contour_csv(&hz, &norm);
        let back = contour_from_csv(&text, 100, 16000).unwrap();
        assert_eq!(back.f0.len(), 3);
        for (a, b) in back.f0.iter().zip(&hz.f0) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(contour_from_csv("frame_index,f0_hz,n\n0,abc,0\n", 100, 16000).is_err());
        assert!(contour_from_csv("0,-5.0,0\n", 100, 16000).is_err());
    }
}
