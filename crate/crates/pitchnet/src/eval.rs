//! Conversion quality measurement: pitch-contour cross-correlation between
//! an input (or pitch-scaled input) and the audio the decoder generates.

use crate::audio::{mulaw_decode, AudioClip, MuLawStream, MU};
use crate::error::{Error, Result};
use crate::model::{build_condition, encode, generate, ModelBundle, Sampling};
use crate::pitch::{extract_pitch, normalize_pitch, scale_pitch, PitchConfig, PitchContour};

pub const DEFAULT_MAX_LAG: i64 = 5;
pub const MIN_COMMON_VOICED: usize = 10;

/// Normalized cross-correlation of two Hz contours, maximized over frame
/// lags in `[-max_lag, max_lag]` and clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccReport {
    pub ncc: f64,
    pub lag: i64,
    /// jointly-voiced frame count at the best lag
    pub frames: usize,
}

fn correlation_at_lag(a: &PitchContour, b: &PitchContour, lag: i64) -> Option<(f64, usize)> {
    // pair a[t] with b[t + lag] where both are voiced
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in 0..a.len() {
        let u = t as i64 + lag;
        if u < 0 || u >= b.len() as i64 {
            continue;
        }
        let (x, y) = (a.f0[t], b.f0[u as usize]);
        if x > 0.0 && y > 0.0 {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < MIN_COMMON_VOICED {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    if dx <= 0.0 || dy <= 0.0 {
        // a flat contour correlates with nothing; treat as zero similarity
        return Some((0.0, xs.len()));
    }
    Some((num / (dx * dy).sqrt(), xs.len()))
}

pub fn ncc(a: &PitchContour, b: &PitchContour, max_lag: i64) -> Result<NccReport> {
    if a.normalized || b.normalized {
        return Err(Error::Argument("ncc expects Hz contours".into()));
    }
    if a.hop != b.hop {
        return Err(Error::Argument(format!(
            "contour hops differ: {} vs {}",
            a.hop, b.hop
        )));
    }
    let mut best: Option<NccReport> = None;
    for lag in -max_lag..=max_lag {
        if let Some((r, frames)) = correlation_at_lag(a, b, lag) {
            let r = r.clamp(0.0, 1.0);
            if best.map(|b| r > b.ncc).unwrap_or(true) {
                best = Some(NccReport { ncc: r, lag, frames });
            }
        }
    }
    best.ok_or_else(|| {
        Error::InsufficientOverlap(format!(
            "fewer than {} jointly-voiced frames at every lag",
            MIN_COMMON_VOICED
        ))
    })
}

/// Output of one conversion pass, with everything needed for scoring.
pub struct ConversionResult {
    pub stream: MuLawStream,
    pub samples: Vec<f64>,
    /// input contour after pitch scaling (Hz)
    pub scaled_input: PitchContour,
    /// tracker output on the generated audio (Hz)
    pub output_pitch: PitchContour,
}

/// Encode `samples`, condition on the (optionally scaled) pitch and the
/// target singer's embedding, generate, and pitch-track the result.
pub fn convert(
    bundle: &ModelBundle,
    samples: &[f64],
    pitch_hz: &PitchContour,
    target_singer: usize,
    pitch_scale: f64,
    pitch_cfg: &PitchConfig,
    sampling: Sampling,
    seed: u64,
) -> Result<ConversionResult> {
    let scaled = if pitch_scale == 1.0 {
        pitch_hz.clone()
    } else {
        scale_pitch(pitch_hz, pitch_scale, pitch_cfg.f_min, pitch_cfg.f_max)?
    };
    let normalized = normalize_pitch(&scaled, pitch_cfg.f_min, pitch_cfg.f_max)?;
    let latent = encode(bundle, samples)?;
    let embedding = bundle.lookup_embedding(target_singer)?;
    let cond = build_condition(&latent, &normalized, &embedding, samples.len())?;
    let stream = generate(bundle, &cond, seed, sampling)?;
    let decoded = mulaw_decode(&stream, MU)?;
    let clip = AudioClip::new(decoded.samples.clone(), stream.sample_rate);
    let output_pitch = extract_pitch(&clip, pitch_cfg)?;
    Ok(ConversionResult {
        stream,
        samples: decoded.samples,
        scaled_input: scaled,
        output_pitch,
    })
}

/// One clip's inputs for corpus-level scoring.
#[derive(Clone, Debug)]
pub struct EvalClip {
    pub clip_id: String,
    pub samples: Vec<f64>,
    pub pitch_hz: PitchContour,
    pub singer_id: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Reconstruction,
    Conversion,
}

/// Outcome of one (clip, target singer) pair; failures are recorded, not
/// silently dropped.
#[derive(Clone, Debug)]
pub struct PairResult {
    pub clip_id: String,
    pub target_singer: usize,
    pub report: std::result::Result<NccReport, String>,
}

#[derive(Clone, Debug)]
pub struct CorpusReport {
    pub mode: EvalMode,
    pub pairs: Vec<PairResult>,
}

impl CorpusReport {
    /// Mean NCC over scored pairs; `None` if nothing scored.
    pub fn mean_ncc(&self) -> Option<f64> {
        let scored: Vec<f64> = self
            .pairs
            .iter()
            .filter_map(|p| p.report.as_ref().ok().map(|r| r.ncc))
            .collect();
        if scored.is_empty() {
            None
        } else {
            Some(scored.iter().sum::<f64>() / scored.len() as f64)
        }
    }

    pub fn missing(&self) -> usize {
        self.pairs.iter().filter(|p| p.report.is_err()).count()
    }

    /// Pair rows plus an aggregate footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,target_singer,ncc,lag,frames,status\n");
        for p in &self.pairs {
            match &p.report {
                Ok(r) => s.push_str(&format!(
                    "{},{},{:.6},{},{},ok\n",
                    p.clip_id, p.target_singer, r.ncc, r.lag, r.frames
                )),
                Err(e) => s.push_str(&format!(
                    "{},{},,,,missing: {}\n",
                    p.clip_id,
                    p.target_singer,
                    e.replace(',', ";")
                )),
            }
        }
        match self.mean_ncc() {
            Some(m) => s.push_str(&format!("aggregate,,{:.6},,,mean over {} pairs\n",
                m, self.pairs.len() - self.missing())),
            None => s.push_str("aggregate,,,,,no scored pairs\n"),
        }
        s
    }
}

/// Score a corpus: reconstruction pairs each clip with its own singer;
/// conversion enumerates clip × every other singer. Pairs run in parallel
/// against a read-only bundle.
pub fn eval_corpus(
    bundle: &ModelBundle,
    clips: &[EvalClip],
    n_singers: usize,
    mode: EvalMode,
    pitch_cfg: &PitchConfig,
    seed: u64,
) -> CorpusReport {
    use rayon::prelude::*;
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        match mode {
            EvalMode::Reconstruction => jobs.push((ci, clip.singer_id)),
            EvalMode::Conversion => {
                for target in 0..n_singers {
                    if target != clip.singer_id {
                        jobs.push((ci, target));
                    }
                }
            }
        }
    }
    let pairs: Vec<PairResult> = jobs
        .par_iter()
        .map(|&(ci, target)| {
            let clip = &clips[ci];
            let outcome = convert(
                bundle,
                &clip.samples,
                &clip.pitch_hz,
                target,
                1.0,
                pitch_cfg,
                Sampling::Argmax,
                seed,
            )
            .and_then(|conv| ncc(&conv.scaled_input, &conv.output_pitch, DEFAULT_MAX_LAG));
            PairResult {
                clip_id: clip.clip_id.clone(),
                target_singer: target,
                report: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    CorpusReport { mode, pairs }
}

pub struct SweepEntry {
    pub factor: f64,
    pub report: NccReport,
    pub median_output_f0: f64,
    pub conversion: ConversionResult,
}

/// Re-synthesize the same clip under several pitch-scale factors.
pub fn pitch_sweep(
    bundle: &ModelBundle,
    samples: &[f64],
    pitch_hz: &PitchContour,
    singer: usize,
    factors: &[f64],
    pitch_cfg: &PitchConfig,
    seed: u64,
) -> Result<Vec<SweepEntry>> {
    let mut out = Vec::with_capacity(factors.len());
    for &factor in factors {
        let conv = convert(
            bundle,
            samples,
            pitch_hz,
            singer,
            factor,
            pitch_cfg,
            Sampling::Argmax,
            seed,
        )?;
        let report = ncc(&conv.scaled_input, &conv.output_pitch, DEFAULT_MAX_LAG)?;
        let median = conv
            .output_pitch
            .median_voiced()
            .ok_or_else(|| Error::InsufficientOverlap("no voiced output frames".into()))?;
        out.push(SweepEntry {
            factor,
            report,
            median_output_f0: median,
            conversion: conv,
        });
    }
    Ok(out)
}

/// Per-frame sweep CSV: `frame,input_f0,scaled_f0,output_f0`.
pub fn sweep_csv(input: &PitchContour, scaled: &PitchContour, output: &PitchContour) -> String {
    let n = input.len().min(scaled.len()).min(output.len());
    let mut s = String::from("frame,input_f0,scaled_f0,output_f0\n");
    for t in 0..n {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            t, input.f0[t], scaled.f0[t], output.f0[t]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hz(f0: Vec<f64>) -> PitchContour {
        PitchContour {
            f0,
            hop: 100,
            sample_rate: 16000,
            normalized: false,
        }
    }

    /// Brute-force reference: recompute the full lag search with a separate
    /// double loop over raw pairs.
    fn ncc_reference(a: &PitchContour, b: &PitchContour, max_lag: i64) -> Option<(f64, i64)> {
        let mut best: Option<(f64, i64)> = None;
        for lag in -max_lag..=max_lag {
            let mut pairs = Vec::new();
            for t in 0..a.f0.len() {
                let u = t as i64 + lag;
                if u >= 0 && (u as usize) < b.f0.len() && a.f0[t] > 0.0 && b.f0[u as usize] > 0.0 {
                    pairs.push((a.f0[t], b.f0[u as usize]));
                }
            }
            if pairs.len() < MIN_COMMON_VOICED {
                continue;
            }
            let n = pairs.len() as f64;
            let mx: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let my: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let num: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let dx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            let dy: f64 = pairs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
            let r = if dx <= 0.0 || dy <= 0.0 {
                0.0
            } else {
                (num / (dx * dy).sqrt()).clamp(0.0, 1.0)
            };
            if best.map(|(br, _)| r > br).unwrap_or(true) {
                best = Some((r, lag));
            }
        }
        best
    }

    #[test]
    fn identical_contours_score_one_at_lag_zero() {
        let a = hz((0..40).map(|t| 220.0 + 30.0 * (t as f64 * 0.3).sin()).collect());
        let r = ncc(&a, &a, DEFAULT_MAX_LAG).unwrap();
        assert!((r.ncc - 1.0).abs() < 1e-12);
        assert_eq!(r.lag, 0);
        assert_eq!(r.frames, 40);
    }

    #[test]
    fn matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(15..80);
            let make = |rng: &mut ChaCha8Rng| {
                hz((0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < 0.25 {
                            0.0
                        } else {
                            rng.gen_range(80.0..800.0)
                        }
                    })
                    .collect())
            };
            let a = make(&mut rng);
            let b = make(&mut rng);
            match (ncc(&a, &b, DEFAULT_MAX_LAG), ncc_reference(&a, &b, DEFAULT_MAX_LAG)) {
                (Ok(r), Some((rr, _))) => {
                    assert!((r.ncc - rr).abs() < 1e-9, "{} vs {}", r.ncc, rr)
                }
                (Err(Error::InsufficientOverlap(_)), None) => {}
                (got, want) => panic!(
                    "disagreement: got {:?}, reference {:?}",
                    got.map(|r| r.ncc),
                    want
                ),
            }
        }
    }

    #[test]
    fn recovers_a_known_frame_shift() {
        let base: Vec<f64> = (0..60).map(|t| 200.0 + 50.0 * (t as f64 * 0.4).sin()).collect();
        let a = hz(base.clone());
        let mut shifted = vec![0.0; 3];
        shifted.extend_from_slice(&base[..57]);
        let b = hz(shifted);
        let r = ncc(&a, &b, DEFAULT_MAX_LAG).unwrap();
        assert_eq!(r.lag, 3);
        assert!(r.ncc > 0.9999);
    }

    #[test]
    fn scale_and_offset_invariance() {
        let a = hz((0..30).map(|t| 220.0 + 40.0 * (t as f64 * 0.5).cos()).collect());
        let b = hz(a.f0.iter().map(|&f| 2.0 * f + 10.0).collect());
        let r = ncc(&a, &b, DEFAULT_MAX_LAG).unwrap();
        assert!((r.ncc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anticorrelation_clamps_to_zero() {
        let a = hz((0..30).map(|t| 300.0 + 10.0 * t as f64).collect());
        let b = hz((0..30).map(|t| 600.0 - 10.0 * t as f64).collect());
        let r = ncc(&a, &b, 0).unwrap();
        assert_eq!(r.ncc, 0.0);
    }

    #[test]
    fn insufficient_overlap_is_an_error() {
        let a = hz(vec![220.0; 9]);
        assert!(matches!(
            ncc(&a, &a, DEFAULT_MAX_LAG),
            Err(Error::InsufficientOverlap(_))
        ));
        // voiced frames that never coincide
        let mut x = vec![0.0; 40];
        let mut y = vec![0.0; 40];
        for t in 0..20 {
            x[t] = 220.0;
            y[t + 20] = 220.0;
        }
        assert!(ncc(&hz(x), &hz(y), DEFAULT_MAX_LAG).is_err());
    }

    #[test]
    fn rejects_normalized_or_mismatched_contours() {
        let a = hz(vec![220.0; 30]);
        let mut n = a.clone();
        n.normalized = true;
        assert!(ncc(&a, &n, 5).is_err());
        let mut h = a.clone();
        h.hop = 200;
        assert!(ncc(&a, &h, 5).is_err());
    }

    #[test]
    fn csv_formats() {
        let a = hz(vec![220.0, 220.0]);
        let s = sweep_csv(&a, &a, &a);
        assert!(s.starts_with("frame,input_f0,scaled_f0,output_f0\n"));
        assert_eq!(s.lines().count(), 3);
    }

    #[test]
    fn corpus_report_pairs_and_aggregate() {
        let ok = |id: &str, target, score| PairResult {
            clip_id: id.to_string(),
            target_singer: target,
            report: Ok(NccReport {
                ncc: score,
                lag: 0,
                frames: 20,
            }),
        };
        let report = CorpusReport {
            mode: EvalMode::Conversion,
            pairs: vec![
                ok("a", 1, 0.9),
                ok("b", 0, 0.7),
                PairResult {
                    clip_id: "c".to_string(),
                    target_singer: 1,
                    report: Err("generation failed".to_string()),
                },
            ],
        };
        // aggregate is the mean of scored pairs only, recomputed here
        assert!((report.mean_ncc().unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(report.missing(), 1);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5, "3 pairs + header + aggregate");
        assert!(csv.contains("missing: generation failed"));
        assert!(csv.contains("aggregate,,0.800000"));
    }

    #[test]
    fn conversion_pair_enumeration() {
        use crate::model::{ModelBundle, ModelConfig};
        let cfg = ModelConfig {
            latent_stride: 100,
            ..ModelConfig::miniature()
        };
        let bundle = ModelBundle::init(cfg, 1).unwrap();
        let pitch_cfg = PitchConfig::default();
        let clips: Vec<EvalClip> = (0..3)
            .map(|i| EvalClip {
                clip_id: format!("clip{}", i),
                samples: (0..1200)
                    .map(|t| 0.4 * (2.0 * std::f64::consts::PI * 220.0 * t as f64 / 16000.0).sin())
                    .collect(),
                pitch_hz: hz(vec![220.0; 12]),
                singer_id: i % 2,
            })
            .collect();
        let conv = eval_corpus(&bundle, &clips, 2, EvalMode::Conversion, &pitch_cfg, 0);
        assert_eq!(conv.pairs.len(), 3, "each clip pairs with the 1 other singer");
        let recon = eval_corpus(&bundle, &clips, 2, EvalMode::Reconstruction, &pitch_cfg, 0);
        assert_eq!(recon.pairs.len(), 3);
        assert!(recon.pairs.iter().all(|p| {
            p.target_singer == clips.iter().find(|c| c.clip_id == p.clip_id).unwrap().singer_id
        }));
        // every pair is present in the CSV whether or not it scored
        assert_eq!(conv.to_csv().lines().count(), 5);
    }

    #[test]
    fn convert_runs_end_to_end_on_a_tiny_model() {
        use crate::model::{ModelBundle, ModelConfig};
        let cfg = ModelConfig {
            latent_stride: 100,
            ..ModelConfig::miniature()
        };
        let bundle = ModelBundle::init(cfg, 3).unwrap();
        let pitch_cfg = PitchConfig::default();
        let samples: Vec<f64> = (0..2000)
            .map(|t| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * t as f64 / 16000.0).sin())
            .collect();
        let contour = hz(vec![220.0; 20]);
        let conv = convert(
            &bundle,
            &samples,
            &contour,
            1,
            1.3,
            &pitch_cfg,
            Sampling::Argmax,
            0,
        )
        .unwrap();
        assert_eq!(conv.stream.codes.len(), 2000);
        assert_eq!(conv.samples.len(), 2000);
        assert!((conv.scaled_input.f0[0] - 286.0).abs() < 1e-9);
        // untrained decoder output has no meaningful pitch; scoring it
        // should fail loudly rather than fabricate a number
        assert!(matches!(
            ncc(&conv.scaled_input, &conv.output_pitch, DEFAULT_MAX_LAG),
            Err(Error::InsufficientOverlap(_)) | Ok(_)
        ));
    }
}
