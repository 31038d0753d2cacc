//! Corpus ingestion, segmentation into training windows, and a synthetic
//! multi-singer generator with ground-truth pitch and timbre.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::{load_wav, mulaw_decode, mulaw_encode, resample, AudioClip, MuLawStream, MU};
use crate::error::{Error, Result};
use crate::pitch::{extract_pitch, normalize_pitch, PitchConfig, PitchContour};

pub const TARGET_RATE: u32 = 16000;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct CorpusClip {
    pub clip: AudioClip,
    pub singer_id: usize,
    pub clip_id: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub clips: Vec<CorpusClip>,
    pub singer_names: Vec<String>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn n_singers(&self) -> usize {
        self.singer_names.len()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    /// One subdirectory per singer, WAVs anywhere below it.
    Flat,
    /// NUS-48E style: `<root>/<singer>/sing/*.wav`.
    Nus48e,
}

#[derive(Debug, Default)]
pub struct SkipReport {
    pub skipped: Vec<(PathBuf, String)>,
}

fn wavs_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = match std::fs::read_dir(&d) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Enumerate WAVs by singer directory, resample everything to 16 kHz mono,
/// and densify singer ids in lexicographic name order. `singer_filter`
/// restricts the corpus to the named singers (e.g. a male-only subset).
pub fn ingest_directory(
    root: &Path,
    layout: Layout,
    singer_filter: Option<&[String]>,
) -> Result<(Corpus, SkipReport)> {
    if !root.is_dir() {
        return Err(Error::Argument(format!(
            "corpus root {} is not a directory",
            root.display()
        )));
    }
    let mut singer_dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    singer_dirs.sort();
    if let Some(filter) = singer_filter {
        singer_dirs.retain(|(name, _)| filter.contains(name));
    }
    let mut clips = Vec::new();
    let mut singer_names = Vec::new();
    let mut report = SkipReport::default();
    for (name, dir) in singer_dirs {
        let scan_dir = match layout {
            Layout::Flat => dir.clone(),
            Layout::Nus48e => dir.join("sing"),
        };
        let wavs = wavs_under(&scan_dir);
        if wavs.is_empty() {
            continue;
        }
        let singer_id = singer_names.len();
        singer_names.push(name.clone());
        for path in wavs {
            match load_wav(&path).and_then(|c| resample(&c, TARGET_RATE)) {
                Ok(mut clip) => {
                    clip.singer_id = Some(singer_id);
                    let clip_id = path
                        .strip_prefix(root)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .into_owned();
                    clips.push(CorpusClip {
                        clip,
                        singer_id,
                        clip_id,
                    });
                }
                Err(e) => report.skipped.push((path, e.to_string())),
            }
        }
    }
    if clips.is_empty() {
        return Err(Error::Argument(format!(
            "no readable WAV files under {}",
            root.display()
        )));
    }
    Ok((
        Corpus {
            clips,
            singer_names,
            provenance: Provenance::Real,
        },
        report,
    ))
}

/// Specification for a synthetic corpus: each singer renders the shared
/// melody as a harmonic series weighted by that singer's amplitude vector
/// (the "timbre"), with vibrato and a noise floor.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_singers: usize,
    /// One amplitude vector per singer; entry k weights harmonic k+1.
    pub harmonics: Vec<Vec<f64>>,
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_cents: f64,
    /// (note f0 in Hz, duration in seconds).
    pub melody: Vec<(f64, f64)>,
    pub noise_floor: f64,
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_rate() -> u32 {
    TARGET_RATE
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_singers == 0 || self.harmonics.len() != self.n_singers {
            return Err(Error::Argument(
                "harmonics must hold one amplitude vector per singer".into(),
            ));
        }
        if self.melody.is_empty() {
            return Err(Error::Argument("melody is empty".into()));
        }
        for amps in &self.harmonics {
            if amps.iter().any(|&a| a < 0.0) {
                return Err(Error::Argument("harmonic amplitudes must be >= 0".into()));
            }
        }
        for &(f0, dur) in &self.melody {
            // f0 = 0 is a rest
            if f0 < 0.0 || dur <= 0.0 {
                return Err(Error::Argument(
                    "melody notes need non-negative f0 and positive duration".into(),
                ));
            }
        }
        if self.melody.iter().all(|&(f0, _)| f0 == 0.0) {
            return Err(Error::Argument("melody is all rests".into()));
        }
        Ok(())
    }

    /// Instantaneous f0 (note plus vibrato) at time `t` seconds.
    pub fn f0_at(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for &(f0, dur) in &self.melody {
            if t < acc + dur {
                if f0 == 0.0 {
                    return 0.0; // rest
                }
                let vib = (self.vibrato_depth_cents / 1200.0)
                    * (2.0 * std::f64::consts::PI * self.vibrato_rate_hz * t).sin();
                return f0 * 2f64.powf(vib);
            }
            acc += dur;
        }
        let last = self.melody.last().unwrap().0;
        last
    }

    pub fn total_samples(&self) -> usize {
        let secs: f64 = self.melody.iter().map(|&(_, d)| d).sum();
        (secs * self.sample_rate as f64).round() as usize
    }
}

/// Deterministically render the corpus. Harmonics that would cross Nyquist
/// anywhere in the melody are dropped for that singer.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<(Corpus, Vec<PitchContour>)> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = spec.total_samples();
    let hop = PitchConfig::default().hop;
    let max_f0 = spec
        .melody
        .iter()
        .map(|&(f, _)| f)
        .fold(0.0f64, f64::max)
        * 2f64.powf(spec.vibrato_depth_cents / 1200.0);

    let mut clips = Vec::new();
    let mut contours = Vec::new();
    let mut singer_names = Vec::new();
    for (singer, amps) in spec.harmonics.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(singer as u64));
        let usable: Vec<(usize, f64)> = amps
            .iter()
            .enumerate()
            .filter(|&(k, &a)| a > 0.0 && (k + 1) as f64 * max_f0 < sr / 2.0)
            .map(|(k, &a)| (k + 1, a))
            .collect();
        let mut phases = vec![0.0f64; usable.len()];
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let f0 = spec.f0_at(i as f64 / sr);
            if f0 == 0.0 {
                samples.push(0.0); // rest: hold phase, emit silence
                continue;
            }
            let mut s = 0.0;
            for (j, &(k, a)) in usable.iter().enumerate() {
                phases[j] += 2.0 * std::f64::consts::PI * k as f64 * f0 / sr;
                s += a * phases[j].sin();
            }
            samples.push(s);
        }
        let peak = samples.iter().map(|v| v.abs()).fold(1e-12f64, f64::max);
        for s in &mut samples {
            *s = *s / peak * 0.9 + spec.noise_floor * rng.gen_range(-1.0..1.0);
            *s = s.clamp(-1.0, 1.0);
        }
        let mut clip = AudioClip::new(samples, spec.sample_rate);
        clip.singer_id = Some(singer);
        let f0 = (0..n.div_ceil(hop))
            .map(|fi| spec.f0_at((fi * hop) as f64 / sr))
            .collect();
        contours.push(PitchContour {
            f0,
            hop,
            sample_rate: spec.sample_rate,
            normalized: false,
        });
        clips.push(CorpusClip {
            clip,
            singer_id: singer,
            clip_id: format!("synth_singer{}", singer),
        });
        singer_names.push(format!("synth{}", singer));
    }
    Ok((
        Corpus {
            clips,
            singer_names,
            provenance: Provenance::Synthetic,
        },
        contours,
    ))
}

/// One training window: companded waveform for the encoder, mu-law codes
/// for the decoder targets, aligned normalized pitch, and the singer id.
#[derive(Clone, Debug)]
pub struct Segment {
    pub samples: Vec<f64>,
    pub codes: MuLawStream,
    pub pitch: PitchContour,
    pub singer_id: usize,
    pub clip_index: usize,
    pub start: usize,
}

/// A clip prepared for segmentation: companded waveform plus its
/// normalized pitch contour.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub companded: Vec<f64>,
    pub codes: Vec<u8>,
    pub pitch_norm: PitchContour,
    pub pitch_hz: PitchContour,
    pub singer_id: usize,
    pub sample_rate: u32,
}

/// Quantize, compand, and pitch-track a clip. When a ground-truth contour
/// is supplied (synthetic corpora) it replaces the tracker output.
pub fn prepare_clip(
    entry: &CorpusClip,
    pitch_cfg: &PitchConfig,
    ground_truth: Option<&PitchContour>,
) -> Result<PreparedClip> {
    let mut clip = entry.clip.clone();
    clip.clamp();
    let stream = mulaw_encode(&clip, MU)?;
    let companded = mulaw_decode(&stream, MU)?;
    let pitch_hz = match ground_truth {
        Some(c) => c.clone(),
        None => extract_pitch(&clip, pitch_cfg)?,
    };
    let pitch_norm = normalize_pitch(&pitch_hz, pitch_cfg.f_min, pitch_cfg.f_max)?;
    Ok(PreparedClip {
        companded: companded.samples,
        codes: stream.codes,
        pitch_norm,
        pitch_hz,
        singer_id: entry.singer_id,
        sample_rate: clip.sample_rate,
    })
}

/// Sliding-window segmentation. Starts are constrained to multiples of the
/// pitch hop so the pitch sub-contour aligns exactly; short clips are
/// skipped and counted.
pub fn segment(
    prepared: &[PreparedClip],
    length: usize,
    hop: usize,
    epoch_seed: u64,
) -> Result<(Vec<Segment>, usize)> {
    if length == 0 || hop == 0 {
        return Err(Error::Argument("segment length and hop must be positive".into()));
    }
    let pitch_hop = prepared
        .first()
        .map(|p| p.pitch_norm.hop)
        .unwrap_or(100);
    if length % pitch_hop != 0 || hop % pitch_hop != 0 {
        return Err(Error::Argument(format!(
            "segment length and hop must be multiples of the pitch hop ({})",
            pitch_hop
        )));
    }
    let mut segments = Vec::new();
    let mut skipped = 0usize;
    for (ci, p) in prepared.iter().enumerate() {
        let n = p.companded.len();
        if n < length {
            skipped += 1;
            continue;
        }
        let mut start = 0usize;
        while start + length <= n {
            let pf_start = start / pitch_hop;
            let pf_end = (start + length) / pitch_hop;
            segments.push(Segment {
                samples: p.companded[start..start + length].to_vec(),
                codes: MuLawStream {
                    codes: p.codes[start..start + length].to_vec(),
                    sample_rate: p.sample_rate,
                },
                pitch: PitchContour {
                    f0: p.pitch_norm.f0[pf_start..pf_end].to_vec(),
                    hop: pitch_hop,
                    sample_rate: p.pitch_norm.sample_rate,
                    normalized: true,
                },
                singer_id: p.singer_id,
                clip_index: ci,
                start,
            });
            start += hop;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    segments.shuffle(&mut rng);
    Ok((segments, skipped))
}

/// Corpus manifest: clip id, singer, duration, content hash.
pub fn manifest(corpus: &Corpus) -> String {
    let mut out = String::from("# clip_id\tsinger\tduration_s\tsha256\n");
    for c in &corpus.clips {
        let mut hasher = Sha256::new();
        for s in &c.clip.samples {
            hasher.update(s.to_le_bytes());
        }
        out.push_str(&format!(
            "{}\t{}\t{:.3}\t{:x}\n",
            c.clip_id,
            corpus.singer_names[c.singer_id],
            c.clip.duration_secs(),
            hasher.finalize()
        ));
    }
    out
}

/// Group clip indices by singer (dense ids).
pub fn clips_by_singer(corpus: &Corpus) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in corpus.clips.iter().enumerate() {
        map.entry(c.singer_id).or_default().push(i);
    }
    map
}
