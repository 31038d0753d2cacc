//! The networks: encoder, WaveNet decoder, singer embedding table, and the
//! two adversary heads (singer classifier, pitch regressor), plus
//! checkpoint I/O and incremental autoregressive generation.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{mulaw_decode_sample, MuLawStream, MU, SILENCE_CODE};
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::pitch::{upsample_linear, PitchContour};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub n_singers: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub encoder_blocks: usize,
    pub encoder_layers_per_block: usize,
    pub encoder_kernel: usize,
    pub decoder_blocks: usize,
    pub decoder_layers_per_block: usize,
    pub residual_channels: usize,
    pub dilation_base: usize,
    pub latent_stride: usize,
    pub n_classes: usize,
    pub adversary_channels: usize,
    pub adversary_kernel: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_singers: 6,
            embed_dim: 32,
            latent_dim: 64,
            encoder_blocks: 3,
            encoder_layers_per_block: 10,
            encoder_kernel: 3,
            decoder_blocks: 4,
            decoder_layers_per_block: 10,
            residual_channels: 64,
            dilation_base: 2,
            latent_stride: 800,
            n_classes: 256,
            adversary_channels: 100,
            adversary_kernel: 3,
            dropout_p: 0.2,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks and fast tests.
    pub fn miniature() -> Self {
        ModelConfig {
            n_singers: 2,
            embed_dim: 3,
            latent_dim: 4,
            encoder_blocks: 1,
            encoder_layers_per_block: 2,
            encoder_kernel: 3,
            decoder_blocks: 1,
            decoder_layers_per_block: 2,
            residual_channels: 8,
            dilation_base: 2,
            latent_stride: 8,
            n_classes: 256,
            adversary_channels: 6,
            adversary_kernel: 3,
            dropout_p: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_singers", self.n_singers),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("encoder_blocks", self.encoder_blocks),
            ("encoder_layers_per_block", self.encoder_layers_per_block),
            ("encoder_kernel", self.encoder_kernel),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_layers_per_block", self.decoder_layers_per_block),
            ("residual_channels", self.residual_channels),
            ("dilation_base", self.dilation_base),
            ("latent_stride", self.latent_stride),
            ("n_classes", self.n_classes),
            ("adversary_channels", self.adversary_channels),
            ("adversary_kernel", self.adversary_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("config field {} must be positive", name)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Argument("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Span of past samples that can influence one decoder output.
    pub fn receptive_field(&self) -> usize {
        let mut per_block = 0usize;
        for l in 0..self.decoder_layers_per_block {
            per_block += self.dilation_base.pow(l as u32); // (kernel-1) * dilation, kernel 2
        }
        self.decoder_blocks * per_block + 1
    }

    pub fn condition_dim(&self) -> usize {
        self.latent_dim + 1 + self.embed_dim
    }
}

/// Which alternating-phase optimizer owns a parameter.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder, decoder, embedding table: updated on the total loss.
    Autoencoder,
    /// Singer classifier and pitch regressor: updated on the adversary loss.
    Adversary,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    group: ParamGroup,
    tensor: Tensor,
}

/// Flat store of all trainable tensors, addressed by `ParamId`.
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    fn alloc(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// One convolution's parameters and geometry.
#[derive(Clone, Copy)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    dilation: usize,
    causal: bool,
}

impl Conv {
    fn alloc(
        set: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Conv {
        let scale = (1.0 / (c_in * kernel) as f64).sqrt();
        let w = set.alloc(
            format!("{}.w", name),
            group,
            Tensor::rand_uniform(c_out, c_in * kernel, scale, rng),
        );
        let b = set.alloc(format!("{}.b", name), group, Tensor::zeros(c_out, 1));
        Conv {
            w,
            b,
            kernel,
            dilation,
            causal,
        }
    }
}

struct EncoderArch {
    input: Conv,
    /// (dilated conv, 1x1 conv) per residual layer, all blocks flattened.
    layers: Vec<(Conv, Conv)>,
    output: Conv,
}

struct DecoderLayer {
    filter: Conv,
    gate: Conv,
    cond_filter: Conv,
    cond_gate: Conv,
    residual: Conv,
    skip: Conv,
}

struct DecoderArch {
    input: Conv,
    layers: Vec<DecoderLayer>,
    head1: Conv,
    head2: Conv,
}

struct AdversaryArch {
    conv1: Conv,
    conv2: Conv,
    head: Conv,
}

/// All model parameters plus the architecture wiring.
pub struct ModelBundle {
    pub config: ModelConfig,
    pub set: ParamSet,
    encoder: EncoderArch,
    decoder: DecoderArch,
    classifier: AdversaryArch,
    regressor: AdversaryArch,
    embeddings: ParamId,
}

/// Encoder output: `[latent_dim, T_latent]` at 1/stride of the audio rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub frames: Tensor,
    pub stride: usize,
}

impl LatentSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.cols
    }
}

/// Per-sample decoder conditioning, rows laid out `[latent | pitch | embedding]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence {
    pub values: Tensor,
}

impl ConditionSequence {
    pub fn len(&self) -> usize {
        self.values.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols == 0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Sampling {
    Argmax,
    Categorical,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let c = config.residual_channels;
        let g_ae = ParamGroup::Autoencoder;
        let g_adv = ParamGroup::Adversary;

        let enc_input = Conv::alloc(&mut set, "encoder.input", g_ae, 1, c, 1, 1, false, &mut rng);
        let mut enc_layers = Vec::new();
        for b in 0..config.encoder_blocks {
            for l in 0..config.encoder_layers_per_block {
                let d = config.dilation_base.pow(l as u32);
                let dilated = Conv::alloc(
                    &mut set,
                    &format!("encoder.block{}.layer{}.dilated", b, l),
                    g_ae,
                    c,
                    c,
                    config.encoder_kernel,
                    d,
                    false,
                    &mut rng,
                );
                let one = Conv::alloc(
                    &mut set,
                    &format!("encoder.block{}.layer{}.1x1", b, l),
                    g_ae,
                    c,
                    c,
                    1,
                    1,
                    false,
                    &mut rng,
                );
                enc_layers.push((dilated, one));
            }
        }
        let enc_output = Conv::alloc(
            &mut set,
            "encoder.output",
            g_ae,
            c,
            config.latent_dim,
            1,
            1,
            false,
            &mut rng,
        );

        let cond_dim = config.condition_dim();
        let dec_input = Conv::alloc(&mut set, "decoder.input", g_ae, 1, c, 1, 1, true, &mut rng);
        let mut dec_layers = Vec::new();
        for b in 0..config.decoder_blocks {
            for l in 0..config.decoder_layers_per_block {
                let d = config.dilation_base.pow(l as u32);
                let name = format!("decoder.block{}.layer{}", b, l);
                dec_layers.push(DecoderLayer {
                    filter: Conv::alloc(&mut set, &format!("{}.filter", name), g_ae, c, c, 2, d, true, &mut rng),
                    gate: Conv::alloc(&mut set, &format!("{}.gate", name), g_ae, c, c, 2, d, true, &mut rng),
                    cond_filter: Conv::alloc(&mut set, &format!("{}.cond_filter", name), g_ae, cond_dim, c, 1, 1, true, &mut rng),
                    cond_gate: Conv::alloc(&mut set, &format!("{}.cond_gate", name), g_ae, cond_dim, c, 1, 1, true, &mut rng),
                    residual: Conv::alloc(&mut set, &format!("{}.residual", name), g_ae, c, c, 1, 1, true, &mut rng),
                    skip: Conv::alloc(&mut set, &format!("{}.skip", name), g_ae, c, c, 1, 1, true, &mut rng),
                });
            }
        }
        let dec_head1 = Conv::alloc(&mut set, "decoder.head1", g_ae, c, c, 1, 1, true, &mut rng);
        let dec_head2 = Conv::alloc(&mut set, "decoder.head2", g_ae, c, config.n_classes, 1, 1, true, &mut rng);

        let adv = |set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out_dim: usize| AdversaryArch {
            conv1: Conv::alloc(set, &format!("{}.conv1", name), g_adv, config.latent_dim, config.adversary_channels, config.adversary_kernel, 1, false, rng),
            conv2: Conv::alloc(set, &format!("{}.conv2", name), g_adv, config.adversary_channels, config.adversary_channels, config.adversary_kernel, 1, false, rng),
            head: Conv::alloc(set, &format!("{}.head", name), g_adv, config.adversary_channels, out_dim, 1, 1, false, rng),
        };
        let classifier = adv(&mut set, &mut rng, "classifier", config.n_singers);
        let regressor = adv(&mut set, &mut rng, "regressor", 1);

        let embeddings = set.alloc(
            "embeddings",
            g_ae,
            Tensor::rand_uniform(config.n_singers, config.embed_dim, 0.1, &mut rng),
        );

        Ok(ModelBundle {
            config,
            set,
            encoder: EncoderArch {
                input: enc_input,
                layers: enc_layers,
                output: enc_output,
            },
            decoder: DecoderArch {
                input: dec_input,
                layers: dec_layers,
                head1: dec_head1,
                head2: dec_head2,
            },
            classifier,
            regressor,
            embeddings,
        })
    }

    /// Param id of the embedding table (one row per singer).
    pub fn embeddings_id(&self) -> ParamId {
        self.embeddings
    }

    pub fn lookup_embedding(&self, singer: usize) -> Result<Vec<f64>> {
        let emb = self.set.tensor(self.embeddings);
        if singer >= emb.rows {
            return Err(Error::Argument(format!(
                "singer id {} out of range; valid ids: 0..{}",
                singer,
                emb.rows - 1
            )));
        }
        Ok(emb.data[singer * emb.cols..(singer + 1) * emb.cols].to_vec())
    }
}

/// Weighted blend of two singers' embeddings (backtranslation mixup).
pub fn mix_embeddings(a: &[f64], b: &[f64], weight: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| weight * x + (1.0 - weight) * y)
        .collect()
}

/// Memoized param-to-leaf binding for one tape. Gradients are read back
/// afterwards through the same `Var` handles.
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn new(set: &ParamSet) -> Self {
        BoundParams {
            vars: vec![None; set.len()],
        }
    }

    pub fn var(&mut self, set: &ParamSet, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(set.tensor(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// The leaf var for `id` if it participated in this tape's forward.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

fn conv_fwd(
    tape: &mut Tape,
    set: &ParamSet,
    bp: &mut BoundParams,
    conv: &Conv,
    x: Var,
) -> Var {
    let w = bp.var(set, tape, conv.w);
    let b = bp.var(set, tape, conv.b);
    tape.conv1d(x, w, b, conv.kernel, conv.dilation, conv.causal)
}

/// Encoder forward on a tape: residual dilated-conv blocks, a 1x1
/// projection, then non-overlapping average pooling down to the latent rate.
pub fn encode_on_tape(
    bundle: &ModelBundle,
    bp: &mut BoundParams,
    tape: &mut Tape,
    waveform: &[f64],
) -> Result<Var> {
    if waveform.len() < bundle.config.latent_stride {
        return Err(Error::InsufficientInput(format!(
            "waveform of {} samples is shorter than one pooling window ({})",
            waveform.len(),
            bundle.config.latent_stride
        )));
    }
    let set = &bundle.set;
    let x = tape.leaf(Tensor::row(waveform.to_vec()));
    let mut h = conv_fwd(tape, set, bp, &bundle.encoder.input, x);
    for (dilated, one) in &bundle.encoder.layers {
        let y = tape.relu(h);
        let y = conv_fwd(tape, set, bp, dilated, y);
        let y = tape.relu(y);
        let y = conv_fwd(tape, set, bp, one, y);
        h = tape.add(h, y);
    }
    let h = conv_fwd(tape, set, bp, &bundle.encoder.output, h);
    Ok(tape.avg_pool(h, bundle.config.latent_stride))
}

/// Inference-only encode.
pub fn encode(bundle: &ModelBundle, waveform: &[f64]) -> Result<LatentSequence> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let latent = encode_on_tape(bundle, &mut bp, &mut tape, waveform)?;
    Ok(LatentSequence {
        frames: tape.value(latent).clone(),
        stride: bundle.config.latent_stride,
    })
}

/// Upsample a normalized pitch contour to one value per audio sample.
pub fn upsample_pitch_to_audio(pitch: &PitchContour, audio_length: usize) -> Result<Vec<f64>> {
    if !pitch.normalized {
        return Err(Error::Argument(
            "conditioning expects a normalized pitch contour".into(),
        ));
    }
    upsample_linear(pitch, audio_length)
}

/// Assemble the per-sample condition matrix `[latent | pitch | embedding]`.
pub fn build_condition(
    latent: &LatentSequence,
    pitch: &PitchContour,
    embedding: &[f64],
    audio_length: usize,
) -> Result<ConditionSequence> {
    let expected_frames = audio_length.div_ceil(latent.stride);
    if latent.n_frames() != expected_frames {
        return Err(Error::Internal(format!(
            "latent has {} frames but audio of {} samples needs {}",
            latent.n_frames(),
            audio_length,
            expected_frames
        )));
    }
    let pitch_up = upsample_pitch_to_audio(pitch, audio_length)?;
    let lat_dim = latent.frames.rows;
    let rows = lat_dim + 1 + embedding.len();
    let mut values = Tensor::zeros(rows, audio_length);
    for t in 0..audio_length {
        let f = t / latent.stride;
        for r in 0..lat_dim {
            values.set(r, t, latent.frames.get(r, f));
        }
        values.set(lat_dim, t, pitch_up[t]);
        for (e, &v) in embedding.iter().enumerate() {
            values.set(lat_dim + 1 + e, t, v);
        }
    }
    Ok(ConditionSequence { values })
}

/// Tape version of condition assembly; keeps gradients flowing into the
/// latent and the embedding row.
pub fn build_condition_on_tape(
    tape: &mut Tape,
    latent: Var,
    pitch_upsampled: &[f64],
    embedding: Var,
    stride: usize,
    audio_length: usize,
) -> Result<Var> {
    if pitch_upsampled.len() != audio_length {
        return Err(Error::Internal(format!(
            "pitch upsampled to {} values but audio has {} samples",
            pitch_upsampled.len(),
            audio_length
        )));
    }
    let lat_up = tape.repeat_cols(latent, stride, audio_length);
    let pitch_leaf = tape.leaf(Tensor::row(pitch_upsampled.to_vec()));
    let emb_rep = tape.repeat_cols(embedding, audio_length, audio_length);
    Ok(tape.concat_rows(&[lat_up, pitch_leaf, emb_rep]))
}

/// Teacher-forcing input sequence: decoded amplitude of the previous code,
/// primed with the decoded silence code.
pub fn teacher_inputs(targets: &MuLawStream) -> Vec<f64> {
    let mut inputs = Vec::with_capacity(targets.codes.len());
    inputs.push(mulaw_decode_sample(SILENCE_CODE, MU));
    for &c in &targets.codes[..targets.codes.len().saturating_sub(1)] {
        inputs.push(mulaw_decode_sample(c, MU));
    }
    inputs
}

/// Teacher-forced decoder pass: gated causal dilated convolutions with the
/// condition injected pre-gate; returns `[n_classes, T]` logits.
pub fn decode_teacher_forced_on_tape(
    bundle: &ModelBundle,
    bp: &mut BoundParams,
    tape: &mut Tape,
    targets: &MuLawStream,
    condition: Var,
) -> Result<Var> {
    let t_len = targets.codes.len();
    if tape.value(condition).cols != t_len {
        return Err(Error::Argument(format!(
            "condition has {} rows but targets have {} samples",
            tape.value(condition).cols,
            t_len
        )));
    }
    let set = &bundle.set;
    let inputs = tape.leaf(Tensor::row(teacher_inputs(targets)));
    let mut h = conv_fwd(tape, set, bp, &bundle.decoder.input, inputs);
    let mut skip_sum: Option<Var> = None;
    for layer in &bundle.decoder.layers {
        let f = conv_fwd(tape, set, bp, &layer.filter, h);
        let g = conv_fwd(tape, set, bp, &layer.gate, h);
        let cf = conv_fwd(tape, set, bp, &layer.cond_filter, condition);
        let cg = conv_fwd(tape, set, bp, &layer.cond_gate, condition);
        let f = tape.add(f, cf);
        let g = tape.add(g, cg);
        let ft = tape.tanh(f);
        let gs = tape.sigmoid(g);
        let z = tape.mul(ft, gs);
        let res = conv_fwd(tape, set, bp, &layer.residual, z);
        h = tape.add(h, res);
        let sk = conv_fwd(tape, set, bp, &layer.skip, z);
        skip_sum = Some(match skip_sum {
            Some(s) => tape.add(s, sk),
            None => sk,
        });
    }
    let s = skip_sum.expect("decoder has at least one layer");
    let s = tape.relu(s);
    let s = conv_fwd(tape, set, bp, &bundle.decoder.head1, s);
    let s = tape.relu(s);
    Ok(conv_fwd(tape, set, bp, &bundle.decoder.head2, s))
}

/// Inference-only teacher-forced logits.
pub fn decode_teacher_forced(
    bundle: &ModelBundle,
    targets: &MuLawStream,
    condition: &ConditionSequence,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let cond = tape.leaf(condition.values.clone());
    let logits = decode_teacher_forced_on_tape(bundle, &mut bp, &mut tape, targets, cond)?;
    Ok(tape.value(logits).clone())
}

/// Dropout mask leaf scaled by 1/(1-p); `None` in eval mode.
fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut dyn RngCore) -> Tensor {
    let keep = 1.0 - p;
    let mut mask = Tensor::zeros(rows, cols);
    let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
    for v in &mut mask.data {
        if r.gen::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    mask
}

fn adversary_trunk(
    bundle: &ModelBundle,
    arch: &AdversaryArch,
    bp: &mut BoundParams,
    tape: &mut Tape,
    latent: Var,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Var {
    let set = &bundle.set;
    let x = match dropout_rng {
        Some(rng) => {
            let v = tape.value(latent);
            let mask = dropout_mask(v.rows, v.cols, bundle.config.dropout_p, rng);
            tape.mul_mask(latent, mask)
        }
        None => latent,
    };
    let h = conv_fwd(tape, set, bp, &arch.conv1, x);
    let h = tape.relu(h);
    let h = conv_fwd(tape, set, bp, &arch.conv2, h);
    tape.relu(h)
}

/// Singer classifier: conv trunk, mean over time, linear head to
/// `[n_singers, 1]` logits.
pub fn classify_singer_on_tape(
    bundle: &ModelBundle,
    bp: &mut BoundParams,
    tape: &mut Tape,
    latent: Var,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Var {
    let h = adversary_trunk(bundle, &bundle.classifier, bp, tape, latent, dropout_rng);
    let pooled = tape.mean_cols(h);
    conv_fwd(tape, &bundle.set, bp, &bundle.classifier.head, pooled)
}

/// Pitch regressor: same trunk shape, per-frame head, no time pooling.
pub fn regress_pitch_on_tape(
    bundle: &ModelBundle,
    bp: &mut BoundParams,
    tape: &mut Tape,
    latent: Var,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Var {
    let h = adversary_trunk(bundle, &bundle.regressor, bp, tape, latent, dropout_rng);
    conv_fwd(tape, &bundle.set, bp, &bundle.regressor.head, h)
}

/// Eval-mode singer logits.
pub fn classify_singer(bundle: &ModelBundle, latent: &LatentSequence) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let lv = tape.leaf(latent.frames.clone());
    let out = classify_singer_on_tape(bundle, &mut bp, &mut tape, lv, None);
    tape.value(out).data.clone()
}

/// Eval-mode per-frame pitch predictions.
pub fn regress_pitch(bundle: &ModelBundle, latent: &LatentSequence) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let lv = tape.leaf(latent.frames.clone());
    let out = regress_pitch_on_tape(bundle, &mut bp, &mut tape, lv, None);
    tape.value(out).data.clone()
}

// ---------------------------------------------------------------------------
// Incremental autoregressive generation
// ---------------------------------------------------------------------------

fn matvec_into(w: &Tensor, x: &[f64], b: &Tensor, out: &mut [f64]) {
    for o in 0..w.rows {
        let mut acc = b.data[o];
        let row = &w.data[o * w.cols..(o + 1) * w.cols];
        for i in 0..w.cols {
            acc += row[i] * x[i];
        }
        out[o] = acc;
    }
}

/// Per-layer ring buffers holding each layer's past residual-stream inputs,
/// giving O(1) work per generated sample per layer.
struct DecoderState {
    /// One buffer of length `dilation` per layer (kernel 2 needs h[t-d]).
    bufs: Vec<Vec<f64>>,
    t: usize,
}

impl DecoderState {
    fn new(bundle: &ModelBundle) -> Self {
        let c = bundle.config.residual_channels;
        let bufs = bundle
            .decoder
            .layers
            .iter()
            .map(|l| vec![0.0; l.filter.dilation * c])
            .collect();
        DecoderState { bufs, t: 0 }
    }

    /// Advance one step: input amplitude and condition column in, logits out.
    fn step(&mut self, bundle: &ModelBundle, x: f64, cond: &[f64], logits: &mut [f64]) {
        let set = &bundle.set;
        let c = bundle.config.residual_channels;
        let dec = &bundle.decoder;

        // input 1x1 conv
        let w_in = set.tensor(dec.input.w);
        let b_in = set.tensor(dec.input.b);
        let mut h: Vec<f64> = (0..c).map(|o| b_in.data[o] + w_in.data[o] * x).collect();

        let mut skip_sum = vec![0.0f64; c];
        let mut f = vec![0.0f64; c];
        let mut g = vec![0.0f64; c];
        let mut z = vec![0.0f64; c];
        for (li, layer) in dec.layers.iter().enumerate() {
            let d = layer.filter.dilation;
            let slot = (self.t % d) * c;
            // h from t-d lives in the slot about to be overwritten
            let (w_f, b_f) = (set.tensor(layer.filter.w), set.tensor(layer.filter.b));
            let (w_g, b_g) = (set.tensor(layer.gate.w), set.tensor(layer.gate.b));
            let (w_cf, b_cf) = (set.tensor(layer.cond_filter.w), set.tensor(layer.cond_filter.b));
            let (w_cg, b_cg) = (set.tensor(layer.cond_gate.w), set.tensor(layer.cond_gate.b));
            {
                let past = &self.bufs[li][slot..slot + c];
                for o in 0..c {
                    let wrow_f = &w_f.data[o * 2 * c..(o + 1) * 2 * c];
                    let wrow_g = &w_g.data[o * 2 * c..(o + 1) * 2 * c];
                    let mut acc_f = b_f.data[o];
                    let mut acc_g = b_g.data[o];
                    for i in 0..c {
                        // weight layout [i*K + k]: k=0 is the past tap, k=1 current
                        acc_f += wrow_f[i * 2] * past[i] + wrow_f[i * 2 + 1] * h[i];
                        acc_g += wrow_g[i * 2] * past[i] + wrow_g[i * 2 + 1] * h[i];
                    }
                    f[o] = acc_f;
                    g[o] = acc_g;
                }
            }
            for o in 0..c {
                let mut acc_f = 0.0;
                let mut acc_g = 0.0;
                let row_f = &w_cf.data[o * w_cf.cols..(o + 1) * w_cf.cols];
                let row_g = &w_cg.data[o * w_cg.cols..(o + 1) * w_cg.cols];
                for (i, &cv) in cond.iter().enumerate() {
                    acc_f += row_f[i] * cv;
                    acc_g += row_g[i] * cv;
                }
                f[o] += acc_f + b_cf.data[o];
                g[o] += acc_g + b_cg.data[o];
            }
            for o in 0..c {
                z[o] = f[o].tanh() * (1.0 / (1.0 + (-g[o]).exp()));
            }
            // store this layer's input for step t+d, then advance the stream
            self.bufs[li][slot..slot + c].copy_from_slice(&h);
            let (w_r, b_r) = (set.tensor(layer.residual.w), set.tensor(layer.residual.b));
            let (w_s, b_s) = (set.tensor(layer.skip.w), set.tensor(layer.skip.b));
            for o in 0..c {
                let row_r = &w_r.data[o * c..(o + 1) * c];
                let row_s = &w_s.data[o * c..(o + 1) * c];
                let mut acc_r = b_r.data[o];
                let mut acc_s = b_s.data[o];
                for i in 0..c {
                    acc_r += row_r[i] * z[i];
                    acc_s += row_s[i] * z[i];
                }
                h[o] += acc_r;
                skip_sum[o] += acc_s;
            }
        }
        for v in &mut skip_sum {
            *v = v.max(0.0);
        }
        let mut s1 = vec![0.0f64; c];
        matvec_into(
            set.tensor(dec.head1.w),
            &skip_sum,
            set.tensor(dec.head1.b),
            &mut s1,
        );
        for v in &mut s1 {
            *v = v.max(0.0);
        }
        matvec_into(set.tensor(dec.head2.w), &s1, set.tensor(dec.head2.b), logits);
        self.t += 1;
    }
}

/// Decoder logits with externally forced inputs (used to cross-check the
/// incremental path against the tape path).
pub fn incremental_logits(
    bundle: &ModelBundle,
    condition: &ConditionSequence,
    inputs: &[f64],
) -> Result<Tensor> {
    let t_len = condition.len();
    if inputs.len() != t_len {
        return Err(Error::Argument("input/condition length mismatch".into()));
    }
    let n_cls = bundle.config.n_classes;
    let mut state = DecoderState::new(bundle);
    let mut out = Tensor::zeros(n_cls, t_len);
    let mut logits = vec![0.0f64; n_cls];
    let mut cond_col = vec![0.0f64; condition.values.rows];
    for t in 0..t_len {
        for r in 0..condition.values.rows {
            cond_col[r] = condition.values.get(r, t);
        }
        state.step(bundle, inputs[t], &cond_col, &mut logits);
        for c in 0..n_cls {
            out.set(c, t, logits[c]);
        }
    }
    Ok(out)
}

/// Autoregressive generation: one mu-law code per condition row, feeding
/// each emitted code's decoded amplitude back as the next input.
pub fn generate(
    bundle: &ModelBundle,
    condition: &ConditionSequence,
    seed: u64,
    sampling: Sampling,
) -> Result<MuLawStream> {
    if condition.is_empty() {
        return Err(Error::Argument("condition sequence is empty".into()));
    }
    let n_cls = bundle.config.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DecoderState::new(bundle);
    let mut codes = Vec::with_capacity(condition.len());
    let mut logits = vec![0.0f64; n_cls];
    let mut cond_col = vec![0.0f64; condition.values.rows];
    let mut x = mulaw_decode_sample(SILENCE_CODE, MU);
    for t in 0..condition.len() {
        for r in 0..condition.values.rows {
            cond_col[r] = condition.values.get(r, t);
        }
        state.step(bundle, x, &cond_col, &mut logits);
        let code = match sampling {
            Sampling::Argmax => {
                let mut best = 0usize;
                for c in 1..n_cls {
                    if logits[c] > logits[best] {
                        best = c;
                    }
                }
                best as u8
            }
            Sampling::Categorical => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut u = rng.gen::<f64>() * z;
                let mut pick = n_cls - 1;
                for (c, &e) in exps.iter().enumerate() {
                    if u < e {
                        pick = c;
                        break;
                    }
                    u -= e;
                }
                pick as u8
            }
        };
        codes.push(code);
        x = mulaw_decode_sample(code, MU);
    }
    Ok(MuLawStream {
        codes,
        sample_rate: 16000,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"PNET";
const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_save(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_toml = toml::to_string(&bundle.config)
        .map_err(|e| Error::Internal(format!("config serialization: {}", e)))?;
    buf.extend_from_slice(&(config_toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_toml.as_bytes());
    buf.extend_from_slice(&(bundle.set.len() as u32).to_le_bytes());
    for id in bundle.set.ids() {
        let name = bundle.set.name(id).as_bytes();
        let t = bundle.set.tensor(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corrupt(format!(
                "unexpected end of file at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn checkpoint_load(path: &Path) -> Result<ModelBundle> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader { data: &data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_str = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Corrupt("config block is not utf-8".into()))?;
    let config: ModelConfig =
        toml::from_str(cfg_str).map_err(|e| Error::Corrupt(format!("config parse: {}", e)))?;
    let mut bundle = ModelBundle::init(config, 0)?;
    let n_params = r.u32()? as usize;
    if n_params != bundle.set.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} parameters, config implies {}",
            n_params,
            bundle.set.len()
        )));
    }
    for id in bundle.set.ids() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("parameter name is not utf-8".into()))?
            .to_string();
        if name != bundle.set.name(id) {
            return Err(Error::Corrupt(format!(
                "parameter order mismatch: found {}, expected {}",
                name,
                bundle.set.name(id)
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let expect = bundle.set.tensor(id);
        if rows != expect.rows || cols != expect.cols {
            return Err(Error::Corrupt(format!(
                "parameter {} has shape {}x{}, config implies {}x{}",
                name, rows, cols, expect.rows, expect.cols
            )));
        }
        let t = bundle.set.tensor_mut(id);
        for i in 0..rows * cols {
            t.data[i] = r.f64()?;
        }
    }
    if r.pos != data.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after parameters",
            data.len() - r.pos
        )));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mulaw_encode_sample;

    fn mini() -> ModelBundle {
        ModelBundle::init(ModelConfig::miniature(), 42).unwrap()
    }

    fn norm_contour(values: Vec<f64>, hop: usize) -> PitchContour {
        PitchContour {
            f0: values,
            hop,
            sample_rate: 16000,
            normalized: true,
        }
    }

    fn random_stream(len: usize, seed: u64) -> MuLawStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MuLawStream {
            codes: (0..len).map(|_| rng.gen_range(0u8..=255)).collect(),
            sample_rate: 16000,
        }
    }

    fn random_condition(bundle: &ModelBundle, len: usize, seed: u64) -> ConditionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionSequence {
            values: Tensor::rand_uniform(bundle.config.condition_dim(), len, 0.5, &mut rng),
        }
    }

    #[test]
    fn default_receptive_field_matches_formula() {
        assert_eq!(ModelConfig::default().receptive_field(), 4 * (1 << 10) - 4 + 1);
        assert_eq!(ModelConfig::default().receptive_field(), 4093);
    }

    #[test]
    fn encode_frame_counts() {
        let bundle = mini(); // stride 8
        let latent = encode(&bundle, &vec![0.1; 64]).unwrap();
        assert_eq!(latent.n_frames(), 8);
        let one = encode(&bundle, &vec![0.1; 8]).unwrap();
        assert_eq!(one.n_frames(), 1);
        assert!(encode(&bundle, &vec![0.1; 4]).is_err());
        // full-scale ratio on the mini net: ceil arithmetic
        let ragged = encode(&bundle, &vec![0.1; 61]).unwrap();
        assert_eq!(ragged.n_frames(), 8);
    }

    #[test]
    fn encode_zero_input_is_finite() {
        let bundle = mini();
        let latent = encode(&bundle, &vec![0.0; 32]).unwrap();
        assert!(latent.frames.is_finite());
    }

    #[test]
    fn condition_layout_and_nearest_neighbor() {
        let bundle = mini();
        let latent = encode(&bundle, &vec![0.2; 16]).unwrap(); // 2 frames, stride 8
        let pitch = norm_contour(vec![0.5; 4], 4);
        let emb = bundle.lookup_embedding(1).unwrap();
        let cond = build_condition(&latent, &pitch, &emb, 16).unwrap();
        assert_eq!(cond.values.rows, bundle.config.condition_dim());
        assert_eq!(cond.len(), 16);
        let ld = bundle.config.latent_dim;
        for t in 0..16 {
            let f = t / 8;
            for r in 0..ld {
                assert_eq!(cond.values.get(r, t), latent.frames.get(r, f));
            }
            assert!((cond.values.get(ld, t) - 0.5).abs() < 1e-12);
            for (e, &v) in emb.iter().enumerate() {
                assert_eq!(cond.values.get(ld + 1 + e, t), v);
            }
        }
        // swapping the embedding changes only the trailing rows
        let emb0 = bundle.lookup_embedding(0).unwrap();
        let cond0 = build_condition(&latent, &pitch, &emb0, 16).unwrap();
        for t in 0..16 {
            for r in 0..=ld {
                assert_eq!(cond.values.get(r, t), cond0.values.get(r, t));
            }
        }
    }

    #[test]
    fn teacher_forced_shape_and_causality() {
        let bundle = mini();
        let len = 40;
        let targets = random_stream(len, 3);
        let cond = random_condition(&bundle, len, 4);
        let base = decode_teacher_forced(&bundle, &targets, &cond).unwrap();
        assert_eq!((base.rows, base.cols), (256, len));
        // perturbing the target at position t changes no logit at <= t
        for &t in &[5usize, 12, 20, 31, 38] {
            let mut perturbed = targets.clone();
            perturbed.codes[t] = perturbed.codes[t].wrapping_add(40);
            let out = decode_teacher_forced(&bundle, &perturbed, &cond).unwrap();
            for tt in 0..=t {
                for c in 0..256 {
                    assert_eq!(out.get(c, tt), base.get(c, tt), "leak at t={} tt={}", t, tt);
                }
            }
        }
    }

    #[test]
    fn receptive_field_by_perturbation() {
        let bundle = mini();
        let rf = bundle.config.receptive_field(); // 1 block, 2 layers: 1+2+1 = 4
        assert_eq!(rf, 4);
        let len = 16;
        let cond = random_condition(&bundle, len, 9);
        let inputs: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        let base = incremental_logits(&bundle, &cond, &inputs).unwrap();
        let probe = 6usize;
        let mut pert = inputs.clone();
        pert[probe] += 0.25;
        let out = incremental_logits(&bundle, &cond, &pert).unwrap();
        for t in 0..len {
            let changed = (0..256).any(|c| (out.get(c, t) - base.get(c, t)).abs() > 1e-12);
            let in_field = t >= probe && t < probe + rf;
            assert_eq!(changed, in_field, "t={} probe={} rf={}", t, probe, rf);
        }
    }

    #[test]
    fn incremental_matches_tape_decoder() {
        let bundle = mini();
        let len = 30;
        let targets = random_stream(len, 11);
        let cond = random_condition(&bundle, len, 12);
        let tape_logits = decode_teacher_forced(&bundle, &targets, &cond).unwrap();
        let inc_logits = incremental_logits(&bundle, &cond, &teacher_inputs(&targets)).unwrap();
        for i in 0..tape_logits.data.len() {
            assert!(
                (tape_logits.data[i] - inc_logits.data[i]).abs() < 1e-9,
                "divergence at {}",
                i
            );
        }
    }

    #[test]
    fn generate_contracts() {
        let bundle = mini();
        for &len in &[1usize, 8, 64] {
            let cond = random_condition(&bundle, len, len as u64);
            let out = generate(&bundle, &cond, 7, Sampling::Argmax).unwrap();
            assert_eq!(out.codes.len(), len);
        }
        let cond = random_condition(&bundle, 32, 1);
        let a = generate(&bundle, &cond, 7, Sampling::Argmax).unwrap();
        let b = generate(&bundle, &cond, 7, Sampling::Argmax).unwrap();
        assert_eq!(a, b);
        let c1 = generate(&bundle, &cond, 5, Sampling::Categorical).unwrap();
        let c2 = generate(&bundle, &cond, 5, Sampling::Categorical).unwrap();
        assert_eq!(c1, c2, "fixed seed must reproduce");
        // step 0: generation logits equal teacher-forced logits (shared prime)
        let targets = random_stream(32, 2);
        let tf = decode_teacher_forced(&bundle, &targets, &cond).unwrap();
        let inc = incremental_logits(
            &bundle,
            &cond,
            &{
                let mut v = vec![mulaw_decode_sample(SILENCE_CODE, MU)];
                v.extend(std::iter::repeat(0.0).take(31));
                v
            },
        )
        .unwrap();
        for c in 0..256 {
            assert!((tf.get(c, 0) - inc.get(c, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adversary_shapes_and_determinism() {
        let bundle = mini();
        let latent = encode(&bundle, &vec![0.3; 64]).unwrap();
        let logits = classify_singer(&bundle, &latent);
        assert_eq!(logits.len(), bundle.config.n_singers);
        let again = classify_singer(&bundle, &latent);
        assert_eq!(logits, again, "eval mode has no dropout");
        let preds = regress_pitch(&bundle, &latent);
        assert_eq!(preds.len(), latent.n_frames());
        let again = regress_pitch(&bundle, &latent);
        assert_eq!(preds, again);
    }

    #[test]
    fn classifier_reversal_equivariance_with_flipped_kernels() {
        // A same-padded conv applied to a time-reversed sequence equals the
        // kernel-flipped conv applied to the original, reversed. With
        // asymmetric kernels the trunk is therefore only reversal-invariant
        // after flipping the kernels; away from the padding fringe the match
        // is exact, so the mean-pooled logits agree up to edge columns.
        let bundle = mini();
        let mut flipped = clone_bundle(&bundle);
        for conv in [flipped.classifier.conv1, flipped.classifier.conv2] {
            let k = conv.kernel;
            let w = flipped.set.tensor_mut(conv.w);
            let c_in = w.cols / k;
            for o in 0..w.rows {
                for i in 0..c_in {
                    let base = o * w.cols + i * k;
                    w.data[base..base + k].reverse();
                }
            }
        }
        let t_len = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = Tensor::rand_uniform(bundle.config.latent_dim, t_len, 0.5, &mut rng);
        let mut rev = frames.clone();
        for r in 0..rev.rows {
            for t in 0..t_len {
                rev.set(r, t, frames.get(r, t_len - 1 - t));
            }
        }
        let trunk = |b: &ModelBundle, f: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let mut bp = BoundParams::new(&b.set);
            let lv = tape.leaf(f.clone());
            let out = adversary_trunk(b, &b.classifier, &mut bp, &mut tape, lv, None);
            tape.value(out).clone()
        };
        let a = trunk(&bundle, &rev);
        let b = trunk(&flipped, &frames);
        let guard = 4; // two kernel-3 convs reach 2 columns each way
        for r in 0..a.rows {
            for t in guard..t_len - guard {
                assert!(
                    (a.get(r, t) - b.get(r, t_len - 1 - t)).abs() < 1e-9,
                    "equivariance broken at row {} col {}",
                    r,
                    t
                );
            }
        }
    }

    fn clone_bundle(bundle: &ModelBundle) -> ModelBundle {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clone.pnck");
        checkpoint_save(bundle, &path).unwrap();
        checkpoint_load(&path).unwrap()
    }

    #[test]
    fn regressor_equivariance_away_from_edges() {
        let bundle = mini();
        let t_len = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = Tensor::rand_uniform(bundle.config.latent_dim, t_len, 0.5, &mut rng);
        // circular shift by 7
        let mut shifted = frames.clone();
        for r in 0..frames.rows {
            for t in 0..t_len {
                shifted.set(r, (t + 7) % t_len, frames.get(r, t));
            }
        }
        let a = regress_pitch(&bundle, &LatentSequence { frames, stride: 8 });
        let b = regress_pitch(&bundle, &LatentSequence { frames: shifted, stride: 8 });
        // guard band: 2 stacked kernel-3 convs reach 2 columns each way
        let guard = 2 + 7; // conv reach plus the wrapped region
        for t in guard..t_len - guard {
            assert!(
                (a[t] - b[(t + 7) % t_len]).abs() < 1e-9,
                "equivariance broken at {}",
                t
            );
        }
    }

    #[test]
    fn embedding_lookup_and_mix() {
        let bundle = mini();
        let v0 = bundle.lookup_embedding(0).unwrap();
        let v1 = bundle.lookup_embedding(1).unwrap();
        assert_eq!(v0.len(), bundle.config.embed_dim);
        assert_ne!(v0, v1);
        assert!(bundle.lookup_embedding(2).is_err());
        let half = mix_embeddings(&v0, &v1, 0.5);
        for i in 0..v0.len() {
            assert!((half[i] - 0.5 * (v0[i] + v1[i])).abs() < 1e-12);
        }
        assert_eq!(mix_embeddings(&v0, &v1, 1.0), v0);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let bundle = mini();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pnck");
        checkpoint_save(&bundle, &path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(loaded.config, bundle.config);
        for id in bundle.set.ids() {
            assert_eq!(
                bundle.set.tensor(id).data,
                loaded.set.tensor(id).data,
                "param {} not bit-exact",
                bundle.set.name(id)
            );
        }
    }

    #[test]
    fn checkpoint_truncation_and_version_gate() {
        let bundle = mini();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pnck");
        checkpoint_save(&bundle, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.pnck");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(checkpoint_load(&cut), Err(Error::Corrupt(_))));
        // bump the version field
        let mut vbytes = bytes.clone();
        vbytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let vpath = dir.path().join("v2.pnck");
        std::fs::write(&vpath, &vbytes).unwrap();
        match checkpoint_load(&vpath) {
            Err(Error::Version { found, supported }) => {
                assert_eq!((found, supported), (2, 1));
            }
            other => panic!("expected version error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn mulaw_teacher_inputs_prime_with_silence() {
        let stream = MuLawStream {
            codes: vec![mulaw_encode_sample(0.4, MU), 10, 200],
            sample_rate: 16000,
        };
        let inputs = teacher_inputs(&stream);
        assert_eq!(inputs.len(), 3);
        assert_eq!(inputs[0], mulaw_decode_sample(SILENCE_CODE, MU));
        assert_eq!(inputs[1], mulaw_decode_sample(stream.codes[0], MU));
    }
}
