//! The segment refinement model: segment encoder, dilated-convolution frame
//! encoder, segment decoder alternating masked segment-frame attention with
//! inter-segment attention, and the classification/regression heads feeding
//! mask voting.

use crate::error::{Error, Result};
use crate::nn::{
    masked_attention, uniform_init, DilatedResidualLayer, Forward, Mlp, ParamId, ParamStore,
    PositionalEncoding,
};
use crate::segments::{
    decode_offsets, extract_segments, mask_vote, segment_to_mask, BoundaryOffsets, LabelSequence,
    Segment, SegmentMask,
};
use crate::tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of real action classes |C|; the junk class is added on top.
    pub num_classes: usize,
    /// Channel width of the frame encoder.
    pub frame_dim: usize,
    /// Width of segment representations in the decoder.
    pub decoder_dim: usize,
    /// Dilated residual layers in the frame encoder; layer i has dilation 2^i.
    pub frame_layers: usize,
    /// Decoder layers (one segment-frame + one inter-segment block each).
    pub decoder_layers: usize,
    /// Frame-encoder layers whose outputs feed the decoder layers, in order.
    pub tap_layers: Vec<usize>,
    /// Segment-frame attention window: segments on each side contributing
    /// frames.
    pub window: usize,
    /// Depth of both prediction-head MLPs.
    pub head_depth: usize,
    /// Attention head count (1 = the plain single-head formulation).
    pub attention_heads: usize,
    /// Scale attention scores by 1/sqrt(head dim).
    pub scale_scores: bool,
    /// Include the frame-mean embedding in segment representations.
    pub use_frame_embedding: bool,
    /// Include the category embedding in segment representations.
    pub use_category_embedding: bool,
    /// Add positional encodings to segment representations in inter-segment
    /// attention.
    pub use_segment_pe: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            frame_dim: 64,
            decoder_dim: 256,
            frame_layers: 10,
            decoder_layers: 2,
            tap_layers: vec![8, 9],
            window: 1,
            head_depth: 2,
            attention_heads: 1,
            scale_scores: false,
            use_frame_embedding: true,
            use_category_embedding: true,
            use_segment_pe: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        ModelConfig { num_classes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".to_string()));
        }
        if self.frame_dim == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("zero model width".to_string()));
        }
        if self.decoder_dim % 2 != 0 {
            return Err(Error::Config(
                "decoder width must be even for sinusoidal encodings".to_string(),
            ));
        }
        if self.frame_layers == 0 {
            return Err(Error::Config("frame encoder needs at least one layer".to_string()));
        }
        if self.decoder_layers == 0 || self.decoder_layers != self.tap_layers.len() {
            return Err(Error::Config(format!(
                "decoder layer count {} must match tap layer count {}",
                self.decoder_layers,
                self.tap_layers.len()
            )));
        }
        if let Some(&bad) = self.tap_layers.iter().find(|&&t| t >= self.frame_layers) {
            return Err(Error::Config(format!(
                "tap layer {} out of range for {} frame layers",
                bad, self.frame_layers
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("attention window must be >= 1".to_string()));
        }
        if self.head_depth == 0 {
            return Err(Error::Config("head depth must be >= 1".to_string()));
        }
        if self.attention_heads == 0 || self.decoder_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} attention heads",
                self.decoder_dim, self.attention_heads
            )));
        }
        if !self.use_frame_embedding && !self.use_category_embedding {
            return Err(Error::Config(
                "segment encoder needs at least one embedding kind".to_string(),
            ));
        }
        Ok(())
    }
}

struct DecoderLayer {
    wq: ParamId,
    key_mlp: Mlp,
    value_mlp: Mlp,
    wq2: ParamId,
    key2_mlp: Mlp,
    value2_mlp: Mlp,
}

/// Per-layer intermediate representations and the shared locality mask,
/// exposed for diagnostics and invariant tests.
pub struct DecoderTrace {
    /// Ξ′ after segment-frame attention, one per decoder layer.
    pub after_segment_frame: Vec<Var>,
    /// Ξ″ after inter-segment attention, one per decoder layer.
    pub after_inter_segment: Vec<Var>,
    /// The additive {0, -inf} locality mask, one row per segment.
    pub mask: Tensor,
    pub no_segments: bool,
}

/// Everything a video forward pass produces, with the live graph.
pub struct ForwardPass<'a> {
    pub forward: Forward<'a>,
    pub segments: Vec<Segment>,
    pub class_logits: Var,
    pub class_probs: Var,
    pub offsets: Var,
    pub trace: DecoderTrace,
}

/// Final per-video refinement artifacts.
#[derive(Debug, Clone)]
pub struct RefinedOutput {
    /// Initial segments the refinement started from.
    pub segments: Vec<Segment>,
    /// Per-segment distribution over |C|+1 classes (junk last).
    pub class_probs: Tensor,
    /// Per-segment (center, log-length) offsets.
    pub offsets: Tensor,
    /// Refined segment intervals after offset decoding.
    pub refined_segments: Vec<Segment>,
    /// Binary masks of the refined segments.
    pub masks: Vec<SegmentMask>,
    /// Fused per-frame scores over the |C| real classes.
    pub frame_scores: Tensor,
    /// Final per-frame labels.
    pub labels: LabelSequence,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    adapter_w: ParamId,
    adapter_b: ParamId,
    category_mlp: Mlp,
    frame_encoder: Vec<DilatedResidualLayer>,
    decoder: Vec<DecoderLayer>,
    class_head: Mlp,
    reg_head: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.decoder_dim;

        let adapter_w = store.add(
            "adapter.w",
            uniform_init(&mut rng, vec![config.frame_dim, d], config.frame_dim),
            true,
        );
        let adapter_b = store.add(
            "adapter.b",
            uniform_init(&mut rng, vec![d], config.frame_dim),
            false,
        );
        // One-hot lookup plus projection; the first layer acts as the
        // category table and is exempt from weight decay.
        let category_mlp =
            Mlp::new(&mut store, &mut rng, "category", &[config.num_classes, d, d], 1);

        let mut frame_encoder = Vec::new();
        for i in 0..config.frame_layers {
            frame_encoder.push(DilatedResidualLayer::new(
                &mut store,
                &mut rng,
                &format!("frame{i}"),
                config.frame_dim,
                3,
                1usize << i,
            ));
        }

        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            decoder.push(DecoderLayer {
                wq: store.add(format!("dec{l}.wq"), uniform_init(&mut rng, vec![d, d], d), true),
                key_mlp: Mlp::new(&mut store, &mut rng, &format!("dec{l}.key"), &[d, d, d], 0),
                value_mlp: Mlp::new(&mut store, &mut rng, &format!("dec{l}.value"), &[d, d, d], 0),
                wq2: store.add(format!("dec{l}.wq2"), uniform_init(&mut rng, vec![d, d], d), true),
                key2_mlp: Mlp::new(&mut store, &mut rng, &format!("dec{l}.key2"), &[d, d, d], 0),
                value2_mlp: Mlp::new(
                    &mut store,
                    &mut rng,
                    &format!("dec{l}.value2"),
                    &[d, d, d],
                    0,
                ),
            });
        }

        let mut class_widths = vec![d; config.head_depth];
        class_widths.push(config.num_classes + 1);
        let class_head = Mlp::new(&mut store, &mut rng, "class_head", &class_widths, 0);
        let mut reg_widths = vec![d; config.head_depth];
        reg_widths.push(2);
        let reg_head = Mlp::new(&mut store, &mut rng, "reg_head", &reg_widths, 0);

        Ok(Model {
            config,
            params: store,
            adapter_w,
            adapter_b,
            category_mlp,
            frame_encoder,
            decoder,
            class_head,
            reg_head,
        })
    }

    pub fn start_forward(&self) -> Forward<'_> {
        Forward::new(&self.params)
    }

    fn adapter(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.adapter_w);
        let b = f.param(self.adapter_b);
        let h = f.graph.matmul(x, w)?;
        f.graph.add_bias(h, b)
    }

    /// Segment representations Ξ [N×D]: frame-mean embedding through the
    /// shared adapter plus the category embedding of the initial label.
    /// Returns (Ξ, ξ_f rows, ξ_c rows).
    pub fn encode_segments(
        &self,
        f: &mut Forward,
        segments: &[Segment],
        features: Var,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        if segments.is_empty() {
            return Err(Error::Contract("encode_segments: empty prediction".to_string()));
        }
        let frame_part = if self.config.use_frame_embedding {
            let mut means = Vec::with_capacity(segments.len());
            for s in segments {
                let span = f.graph.slice_rows(features, s.start, s.end + 1)?;
                let mean = f.graph.mean_rows(span)?;
                means.push(f.graph.reshape(mean, vec![1, self.config.frame_dim])?);
            }
            let stacked = f.graph.concat_rows(&means)?;
            Some(self.adapter(f, stacked)?)
        } else {
            None
        };
        let category_part = if self.config.use_category_embedding {
            let mut onehot = Tensor::zeros(vec![segments.len(), self.config.num_classes]);
            for (i, s) in segments.iter().enumerate() {
                onehot.data_mut()[i * self.config.num_classes + s.label] = 1.0;
            }
            let oh = f.graph.constant(onehot);
            Some(self.category_mlp.forward(f, oh)?)
        } else {
            None
        };
        let xi = match (frame_part, category_part) {
            (Some(a), Some(b)) => f.graph.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("validated config"),
        };
        Ok((xi, frame_part, category_part))
    }

    /// Runs the stacked dilated residual layers and returns one Var per
    /// configured tap layer.
    pub fn encode_frames(&self, f: &mut Forward, features: Var) -> Result<Vec<Var>> {
        let mut outputs = Vec::with_capacity(self.config.frame_layers);
        let mut h = features;
        for layer in &self.frame_encoder {
            h = layer.forward(f, h)?;
            outputs.push(h);
        }
        Ok(self.config.tap_layers.iter().map(|&t| outputs[t]).collect())
    }

    fn attention(
        &self,
        f: &mut Forward,
        query: Var,
        keys: Var,
        values: Var,
        mask: Var,
    ) -> Result<Var> {
        let heads = self.config.attention_heads;
        let query = if self.config.scale_scores {
            let head_dim = self.config.decoder_dim / heads;
            f.graph.mul_scalar(query, 1.0 / (head_dim as f64).sqrt())?
        } else {
            query
        };
        if heads == 1 {
            return masked_attention(&mut f.graph, query, keys, values, mask);
        }
        let head_dim = self.config.decoder_dim / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let q = f.graph.slice_cols(query, lo, hi)?;
            let k = f.graph.slice_cols(keys, lo, hi)?;
            let v = f.graph.slice_cols(values, lo, hi)?;
            parts.push(masked_attention(&mut f.graph, q, k, v, mask)?);
        }
        f.graph.concat_cols(&parts)
    }

    /// Segment decoder: per layer, residual masked attention from each
    /// segment over its local window of frame features, then residual
    /// self-attention across segments.
    pub fn decode_segments(
        &self,
        f: &mut Forward,
        xi: Var,
        taps: &[Var],
        segments: &[Segment],
        t_len: usize,
    ) -> Result<(Var, DecoderTrace)> {
        if taps.len() != self.config.decoder_layers {
            return Err(Error::Contract(format!(
                "decoder expects {} tap features, got {}",
                self.config.decoder_layers,
                taps.len()
            )));
        }
        let n = segments.len();
        if n == 0 {
            let empty = f.graph.constant(Tensor::zeros(vec![0, self.config.decoder_dim]));
            return Ok((
                empty,
                DecoderTrace {
                    after_segment_frame: Vec::new(),
                    after_inter_segment: Vec::new(),
                    mask: Tensor::zeros(vec![0, t_len]),
                    no_segments: true,
                },
            ));
        }
        let d = self.config.decoder_dim;
        let mask = build_local_mask(segments, self.config.window, t_len);
        let mask_var = f.graph.constant(mask.clone());
        let pe_frames = PositionalEncoding::new(t_len, d)?;
        let pe_frames = f.graph.constant(pe_frames.table().clone());
        let pe_segments = PositionalEncoding::new(n, d)?;
        let pe_segments = f.graph.constant(pe_segments.table().clone());

        let mut state = xi;
        let mut after_sf = Vec::new();
        let mut after_is = Vec::new();
        for (layer, &tap) in self.decoder.iter().zip(taps) {
            // Segment-frame attention over the adapter-projected tap
            // features with frame positional encodings.
            let frames = self.adapter(f, tap)?;
            let frames = f.graph.add(frames, pe_frames)?;
            let keys = layer.key_mlp.forward(f, frames)?;
            let values = layer.value_mlp.forward(f, frames)?;
            let wq = f.param(layer.wq);
            let query = f.graph.matmul(state, wq)?;
            let update = self.attention(f, query, keys, values, mask_var)?;
            let sf = f.graph.add(state, update)?;
            after_sf.push(sf);

            let is = self.inter_segment_attention(f, layer, sf, Some(pe_segments))?;
            after_is.push(is);
            state = is;
        }
        Ok((
            state,
            DecoderTrace {
                after_segment_frame: after_sf,
                after_inter_segment: after_is,
                mask,
                no_segments: false,
            },
        ))
    }

    /// Residual self-attention across all segment representations. The
    /// positional-encoding rows are added when configured; without them the
    /// block is permutation-equivariant over input rows.
    fn inter_segment_attention(
        &self,
        f: &mut Forward,
        layer: &DecoderLayer,
        input: Var,
        pe_segments: Option<Var>,
    ) -> Result<Var> {
        let n = f.graph.value(input).rows();
        let base = match pe_segments {
            Some(pe) if self.config.use_segment_pe => f.graph.add(input, pe)?,
            _ => input,
        };
        let keys = layer.key2_mlp.forward(f, base)?;
        let values = layer.value2_mlp.forward(f, base)?;
        let wq2 = f.param(layer.wq2);
        let query = f.graph.matmul(base, wq2)?;
        let open = f.graph.constant(Tensor::zeros(vec![n, n]));
        let update = self.attention(f, query, keys, values, open)?;
        f.graph.add(input, update)
    }

    /// Drives one decoder layer's inter-segment block in isolation
    /// (diagnostics and invariant tests).
    pub fn inter_segment_attention_alone(
        &self,
        f: &mut Forward,
        layer_index: usize,
        input: Var,
        pe_segments: Option<Var>,
    ) -> Result<Var> {
        let layer = self
            .decoder
            .get(layer_index)
            .ok_or_else(|| Error::Contract(format!("no decoder layer {layer_index}")))?;
        self.inter_segment_attention(f, layer, input, pe_segments)
    }

    /// Class logits [N×(|C|+1)] before the softmax.
    pub fn class_logits(&self, f: &mut Forward, xi: Var) -> Result<Var> {
        self.class_head.forward(f, xi)
    }

    /// Boundary offsets [N×2]: column 0 center offset, column 1 log length.
    pub fn regress_offsets(&self, f: &mut Forward, xi: Var) -> Result<Var> {
        self.reg_head.forward(f, xi)
    }

    /// Full forward pass for one video. `features` is [T×frame_dim];
    /// `init_pred` supplies the segments being refined.
    pub fn forward_video(
        &self,
        features: &Tensor,
        init_pred: &LabelSequence,
    ) -> Result<ForwardPass<'_>> {
        let t_len = init_pred.len();
        if t_len == 0 {
            return Err(Error::Contract("forward_video: empty prediction".to_string()));
        }
        if features.rank() != 2
            || features.rows() != t_len
            || features.cols() != self.config.frame_dim
        {
            return Err(Error::shape(
                "forward_video",
                format!(
                    "features {:?} incompatible with T={} and frame_dim={}",
                    features.shape(),
                    t_len,
                    self.config.frame_dim
                ),
            ));
        }
        if let Some(&bad) = init_pred.labels().iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Contract(format!(
                "initial label {} out of range for {} classes",
                bad, self.config.num_classes
            )));
        }
        let segments = extract_segments(init_pred);
        let mut f = self.start_forward();
        let feats = f.graph.constant(features.clone());
        let taps = self.encode_frames(&mut f, feats)?;
        let (xi, _, _) = self.encode_segments(&mut f, &segments, feats)?;
        let (refined, trace) = self.decode_segments(&mut f, xi, &taps, &segments, t_len)?;
        let class_logits = self.class_logits(&mut f, refined)?;
        let class_probs = f.graph.softmax_lastdim(class_logits)?;
        let offsets = self.regress_offsets(&mut f, refined)?;
        Ok(ForwardPass { forward: f, segments, class_logits, class_probs, offsets, trace })
    }

    /// Inference: forward pass, offset decoding, mask voting.
    pub fn infer(&self, features: &Tensor, init_pred: &LabelSequence) -> Result<RefinedOutput> {
        let pass = self.forward_video(features, init_pred)?;
        let class_probs = pass.forward.graph.value(pass.class_probs).clone();
        let offsets = pass.forward.graph.value(pass.offsets).clone();
        finalize_refinement(&pass.segments, &class_probs, &offsets, init_pred)
    }
}

/// The additive locality mask of segment-frame attention: row i is 0 on
/// frames of segments i-window ..= i+window (clamped at the ends) and -inf
/// elsewhere.
pub fn build_local_mask(segments: &[Segment], window: usize, t_len: usize) -> Tensor {
    let n = segments.len();
    let mut mask = Tensor::filled(vec![n, t_len], f64::NEG_INFINITY);
    for i in 0..n {
        let lo = segments[i.saturating_sub(window)].start;
        let hi = segments[(i + window).min(n - 1)].end;
        for t in lo..=hi {
            mask.data_mut()[i * t_len + t] = 0.0;
        }
    }
    mask
}

/// Everything downstream of the prediction heads: decode per-segment
/// offsets, build refined masks, drop the junk column, vote, and fall back
/// to the initial labels on uncovered frames.
pub fn finalize_refinement(
    segments: &[Segment],
    class_probs: &Tensor,
    offsets: &Tensor,
    init_pred: &LabelSequence,
) -> Result<RefinedOutput> {
    let n = segments.len();
    let t_len = init_pred.len();
    if class_probs.rank() != 2 || class_probs.rows() != n || class_probs.cols() < 2 {
        return Err(Error::shape(
            "finalize_refinement",
            format!("class probs {:?} for {} segments", class_probs.shape(), n),
        ));
    }
    if offsets.rank() != 2 || offsets.rows() != n || offsets.cols() != 2 {
        return Err(Error::shape(
            "finalize_refinement",
            format!("offsets {:?} for {} segments", offsets.shape(), n),
        ));
    }
    let mut refined_segments = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, seg) in segments.iter().enumerate() {
        let off = BoundaryOffsets { center: offsets.at2(i, 0), log_len: offsets.at2(i, 1) };
        let refined = decode_offsets(seg, &off, t_len);
        masks.push(segment_to_mask(&refined, t_len));
        refined_segments.push(refined);
    }
    // Drop the junk column (last) before voting.
    let classes = class_probs.cols() - 1;
    let mut vote_probs = Tensor::zeros(vec![n, classes]);
    for i in 0..n {
        vote_probs.data_mut()[i * classes..(i + 1) * classes]
            .copy_from_slice(&class_probs.row(i)[..classes]);
    }
    let (frame_scores, labels) = mask_vote(&masks, &vote_probs, init_pred)?;
    Ok(RefinedOutput {
        segments: segments.to_vec(),
        class_probs: class_probs.clone(),
        offsets: offsets.clone(),
        refined_segments,
        masks,
        frame_scores,
        labels,
    })
}

// ── checkpoint container ─────────────────────────────────────────────
//
// Layout: magic "STSX", version u32 LE, u64 config-JSON length + bytes,
// u64 tensor count, then per tensor: u32 name length + name bytes,
// u32 rank, rank×u64 dims, numel×f64 LE payload. Bit-exact round trip.

const CHECKPOINT_MAGIC: &[u8; 4] = b"STSX";
const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Integrity(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for entry in self.params.iter() {
            let name = entry.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(entry.value.rank() as u32).to_le_bytes());
            for &dim in entry.value.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in entry.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|_| Error::NotFound(format!("checkpoint {}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Integrity(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config)?;
        let count = r.u64()? as usize;
        if count != model.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, model needs {}",
                count,
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("non-UTF8 tensor name".to_string()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Integrity(format!("unknown tensor {name}")))?;
            if model.params.value(id).shape() != shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "tensor {} shape {:?} != expected {:?}",
                    name,
                    shape,
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = Tensor::new(shape, data)?;
        }
        if !r.exhausted() {
            return Err(Error::Integrity(format!(
                "{} has trailing bytes",
                path.display()
            )));
        }
        Ok(model)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!("{} truncated", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
