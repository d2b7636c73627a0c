//! Homogeneous block stack with a patch embedding, a final normalization
//! and a mean-pooled linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{block_backward, block_forward, block_forward_saved, patch_embed, patch_embed_backward, token_dims};
use super::{BlockKind, BlockParams, BlockPattern, BlockTape, NormParams};
use super::AttentionParams;
use crate::attention::{parse_key_values, parse_value, EmimConfig, TokenVolume};
use crate::error::{Error, Result, ResultExt};
use crate::params::{join, Parameters};
use crate::tensor::{layernorm_rows, layernorm_rows_backward, linear_backward, linear_forward, softmax_row, LinearParams, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub channels: usize,
    pub ffn_expansion: usize,
    /// Window settings shared by every E block; `emim.heads` is also the
    /// head count of the O blocks.
    pub emim: EmimConfig,
    pub pattern: BlockPattern,
    pub num_classes: usize,
    pub patch: usize,
    pub in_channels: usize,
    /// Build E blocks without the motion MLP.
    pub ablate_motion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            channels: 32,
            ffn_expansion: 4,
            emim: EmimConfig::default(),
            pattern: BlockPattern::default(),
            num_classes: 8,
            patch: 1,
            in_channels: 1,
            ablate_motion: false,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.emim.heads
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.pattern.realize(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.num_classes == 0 || self.ffn_expansion == 0 || self.patch == 0 || self.in_channels == 0 {
            return Err(Error::config("num_classes, ffn_expansion, patch and in_channels must be positive"));
        }
        self.emim.check()?;
        if self.channels == 0 || !self.channels.is_multiple_of(self.emim.heads) {
            return Err(Error::config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.emim.heads
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("depth = {}", self.depth),
            format!("channels = {}", self.channels),
            format!("ffn_expansion = {}", self.ffn_expansion),
            format!("pattern = {}", self.pattern),
            format!("num_classes = {}", self.num_classes),
            format!("patch = {}", self.patch),
            format!("in_channels = {}", self.in_channels),
            format!("ablate_motion = {}", self.ablate_motion),
        ];
        lines.extend(self.emim.to_lines());
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "depth" => cfg.depth = parse_value(k, v)?,
                "channels" => cfg.channels = parse_value(k, v)?,
                "ffn_expansion" => cfg.ffn_expansion = parse_value(k, v)?,
                "pattern" => cfg.pattern = v.parse()?,
                "num_classes" => cfg.num_classes = parse_value(k, v)?,
                "patch" => cfg.patch = parse_value(k, v)?,
                "in_channels" => cfg.in_channels = parse_value(k, v)?,
                "ablate_motion" => cfg.ablate_motion = parse_value(k, v)?,
                _ => {
                    if !cfg.emim.apply(k, v)? {
                        return Err(Error::config(format!("unknown config key `{k}`")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: LinearParams,
    pub blocks: Vec<BlockParams>,
    pub norm: NormParams,
    pub head: LinearParams,
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

struct Saved {
    clip: Tensor,
    tapes: Vec<BlockTape>,
    last: Tensor,
    pooled: Tensor,
    tokens: usize,
}

#[derive(Default)]
pub struct ModelTape(Option<Box<Saved>>);

/// Seeded initialization of a model whose block kinds follow the pattern.
/// Init scale of the tied query/key projections of E blocks.
pub const AFFINITY_GAIN: f64 = 2.0;
/// Init scale of the motion MLP output layer.
pub const MOTION_GAIN: f64 = 8.0;

pub fn build_stack(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embed = LinearParams::init(cfg.patch * cfg.patch * cfg.in_channels, cfg.channels, &mut rng);
    // With a zero bias a single-channel pixel embeds as `p·w`, which the
    // first LayerNorm maps to the same vector for every `p > 0`.
    embed.bias = Tensor::randn(&[cfg.channels], 1.0, &mut rng);
    let blocks = cfg
        .kinds()
        .into_iter()
        .map(|kind| {
            let mut b = BlockParams::init(kind, cfg.channels, cfg.ffn_expansion, &cfg.emim, &mut rng);
            if let AttentionParams::Emim(p) = &mut b.attn {
                // keys start as a copy of the queries, so the initial affinity
                // correlates identical features like a cost volume
                p.q.weight.scale(AFFINITY_GAIN);
                p.k = p.q.clone();
                if cfg.ablate_motion {
                    p.motion = None;
                } else if let Some(m) = &mut p.motion {
                    m.fc2.weight.scale(MOTION_GAIN);
                }
            }
            b
        })
        .collect();
    let head = LinearParams::init(cfg.channels, cfg.num_classes, &mut rng);
    Ok(Model {
        config: cfg.clone(),
        params: ModelParams {
            embed,
            blocks,
            norm: NormParams::new(cfg.channels),
            head,
        },
    })
}

impl Model {
    pub fn kinds(&self) -> Vec<BlockKind> {
        self.params.blocks.iter().map(BlockParams::kind).collect()
    }

    fn embed(&self, clip: &Tensor) -> Result<TokenVolume> {
        let cfg = &self.config;
        let dims = token_dims(clip.shape(), cfg.patch, cfg.channels)?;
        if clip.shape()[3] != cfg.in_channels {
            return Err(Error::dimension("model input channels", clip.shape(), &[cfg.in_channels]));
        }
        if self.kinds().contains(&BlockKind::Emim) {
            cfg.emim.validate(dims)?;
        }
        patch_embed(clip, cfg.patch, &self.params.embed)
    }

    fn pool_and_classify(&self, z: &TokenVolume) -> Result<(Tensor, Tensor)> {
        let c = z.channels();
        let n = z.tokens();
        let normed = layernorm_rows(z.tensor(), &self.params.norm.gamma, &self.params.norm.beta)?;
        let mut pooled = vec![0.0; c];
        for row in normed.data().chunks_exact(c) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        let pooled = Tensor::new(vec![c], pooled)?;
        let logits = linear_forward(&pooled, &self.params.head)?;
        Ok((pooled, logits))
    }

    /// Logits `[num_classes]` for one clip `[T, H, W, in_channels]`.
    pub fn forward(&self, clip: &Tensor) -> Result<Tensor> {
        let mut z = self.embed(clip)?;
        for (i, b) in self.params.blocks.iter().enumerate() {
            z = block_forward(&z, b.kind(), b, &self.config.emim).context(|| format!("block {i}"))?;
        }
        Ok(self.pool_and_classify(&z)?.1)
    }

    pub fn forward_saved(&self, clip: &Tensor) -> Result<(Tensor, ModelTape)> {
        let mut z = self.embed(clip)?;
        let mut tapes = Vec::with_capacity(self.params.blocks.len());
        for (i, b) in self.params.blocks.iter().enumerate() {
            let (out, tape) = block_forward_saved(&z, b.kind(), b, &self.config.emim).context(|| format!("block {i}"))?;
            tapes.push(tape);
            z = out;
        }
        let (pooled, logits) = self.pool_and_classify(&z)?;
        let dims_tokens = z.tokens();
        let saved = Saved {
            clip: clip.clone(),
            tapes,
            last: z.into_tensor(),
            pooled,
            tokens: dims_tokens,
        };
        Ok((logits, ModelTape(Some(Box::new(saved)))))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, d_logits: &Tensor, tape: &ModelTape) -> Result<ModelParams> {
        let s = tape
            .0
            .as_deref()
            .ok_or_else(|| Error::State("model backward called without saved activations".into()))?;
        let cfg = &self.config;
        let (d_pooled, g_head) = linear_backward(&s.pooled, &self.params.head, d_logits)?;
        let dims = token_dims(s.clip.shape(), cfg.patch, cfg.channels)?;
        let inv = 1.0 / s.tokens as f64;
        let mut d_normed = Tensor::zeros(s.last.shape());
        for token in d_normed.data_mut().chunks_exact_mut(cfg.channels) {
            for (d, g) in token.iter_mut().zip(d_pooled.data()) {
                *d = g * inv;
            }
        }
        let (d_last, g_gamma, g_beta) = layernorm_rows_backward(&s.last, &self.params.norm.gamma, &d_normed)?;
        let mut d_z = TokenVolume::from_tensor(d_last)?;
        debug_assert_eq!(d_z.dims(), dims);
        let mut g_blocks = Vec::with_capacity(self.params.blocks.len());
        for (i, (b, tape)) in self.params.blocks.iter().zip(&s.tapes).enumerate().rev() {
            let (d, g) = block_backward(&d_z, tape, b, &cfg.emim).context(|| format!("block {i} backward"))?;
            g_blocks.push(g);
            d_z = d;
        }
        g_blocks.reverse();
        let g_embed = patch_embed_backward(&s.clip, cfg.patch, &self.params.embed, &d_z)?;
        Ok(ModelParams {
            embed: g_embed,
            blocks: g_blocks,
            norm: NormParams { gamma: g_gamma, beta: g_beta },
            head: g_head,
        })
    }

    /// Sets the query and key biases of every E block so that the projected
    /// mean token of `clips` is zero. Without it each affinity row carries a
    /// large per-query offset shared by all window slots.
    pub fn center_affinity(&mut self, clips: &[&Tensor]) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::config("centering needs at least one clip"));
        }
        let mut zs = clips.iter().map(|c| self.embed(c)).collect::<Result<Vec<_>>>()?;
        for i in 0..self.params.blocks.len() {
            let block = &self.params.blocks[i];
            if let AttentionParams::Emim(_) = block.attn {
                let c = self.config.channels;
                let mut mean = vec![0.0; c];
                let mut count = 0usize;
                for z in &zs {
                    let normed = layernorm_rows(z.tensor(), &block.norm1.gamma, &block.norm1.beta)?;
                    for row in normed.data().chunks_exact(c) {
                        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                    }
                    count += z.tokens();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mean = Tensor::new(vec![c], mean)?;
                if let AttentionParams::Emim(p) = &mut self.params.blocks[i].attn {
                    for proj in [&mut p.q, &mut p.k] {
                        proj.bias.fill(0.0);
                        proj.bias = linear_forward(&mean, proj)?.map(|v| -v);
                    }
                }
            }
            let block = &self.params.blocks[i];
            zs = zs
                .iter()
                .map(|z| block_forward(z, block.kind(), block, &self.config.emim))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn forward_batch(&self, clips: &[Tensor]) -> Result<Vec<Tensor>> {
        clips.iter().map(|c| self.forward(c)).collect()
    }

    pub fn predict(&self, clip: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward(clip)?.data()))
    }
}

/// Lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of one example; returns `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::config(format!("label {label} out of range for {n} classes")));
    }
    let probs = softmax_row(logits.data())?;
    let m = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - logits.data()[label];
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(pattern: &str) -> ModelConfig {
        ModelConfig {
            depth: 2,
            channels: 4,
            emim: EmimConfig { radius: 1, heads: 2, ..Default::default() },
            pattern: pattern.parse().unwrap(),
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn stacks_follow_the_pattern() {
        use BlockKind::*;
        let mut cfg = small("EO");
        cfg.depth = 4;
        assert_eq!(build_stack(&cfg, 0).unwrap().kinds(), [Emim, Original, Emim, Original]);
        cfg.pattern = "OO".parse().unwrap();
        assert_eq!(build_stack(&cfg, 0).unwrap().kinds(), [Original; 4]);
        cfg.pattern = "E".parse().unwrap();
        cfg.depth = 3;
        assert_eq!(build_stack(&cfg, 0).unwrap().kinds(), [Emim; 3]);
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut cfg = small("EO");
        cfg.num_classes = 1;
        let mut m = build_stack(&cfg, 1).unwrap();
        m.params.head.weight.fill(0.0);
        m.params.head.bias = Tensor::filled(&[1], 0.25);
        let clip = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(m.forward(&clip).unwrap().data(), &[0.25]);
    }

    #[test]
    fn batch_order_does_not_change_logits() {
        let mut m = build_stack(&small("EO"), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.params.head = LinearParams::init(4, 3, &mut rng);
        let a = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut rng);
        let ab = m.forward_batch(&[a.clone(), b.clone()]).unwrap();
        let ba = m.forward_batch(&[b, a]).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    #[test]
    fn all_four_patterns_give_finite_logits() {
        let clip = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        for p in ["EO", "OE", "EE", "OO"] {
            let m = build_stack(&small(p), 6).unwrap();
            assert!(m.forward(&clip).unwrap().is_finite(), "{p}");
        }
    }

    #[test]
    fn ablation_removes_motion_parameters() {
        let mut cfg = small("E");
        cfg.ablate_motion = true;
        let m = build_stack(&cfg, 0).unwrap();
        assert!(m.params.named_shapes().iter().all(|(n, _)| !n.contains("motion")));
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = small("OE");
        cfg.ablate_motion = true;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("depth = 0").unwrap_err().is_config());
        assert!(ModelConfig::from_text("colour = red").unwrap_err().is_config());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, g) = cross_entropy(&Tensor::zeros(&[4]), 1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.25, -0.75, 0.25, 0.25]);
        assert!(cross_entropy(&Tensor::zeros(&[4]), 4).is_err());
    }

    #[test]
    fn parameter_paths_are_dotted() {
        let m = build_stack(&small("EO"), 0).unwrap();
        let names: Vec<String> = m.params.named_shapes().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"blocks.0.attn.q.weight".to_string()));
        assert!(names.contains(&"blocks.0.attn.motion.fc1.weight".to_string()));
        assert!(names.contains(&"blocks.1.attn.k.weight".to_string()));
        assert!(names.contains(&"head.bias".to_string()));
    }
}
