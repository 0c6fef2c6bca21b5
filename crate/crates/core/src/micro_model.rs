// SPDX-License-Identifier: Apache-2.0

//! A small pre-norm decoder with EVF layers on a configurable subset of
//! blocks, a linear vision adapter, and a synthetic multimodal task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{CapacityConfig, ModalityTags, Strategy};
use crate::error::{Error, Result};
use crate::evf_layer::{forward_language_only, forward_multimodal, EvfLayerParams, LayerTelemetry};
use crate::ffn::{ffn_forward, FfnParams};
use crate::graph::{Graph, Var};
use crate::param::{ParamGroup, ParamId, ParamStore, Parameter};
use crate::router::RoutingDecision;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::allocator::AllocationPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub image_feature_width: usize,
    /// Blocks that become EVF layers in stage 3. `None` means even indices.
    pub evf_layer_indices: Option<Vec<usize>>,
    pub capacity: CapacityConfig,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 32,
            heads: 2,
            hidden: 64,
            vocab: 64,
            max_seq_len: 64,
            image_feature_width: 16,
            evf_layer_indices: None,
            capacity: CapacityConfig::default(),
            strategy: Strategy::ImgGbpr,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn evf_layers(&self) -> Vec<usize> {
        match &self.evf_layer_indices {
            Some(v) => v.clone(),
            None => (0..self.depth).step_by(2).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("max_seq_len", self.max_seq_len),
            ("image_feature_width", self.image_feature_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "needs at least two symbols"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        let layers = self.evf_layers();
        for (i, &l) in layers.iter().enumerate() {
            if l >= self.depth {
                return Err(Error::config(
                    "evf_layer_indices",
                    format!("layer {l} outside depth {}", self.depth),
                ));
            }
            if layers[..i].contains(&l) {
                return Err(Error::config("evf_layer_indices", format!("layer {l} listed twice")));
            }
        }
        self.capacity
            .validate()
            .map_err(|e| Error::config("capacity", e.to_string()))
    }
}

/// Serialized as its number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        Stage::from_number(n)
    }
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::config("stage", format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    /// Parameter groups that train in this stage; everything else is frozen.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::One => &[ParamGroup::Adapter],
            Stage::Two => &[
                ParamGroup::Adapter,
                ParamGroup::Embedding,
                ParamGroup::Attention,
                ParamGroup::Ffn,
                ParamGroup::Head,
            ],
            Stage::Three => &[ParamGroup::VisionFfn, ParamGroup::Router],
        }
    }

    pub fn apply(self, store: &mut ParamStore) {
        for group in ParamGroup::ALL {
            store.set_group_trainable(group, self.trainable_groups().contains(&group));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Multimodal,
    LanguageOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockFfn {
    Dense(FfnParams),
    Evf(EvfLayerParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attention: AttentionParams,
    pub ffn: BlockFfn,
}

/// Text sequences plus optional per-sequence image features. Each sequence
/// is laid out as its image tokens followed by its text tokens, and
/// sequences are stacked row-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub text: Vec<Vec<usize>>,
    /// Empty, or one `[image_tokens, feature_width]` tensor per sequence.
    pub images: Vec<Tensor>,
}

impl TokenBatch {
    pub fn text_only(text: Vec<Vec<usize>>) -> Self {
        TokenBatch {
            text,
            images: Vec::new(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.text.len()
    }

    pub fn image_tokens(&self) -> usize {
        self.images.first().map_or(0, Tensor::rows)
    }

    pub fn text_len(&self) -> usize {
        self.text.first().map_or(0, Vec::len)
    }

    pub fn seq_len(&self) -> usize {
        self.image_tokens() + self.text_len()
    }

    pub fn num_tokens(&self) -> usize {
        self.batch_size() * self.seq_len()
    }

    /// Modality tags of the flattened batch.
    pub fn tags(&self) -> ModalityTags {
        let one = ModalityTags::image_then_text(self.image_tokens(), self.text_len());
        (0..self.batch_size()).fold(ModalityTags::new(Vec::new()), |acc, _| acc.concat(&one))
    }

    /// Flattened rows that predict a next text token, and those targets.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let (n, p) = (self.seq_len(), self.image_tokens());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, seq) in self.text.iter().enumerate() {
            for j in 0..seq.len().saturating_sub(1) {
                rows.push(b * n + p + j);
                targets.push(seq[j + 1]);
            }
        }
        (rows, targets)
    }

    fn validate(&self, cfg: &ModelConfig, mode: Mode) -> Result<()> {
        if self.text.is_empty() || self.text_len() == 0 {
            return Err(Error::contract("batch needs at least one non-empty text sequence"));
        }
        if self.text.iter().any(|s| s.len() != self.text_len()) {
            return Err(Error::contract("text sequences must share one length"));
        }
        if let Some(&bad) = self.text.iter().flatten().find(|&&t| t >= cfg.vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary {}", cfg.vocab)));
        }
        if mode == Mode::LanguageOnly && !self.images.is_empty() {
            return Err(Error::contract("language-only forward got image features"));
        }
        if !self.images.is_empty() {
            if self.images.len() != self.batch_size() {
                return Err(Error::contract(format!(
                    "{} image sets for {} sequences",
                    self.images.len(),
                    self.batch_size()
                )));
            }
            let shape = [self.image_tokens(), cfg.image_feature_width];
            if let Some(bad) = self.images.iter().find(|t| t.shape() != shape) {
                return Err(Error::dim("image features", bad.shape(), &shape));
            }
        }
        if self.seq_len() > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max {}",
                self.seq_len(),
                cfg.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Routing state of one EVF layer in a forward pass.
#[derive(Clone, Debug)]
pub struct EvfTrace {
    pub layer: usize,
    pub probabilities: Var,
    pub decision: RoutingDecision,
    pub plan: AllocationPlan,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub mode: Mode,
    pub tags: ModalityTags,
    pub evf: Vec<EvfTrace>,
}

impl ForwardPass {
    pub fn telemetry(&self, step: usize) -> Vec<LayerTelemetry> {
        self.evf
            .iter()
            .map(|t| LayerTelemetry::new(step, t.layer, &t.decision, &t.plan, &self.tags))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stage: Stage,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub adapter_weight: ParamId,
    pub adapter_bias: ParamId,
    pub blocks: Vec<Block>,
    pub head: ParamId,
}

impl MicroModel {
    /// Deterministic initialization from `cfg.seed`. All blocks start dense
    /// and the model starts in stage 1.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let add = |store: &mut ParamStore, name: String, group, t| {
            store.push(Parameter::new(name, group, t, false))
        };
        let token_embedding = add(
            &mut store,
            "embed.tokens".into(),
            ParamGroup::Embedding,
            Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng),
        );
        let position_embedding = add(
            &mut store,
            "embed.positions".into(),
            ParamGroup::Embedding,
            Tensor::randn(&[cfg.max_seq_len, d], 0.1, &mut rng),
        );
        let adapter_weight = add(
            &mut store,
            "adapter.weight".into(),
            ParamGroup::Adapter,
            Tensor::randn(&[cfg.image_feature_width, d], 1.0 / (cfg.image_feature_width as f64).sqrt(), &mut rng),
        );
        let adapter_bias = add(&mut store, "adapter.bias".into(), ParamGroup::Adapter, Tensor::zeros(&[d]));
        let attn_std = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let mut proj = |store: &mut ParamStore, name: &str| {
                add(
                    store,
                    format!("layers.{l}.attn.{name}"),
                    ParamGroup::Attention,
                    Tensor::randn(&[d, d], attn_std, &mut rng),
                )
            };
            let attention = AttentionParams {
                query: proj(&mut store, "query"),
                key: proj(&mut store, "key"),
                value: proj(&mut store, "value"),
                output: proj(&mut store, "output"),
            };
            let ffn = FfnParams::init(
                &mut store,
                &format!("layers.{l}.ffn"),
                ParamGroup::Ffn,
                d,
                cfg.hidden,
                false,
                &mut rng,
            );
            blocks.push(Block {
                attention,
                ffn: BlockFfn::Dense(ffn),
            });
        }
        let head = add(
            &mut store,
            "head.weight".into(),
            ParamGroup::Head,
            Tensor::randn(&[d, cfg.vocab], attn_std, &mut rng),
        );
        let mut model = MicroModel {
            cfg,
            store,
            stage: Stage::One,
            token_embedding,
            position_embedding,
            adapter_weight,
            adapter_bias,
            blocks,
            head,
        };
        Stage::One.apply(&mut model.store);
        Ok(model)
    }

    /// Switches the freeze masks. Entering stage 3 turns the configured
    /// blocks into EVF layers initialized from their dense FFN.
    pub fn set_stage(&mut self, stage: Stage) -> Result<()> {
        if stage < self.stage && self.stage == Stage::Three {
            return Err(Error::contract("cannot leave stage 3 once EVF layers exist"));
        }
        if stage == Stage::Three && self.stage != Stage::Three {
            for l in self.cfg.evf_layers() {
                if let BlockFfn::Dense(dense) = self.blocks[l].ffn {
                    let layer = EvfLayerParams::init_stage3_from_dense(
                        &mut self.store,
                        &dense,
                        &format!("layers.{l}"),
                        self.cfg.capacity.clone(),
                        self.cfg.strategy,
                    );
                    self.blocks[l].ffn = BlockFfn::Evf(layer);
                }
            }
        }
        self.stage = stage;
        stage.apply(&mut self.store);
        Ok(())
    }

    pub fn evf_layers(&self) -> impl Iterator<Item = (usize, &EvfLayerParams)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.ffn {
            BlockFfn::Evf(e) => Some((i, e)),
            BlockFfn::Dense(_) => None,
        })
    }

    pub fn has_evf_layers(&self) -> bool {
        self.evf_layers().next().is_some()
    }

    /// Switches every EVF layer to `strategy`.
    pub fn set_strategy(&mut self, strategy: Strategy) {
        self.cfg.strategy = strategy;
        for b in &mut self.blocks {
            if let BlockFfn::Evf(e) = &mut b.ffn {
                e.strategy = strategy;
            }
        }
    }

    pub fn set_capacity(&mut self, capacity: CapacityConfig) {
        for b in &mut self.blocks {
            if let BlockFfn::Evf(e) = &mut b.ffn {
                e.cfg = capacity.clone();
            }
        }
        self.cfg.capacity = capacity;
    }

    /// Adds Gaussian noise to every trainable tensor, standing in for a
    /// partially trained model.
    pub fn jitter_trainable<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in self.store.iter_mut().filter(|p| p.trainable) {
            let noise = Tensor::randn(p.value.shape(), std, rng);
            for (v, e) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *v += e;
            }
        }
    }

    /// Allocation seed for one EVF layer at one step.
    pub fn allocation_seed(&self, layer: usize, step: u64) -> u64 {
        derive_seed(self.cfg.capacity.seed, &[layer as u64, step])
    }

    pub fn forward(&self, batch: &TokenBatch, mode: Mode, step: u64) -> Result<ForwardPass> {
        batch.validate(&self.cfg, mode)?;
        let store = &self.store;
        let mut g = Graph::new();
        let (bsz, n, p) = (batch.batch_size(), batch.seq_len(), batch.image_tokens());

        let tok = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut seqs = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let text = g.gather_rows(tok, &batch.text[b])?;
            let x = if p > 0 {
                let feats = g.input(batch.images[b].clone());
                let w = g.param(store, self.adapter_weight);
                let bias = g.param(store, self.adapter_bias);
                let img = g.matmul(feats, w)?;
                let img = g.add_row_vector(img, bias)?;
                g.concat_rows(&[img, text])?
            } else {
                text
            };
            seqs.push(g.add(x, pos)?);
        }
        let mut h = if bsz == 1 { seqs[0] } else { g.concat_rows(&seqs)? };

        let tags = batch.tags();
        let mut evf = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let hn = g.rms_norm(h)?;
            let a = self.attention(&mut g, &block.attention, hn, bsz, n)?;
            h = g.add(h, a)?;
            let hn = g.rms_norm(h)?;
            let f = match (&block.ffn, mode) {
                (BlockFfn::Dense(ffn), _) => ffn_forward(&mut g, store, ffn, hn)?,
                (BlockFfn::Evf(layer), Mode::LanguageOnly) => {
                    forward_language_only(&mut g, store, layer, hn)?
                }
                (BlockFfn::Evf(layer), Mode::Multimodal) => {
                    let seed = self.allocation_seed(l, step);
                    let out = forward_multimodal(&mut g, store, layer, hn, &tags, seed)?;
                    evf.push(EvfTrace {
                        layer: l,
                        probabilities: out.routed.probabilities,
                        decision: out.decision,
                        plan: out.plan,
                    });
                    out.output
                }
            };
            h = g.add(h, f)?;
        }
        let hn = g.rms_norm(h)?;
        let head = g.param(store, self.head);
        let logits = g.matmul(hn, head)?;
        Ok(ForwardPass {
            graph: g,
            logits,
            mode,
            tags,
            evf,
        })
    }

    /// Logits as a plain tensor.
    pub fn logits(&self, batch: &TokenBatch, mode: Mode, step: u64) -> Result<Tensor> {
        let pass = self.forward(batch, mode, step)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: &AttentionParams,
        x: Var,
        bsz: usize,
        n: usize,
    ) -> Result<Var> {
        let store = &self.store;
        let wq = g.param(store, p.query);
        let wk = g.param(store, p.key);
        let wv = g.param(store, p.value);
        let wo = g.param(store, p.output);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let dh = self.cfg.width / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut seqs = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
            let (qb, kb, vb) = if bsz == 1 {
                (q, k, v)
            } else {
                (g.gather_rows(q, &rows)?, g.gather_rows(k, &rows)?, g.gather_rows(v, &rows)?)
            };
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for hd in 0..self.cfg.heads {
                let qh = g.slice_cols(qb, hd * dh, dh)?;
                let kh = g.slice_cols(kb, hd * dh, dh)?;
                let vh = g.slice_cols(vb, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.causal_softmax_rows(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            seqs.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let cat = if bsz == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
        g.matmul(cat, wo)
    }
}

/// Next-token task whose transition table is picked by a key carried only
/// in the image features: `t[j+1] = perm[key][t[j]]`. Text alone cannot
/// tell the keys apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub image_tokens: usize,
    pub text_len: usize,
    pub feature_width: usize,
    pub noise: f64,
    pub permutations: Vec<Vec<usize>>,
    pub prototypes: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_keys: usize,
    pub image_tokens: usize,
    pub text_len: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_keys: 4,
            image_tokens: 4,
            text_len: 8,
            noise: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticTask {
    pub fn new(model: &ModelConfig, cfg: &TaskConfig) -> Result<Self> {
        if cfg.num_keys == 0 {
            return Err(Error::config("task.num_keys", "must be positive"));
        }
        if cfg.text_len < 2 {
            return Err(Error::config("task.text_len", "need at least two text tokens"));
        }
        if cfg.image_tokens + cfg.text_len > model.max_seq_len {
            return Err(Error::config("task.text_len", "sequence longer than max_seq_len"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let permutations = (0..cfg.num_keys)
            .map(|_| {
                let mut perm: Vec<usize> = (0..model.vocab).collect();
                for i in (1..perm.len()).rev() {
                    let j = rng.random_range(0..=i);
                    perm.swap(i, j);
                }
                perm
            })
            .collect();
        let prototypes = (0..cfg.num_keys)
            .map(|_| Tensor::randn(&[1, model.image_feature_width], 1.0, &mut rng))
            .collect();
        Ok(SyntheticTask {
            vocab: model.vocab,
            image_tokens: cfg.image_tokens,
            text_len: cfg.text_len,
            feature_width: model.image_feature_width,
            noise: cfg.noise,
            permutations,
            prototypes,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> TokenBatch {
        let mut text = Vec::with_capacity(batch_size);
        let mut images = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let key = rng.random_range(0..self.permutations.len());
            let mut seq = Vec::with_capacity(self.text_len);
            seq.push(rng.random_range(0..self.vocab));
            for j in 1..self.text_len {
                seq.push(self.permutations[key][seq[j - 1]]);
            }
            text.push(seq);
            let noise = Tensor::randn(&[self.image_tokens, self.feature_width], self.noise, rng);
            let mut feats = noise;
            for r in 0..self.image_tokens {
                for c in 0..self.feature_width {
                    let v = feats.get(r, c) + self.prototypes[key].get(0, c);
                    feats.set(r, c, v);
                }
            }
            images.push(feats);
        }
        TokenBatch { text, images }
    }

    /// Uniformly random text with no images.
    pub fn sample_text<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> TokenBatch {
        TokenBatch::text_only(
            (0..batch_size)
                .map(|_| (0..self.text_len).map(|_| rng.random_range(0..self.vocab)).collect())
                .collect(),
        )
    }
}
