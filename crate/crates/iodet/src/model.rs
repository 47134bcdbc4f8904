//! The detector: a patch encoder and a decoder over a growing bank of
//! query groups.
//!
//! Each phase contributes one group of `N` learnable queries bound to that
//! phase's class set. Decoder self-attention is *disentangled*: queries
//! attend only within their own group, which we realize by computing each
//! group's attention block locally (never materializing cross-group
//! scores). Running all groups through one pass is therefore numerically
//! identical to decoding every group in isolation — a tested invariant —
//! and the per-layer score count is G·N² instead of (G·N)². A full
//! (entangled) mode and a masked-softmax reference path exist for
//! baselines and for verifying the equivalence.
//!
//! Decoder weights, the box head, and the encoder are shared across
//! groups; classification heads are per-group over that group's classes
//! plus a trailing no-object column. Old groups' queries freeze when a
//! new group is added; everything else stays trainable.

use crate::autodiff::{Graph, ParamId, Params, Tensor, BLOCKED};
use crate::rng::Seed;
use crate::DetError;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Bump when the checkpoint layout changes; loads reject other versions.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image, in pixels.
    pub image_size: usize,
    /// Side of the square patches the image is cut into.
    pub patch_size: usize,
    /// Hidden/attention width; the `d` of the scaled dot product.
    pub d: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Queries per group, `N`.
    pub queries_per_group: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch_size: 8,
            d: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            queries_per_group: 10,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(DetError::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(DetError::Config(format!(
                "width {} is not a multiple of head count {}",
                self.d, self.n_heads
            )));
        }
        if self.d % 4 != 0 {
            return Err(DetError::Config(format!(
                "width {} must be a multiple of 4 for the 2-D positional code",
                self.d
            )));
        }
        if self.queries_per_group == 0 {
            return Err(DetError::Config("need at least one query per group".into()));
        }
        if self.d_ff == 0 {
            return Err(DetError::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened RGB patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// One phase's queries: metadata only — the embeddings live in `Params`
/// under the group's parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    /// 1-based phase index τ.
    pub index: usize,
    /// C_τ: the classes this group predicts, in a fixed order.
    pub class_set: Vec<usize>,
    /// Frozen groups receive zero gradient updates.
    pub frozen: bool,
}

impl QueryGroup {
    pub fn query_param(&self) -> String {
        format!("query.g{}", self.index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryBank {
    pub groups: Vec<QueryGroup>,
}

/// One group's decoder output for one image. Class logits are
/// N × (|C_τ|+1) with the last column meaning "no object"; boxes are
/// N × 4 normalized cx,cy,w,h squashed into [0,1].
#[derive(Debug, Clone, Copy)]
pub struct GroupPredictions {
    pub group: usize,
    pub class_logits: Tensor,
    pub boxes: Tensor,
}

/// How decoder self-attention treats other groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Block-local: queries attend within their group only.
    Disentangled,
    /// Entangled: every query attends to every query.
    Full,
}

/// Forward-pass instrumentation. `decoder_self_attention_scores` counts
/// the dot-product scores actually computed, which is how the linear
/// (G·N²·heads·layers) vs quadratic (G²·N²·heads·layers) cost claim is
/// verified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub decoder_self_attention_scores: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub bank: QueryBank,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    phase: usize,
    config: ModelConfig,
    groups: Vec<QueryGroup>,
    params: Params,
}

/// Additive mask blocking every pair of queries from different groups:
/// 0 within a group's N×N diagonal block, `BLOCKED` elsewhere.
pub fn block_diagonal_mask(n_groups: usize, n: usize) -> Vec<f64> {
    let side = n_groups * n;
    let mut mask = vec![BLOCKED; side * side];
    for grp in 0..n_groups {
        for i in 0..n {
            for j in 0..n {
                mask[(grp * n + i) * side + grp * n + j] = 0.0;
            }
        }
    }
    mask
}

impl Model {
    pub fn new(config: ModelConfig) -> crate::Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = Seed::new(config.seed).derive("model-init").stream();
        let d = config.d;
        let attn_scale = 1.0 / (d as f64).sqrt();

        let linear = |p: &mut Params, name: &str, rows: usize, cols: usize, rng: &mut _| {
            let scale = 1.0 / (rows as f64).sqrt();
            p.add_uniform(&format!("{name}.w"), rows, cols, scale, rng);
            p.add(&format!("{name}.b"), 1, cols, vec![0.0; cols]);
        };
        let norm = |p: &mut Params, name: &str| {
            p.add(&format!("{name}.g"), 1, d, vec![1.0; d]);
            p.add(&format!("{name}.b"), 1, d, vec![0.0; d]);
        };
        let attention = |p: &mut Params, name: &str, rng: &mut _| {
            for proj in ["q", "k", "v", "o"] {
                p.add_uniform(&format!("{name}.w{proj}"), d, d, attn_scale, rng);
                p.add(&format!("{name}.b{proj}"), 1, d, vec![0.0; d]);
            }
        };

        linear(&mut params, "embed.patch", config.patch_dim(), d, &mut rng);
        for l in 0..config.n_encoder_layers {
            norm(&mut params, &format!("enc{l}.ln1"));
            attention(&mut params, &format!("enc{l}.attn"), &mut rng);
            norm(&mut params, &format!("enc{l}.ln2"));
            linear(&mut params, &format!("enc{l}.ffn.fc1"), d, config.d_ff, &mut rng);
            linear(&mut params, &format!("enc{l}.ffn.fc2"), config.d_ff, d, &mut rng);
        }
        norm(&mut params, "enc.out");
        for l in 0..config.n_decoder_layers {
            norm(&mut params, &format!("dec{l}.ln1"));
            attention(&mut params, &format!("dec{l}.self"), &mut rng);
            norm(&mut params, &format!("dec{l}.ln2"));
            attention(&mut params, &format!("dec{l}.cross"), &mut rng);
            norm(&mut params, &format!("dec{l}.ln3"));
            linear(&mut params, &format!("dec{l}.ffn.fc1"), d, config.d_ff, &mut rng);
            linear(&mut params, &format!("dec{l}.ffn.fc2"), config.d_ff, d, &mut rng);
        }
        norm(&mut params, "dec.out");
        linear(&mut params, "head.box.fc1", d, d, &mut rng);
        linear(&mut params, "head.box.fc2", d, d, &mut rng);
        linear(&mut params, "head.box.fc3", d, 4, &mut rng);

        Ok(Self { config, params, bank: QueryBank::default() })
    }

    /// Appends the next query group for `new_class_set` and freezes all
    /// earlier groups' embeddings. The first group is randomly
    /// initialized; later groups start as an exact copy of the previous
    /// group's current embeddings. Returns the new group's index.
    pub fn expand_queries(&mut self, new_class_set: &[usize]) -> crate::Result<usize> {
        if new_class_set.is_empty() {
            return Err(DetError::Config("a query group needs a non-empty class set".into()));
        }
        for group in &self.bank.groups {
            if let Some(&class) = new_class_set.iter().find(|c| group.class_set.contains(c)) {
                return Err(DetError::Config(format!(
                    "class {class} already belongs to group {}",
                    group.index
                )));
            }
        }
        let index = self.bank.groups.len() + 1;
        let (n, d) = (self.config.queries_per_group, self.config.d);

        let data = match self.bank.groups.last() {
            Some(prev) => self.params.data(self.pid(&prev.query_param())).to_vec(),
            None => {
                let mut rng =
                    Seed::new(self.config.seed).derive("query-init").derive_index(index as u64).stream();
                use rand::Rng;
                let scale = 1.0 / (d as f64).sqrt();
                (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect()
            }
        };
        self.params.add(&format!("query.g{index}"), n, d, data);

        let k = new_class_set.len();
        let mut rng =
            Seed::new(self.config.seed).derive("head-init").derive_index(index as u64).stream();
        self.params.add_uniform(
            &format!("head.cls.g{index}.w"),
            d,
            k + 1,
            1.0 / (d as f64).sqrt(),
            &mut rng,
        );
        self.params.add(&format!("head.cls.g{index}.b"), 1, k + 1, vec![0.0; k + 1]);

        for group in &mut self.bank.groups {
            group.frozen = true;
        }
        for group in &self.bank.groups {
            let id = self.params.find(&group.query_param()).expect("group param exists");
            self.params.set_requires_grad(id, false);
        }
        self.bank.groups.push(QueryGroup {
            index,
            class_set: new_class_set.to_vec(),
            frozen: false,
        });
        Ok(index)
    }

    fn pid(&self, name: &str) -> ParamId {
        self.params
            .find(name)
            .unwrap_or_else(|| panic!("model parameter {name} missing"))
    }

    fn p(&self, g: &mut Graph, name: &str) -> Tensor {
        g.param(&self.params, self.pid(name))
    }

    fn linear(&self, g: &mut Graph, x: Tensor, name: &str) -> Tensor {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        let xw = g.matmul(x, w);
        g.add_row_vec(xw, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Tensor, name: &str) -> Tensor {
        let gamma = self.p(g, &format!("{name}.g"));
        let beta = self.p(g, &format!("{name}.b"));
        let normed = g.layer_norm_rows(x);
        let scaled = g.mul_row_vec(normed, gamma);
        g.add_row_vec(scaled, beta)
    }

    fn ffn(&self, g: &mut Graph, x: Tensor, name: &str) -> Tensor {
        let hidden = self.linear(g, x, &format!("{name}.fc1"));
        let act = g.relu(hidden);
        self.linear(g, act, &format!("{name}.fc2"))
    }

    /// Multi-head scaled dot-product attention. Returns the output and
    /// the number of attention scores computed (rows_q·rows_kv per head).
    fn attention(
        &self,
        g: &mut Graph,
        name: &str,
        queries: Tensor,
        keys_values: Tensor,
        mask: Option<&[f64]>,
    ) -> (Tensor, usize) {
        let (h, d) = (self.config.n_heads, self.config.d);
        let dh = d / h;
        let q = self.linear_proj(g, queries, name, "q");
        let k = self.linear_proj(g, keys_values, name, "k");
        let v = self.linear_proj(g, keys_values, name, "v");

        let mut heads = Vec::with_capacity(h);
        let mut scores_computed = 0;
        for head in 0..h {
            let cols: Vec<usize> = (head * dh..(head + 1) * dh).collect();
            let qh = g.gather_cols(q, &cols);
            let kh = g.gather_cols(k, &cols);
            let vh = g.gather_cols(v, &cols);
            let kt = g.transpose(kh);
            let raw = g.matmul(qh, kt);
            let scaled = g.scale(raw, 1.0 / (dh as f64).sqrt());
            scores_computed += scaled.rows() * scaled.cols();
            let weights = match mask {
                Some(m) => g.masked_softmax_rows(scaled, m),
                None => g.softmax_rows(scaled),
            };
            heads.push(g.matmul(weights, vh));
        }
        let cat = g.concat_cols(&heads);
        let wo = self.p(g, &format!("{name}.wo"));
        let bo = self.p(g, &format!("{name}.bo"));
        let out = g.matmul(cat, wo);
        (g.add_row_vec(out, bo), scores_computed)
    }

    fn linear_proj(&self, g: &mut Graph, x: Tensor, name: &str, proj: &str) -> Tensor {
        let w = self.p(g, &format!("{name}.w{proj}"));
        let b = self.p(g, &format!("{name}.b{proj}"));
        let xw = g.matmul(x, w);
        g.add_row_vec(xw, b)
    }

    /// Encodes an H×W×3 row-major image into n_patches × d features.
    pub fn encode(&self, g: &mut Graph, image: &[f64]) -> crate::Result<Tensor> {
        let cfg = &self.config;
        let expect = cfg.image_size * cfg.image_size * 3;
        if image.len() != expect {
            return Err(DetError::Config(format!(
                "image has {} values but the model expects {expect}",
                image.len()
            )));
        }
        let patches = g.constant(cfg.n_patches(), cfg.patch_dim(), patchify(image, cfg));
        let embedded = self.linear(g, patches, "embed.patch");
        let pos = g.constant(cfg.n_patches(), cfg.d, positional_encoding(cfg));
        let mut x = g.add(embedded, pos);

        for l in 0..cfg.n_encoder_layers {
            let n1 = self.layer_norm(g, x, &format!("enc{l}.ln1"));
            let (sa, _) = self.attention(g, &format!("enc{l}.attn"), n1, n1, None);
            x = g.add(x, sa);
            let n2 = self.layer_norm(g, x, &format!("enc{l}.ln2"));
            let f = self.ffn(g, n2, &format!("enc{l}.ffn"));
            x = g.add(x, f);
        }
        Ok(self.layer_norm(g, x, "enc.out"))
    }

    /// Runs the decoder block-locally over the listed groups (0-based
    /// positions into the bank). Shared code path for the joint
    /// disentangled pass and for isolated single-group decoding, which is
    /// what makes their equivalence structural rather than approximate.
    fn decode_block_local(
        &self,
        g: &mut Graph,
        memory: Tensor,
        positions: &[usize],
        stats: &mut ForwardStats,
    ) -> Vec<GroupPredictions> {
        let mut xs: Vec<Tensor> = positions
            .iter()
            .map(|&i| self.p(g, &self.bank.groups[i].query_param()))
            .collect();
        for l in 0..self.config.n_decoder_layers {
            for x in xs.iter_mut() {
                let n1 = self.layer_norm(g, *x, &format!("dec{l}.ln1"));
                let (sa, c) = self.attention(g, &format!("dec{l}.self"), n1, n1, None);
                stats.decoder_self_attention_scores += c;
                *x = g.add(*x, sa);
                let n2 = self.layer_norm(g, *x, &format!("dec{l}.ln2"));
                let (ca, _) = self.attention(g, &format!("dec{l}.cross"), n2, memory, None);
                *x = g.add(*x, ca);
                let n3 = self.layer_norm(g, *x, &format!("dec{l}.ln3"));
                let f = self.ffn(g, n3, &format!("dec{l}.ffn"));
                *x = g.add(*x, f);
            }
        }
        positions
            .iter()
            .zip(xs)
            .map(|(&i, x)| {
                let out = self.layer_norm(g, x, "dec.out");
                self.group_heads(g, out, &self.bank.groups[i])
            })
            .collect()
    }

    /// Runs the decoder over the concatenated bank with full (G·N)²
    /// self-attention; `mask` optionally blocks cross-group pairs, which
    /// is the reference realization of disentanglement used by tests.
    fn decode_concat(
        &self,
        g: &mut Graph,
        memory: Tensor,
        mask: Option<&[f64]>,
        stats: &mut ForwardStats,
    ) -> Vec<GroupPredictions> {
        let parts: Vec<Tensor> =
            self.bank.groups.iter().map(|grp| self.p(g, &grp.query_param())).collect();
        let mut x = g.concat_rows(&parts);
        for l in 0..self.config.n_decoder_layers {
            let n1 = self.layer_norm(g, x, &format!("dec{l}.ln1"));
            let (sa, c) = self.attention(g, &format!("dec{l}.self"), n1, n1, mask);
            stats.decoder_self_attention_scores += c;
            x = g.add(x, sa);
            let n2 = self.layer_norm(g, x, &format!("dec{l}.ln2"));
            let (ca, _) = self.attention(g, &format!("dec{l}.cross"), n2, memory, None);
            x = g.add(x, ca);
            let n3 = self.layer_norm(g, x, &format!("dec{l}.ln3"));
            let f = self.ffn(g, n3, &format!("dec{l}.ffn"));
            x = g.add(x, f);
        }
        let out = self.layer_norm(g, x, "dec.out");
        let n = self.config.queries_per_group;
        self.bank
            .groups
            .iter()
            .enumerate()
            .map(|(i, grp)| {
                let rows: Vec<usize> = (i * n..(i + 1) * n).collect();
                let slice = g.gather_rows(out, &rows);
                self.group_heads(g, slice, grp)
            })
            .collect()
    }

    fn group_heads(&self, g: &mut Graph, x: Tensor, group: &QueryGroup) -> GroupPredictions {
        let class_logits = self.linear(g, x, &format!("head.cls.g{}", group.index));
        let h1 = self.linear(g, x, "head.box.fc1");
        let a1 = g.relu(h1);
        let h2 = self.linear(g, a1, "head.box.fc2");
        let a2 = g.relu(h2);
        let raw = self.linear(g, a2, "head.box.fc3");
        let boxes = g.sigmoid(raw);
        GroupPredictions { group: group.index, class_logits, boxes }
    }

    /// Decodes every group against precomputed features.
    pub fn decode_all(
        &self,
        g: &mut Graph,
        memory: Tensor,
        mode: AttentionMode,
    ) -> (Vec<GroupPredictions>, ForwardStats) {
        assert!(!self.bank.groups.is_empty(), "decode needs at least one query group");
        let mut stats = ForwardStats::default();
        let positions: Vec<usize> = (0..self.bank.groups.len()).collect();
        let preds = match mode {
            AttentionMode::Disentangled => {
                self.decode_block_local(g, memory, &positions, &mut stats)
            }
            AttentionMode::Full => self.decode_concat(g, memory, None, &mut stats),
        };
        (preds, stats)
    }

    /// Reference joint pass: one concatenated decoder run where
    /// cross-group attention is removed by masking rather than by block
    /// structure. Exists so tests can check the two realizations agree.
    pub fn decode_all_masked_reference(
        &self,
        g: &mut Graph,
        memory: Tensor,
    ) -> (Vec<GroupPredictions>, ForwardStats) {
        assert!(!self.bank.groups.is_empty(), "decode needs at least one query group");
        let mask = block_diagonal_mask(self.bank.groups.len(), self.config.queries_per_group);
        let mut stats = ForwardStats::default();
        let preds = self.decode_concat(g, memory, Some(&mask), &mut stats);
        (preds, stats)
    }

    /// Decodes a single group (1-based index) in isolation.
    pub fn decode_group(
        &self,
        g: &mut Graph,
        memory: Tensor,
        index: usize,
    ) -> crate::Result<GroupPredictions> {
        let pos = self
            .bank
            .groups
            .iter()
            .position(|grp| grp.index == index)
            .ok_or_else(|| DetError::Config(format!("unknown query group {index}")))?;
        let mut stats = ForwardStats::default();
        let mut preds = self.decode_block_local(g, memory, &[pos], &mut stats);
        Ok(preds.remove(0))
    }

    /// Encode + decode in one call.
    pub fn forward_all(
        &self,
        g: &mut Graph,
        image: &[f64],
        mode: AttentionMode,
    ) -> crate::Result<(Vec<GroupPredictions>, ForwardStats)> {
        let memory = self.encode(g, image)?;
        Ok(self.decode_all(g, memory, mode))
    }

    /// Writes a self-describing JSON checkpoint: version, config, phase,
    /// group metadata, and every parameter tensor (with its frozen flag).
    pub fn save_checkpoint(&self, path: &Path, phase: usize) -> crate::Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            phase,
            config: self.config,
            groups: self.bank.groups.clone(),
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint saved by [`Model::save_checkpoint`], returning
    /// the model and its phase index.
    pub fn load_checkpoint(path: &Path) -> crate::Result<(Self, usize)> {
        let json = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&json)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(DetError::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        file.config.validate()?;
        let model = Model { config: file.config, params: file.params, bank: QueryBank { groups: file.groups } };
        for (i, group) in model.bank.groups.iter().enumerate() {
            if group.index != i + 1 {
                return Err(DetError::Checkpoint(format!(
                    "group indices must be contiguous from 1, found {} at position {i}",
                    group.index
                )));
            }
            let id = model.params.find(&group.query_param()).ok_or_else(|| {
                DetError::Checkpoint(format!("missing embeddings for group {}", group.index))
            })?;
            let (rows, cols) = model.params.shape(id);
            if (rows, cols) != (model.config.queries_per_group, model.config.d) {
                return Err(DetError::Checkpoint(format!(
                    "group {} embeddings are {rows}x{cols}, config wants {}x{}",
                    group.index, model.config.queries_per_group, model.config.d
                )));
            }
            for other in &model.bank.groups[i + 1..] {
                if group.class_set.iter().any(|c| other.class_set.contains(c)) {
                    return Err(DetError::Checkpoint(format!(
                        "groups {} and {} share a class",
                        group.index, other.index
                    )));
                }
            }
        }
        Ok((model, file.phase))
    }
}

/// Cuts an H×W×3 row-major image into rows of flattened patches, patch
/// order row-major over the grid, pixel order row-major within a patch.
fn patchify(image: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let (grid, ps, n) = (cfg.grid(), cfg.patch_size, cfg.image_size);
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for dy in 0..ps {
                for dx in 0..ps {
                    let at = ((pr * ps + dy) * n + pc * ps + dx) * 3;
                    out.extend_from_slice(&image[at..at + 3]);
                }
            }
        }
    }
    out
}

/// Fixed 2-D sinusoidal position code: the first d/2 channels encode the
/// patch column, the rest the patch row, each as interleaved sin/cos over
/// geometrically spaced frequencies.
fn positional_encoding(cfg: &ModelConfig) -> Vec<f64> {
    let (grid, d) = (cfg.grid(), cfg.d);
    let half = d / 2;
    let mut out = Vec::with_capacity(cfg.n_patches() * d);
    for p in 0..cfg.n_patches() {
        let (row, col) = ((p / grid) as f64, (p % grid) as f64);
        for axis in [col, row] {
            for i in 0..half / 2 {
                let freq = (10000f64).powf(-2.0 * i as f64 / half as f64);
                out.push((axis * freq).sin());
                out.push((axis * freq).cos());
            }
        }
    }
    out
}
