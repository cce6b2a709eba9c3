//! A small masked point autoencoder over patch tokens, plus the
//! classification head used for finetuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer, ChamferForm};
use crate::rng::Rng;
use crate::tensor::{dropout, Graph, LayerNorm, Linear, Mode, ParamId, ParamKind, ParamStore, Tensor, Var};

pub const BACKBONE_PREFIX: &str = "mae.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Token width `D`.
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub decoder_blocks: usize,
    /// Hidden width of the per-point patch MLP.
    pub embed_hidden: usize,
    /// Hidden width of the positional MLP.
    pub pos_hidden: usize,
    /// Transformer MLP width as a multiple of `D`.
    pub mlp_ratio: usize,
    pub head_dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 96,
            encoder_blocks: 3,
            heads: 4,
            mask_ratio: 0.6,
            decoder_blocks: 1,
            embed_hidden: 64,
            pos_hidden: 128,
            mlp_ratio: 2,
            head_dropout: 0.5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "backbone.embed_dim ({}) must be a positive multiple of backbone.heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim < 2 {
            return bad("backbone.embed_dim must be >= 2".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("backbone.mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return bad(format!("backbone.head_dropout must be in [0, 1), got {}", self.head_dropout));
        }
        for (name, v) in [
            ("encoder_blocks", self.encoder_blocks),
            ("embed_hidden", self.embed_hidden),
            ("pos_hidden", self.pos_hidden),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return bad(format!("backbone.{name} must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Masked and visible token positions of one cloud, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// `(masked, visible)` token counts: `floor(ratio * groups)` are masked.
pub fn mask_counts(groups: usize, ratio: f64) -> Result<(usize, usize)> {
    let masked = (ratio * groups as f64).floor() as usize;
    if masked == 0 || masked >= groups {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} over {groups} tokens leaves {masked} masked and {} visible",
            groups.saturating_sub(masked)
        )));
    }
    Ok((masked, groups - masked))
}

pub fn mask_indices(groups: usize, ratio: f64, rng: &mut Rng) -> Result<Mask> {
    let (m, _) = mask_counts(groups, ratio)?;
    let mut masked = rng.choose(groups, m);
    masked.sort_unstable();
    let mut is_masked = vec![false; groups];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..groups).filter(|&i| !is_masked[i]).collect();
    Ok(Mask { masked, visible })
}

/// Shared per-point MLP followed by a max over each patch.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 3, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    /// `[P, k, 3]` patches to `[P, D]` embeddings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[2] != 3 || s[1] == 0 {
            return Err(Error::invalid(format!("patch embedding needs [P, k>0, 3], got {s:?}")));
        }
        let flat = g.reshape(patches, &[s[0] * s[1], 3])?;
        let h = self.fc1.forward(g, store, flat)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.reshape(h, &[s[0], s[1], self.fc2.out_dim])?;
        g.max_axis(h, 1)
    }
}

/// Two-layer MLP of each center coordinate.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PosEmbed {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 3, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, centers: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, centers)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block: self-attention then an MLP, each residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, rng)?,
            heads: cfg.heads,
        })
    }

    /// Multi-head self-attention over `[B, T, D]`; also returns the attention
    /// weights `[B * heads, T, T]`.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let flat = g.reshape(x, &[b * t, d])?;
        let qkv = self.qkv.forward(g, store, flat)?;
        let qkv = g.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |g: &mut Graph, i: usize| -> Result<Var> {
            let p = g.narrow(qkv, 0, i, 1)?;
            g.reshape(p, &[b * h, t, dh])
        };
        let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[b, h, t, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b * t, d])?;
        let out = self.proj.forward(g, store, out)?;
        Ok((g.reshape(out, &[b, t, d])?, attn))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.proj.out_dim {
            return Err(Error::invalid(format!("block input must be [B, T, {}], got {s:?}", self.proj.out_dim)));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let flat = g.reshape(x, &[b * t, d])?;
        let h = self.norm1.forward(g, store, flat)?;
        let h = g.reshape(h, &[b, t, d])?;
        let (a, _) = self.attention(g, store, h)?;
        let x = g.add(x, a)?;
        let flat = g.reshape(x, &[b * t, d])?;
        let h = self.norm2.forward(g, store, flat)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.reshape(h, &[b, t, d])?;
        g.add(x, h)
    }
}

/// Predicted and ground-truth coordinates of the masked patches, each
/// `[B * masked, k, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub predicted: Var,
    pub target: Var,
}

/// Class logits head: `D -> D/2 -> classes` with dropout between.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl ClassHead {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("classification head needs at least one class"));
        }
        let name = HEAD_PREFIX.trim_end_matches('.');
        let d = cfg.embed_dim;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d / 2, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d / 2, classes, rng)?,
            dropout: cfg.head_dropout,
        })
    }

    pub fn classes(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = match mode {
            Mode::Train => dropout(g, h, self.dropout, rng)?,
            Mode::Eval => h,
        };
        self.fc2.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub embed: PatchEmbed,
    pub pos: PosEmbed,
    pub encoder: Vec<Block>,
    pub encoder_norm: LayerNorm,
    pub mask_token: ParamId,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
    pub cls_token: ParamId,
    pub cls_pos: ParamId,
    pub group_size: usize,
    pub cfg: BackboneConfig,
}

impl MaskedAutoencoder {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, group_size: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if group_size == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        let n = BACKBONE_PREFIX.trim_end_matches('.');
        let d = cfg.embed_dim;
        let token = |store: &mut ParamStore, name: &str, rng: &mut Rng| {
            let data = (0..d).map(|_| 0.02 * rng.normal()).collect();
            store.add(&format!("{n}.{name}"), Tensor::vector(data), ParamKind::Weight)
        };
        Ok(Self {
            embed: PatchEmbed::new(store, &format!("{n}.embed"), cfg.embed_hidden, d, rng)?,
            pos: PosEmbed::new(store, &format!("{n}.pos"), cfg.pos_hidden, d, rng)?,
            encoder: (0..cfg.encoder_blocks)
                .map(|i| Block::new(store, &format!("{n}.encoder.{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            encoder_norm: LayerNorm::new(store, &format!("{n}.encoder_norm"), d)?,
            mask_token: token(store, "mask_token", rng)?,
            decoder: (0..cfg.decoder_blocks)
                .map(|i| Block::new(store, &format!("{n}.decoder.{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            decoder_norm: LayerNorm::new(store, &format!("{n}.decoder_norm"), d)?,
            head: Linear::new(store, &format!("{n}.head"), d, group_size * 3, rng)?,
            cls_token: token(store, "cls_token", rng)?,
            cls_pos: token(store, "cls_pos", rng)?,
            group_size,
            cfg: cfg.clone(),
        })
    }

    fn check_inputs(&self, g: &Graph, patches: Var, centers: Var) -> Result<(usize, usize)> {
        let (sp, sc) = (g.shape(patches), g.shape(centers));
        let ok = sp.len() == 4
            && sc.len() == 3
            && sp[0] == sc[0]
            && sp[1] == sc[1]
            && sp[2] == self.group_size
            && sp[3] == 3
            && sc[2] == 3;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "masked autoencoder",
                lhs: sp.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        Ok((sp[0], sp[1]))
    }

    /// Token embeddings and positional encodings, both `[B * G, D]`.
    fn tokens(&self, g: &mut Graph, store: &ParamStore, patches: Var, centers: Var) -> Result<(Var, Var)> {
        let (b, groups) = self.check_inputs(g, patches, centers)?;
        let flat = g.reshape(patches, &[b * groups, self.group_size, 3])?;
        let tok = self.embed.forward(g, store, flat)?;
        let c = g.reshape(centers, &[b * groups, 3])?;
        let pos = self.pos.forward(g, store, c)?;
        Ok((tok, pos))
    }

    fn run_blocks(g: &mut Graph, store: &ParamStore, blocks: &[Block], mut x: Var, pos: Var) -> Result<Var> {
        for block in blocks {
            let h = g.add(x, pos)?;
            x = block.forward(g, store, h)?;
        }
        Ok(x)
    }

    fn norm3(g: &mut Graph, store: &ParamStore, norm: &LayerNorm, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = norm.forward(g, store, flat)?;
        g.reshape(y, &s)
    }

    fn token_param(g: &mut Graph, store: &ParamStore, id: ParamId, b: usize, t: usize) -> Result<Var> {
        let p = g.param(store, id);
        let d = g.shape(p)[0];
        let p = g.reshape(p, &[1, 1, d])?;
        g.broadcast_to(p, &[b, t, d])
    }

    /// Encodes the visible tokens of `patches [B, G, k, 3]` around
    /// `centers [B, G, 3]` and predicts the masked patches.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        centers: Var,
        masks: &[Mask],
    ) -> Result<Reconstruction> {
        let (b, groups) = self.check_inputs(g, patches, centers)?;
        if masks.len() != b {
            return Err(Error::invalid(format!("{} masks for {b} clouds", masks.len())));
        }
        let (m, v) = (masks[0].masked.len(), masks[0].visible.len());
        if m == 0 || v == 0 {
            return Err(Error::invalid("masking must leave both masked and visible tokens"));
        }
        for mask in masks {
            let mut all: Vec<usize> = mask.masked.iter().chain(&mask.visible).copied().collect();
            all.sort_unstable();
            if mask.masked.len() != m || all != (0..groups).collect::<Vec<_>>() {
                return Err(Error::invalid("masks must partition the tokens with equal counts per cloud"));
            }
        }
        let global = |pick: fn(&Mask) -> &Vec<usize>| -> Vec<usize> {
            masks
                .iter()
                .enumerate()
                .flat_map(|(i, mk)| pick(mk).iter().map(move |&j| i * groups + j))
                .collect()
        };
        let (vis_idx, mask_idx) = (global(|m| &m.visible), global(|m| &m.masked));
        let d = self.cfg.embed_dim;
        let (tok, pos) = self.tokens(g, store, patches, centers)?;

        let x = g.gather(tok, &vis_idx)?;
        let x = g.reshape(x, &[b, v, d])?;
        let pos_vis = g.gather(pos, &vis_idx)?;
        let pos_vis = g.reshape(pos_vis, &[b, v, d])?;
        let x = Self::run_blocks(g, store, &self.encoder, x, pos_vis)?;
        let x = Self::norm3(g, store, &self.encoder_norm, x)?;

        let fill = Self::token_param(g, store, self.mask_token, b, m)?;
        let full = g.concat(&[x, fill], 1)?;
        let pos_mask = g.gather(pos, &mask_idx)?;
        let pos_mask = g.reshape(pos_mask, &[b, m, d])?;
        let full_pos = g.concat(&[pos_vis, pos_mask], 1)?;
        let y = Self::run_blocks(g, store, &self.decoder, full, full_pos)?;
        let y = Self::norm3(g, store, &self.decoder_norm, y)?;
        let y = g.narrow(y, 1, v, m)?;
        let y = g.reshape(y, &[b * m, d])?;
        let y = self.head.forward(g, store, y)?;
        let predicted = g.reshape(y, &[b * m, self.group_size, 3])?;

        let k = self.group_size;
        let flat = g.reshape(patches, &[b * groups, k, 3])?;
        let target = g.gather(flat, &mask_idx)?;
        Ok(Reconstruction { predicted, target })
    }

    /// Encodes all tokens behind a classification token; returns its
    /// final features `[B, D]`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, patches: Var, centers: Var) -> Result<Var> {
        let (b, groups) = self.check_inputs(g, patches, centers)?;
        let d = self.cfg.embed_dim;
        let (tok, pos) = self.tokens(g, store, patches, centers)?;
        let tok = g.reshape(tok, &[b, groups, d])?;
        let pos = g.reshape(pos, &[b, groups, d])?;
        let cls = Self::token_param(g, store, self.cls_token, b, 1)?;
        let cls_pos = Self::token_param(g, store, self.cls_pos, b, 1)?;
        let x = g.concat(&[cls, tok], 1)?;
        let p = g.concat(&[cls_pos, pos], 1)?;
        let x = Self::run_blocks(g, store, &self.encoder, x, p)?;
        let x = Self::norm3(g, store, &self.encoder_norm, x)?;
        let x = g.narrow(x, 1, 0, 1)?;
        g.reshape(x, &[b, d])
    }

    /// Class logits `[B, classes]`.
    #[allow(clippy::too_many_arguments)]
    pub fn classify(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        head: &ClassHead,
        patches: Var,
        centers: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let f = self.features(g, store, patches, centers)?;
        head.forward(g, store, f, mode, rng)
    }
}

/// Mean ℓ2 chamfer distance over corresponding patches `[P, k, 3]`.
pub fn local_recon_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    let (sp, st) = (g.shape(predicted), g.shape(target));
    if sp.len() != 3 || sp != st {
        return Err(Error::ShapeMismatch {
            op: "local_recon_loss",
            lhs: sp.to_vec(),
            rhs: st.to_vec(),
        });
    }
    chamfer(g, predicted, target, ChamferForm::L2)
}
