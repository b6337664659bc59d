use serde::{Deserialize, Serialize};

use crate::attention::Cbam;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kan::VkanBlock;
use crate::nn::{Conv2d, Conv2dSpec, ConvTranspose2d, DoubleConv, Linear, PoolKind, PoolWindow};
use crate::params::{Graph, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::scan::ScanMode;

use super::ModelConfig;

fn even_dims(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(op, format!("spatial {h}x{w} must be even")));
    }
    Ok(())
}

fn dims4<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = g.shape(x);
    <[usize; 4]>::try_from(s).map_err(|_| Error::shape(op, format!("expected a rank-4 input, got {s:?}")))
}

/// `B×H×W×C → B×(H/2)×(W/2)×4C`, parity sub-grids concatenated in the
/// order (even h, even w), (odd h, even w), (even h, odd w), (odd h, odd w).
pub fn merge_rearrange<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x, "patch_merge")?;
    even_dims("patch_merge", h, w)?;
    let y = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
    let y = g.permute(y, &[0, 1, 3, 4, 2, 5])?;
    g.reshape(y, &[b, h / 2, w / 2, 4 * c])
}

/// Inverse of [`merge_rearrange`]: `B×H×W×4C → B×2H×2W×C`.
pub fn expand_rearrange<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [b, h, w, c4] = dims4(g, x, "patch_expand")?;
    if c4 % 4 != 0 {
        return Err(Error::shape("patch_expand", format!("{c4} channels do not split into 2×2 blocks")));
    }
    let c = c4 / 4;
    let y = g.reshape(x, &[b, h, w, 2, 2, c])?;
    let y = g.permute(y, &[0, 1, 4, 2, 3, 5])?;
    g.reshape(y, &[b, 2 * h, 2 * w, c])
}

fn to_channel_last<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.permute(x, &[0, 2, 3, 1])
}

fn to_channel_first<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.permute(x, &[0, 3, 1, 2])
}

/// Strided 2×2 conv `C → 2C`, returned channel-last.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        let spec = Conv2dSpec { stride: 2, padding: 0, groups: 1 };
        Ok(PatchEmbed { conv: Conv2d::new(pb, name, c, 2 * c, 2, spec, true)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = dims4(g, x, "patch_embed")?;
        even_dims("patch_embed", h, w)?;
        let y = self.conv.forward(g, x)?;
        to_channel_last(g, y)
    }
}

/// Parity gather to `4C`, then a linear map to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        Ok(PatchMerge { proj: Linear::new(pb, name, 4 * c, 2 * c, false)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = merge_rearrange(g, x)?;
        self.proj.forward(g, y)
    }
}

/// Linear `C → 2C`, then each token becomes a 2×2 block of `C/2`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
}

impl PatchExpand {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::shape("patch_expand", format!("odd channel count {c}")));
        }
        Ok(PatchExpand { proj: Linear::new(pb, name, c, 2 * c, false)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).last().copied().unwrap_or(0);
        if c % 2 != 0 {
            return Err(Error::shape("patch_expand", format!("odd channel count {c}")));
        }
        let y = self.proj.forward(g, x)?;
        expand_rearrange(g, y)
    }
}

/// Channel concat of `up` and `skip`, then a 1×1 projection `2C → C`.
#[derive(Clone, Debug)]
pub struct DecoderFuse {
    pub proj: Linear,
}

impl DecoderFuse {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        Ok(DecoderFuse { proj: Linear::new(pb, name, 2 * c, c, true)? })
    }

    /// Both inputs channel-last with equal shapes.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, up: Var, skip: Var) -> Result<Var> {
        if g.shape(up) != g.shape(skip) {
            return Err(Error::shape(
                "decoder_fuse",
                format!("up {:?} vs skip {:?}", g.shape(up), g.shape(skip)),
            ));
        }
        let cat = g.concat(&[up, skip], 3)?;
        self.proj.forward(g, cat)
    }
}

/// Two conv rounds then a 2×2 max pool; returns `(pre_pool, pooled)`.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub convs: DoubleConv,
}

impl EncoderStage {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, ic: usize, oc: usize) -> Result<Self> {
        Ok(EncoderStage { convs: DoubleConv::new(pb, name, ic, oc)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = dims4(g, x, "encoder_conv_stage")?;
        even_dims("encoder_conv_stage", h, w)?;
        let pre = self.convs.forward(g, x)?;
        let pooled = g.pool2d(pre, PoolKind::Max, PoolWindow::Size(2))?;
        Ok((pre, pooled))
    }
}

/// Transposed 2×2 stride-2 upsampling, optional skip concat, two conv rounds.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose2d,
    pub refine: DoubleConv,
    pub has_skip: bool,
}

impl DecoderStage {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, ic: usize, oc: usize, has_skip: bool) -> Result<Self> {
        pb.scope(name, |pb| {
            let up = ConvTranspose2d::new(pb, "up", ic, oc, 2, 2)?;
            let refine_in = if has_skip { 2 * oc } else { oc };
            let refine = DoubleConv::new(pb, "refine", refine_in, oc)?;
            Ok(DecoderStage { up, refine, has_skip })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let y = self.up.forward(g, x)?;
        let y = match (skip, self.has_skip) {
            (Some(s), true) => g.concat(&[y, s], 1)?,
            (None, false) => y,
            _ => return Err(Error::InvalidArgument("decoder stage skip does not match its construction".into())),
        };
        self.refine.forward(g, y)
    }
}

/// Intermediate feature maps of one forward pass.
///
/// `encoder[i]` is `x_e(i+1)`: entries 0–2 are `B×C×H×W`, 3–4 are
/// `B×H×W×C`. `decoder[i]` is `x_d(i+1)`: entries 0–2 are `B×C×H×W`,
/// 3–4 are `B×H×W×C`. `logits` are full resolution first, then 1/2, 1/4,
/// 1/8 when deep supervision is on.
#[derive(Clone, Debug)]
pub struct Stages {
    pub encoder: Vec<Var>,
    pub skips: Vec<Var>,
    pub decoder: Vec<Var>,
    pub logits: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MedVkan {
    pub config: ModelConfig,
    pub encoder: [EncoderStage; 3],
    pub cbam: [Cbam; 3],
    pub patch_embed: PatchEmbed,
    pub vkan_e4: VkanBlock,
    pub patch_merge: PatchMerge,
    pub vkan_e5: VkanBlock,
    /// Decoder VKAN path, deepest first: expand, fuse, VKAN at widths `c3`, `c2`.
    pub expand: [PatchExpand; 2],
    pub fuse: [DecoderFuse; 2],
    pub vkan_d: [VkanBlock; 2],
    /// Conv decoder stages to `c1`, `c0`, head width.
    pub up: [DecoderStage; 3],
    pub head: Conv2d,
    /// 1×1 heads on `x_d2`, `x_d3`, `x_d4`.
    pub ds_heads: Vec<Conv2d>,
}

impl MedVkan {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let [c0, c1, c2, c3, c4] = cfg.stage_channels;
        let (k, ch) = (cfg.num_classes, cfg.decoder_head_channels);
        let vkan = |pb: &mut ParamBuilder<T>, name: &str, c| VkanBlock::new(pb, name, c, cfg.d_state, cfg.efconv_mode, cfg.spline);
        let encoder = [
            EncoderStage::new(pb, "enc1", cfg.in_channels, c0)?,
            EncoderStage::new(pb, "enc2", c0, c1)?,
            EncoderStage::new(pb, "enc3", c1, c2)?,
        ];
        let patch_embed = PatchEmbed::new(pb, "patch_embed", c2)?;
        let vkan_e4 = vkan(pb, "vkan_e4", c3)?;
        let patch_merge = PatchMerge::new(pb, "patch_merge", c3)?;
        let vkan_e5 = vkan(pb, "vkan_e5", c4)?;
        let cbam = [
            Cbam::new(pb, "cbam1", c0, cfg.cbam_reduction)?,
            Cbam::new(pb, "cbam2", c1, cfg.cbam_reduction)?,
            Cbam::new(pb, "cbam3", c2, cfg.cbam_reduction)?,
        ];
        let expand5 = PatchExpand::new(pb, "expand5", c4)?;
        let fuse5 = DecoderFuse::new(pb, "fuse5", c3)?;
        let vkan_d5 = vkan(pb, "vkan_d5", c3)?;
        let expand4 = PatchExpand::new(pb, "expand4", c3)?;
        let fuse4 = DecoderFuse::new(pb, "fuse4", c2)?;
        let vkan_d4 = vkan(pb, "vkan_d4", c2)?;
        let up = [
            DecoderStage::new(pb, "up3", c2, c1, true)?,
            DecoderStage::new(pb, "up2", c1, c0, true)?,
            DecoderStage::new(pb, "up1", c0, ch, false)?,
        ];
        let head_conv = |pb: &mut ParamBuilder<T>, name: &str, ic| Conv2d::new(pb, name, ic, k, 1, Conv2dSpec::same(1), true);
        let head = head_conv(pb, "head", ch)?;
        let ds_heads = if cfg.deep_supervision {
            vec![head_conv(pb, "ds_head2", c0)?, head_conv(pb, "ds_head3", c1)?, head_conv(pb, "ds_head4", c2)?]
        } else {
            Vec::new()
        };
        Ok(MedVkan {
            config: cfg,
            encoder,
            cbam,
            patch_embed,
            vkan_e4,
            patch_merge,
            vkan_e5,
            expand: [expand5, expand4],
            fuse: [fuse5, fuse4],
            vkan_d: [vkan_d5, vkan_d4],
            up,
            head,
            ds_heads,
        })
    }

    /// Builds a model and its freshly initialised parameters.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut pb = ParamBuilder::new(seed);
        let model = Self::new(&mut pb, config)?;
        Ok((model, pb.finish()))
    }

    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        let [d5, d4] = &mut self.vkan_d;
        for block in [&mut self.vkan_e4, &mut self.vkan_e5, d5, d4] {
            block.vss.set_mode(mode);
        }
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let [_, c, h, w] = dims4(g, x, "medvkan")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "medvkan",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        self.config.check_input_size(h, w)
    }

    /// Logits, full resolution first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        Ok(self.forward_with_stages(g, x)?.logits)
    }

    pub fn forward_with_stages<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Stages> {
        self.check_input(g, x)?;
        let (_, e1) = self.encoder[0].forward(g, x)?;
        let (_, e2) = self.encoder[1].forward(g, e1)?;
        let (_, e3) = self.encoder[2].forward(g, e2)?;
        let t = self.patch_embed.forward(g, e3)?;
        let e4 = self.vkan_e4.forward(g, t)?;
        let t = self.patch_merge.forward(g, e4)?;
        let e5 = self.vkan_e5.forward(g, t)?;

        let s1 = self.cbam[0].forward(g, e1)?;
        let s2 = self.cbam[1].forward(g, e2)?;
        let s3 = self.cbam[2].forward(g, e3)?;

        let t = self.expand[0].forward(g, e5)?;
        let t = self.fuse[0].forward(g, t, e4)?;
        let d5 = self.vkan_d[0].forward(g, t)?;
        let t = self.expand[1].forward(g, d5)?;
        let s3_last = to_channel_last(g, s3)?;
        let t = self.fuse[1].forward(g, t, s3_last)?;
        let d4 = self.vkan_d[1].forward(g, t)?;
        let d4_first = to_channel_first(g, d4)?;
        let d3 = self.up[0].forward(g, d4_first, Some(s2))?;
        let d2 = self.up[1].forward(g, d3, Some(s1))?;
        let d1 = self.up[2].forward(g, d2, None)?;

        let mut logits = vec![self.head.forward(g, d1)?];
        for (head, feat) in self.ds_heads.iter().zip([d2, d3, d4_first]) {
            logits.push(head.forward(g, feat)?);
        }
        Ok(Stages {
            encoder: vec![e1, e2, e3, e4, e5],
            skips: vec![s1, s2, s3],
            decoder: vec![d1, d2, d3, d4, d5],
            logits,
        })
    }
}

/// Trainable scalar count, total and per top-level module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn of_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut breakdown: Vec<(String, usize)> = Vec::new();
        for id in store.trainable_ids() {
            let name = store.name(id);
            let module = name.split('.').next().unwrap_or(name);
            let n = store.value(id).numel();
            match breakdown.last_mut() {
                Some((m, count)) if m == module => *count += n,
                _ => breakdown.push((module.to_string(), n)),
            }
        }
        ParamCount {
            total: breakdown.iter().map(|(_, n)| n).sum(),
            breakdown,
        }
    }

    /// Count of modules whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> usize {
        self.breakdown.iter().filter(|(m, _)| m.starts_with(prefix)).map(|(_, n)| n).sum()
    }
}

/// Parameter count of a model built from `config`.
pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    let (_, store) = MedVkan::init::<f32>(config, 0)?;
    Ok(ParamCount::of_store(&store))
}
