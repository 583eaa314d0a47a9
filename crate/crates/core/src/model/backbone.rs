//! The hierarchical encoder: a strided stem, four stages of adaptive feature
//! enhancement (AFE) blocks and stride-2 downsampling between stages.
//!
//! An AFE block is
//!
//! ```text
//! y  = LN(x);  y = y + dw3x3(y)                      (conv embedding, CE)
//! s  = conv1x1(y): C -> C/2                          (channel squeeze)
//! m  = concat(SCM(s)?, FRM(s)?)   or s if both off
//! x' = x + conv1x1(m) -> C
//! out = x' + ConvMLP(LN(x'))
//! ```
//!
//! SCM is a depthwise 7x7 convolution. FRM smooths its input with a stride-2
//! depthwise convolution, restores the resolution bilinearly (`Q`) and forms
//! the detail map `R = F - Q` and the blob map `S = F * Q`, each followed by a
//! depthwise 3x3 before the branches are concatenated and projected back.

use rand::Rng;

use super::config::FANetConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, ParamStore};
use crate::tensor::{concat_channels, ConvSpec, Element, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Frm {
    pub channels: usize,
    pub down: Conv2d,
    pub dw_r: Option<Conv2d>,
    pub dw_s: Option<Conv2d>,
    pub proj: Conv2d,
}

/// Intermediate FRM maps, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FrmTrace<'g, T: Element> {
    pub f: Var<'g, T>,
    pub p: Var<'g, T>,
    pub q: Var<'g, T>,
    pub r: Option<Var<'g, T>>,
    pub s: Option<Var<'g, T>>,
    pub out: Var<'g, T>,
}

impl Frm {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        high: bool,
        low: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(high || low) {
            return Err(Error::Config(
                "FRM needs at least one of the high/low frequency branches".into(),
            ));
        }
        let dw = ConvSpec::depthwise(channels, 3)?;
        let down = Conv2d::new(
            store,
            &format!("{name}.down"),
            ConvSpec::new(channels, channels, 3, 2, 1, channels)?,
            Init::HeFanOut,
            rng,
        );
        let dw_r =
            high.then(|| Conv2d::new(store, &format!("{name}.dw_r"), dw, Init::HeFanOut, rng));
        let dw_s =
            low.then(|| Conv2d::new(store, &format!("{name}.dw_s"), dw, Init::HeFanOut, rng));
        let branches = usize::from(high) + usize::from(low);
        let proj = Conv2d::new(
            store,
            &format!("{name}.proj"),
            ConvSpec::pointwise(branches * channels, channels)?,
            Init::HeFanOut,
            rng,
        );
        Ok(Frm {
            channels,
            down,
            dw_r,
            dw_s,
            proj,
        })
    }

    pub fn forward_traced<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        f: Var<'g, T>,
    ) -> Result<FrmTrace<'g, T>> {
        let [_, _, h, w] = f.value().dims4()?;
        let p = self.down.forward(g, store, f)?;
        let q = p.bilinear_resize(h, w)?;
        let r = self.dw_r.as_ref().map(|_| f.sub(q)).transpose()?;
        let s = self.dw_s.as_ref().map(|_| f.mul(q)).transpose()?;
        let mut branches = Vec::with_capacity(2);
        if let (Some(conv), Some(r)) = (&self.dw_r, r) {
            branches.push(conv.forward(g, store, r)?);
        }
        if let (Some(conv), Some(s)) = (&self.dw_s, s) {
            branches.push(conv.forward(g, store, s)?);
        }
        let t = if branches.len() == 1 {
            branches[0]
        } else {
            concat_channels(&branches)?
        };
        let out = self.proj.forward(g, store, t)?;
        Ok(FrmTrace { f, p, q, r, s, out })
    }

    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        f: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_traced(g, store, f)?.out)
    }

    /// Replaces the smoothing filter with a 2x2 box average over the
    /// bottom-right taps, so `P` holds non-overlapping 2x2 block means, and
    /// zeroes its bias.
    pub fn freeze_box_filter<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.set(self.down.weight, box_filter_weights(self.channels))?;
        if let Some(b) = self.down.bias {
            store.set(b, Tensor::zeros([self.channels]))?;
        }
        Ok(())
    }
}

/// Depthwise 3x3 kernels with 1/4 on taps (1,1), (1,2), (2,1), (2,2).
pub fn box_filter_weights<T: Element>(channels: usize) -> Tensor<T> {
    let quarter = T::from_f64(0.25);
    Tensor::from_fn([channels, 1, 3, 3], |i| {
        let (ky, kx) = ((i % 9) / 3, i % 3);
        if ky >= 1 && kx >= 1 {
            quarter
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Debug)]
pub struct AfeBlock {
    pub channels: usize,
    pub norm1: LayerNorm,
    pub ce: Conv2d,
    pub squeeze: Conv2d,
    pub scm: Option<Conv2d>,
    pub frm: Option<Frm>,
    pub fuse: Conv2d,
    pub norm2: LayerNorm,
    pub mlp_in: Conv2d,
    pub mlp_dw: Conv2d,
    pub mlp_out: Conv2d,
}

impl AfeBlock {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        config: &FANetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "AFE block width {channels} must be positive and even"
            )));
        }
        let half = channels / 2;
        let hidden = channels * config.mlp_ratio;
        let n = |part: &str| format!("{name}.{part}");
        let norm1 = LayerNorm::new(store, &n("norm1"), channels);
        let ce = Conv2d::new(
            store,
            &n("ce"),
            ConvSpec::depthwise(channels, 3)?,
            Init::HeFanOut,
            rng,
        );
        let squeeze = Conv2d::new(
            store,
            &n("squeeze"),
            ConvSpec::pointwise(channels, half)?,
            Init::HeFanOut,
            rng,
        );
        let scm = if config.scm_enabled {
            Some(Conv2d::new(
                store,
                &n("scm"),
                ConvSpec::depthwise(half, 7)?,
                Init::HeFanOut,
                rng,
            ))
        } else {
            None
        };
        let frm = if config.frm_enabled() {
            Some(Frm::new(
                store,
                &n("frm"),
                half,
                config.frm_high_freq,
                config.frm_low_freq,
                rng,
            )?)
        } else {
            None
        };
        let branches = usize::from(scm.is_some()) + usize::from(frm.is_some());
        let fuse = Conv2d::new(
            store,
            &n("fuse"),
            ConvSpec::pointwise(half * branches.max(1), channels)?,
            Init::Zeros,
            rng,
        );
        let norm2 = LayerNorm::new(store, &n("norm2"), channels);
        let mlp_in = Conv2d::new(
            store,
            &n("mlp_in"),
            ConvSpec::pointwise(channels, hidden)?,
            Init::HeFanOut,
            rng,
        );
        let mlp_dw = Conv2d::new(
            store,
            &n("mlp_dw"),
            ConvSpec::depthwise(hidden, 3)?,
            Init::HeFanOut,
            rng,
        );
        let mlp_out = Conv2d::new(
            store,
            &n("mlp_out"),
            ConvSpec::pointwise(hidden, channels)?,
            Init::Zeros,
            rng,
        );
        Ok(AfeBlock {
            channels,
            norm1,
            ce,
            squeeze,
            scm,
            frm,
            fuse,
            norm2,
            mlp_in,
            mlp_dw,
            mlp_out,
        })
    }

    /// Conv embedding: `x + dw3x3(x)`.
    pub fn ce_forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        x.add(self.ce.forward(g, store, x)?)
    }

    /// Spatial context: depthwise 7x7 on the squeezed features.
    pub fn scm_forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let scm = self
            .scm
            .as_ref()
            .ok_or_else(|| Error::Config("block was built without SCM".into()))?;
        scm.forward(g, store, x)
    }

    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_traced(g, store, x)?.0)
    }

    pub fn forward_traced<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Option<FrmTrace<'g, T>>)> {
        let c = x.value().dims4()?[1];
        if c != self.channels {
            return Err(Error::dim(
                "channel",
                format!("AFE block expects {} channels, got {c}", self.channels),
            ));
        }
        let y = self.norm1.forward(g, store, x)?;
        let y = self.ce_forward(g, store, y)?;
        let s = self.squeeze.forward(g, store, y)?;

        let mut branches = Vec::with_capacity(2);
        if self.scm.is_some() {
            branches.push(self.scm_forward(g, store, s)?);
        }
        let mut trace = None;
        if let Some(frm) = &self.frm {
            let t = frm.forward_traced(g, store, s)?;
            branches.push(t.out);
            trace = Some(t);
        }
        let mixed = match branches.len() {
            0 => s,
            1 => branches[0],
            _ => concat_channels(&branches)?,
        };
        let x = x.add(self.fuse.forward(g, store, mixed)?)?;

        let h = self.norm2.forward(g, store, x)?;
        let h = self.mlp_in.forward(g, store, h)?.gelu();
        let h = self.mlp_dw.forward(g, store, h)?.gelu();
        let h = self.mlp_out.forward(g, store, h)?;
        Ok((x.add(h)?, trace))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Absent for the first stage, which follows the stem directly.
    pub downsample: Option<Conv2d>,
    pub blocks: Vec<AfeBlock>,
}

/// Fixed input scaling applied before the stem: images in `[0, 1]` map to
/// roughly zero mean and unit spread.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

fn normalize_input<'g, T: Element>(g: &'g Graph<T>, img: Var<'g, T>) -> Result<Var<'g, T>> {
    let mean = g.constant(Tensor::full(img.shape(), T::from_f64(INPUT_MEAN)));
    Ok(img.sub(mean)?.scale(T::from_f64(1.0 / INPUT_STD)))
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        config: &FANetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_channels;
        let stem = Conv2d::new(
            store,
            "stem",
            ConvSpec::new(config.in_channels, widths[0], 5, 4, 2, 1)?,
            Init::HeFanOut,
            rng,
        );
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let downsample = if i == 0 {
                None
            } else {
                Some(Conv2d::new(
                    store,
                    &format!("stage{}.downsample", i + 1),
                    ConvSpec::new(widths[i - 1], widths[i], 3, 2, 1, 1)?,
                    Init::HeFanOut,
                    rng,
                ))
            };
            let blocks = (0..config.stage_depths[i])
                .map(|j| {
                    AfeBlock::new(
                        store,
                        &format!("stage{}.block{j}", i + 1),
                        widths[i],
                        config,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(Backbone { stem, stages })
    }

    fn check_input(x: &Tensor<impl Element>) -> Result<()> {
        let [_, _, h, w] = x.dims4()?;
        if h == 0 || h % 32 != 0 {
            return Err(Error::dim(
                "height",
                format!("{h} is not a positive multiple of 32"),
            ));
        }
        if w == 0 || w % 32 != 0 {
            return Err(Error::dim(
                "width",
                format!("{w} is not a positive multiple of 32"),
            ));
        }
        Ok(())
    }

    /// Multi-scale features `S1..S4` at strides 4, 8, 16 and 32.
    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        img: Var<'g, T>,
    ) -> Result<[Var<'g, T>; 4]> {
        Self::check_input(&img.value())?;
        let mut x = self.stem.forward(g, store, normalize_input(g, img)?)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.downsample {
                x = down.forward(g, store, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(g, store, x)?;
            }
            feats.push(x);
        }
        Ok([feats[0], feats[1], feats[2], feats[3]])
    }

    /// Runs up to `stage` (1-based) and returns the FRM maps of its first block.
    pub fn probe_frm<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        img: Var<'g, T>,
        stage: usize,
    ) -> Result<FrmTrace<'g, T>> {
        if !(1..=self.stages.len()).contains(&stage) {
            return Err(Error::Validation(format!("stage {stage} is not in 1..=4")));
        }
        if self.stages[stage - 1].blocks[0].frm.is_none() {
            return Err(Error::Config("stage has no FRM".into()));
        }
        Self::check_input(&img.value())?;
        let mut x = self.stem.forward(g, store, normalize_input(g, img)?)?;
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(down) = &st.downsample {
                x = down.forward(g, store, x)?;
            }
            if i + 1 == stage {
                let (_, trace) = st.blocks[0].forward_traced(g, store, x)?;
                return Ok(trace.expect("checked above"));
            }
            for block in &st.blocks {
                x = block.forward(g, store, x)?;
            }
        }
        unreachable!("stage index checked above")
    }
}
