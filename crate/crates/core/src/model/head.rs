//! Reduced UperNet decoder: pyramid pooling on the coarsest feature map, a
//! top-down lateral pathway over the four levels, and a fused classifier.
//! Every hidden convolution is followed by GELU.

use rand::Rng;

use super::config::FANetConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tensor::{concat_channels, ConvSpec, Element, Graph, Var};

#[derive(Clone, Debug)]
pub struct Head {
    pub fpn_channels: usize,
    pub lateral: Vec<Conv2d>,
    pub ppm: Vec<(usize, Conv2d)>,
    pub ppm_fuse: Conv2d,
    pub fpn: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub classifier: Conv2d,
}

impl Head {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        config: &FANetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let fpn = config.head.fpn_channels;
        let widths = config.stage_channels;
        let mut conv = |store: &mut ParamStore<T>, name: String, spec: ConvSpec| {
            Conv2d::new(store, &name, spec, Init::HeFanOut, rng)
        };
        let lateral = (0..3)
            .map(|i| {
                Ok(conv(
                    store,
                    format!("head.lateral{}", i + 1),
                    ConvSpec::pointwise(widths[i], fpn)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ppm = config
            .head
            .ppm_bins
            .iter()
            .map(|&b| {
                Ok((
                    b,
                    conv(
                        store,
                        format!("head.ppm.bin{b}"),
                        ConvSpec::pointwise(widths[3], fpn)?,
                    ),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ppm_fuse = conv(
            store,
            "head.ppm.fuse".into(),
            ConvSpec::new(widths[3] + ppm.len() * fpn, fpn, 3, 1, 1, 1)?,
        );
        let fpn_convs = (0..3)
            .map(|i| {
                Ok(conv(
                    store,
                    format!("head.fpn{}", i + 1),
                    ConvSpec::new(fpn, fpn, 3, 1, 1, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = conv(
            store,
            "head.fuse".into(),
            ConvSpec::new(4 * fpn, fpn, 3, 1, 1, 1)?,
        );
        let classifier = conv(
            store,
            "head.classifier".into(),
            ConvSpec::pointwise(fpn, config.num_classes)?,
        );
        Ok(Head {
            fpn_channels: fpn,
            lateral,
            ppm,
            ppm_fuse,
            fpn: fpn_convs,
            fuse,
            classifier,
        })
    }

    /// Concatenation of `S4` with every pooled-and-restored branch, before the fuse conv.
    pub fn ppm_concat<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        s4: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let [_, _, h, w] = s4.value().dims4()?;
        let mut parts = vec![s4];
        for (bin, conv) in &self.ppm {
            // bins larger than the map are capped to its extent
            let pooled = s4.adaptive_avg_pool((*bin).min(h), (*bin).min(w))?;
            let y = conv.forward(g, store, pooled)?.gelu();
            parts.push(y.bilinear_resize(h, w)?);
        }
        concat_channels(&parts)
    }

    pub fn ppm_forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        s4: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let cat = self.ppm_concat(g, store, s4)?;
        Ok(self.ppm_fuse.forward(g, store, cat)?.gelu())
    }

    /// Per-pixel class logits at four times the `S1` resolution.
    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        feats: &[Var<'g, T>; 4],
    ) -> Result<Var<'g, T>> {
        let [n, _, h1, w1] = feats[0].value().dims4()?;
        for (i, f) in feats.iter().enumerate().skip(1) {
            let [fn_, _, h, w] = f.value().dims4()?;
            let (eh, ew) = (h1 >> i, w1 >> i);
            if fn_ != n || h != eh || w != ew || h1 % (1 << i) != 0 || w1 % (1 << i) != 0 {
                return Err(Error::dim(
                    "height",
                    format!(
                        "pyramid level {} is {fn_}x{h}x{w}, expected {n}x{eh}x{ew}",
                        i + 1
                    ),
                ));
            }
        }
        let mut levels = Vec::with_capacity(4);
        for (conv, f) in self.lateral.iter().zip(feats) {
            levels.push(conv.forward(g, store, *f)?.gelu());
        }
        levels.push(self.ppm_forward(g, store, feats[3])?);

        for i in (0..3).rev() {
            let [_, _, h, w] = levels[i].value().dims4()?;
            let up = levels[i + 1].bilinear_resize(h, w)?;
            levels[i] = levels[i].add(up)?;
        }
        let mut outs = Vec::with_capacity(4);
        for (i, level) in levels.iter().enumerate() {
            let y = match self.fpn.get(i) {
                Some(conv) => conv.forward(g, store, *level)?.gelu(),
                None => *level,
            };
            outs.push(y.bilinear_resize(h1, w1)?);
        }
        let fused = self.fuse.forward(g, store, concat_channels(&outs)?)?.gelu();
        let logits = self.classifier.forward(g, store, fused)?;
        logits.bilinear_resize(h1 * 4, w1 * 4)
    }
}
