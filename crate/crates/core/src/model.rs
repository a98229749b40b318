//! The assembled network: LAB and/or YUV branches, each with a luminance
//! path (attention and Fourier filtering) and per-plane chroma denoisers,
//! fused by squeeze-and-excite and reconstructed to RGB.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::blocks::{CdBlock, Conv, Deconv, Fbp, Mhsa, Msef, LEAKY_SLOPE};
use crate::checkpoint;
use crate::colorspace::{self, ColorSpace, WhitePoint};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    Lab,
    Yuv,
    Both,
}

impl Branches {
    pub fn spaces(self) -> &'static [ColorSpace] {
        match self {
            Branches::Lab => &[ColorSpace::Lab],
            Branches::Yuv => &[ColorSpace::Yuv],
            Branches::Both => &[ColorSpace::Lab, ColorSpace::Yuv],
        }
    }
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" => Ok(Branches::Lab),
            "yuv" => Ok(Branches::Yuv),
            "both" => Ok(Branches::Both),
            _ => Err(Error::Config(format!(
                "unknown branch set `{s}` (expected lab, yuv or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width of the luminance path and of the branch fusion.
    pub base_width: usize,
    /// Width of the first chroma-denoiser scale; later scales use 2x, 4x, 4x.
    pub cd_base_width: usize,
    pub heads: usize,
    pub use_fbp: bool,
    pub use_msef: bool,
    pub branches: Branches,
    /// One chroma denoiser shared by every chroma plane.
    pub share_cd_weights: bool,
    pub max_attention_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            cd_base_width: 8,
            heads: 4,
            use_fbp: true,
            use_msef: true,
            branches: Branches::Both,
            share_cd_weights: false,
            max_attention_tokens: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.cd_base_width == 0 || self.heads == 0 {
            return Err(Error::Config(
                "widths and head count must be positive".into(),
            ));
        }
        if self.base_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "base_width {} is not divisible by heads {}",
                self.base_width, self.heads
            )));
        }
        if (4 * self.cd_base_width) % self.heads != 0 {
            return Err(Error::Config(format!(
                "chroma bottleneck width {} is not divisible by heads {}",
                4 * self.cd_base_width,
                self.heads
            )));
        }
        if self.max_attention_tokens == 0 {
            return Err(Error::Config(
                "max_attention_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Label of the ablation variant, e.g. `lab+msef-fbp`.
    pub fn variant_name(&self) -> String {
        let b = match self.branches {
            Branches::Lab => "lab",
            Branches::Yuv => "yuv",
            Branches::Both => "both",
        };
        format!(
            "{b}{}msef{}fbp",
            if self.use_msef { "+" } else { "-" },
            if self.use_fbp { "+" } else { "-" }
        )
    }

    /// Largest square tile side whose attention stays under the token limit.
    pub fn max_square_side(&self) -> usize {
        let side = (self.max_attention_tokens as f64).sqrt().floor() as usize;
        4 * side
    }

    fn architecture_eq(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            seed: 0,
            max_attention_tokens: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Luminance path: encoder to quarter resolution, attention, decoder with
/// additive skips, projection back to one plane with a residual, then
/// optional Fourier filtering.
#[derive(Clone, Debug)]
pub struct LumPath {
    pub entry: Conv,
    pub down: [Conv; 2],
    pub mhsa: Mhsa,
    pub up: [Deconv; 2],
    pub proj: Conv,
    pub fbp: Option<Fbp>,
}

impl LumPath {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.base_width;
        let name = format!("{prefix}.lum");
        let conv = |store: &mut ParamStore<T>, init: &mut Init, part: &str, cin, cout, stride| {
            Conv::new(
                store,
                init,
                &format!("{name}.{part}"),
                3,
                cin,
                cout,
                stride,
                true,
            )
        };
        let entry = conv(store, init, "entry", 1, c, 1)?;
        let down = [
            conv(store, init, "down1", c, c, 2)?,
            conv(store, init, "down2", c, c, 2)?,
        ];
        let mhsa = Mhsa::new(
            store,
            init,
            &format!("{name}.mhsa"),
            c,
            cfg.heads,
            cfg.max_attention_tokens,
        )?;
        let up = [
            Deconv::new(store, init, &format!("{name}.up1"), 3, c, c)?,
            Deconv::new(store, init, &format!("{name}.up2"), 3, c, c)?,
        ];
        let proj = conv(store, init, "proj", c, 1, 1)?;
        let fbp = if cfg.use_fbp {
            Some(Fbp::new(store, init, &format!("{prefix}.fbp"))?)
        } else {
            None
        };
        Ok(Self {
            entry,
            down,
            mhsa,
            up,
            proj,
            fbp,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w, _) = g.value(x).hwc()?;
        let (ph, pw) = (h.next_multiple_of(4), w.next_multiple_of(4));
        let padded = if (ph, pw) != (h, w) {
            g.reflect_pad(x, ph - h, pw - w)?
        } else {
            x
        };
        let e = self.entry.forward(g, padded)?;
        let f0 = g.leaky_relu(e, LEAKY_SLOPE);
        let d = self.down[0].forward(g, f0)?;
        let f1 = g.leaky_relu(d, LEAKY_SLOPE);
        let d = self.down[1].forward(g, f1)?;
        let f2 = g.leaky_relu(d, LEAKY_SLOPE);
        let a = self.mhsa.forward(g, f2)?;
        let y = g.add(f2, a)?;
        let u = self.up[0].forward(g, y)?;
        let u = g.leaky_relu(u, LEAKY_SLOPE);
        let y = g.add(u, f1)?;
        let u = self.up[1].forward(g, y)?;
        let u = g.leaky_relu(u, LEAKY_SLOPE);
        let y = g.add(u, f0)?;
        let p = self.proj.forward(g, y)?;
        let p = if (ph, pw) != (h, w) {
            g.crop(p, h, w)?
        } else {
            p
        };
        let l = g.add(p, x)?;
        match &self.fbp {
            Some(fbp) => fbp.forward(g, l),
            None => Ok(l),
        }
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        self.mhsa
            .check_tokens(h.next_multiple_of(4) / 4, w.next_multiple_of(4) / 4)
    }

    fn flops(&self, h: usize, w: usize) -> (u64, u64) {
        let (ph, pw) = (h.next_multiple_of(4), w.next_multiple_of(4));
        let mut f = self.entry.flops(ph, pw);
        f += self.down[0].flops(ph, pw);
        f += self.down[1].flops(ph / 2, pw / 2);
        f += self.mhsa.flops(ph / 4, pw / 4);
        f += self.up[0].flops(ph / 4, pw / 4);
        f += self.up[1].flops(ph / 2, pw / 2);
        f += self.proj.flops(ph, pw);
        let fbp = self.fbp.as_ref().map_or(0, |b| b.flops(h, w));
        (f, fbp)
    }
}

/// One color-space branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub space: ColorSpace,
    pub prefix: String,
    pub lum: LumPath,
    /// Indices into [`LtcfNet::denoisers`] for the two chroma planes.
    pub cd: [usize; 2],
    pub lift: Conv,
    pub msef: Option<Msef>,
    pub head: Conv,
}

/// How the final output is limited to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputClamp {
    /// Exact clamp with its true (zero outside) gradient.
    Hard,
    /// Clamped forward, identity gradient within a margin of the range.
    StraightThrough,
}

const ST_MARGIN: f64 = 0.25;

/// Per-module complexity row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleStats {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct LtcfNet {
    pub config: ModelConfig,
    pub white_point: WhitePoint,
    pub store: ParamStore,
    pub branches: Vec<Branch>,
    pub denoisers: Vec<(String, CdBlock)>,
    pub fusion: Option<Conv>,
}

impl LtcfNet {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let mut denoisers = Vec::new();
        let mut add_cd = |store: &mut ParamStore, init: &mut Init, name: String| -> Result<usize> {
            let cd = CdBlock::new(
                store,
                init,
                &name,
                config.cd_base_width,
                config.heads,
                config.max_attention_tokens,
            )?;
            denoisers.push((name, cd));
            Ok(denoisers.len() - 1)
        };
        let shared = if config.share_cd_weights {
            Some(add_cd(&mut store, &mut init, "cd_shared".into())?)
        } else {
            None
        };
        let mut branches = Vec::new();
        for &space in config.branches.spaces() {
            let prefix = match space {
                ColorSpace::Lab => "lab",
                ColorSpace::Yuv => "yuv",
                ColorSpace::Rgb => unreachable!("no RGB branch"),
            }
            .to_string();
            let lum = LumPath::new(&mut store, &mut init, &prefix, config)?;
            let names = space.plane_names();
            let mut cd = [0; 2];
            for (i, slot) in cd.iter_mut().enumerate() {
                *slot = match shared {
                    Some(s) => s,
                    None => {
                        let plane = names[i + 1].trim_end_matches('*').to_ascii_lowercase();
                        add_cd(&mut store, &mut init, format!("{prefix}.cd_{plane}"))?
                    }
                };
            }
            let c = config.base_width;
            let lift = Conv::new(
                &mut store,
                &mut init,
                &format!("{prefix}.lift"),
                3,
                3,
                c,
                1,
                true,
            )?;
            let msef = if config.use_msef {
                Some(Msef::new(
                    &mut store,
                    &mut init,
                    &format!("{prefix}.msef"),
                    c,
                )?)
            } else {
                None
            };
            let head = Conv::new(
                &mut store,
                &mut init,
                &format!("{prefix}.head"),
                3,
                c,
                3,
                1,
                true,
            )?;
            branches.push(Branch {
                space,
                prefix,
                lum,
                cd,
                lift,
                msef,
                head,
            });
        }
        let fusion = if branches.len() > 1 {
            Some(Conv::new(
                &mut store,
                &mut init,
                "fusion",
                3,
                3 * branches.len(),
                3,
                1,
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            white_point: WhitePoint::D65,
            store,
            branches,
            denoisers,
            fusion,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Rejects inputs whose attention maps would exceed the token limit.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        for b in &self.branches {
            b.lum.check_size(h, w)?;
        }
        for (_, cd) in &self.denoisers {
            cd.bottleneck
                .check_tokens(h.next_multiple_of(8) / 8, w.next_multiple_of(8) / 8)?;
        }
        Ok(())
    }

    /// Records the forward pass of one `H x W x 3` RGB image. Training
    /// graphs use a straight-through output clamp, inference graphs a hard
    /// one.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, rgb: Var) -> Result<Var> {
        let clamp = if g.grad_enabled() {
            OutputClamp::StraightThrough
        } else {
            OutputClamp::Hard
        };
        self.forward_with(g, rgb, clamp)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        rgb: Var,
        clamp: OutputClamp,
    ) -> Result<Var> {
        let (h, w, c) = g.value(rgb).hwc()?;
        if c != 3 {
            return Err(Error::shape(
                "forward",
                format!("expected RGB input, got {c} planes"),
            ));
        }
        self.check_input_size(h, w)?;
        let mut estimates = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            estimates.push(self.branch_forward(g, b, rgb)?);
        }
        let merged = match &self.fusion {
            Some(fusion) => {
                let cat = g.concat(&estimates)?;
                fusion.forward(g, cat)?
            }
            None => estimates[0],
        };
        let f = match clamp {
            OutputClamp::Hard => Unary::Clamp { lo: 0.0, hi: 1.0 },
            OutputClamp::StraightThrough => Unary::StraightThroughClamp {
                lo: 0.0,
                hi: 1.0,
                margin: ST_MARGIN,
            },
        };
        Ok(g.unary(merged, f))
    }

    fn branch_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Branch, rgb: Var) -> Result<Var> {
        let planes = colorspace::to_net(g, rgb, b.space, &self.white_point)?;
        let lum = g.narrow(planes, 0, 1)?;
        let l = b.lum.forward(g, lum)?;
        let mut feats = vec![l];
        for (i, &cd) in b.cd.iter().enumerate() {
            let plane = g.narrow(planes, i + 1, 1)?;
            feats.push(self.denoisers[cd].1.forward(g, plane)?);
        }
        let cat = g.concat(&feats)?;
        let lifted = b.lift.forward(g, cat)?;
        let lifted = g.leaky_relu(lifted, LEAKY_SLOPE);
        let fused = match &b.msef {
            Some(m) => m.forward(g, lifted)?,
            None => lifted,
        };
        let delta = b.head.forward(g, fused)?;
        let out = g.add(delta, planes)?;
        colorspace::from_net(g, out, b.space, &self.white_point)
    }

    /// Enhances one image without recording gradients.
    pub fn enhance(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(rgb.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Per-module parameter and FLOP rows at an `h x w` input. Rows
    /// partition the parameters, so their sums are the totals.
    pub fn module_stats(&self, h: usize, w: usize) -> Vec<ModuleStats> {
        let mut rows = Vec::new();
        let params = |p: &str| self.store.num_scalars_with_prefix(&format!("{p}."));
        let hw = (h * w) as u64;
        for b in &self.branches {
            let p = &b.prefix;
            let (lum, fbp) = b.lum.flops(h, w);
            // Two 3x3 colour matrices per pixel for the forward transform,
            // two for the inverse.
            rows.push(ModuleStats {
                name: format!("{p}.color"),
                params: 0,
                flops: 4 * 2 * 9 * hw,
            });
            rows.push(ModuleStats {
                name: format!("{p}.lum"),
                params: params(&format!("{p}.lum")),
                flops: lum,
            });
            if b.lum.fbp.is_some() {
                rows.push(ModuleStats {
                    name: format!("{p}.fbp"),
                    params: params(&format!("{p}.fbp")),
                    flops: fbp,
                });
            }
            rows.push(ModuleStats {
                name: format!("{p}.lift"),
                params: params(&format!("{p}.lift")),
                flops: b.lift.flops(h, w),
            });
            if let Some(m) = &b.msef {
                rows.push(ModuleStats {
                    name: format!("{p}.msef"),
                    params: params(&format!("{p}.msef")),
                    flops: m.flops(h, w),
                });
            }
            rows.push(ModuleStats {
                name: format!("{p}.head"),
                params: params(&format!("{p}.head")),
                flops: b.head.flops(h, w),
            });
        }
        let mut uses = vec![0u64; self.denoisers.len()];
        for b in &self.branches {
            for &i in &b.cd {
                uses[i] += 1;
            }
        }
        for ((name, cd), n) in self.denoisers.iter().zip(uses) {
            rows.push(ModuleStats {
                name: name.clone(),
                params: params(name),
                flops: n * cd.flops(h, w),
            });
        }
        if let Some(f) = &self.fusion {
            rows.push(ModuleStats {
                name: "fusion".into(),
                params: params("fusion"),
                flops: f.flops(h, w),
            });
        }
        rows
    }

    /// Multiply-accumulates times two for convolutions, matrix products and
    /// attention, plus `5 N log2 N` per FFT. Elementwise work is not counted.
    pub fn estimate_flops(&self, h: usize, w: usize) -> u64 {
        self.module_stats(h, w).iter().map(|r| r.flops).sum()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let tensors: Vec<(&str, &Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.as_str(), &p.value))
            .collect();
        checkpoint::write(path, "model", &config, &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = checkpoint::read(path)?;
        let config = Self::config_of(&file)?;
        let mut net = Self::build(&config)?;
        net.assign(file.tensors)?;
        Ok(net)
    }

    /// Loads weights into this network, which must have the same
    /// architecture as the one that wrote the file.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let file = checkpoint::read(path)?;
        let config = Self::config_of(&file)?;
        if !config.architecture_eq(&self.config) {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds variant {} (base width {}, heads {}), network is {} (base width {}, heads {})",
                config.variant_name(),
                config.base_width,
                config.heads,
                self.config.variant_name(),
                self.config.base_width,
                self.config.heads
            )));
        }
        self.assign(file.tensors)
    }

    fn config_of(file: &checkpoint::TensorFile) -> Result<ModelConfig> {
        if file.kind != "model" {
            return Err(Error::ConfigMismatch(format!(
                "file holds `{}` weights, not a model",
                file.kind
            )));
        }
        serde_json::from_str(&file.config)
            .map_err(|e| Error::Corrupt(format!("unreadable model config: {e}")))
    }

    fn assign(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, network has {}",
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, t) in &tensors {
            let p = self.store.by_name(name).ok_or_else(|| {
                Error::ConfigMismatch(format!(
                    "checkpoint tensor `{name}` does not exist in the network"
                ))
            })?;
            if p.value.shape() != t.shape() {
                return Err(Error::TensorShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (name, t) in tensors {
            self.store.by_name_mut(&name).expect("checked above").value = t;
        }
        Ok(())
    }
}
