//! The joint classification-reconstruction network.
//!
//! The encoder is a stack of stages; stage l applies its convolutions,
//! optionally pools, and exposes its output x_{l+1} = f_l(x_l). A stage
//! marked `lateral` taps its convolved map right before the pool through a
//! bottleneck, z_l = h_l(x_l): ReLU followed by a 1x1 convolution down to
//! `bottleneck` channels. Tapping ahead of the pool matters for open-set
//! scoring: the max pool deliberately discards low-contrast structure, and
//! the latents are where that structure must survive. The decoder folds the
//! taps back top-down,
//!
//!   xr_l = g_l(xr_{l+1} + hr_l(z_l))
//!
//! where hr_l is a 1x1 reprojection to the stage width, xr_{l+1} arrives
//! nearest-neighbour upsampled by 2 per pooling between the taps (the
//! topmost xr_{L+1} is the zero tensor, so the sum is omitted), and g_l is
//! one 3x3 convolution plus ReLU. Pixels pooled away before the first tap
//! are recovered by trailing upsampling.
//!
//! The `ladder` variant replaces h_l and hr_l with identities; `plain` drops
//! the laterals and decoder entirely and is the supervised-only baseline.
//!
//! The latent code z used for open-set scoring is the concatenation of the
//! globally max-pooled z_l, taken from the bottleneck itself, before
//! reprojection.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::tape::{Phase, Tape, ValueId};
use crate::tensor::Tensor;

/// Pooling always halves the spatial dims, mirroring the stride-2 windows
/// the encoder was designed around.
pub const POOL_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dhrnet,
    Ladder,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Activation vector y alone; scoring on it reproduces the Openmax
    /// baseline.
    Av,
    /// Concatenation [y, z]; scoring on it is the full method.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub convs: usize,
    pub channels: usize,
    pub pool: bool,
    pub lateral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DhrNetConfig {
    pub variant: Variant,
    /// Input as [channels, height, width].
    pub input: [usize; 3],
    pub classes: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Last field: stages serialize as an array of tables, which TOML
    /// requires after all scalar keys.
    pub stages: Vec<StageConfig>,
}

impl Default for DhrNetConfig {
    /// The digit-scale reference backbone: five 3x3 convolutions of 100
    /// channels, pooling after every second one, laterals after both
    /// poolings, 32-channel bottlenecks, and a 500-unit hidden layer.
    fn default() -> Self {
        DhrNetConfig {
            variant: Variant::Dhrnet,
            input: [1, 28, 28],
            classes: 10,
            stages: vec![
                StageConfig { convs: 2, channels: 100, pool: true, lateral: true },
                StageConfig { convs: 2, channels: 100, pool: true, lateral: true },
                StageConfig { convs: 1, channels: 100, pool: false, lateral: false },
            ],
            bottleneck: 32,
            hidden: 500,
            kernel: 3,
        }
    }
}

impl DhrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "{} classes cannot form a classification problem",
                self.classes
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("degenerate input shape {:?}", self.input)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one encoder stage is required".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden layer needs at least one unit".into()));
        }
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck needs at least one channel".into()));
        }
        LayerSpec::Conv2d { out_channels: 1, kernel: self.kernel }.validate()?;
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for (i, s) in self.stages.iter().enumerate() {
            if s.convs == 0 || s.channels == 0 {
                return Err(Error::Config(format!("stage {i} has no convolutions or channels")));
            }
            if s.pool {
                if h % POOL_WINDOW != 0 || w % POOL_WINDOW != 0 {
                    return Err(Error::Config(format!(
                        "stage {i} pools a {h}x{w} map that {POOL_WINDOW} does not divide"
                    )));
                }
                h /= POOL_WINDOW;
                w /= POOL_WINDOW;
            }
        }
        Ok(())
    }

    /// Stage indices carrying laterals; empty for the plain variant.
    pub fn lateral_stages(&self) -> Vec<usize> {
        match self.variant {
            Variant::Plain => Vec::new(),
            _ => self
                .stages
                .iter()
                .enumerate()
                .filter(|(_, s)| s.lateral)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Width of one pooled lateral code.
    fn lateral_dim(&self, stage: usize) -> usize {
        match self.variant {
            Variant::Ladder => self.stages[stage].channels,
            _ => self.bottleneck,
        }
    }

    /// Total latent width: sum of pooled lateral widths in stage order.
    pub fn z_dim(&self) -> usize {
        self.lateral_stages()
            .iter()
            .map(|&s| self.lateral_dim(s))
            .sum()
    }

    pub fn feature_dim(&self, mode: FeatureMode) -> usize {
        match mode {
            FeatureMode::Av => self.classes,
            FeatureMode::Joint => self.classes + self.z_dim(),
        }
    }

    /// Spatial size at the output of each stage.
    fn stage_spatial(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        self.stages
            .iter()
            .map(|s| {
                if s.pool {
                    h /= POOL_WINDOW;
                    w /= POOL_WINDOW;
                }
                (h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct NamedParam {
    name: String,
    value: Tensor,
}

#[derive(Debug, Clone)]
pub struct DhrNet {
    config: DhrNetConfig,
    params: Vec<NamedParam>,
}

/// Tape handles produced by a traced forward pass. Parameter ids are aligned
/// with `DhrNet::param_count` order so the trainer can map gradients back.
pub struct TracedForward {
    pub input: ValueId,
    pub y: ValueId,
    /// Raw lateral maps z_l, shallow to deep.
    pub z_maps: Vec<ValueId>,
    /// Globally max-pooled z_l, shallow to deep.
    pub z_pooled: Vec<ValueId>,
    pub recon: Option<ValueId>,
    pub params: Vec<ValueId>,
}

/// Plain-tensor outputs of an untraced (evaluation) forward pass.
pub struct ForwardOutput {
    /// Logits, [B, N].
    pub y: Tensor,
    /// Concatenated pooled latent code, [B, z_dim].
    pub z: Tensor,
    /// Raw lateral maps, for diagnostics.
    pub z_maps: Vec<Tensor>,
    pub recon: Option<Tensor>,
}

impl DhrNet {
    /// He-initialized network; biases start at zero. The draw order is the
    /// parameter declaration order, so one seed pins every weight.
    pub fn build(config: DhrNetConfig, seed: u64) -> Result<DhrNet> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let he_conv = |name: String, oc: usize, ic: usize, k: usize, rng: &mut ChaCha12Rng| {
            let sd = (2.0 / (ic * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, sd).unwrap();
            let w: Vec<f64> = (0..oc * ic * k * k).map(|_| dist.sample(rng)).collect();
            vec![
                NamedParam { name: format!("{name}.w"), value: Tensor::new(vec![oc, ic, k, k], w).unwrap() },
                NamedParam { name: format!("{name}.b"), value: Tensor::zeros(vec![oc]) },
            ]
        };
        let he_dense = |name: String, fin: usize, fout: usize, rng: &mut ChaCha12Rng| {
            let sd = (2.0 / fin as f64).sqrt();
            let dist = Normal::new(0.0, sd).unwrap();
            let w: Vec<f64> = (0..fin * fout).map(|_| dist.sample(rng)).collect();
            vec![
                NamedParam { name: format!("{name}.w"), value: Tensor::new(vec![fin, fout], w).unwrap() },
                NamedParam { name: format!("{name}.b"), value: Tensor::zeros(vec![fout]) },
            ]
        };

        let mut in_ch = config.input[0];
        for (si, stage) in config.stages.iter().enumerate() {
            for ci in 0..stage.convs {
                params.extend(he_conv(
                    format!("enc.s{si}.c{ci}"),
                    stage.channels,
                    in_ch,
                    config.kernel,
                    &mut rng,
                ));
                in_ch = stage.channels;
            }
        }
        let laterals = config.lateral_stages();
        if config.variant == Variant::Dhrnet {
            for (li, &s) in laterals.iter().enumerate() {
                params.extend(he_conv(
                    format!("lat.l{li}.h"),
                    config.bottleneck,
                    config.stages[s].channels,
                    1,
                    &mut rng,
                ));
                params.extend(he_conv(
                    format!("lat.l{li}.r"),
                    config.stages[s].channels,
                    config.bottleneck,
                    1,
                    &mut rng,
                ));
            }
        }
        for (li, &s) in laterals.iter().enumerate() {
            let out_ch = if li == 0 {
                config.input[0]
            } else {
                config.stages[laterals[li - 1]].channels
            };
            params.extend(he_conv(
                format!("dec.l{li}.g"),
                out_ch,
                config.stages[s].channels,
                config.kernel,
                &mut rng,
            ));
        }
        let spatial = config.stage_spatial();
        let (fh, fw) = spatial[config.stages.len() - 1];
        let flat = config.stages.last().unwrap().channels * fh * fw;
        params.extend(he_dense("head.fc1".into(), flat, config.hidden, &mut rng));
        params.extend(he_dense("head.fc2".into(), config.hidden, config.classes, &mut rng));

        Ok(DhrNet { config, params })
    }

    pub fn config(&self) -> &DhrNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_at(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn set_param_at(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::Input(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.params[i].name,
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        self.set_param_at(i, value)
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from build"))
    }

    /// Number of poolings in stages `from..=to` of the encoder.
    /// Pool count over the half-open stage range [from, to).
    fn pools_in(&self, from: usize, to: usize) -> usize {
        self.config.stages[from..to].iter().filter(|s| s.pool).count()
    }

    /// Builds the full forward graph on `tape`. Dropout fires only in the
    /// train phase; `rng` is untouched otherwise.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        phase: Phase,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<TracedForward> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [self.config.input[0], self.config.input[1], self.config.input[2]] {
            return Err(Error::Input(format!(
                "input shape {xs:?} does not match configured {:?}",
                self.config.input
            )));
        }
        let batch = xs[0];
        let input = tape.leaf(x.clone())?;
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<_>>()?;
        let pid = |name: &str| param_ids[self.param_index(name)];

        let laterals = self.config.lateral_stages();
        let mut cur = input;
        let mut z_maps = Vec::new();
        for (si, stage) in self.config.stages.iter().enumerate() {
            for ci in 0..stage.convs {
                let c = tape.conv2d(cur, pid(&format!("enc.s{si}.c{ci}.w")), pid(&format!("enc.s{si}.c{ci}.b")))?;
                cur = tape.relu(c)?;
            }
            // the tap sits before the stage pool: the latents integrate the
            // full-resolution appearance the trunk's max pool discards
            if let Some(li) = laterals.iter().position(|&s| s == si) {
                let z = match self.config.variant {
                    Variant::Dhrnet => {
                        let a = tape.relu(cur)?;
                        tape.conv2d(a, pid(&format!("lat.l{li}.h.w")), pid(&format!("lat.l{li}.h.b")))?
                    }
                    Variant::Ladder => cur,
                    Variant::Plain => unreachable!("plain has no laterals"),
                };
                z_maps.push(z);
            }
            if stage.pool {
                cur = tape.maxpool2d(cur, POOL_WINDOW)?;
            }
            cur = tape.dropout(cur, dropout, phase, rng)?;
        }

        let (fh, fw) = *self.config.stage_spatial().last().unwrap();
        let flat_dim = self.config.stages.last().unwrap().channels * fh * fw;
        let flat = tape.reshape(cur, vec![batch, flat_dim])?;
        let h1 = tape.dense(flat, pid("head.fc1.w"), pid("head.fc1.b"))?;
        let h1 = tape.relu(h1)?;
        let h1 = tape.dropout(h1, dropout, phase, rng)?;
        let y = tape.dense(h1, pid("head.fc2.w"), pid("head.fc2.b"))?;

        let mut z_pooled = Vec::with_capacity(z_maps.len());
        for &z in &z_maps {
            z_pooled.push(tape.global_max_pool(z)?);
        }

        let recon = if laterals.is_empty() {
            None
        } else {
            let mut top: Option<ValueId> = None;
            for li in (0..laterals.len()).rev() {
                let a = match self.config.variant {
                    Variant::Dhrnet => tape.conv2d(
                        z_maps[li],
                        pid(&format!("lat.l{li}.r.w")),
                        pid(&format!("lat.l{li}.r.b")),
                    )?,
                    Variant::Ladder => z_maps[li],
                    Variant::Plain => unreachable!(),
                };
                // xr_{L+1} is the zero tensor, so the topmost sum is just a.
                let s = match top {
                    None => a,
                    Some(mut t) => {
                        for _ in 0..self.pools_in(laterals[li], laterals[li + 1]) {
                            t = tape.upsample2x(t)?;
                        }
                        tape.add(t, a)?
                    }
                };
                let g = tape.conv2d(s, pid(&format!("dec.l{li}.g.w")), pid(&format!("dec.l{li}.g.b")))?;
                // the bottom stage regresses pixels, so it stays linear; a
                // clamped output would zero the whole path's gradient the
                // moment its pre-activations go negative everywhere
                top = Some(if li == 0 { g } else { tape.relu(g)? });
            }
            let mut r = top.unwrap();
            for _ in 0..self.pools_in(0, laterals[0]) {
                r = tape.upsample2x(r)?;
            }
            Some(r)
        };

        Ok(TracedForward {
            input,
            y,
            z_maps,
            z_pooled,
            recon,
            params: param_ids,
        })
    }

    /// Deterministic evaluation pass returning plain tensors.
    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        // eval-phase dropout draws nothing, so the RNG seed here is inert
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let t = self.forward_traced(&mut tape, x, Phase::Eval, 0.0, &mut rng)?;
        let batch = x.shape()[0];
        let z_dim = self.config.z_dim();
        let mut z = vec![0.0; batch * z_dim];
        let mut col = 0;
        for &zp in &t.z_pooled {
            let v = tape.value(zp);
            let w = v.shape()[1];
            for b in 0..batch {
                z[b * z_dim + col..b * z_dim + col + w].copy_from_slice(v.row(b));
            }
            col += w;
        }
        Ok(ForwardOutput {
            y: tape.value(t.y).clone(),
            z: Tensor::new(vec![batch, z_dim], z)?,
            z_maps: t.z_maps.iter().map(|&id| tape.value(id).clone()).collect(),
            recon: t.recon.map(|id| tape.value(id).clone()),
        })
    }

    /// Feature matrix [B, D] for open-set scoring: the logits alone (`av`)
    /// or logits with the latent code appended (`joint`). Features are raw
    /// activations; nothing is normalized.
    pub fn extract_features(&self, x: &Tensor, mode: FeatureMode) -> Result<Tensor> {
        if mode == FeatureMode::Joint && self.config.variant == Variant::Plain {
            return Err(Error::Config(
                "joint features need lateral codes; the plain variant has none".into(),
            ));
        }
        let out = self.forward_eval(x)?;
        let batch = x.shape()[0];
        let d = self.config.feature_dim(mode);
        let n = self.config.classes;
        let mut f = vec![0.0; batch * d];
        for b in 0..batch {
            f[b * d..b * d + n].copy_from_slice(out.y.row(b));
            if mode == FeatureMode::Joint {
                f[b * d + n..(b + 1) * d].copy_from_slice(out.z.row(b));
            }
        }
        Tensor::new(vec![batch, d], f)
    }
}
