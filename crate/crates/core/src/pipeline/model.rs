//! Network assembly: per-modality encoders and MIB-TRL blocks, fusion,
//! prediction head, reconstruction decoders and SimSiam heads.

use serde::{Deserialize, Serialize};

use crate::data::{resample_time, Modality, MultimodalSample, MODALITIES};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, MeanConcatFusion, PredictHead};
use crate::graph::Var;
use crate::layers::{Ctx, Mlp};
use crate::losses::SimSiamHeads;
use crate::mibtrl::{Mibtrl, MibtrlConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Transformer,
    /// Temporal means of the three streams, concatenated, then linear maps.
    MeanConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub entry_kernel: usize,
    pub positional: bool,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            n_blocks: 4,
            kernel_size: 2,
            entry_kernel: 3,
            positional: true,
            fusion: FusionKind::Transformer,
        }
    }
}

impl ModelConfig {
    pub fn mibtrl(&self) -> MibtrlConfig {
        MibtrlConfig {
            d: self.d,
            n_blocks: self.n_blocks,
            kernel_size: self.kernel_size,
            entry_kernel: self.entry_kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug)]
pub enum FusionModule {
    Transformer { fusion: Fusion, head: PredictHead },
    MeanConcat(MeanConcatFusion),
}

/// Layer layout derived from a config and the input widths.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoders: [Encoder; 3],
    pub mibtrl: [Mibtrl; 3],
    pub fusion: FusionModule,
    pub dec_en: [Mlp; 3],
    pub dec_mib: [Mlp; 3],
    pub simsiam: SimSiamHeads,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub e: [Var; 3],
    pub z: [Var; 3],
    /// Fused sequence; absent without the transformer fusion.
    pub y: Option<Var>,
    /// Fused representation pooled over time, `[B, d]`.
    pub pooled_y: Var,
    pub pred: Var,
}

fn try_map3<U>(f: impl Fn(Modality) -> Result<U>) -> Result<[U; 3]> {
    let [a, t, v] = MODALITIES.map(f);
    Ok([a?, t?, v?])
}

impl Architecture {
    pub fn new(cfg: &ModelConfig, widths: [usize; 3]) -> Result<Self> {
        if cfg.d == 0 {
            return Err(Error::Parameter("hidden width must be positive".into()));
        }
        let fusion = match cfg.fusion {
            FusionKind::Transformer => FusionModule::Transformer {
                fusion: Fusion::new("tf", cfg.d, cfg.heads),
                head: PredictHead::new("head", cfg.d),
            },
            FusionKind::MeanConcat => FusionModule::MeanConcat(MeanConcatFusion::new("nf", cfg.d)),
        };
        Ok(Architecture {
            encoders: try_map3(|m| {
                Encoder::new(&format!("enc.{m}"), widths[m.index()], cfg.d, cfg.heads, cfg.positional)
            })?,
            mibtrl: try_map3(|m| Mibtrl::new(&format!("mib.{m}"), cfg.mibtrl()))?,
            fusion,
            dec_en: MODALITIES.map(|m| Mlp::new(&format!("dec_en.{m}"), cfg.d, cfg.d, widths[m.index()])),
            dec_mib: MODALITIES.map(|m| Mlp::new(&format!("dec_mib.{m}"), cfg.d, cfg.d, widths[m.index()])),
            simsiam: SimSiamHeads::new("sim", cfg.d),
        })
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for m in 0..3 {
            self.encoders[m].register(store, seed)?;
            self.mibtrl[m].register(store, seed)?;
        }
        match &self.fusion {
            FusionModule::Transformer { fusion, head } => {
                fusion.register(store, seed)?;
                head.register(store, seed)?;
            }
            FusionModule::MeanConcat(nf) => nf.register(store, seed)?,
        }
        for m in 0..3 {
            self.dec_en[m].register(store, seed)?;
            self.dec_mib[m].register(store, seed)?;
        }
        self.simsiam.register(store, seed)
    }

    /// `inputs[m]: [B, T, f_m]` in `a, t, v` order.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, inputs: [Var; 3]) -> Result<ForwardOut> {
        let mut e = [inputs[0]; 3];
        let mut z = [inputs[0]; 3];
        for m in 0..3 {
            e[m] = self.encoders[m].forward(cx, inputs[m])?;
            z[m] = self.mibtrl[m].forward(cx, e[m])?.z;
        }
        let (a, t, v) = (z[0], z[1], z[2]);
        let (y, pooled_y, pred) = match &self.fusion {
            FusionModule::Transformer { fusion, head } => {
                let out = fusion.forward(cx, t, a, v)?;
                let pooled = cx.g.mean_time(out.y)?;
                let pred = head.forward_pooled(cx, pooled)?;
                (Some(out.y), pooled, pred)
            }
            FusionModule::MeanConcat(nf) => {
                let (pooled, pred) = nf.forward(cx, t, a, v)?;
                (None, pooled, pred)
            }
        };
        Ok(ForwardOut {
            e,
            z,
            y,
            pooled_y,
            pred,
        })
    }
}

/// One network's parameters together with everything needed to rebuild it.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub role: Role,
    pub config: ModelConfig,
    /// Feature widths `f_m` in `a, t, v` order.
    pub widths: [usize; 3],
    /// Shared sequence length after resampling to the text length.
    pub t_common: usize,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub arch: Architecture,
}

impl ModelBundle {
    pub fn new(role: Role, config: ModelConfig, widths: [usize; 3], t_common: usize, seed: u64) -> Result<Self> {
        if t_common == 0 {
            return Err(Error::Parameter("sequence length must be positive".into()));
        }
        let arch = Architecture::new(&config, widths)?;
        let mut params = ParamStore::new();
        arch.register(&mut params, seed)?;
        Ok(ModelBundle {
            role,
            config,
            widths,
            t_common,
            seed,
            params,
            arch,
        })
    }

    /// Marks every parameter non-trainable.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, p)| !p.trainable)
    }

    /// Whether `other` has the same layers and parameter shapes.
    pub fn same_architecture(&self, other: &ModelBundle) -> bool {
        self.config == other.config
            && self.widths == other.widths
            && self.t_common == other.t_common
            && self.params.signature() == other.params.signature()
    }
}

/// One sample's inputs as `[1, T, f_m]` tensors at the common length.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: [Tensor<f32>; 3],
    pub label: f32,
}

/// Resamples every modality to `t_common` and adds the batch axis.
pub fn prepare(sample: &MultimodalSample, t_common: usize) -> Result<Prepared> {
    let x = try_map3(|m| {
        let seq = sample.seq(m);
        resample_time(&seq.features, t_common).reshape(vec![1, t_common, seq.width()])
    })?;
    Ok(Prepared {
        x,
        label: sample.label,
    })
}

/// Binds prepared inputs into a graph as constants.
pub fn bind_inputs(cx: &mut Ctx<'_, f32>, p: &Prepared) -> [Var; 3] {
    [
        cx.g.constant(p.x[0].clone()),
        cx.g.constant(p.x[1].clone()),
        cx.g.constant(p.x[2].clone()),
    ]
}

/// Prediction for one prepared sample with frozen parameters.
pub fn predict_prepared(bundle: &ModelBundle, p: &Prepared) -> Result<f32> {
    let mut cx = Ctx::frozen(&bundle.params);
    let inputs = bind_inputs(&mut cx, p);
    let out = bundle.arch.forward(&mut cx, inputs)?;
    Ok(cx.g.scalar(out.pred))
}
