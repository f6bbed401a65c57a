//! The dual-path temporal model.
//!
//! ```text
//! features ─ Linear ─ LN ─┬─ block 0 ─ … ─ block K-1 ─ output head ─ logits
//!                         │
//! block:  x ─┬─ LN ─ dual-path SSM ─(+)─┬─ LN ─ FFN ─(+)─
//!            └──────────────────────────┘└────────────┘
//! ```
//!
//! Inside a block the slow path carries its SSM state and conv tail across
//! clips, warps its step by `1 + λ` and regrams its state at every chunk
//! boundary (including the end of the clip). The fast path starts every clip
//! from zero, reads `[conv(x_fast) ∥ y_slow]` for its selective parameters,
//! and regrams within the clip. The two outputs are summed, gated by
//! `SiLU(z)`, RMS-normalized and projected back to `D`.
//!
//! Chunk boundaries sit at multiples of `chunk_size` from the start of each
//! clip; a trailing partial chunk is scanned at its natural length.
//!
//! # Parameter names
//!
//! | name | shape |
//! |------|-------|
//! | `embed.weight`, `embed.bias` | `F x D`, `D` |
//! | `embed.ln.gamma`, `embed.ln.beta` | `D` |
//! | `layers.{k}.norm1.{gamma,beta}`, `layers.{k}.norm2.{gamma,beta}` | `D` |
//! | `layers.{k}.slow.in_proj.weight` | `D x HP` |
//! | `layers.{k}.fast.in_proj.weight` | `D x 2HP` (`[x_fast ∥ z]`) |
//! | `{path}.conv.weight` | `d_conv x HP` |
//! | `{path}.x_proj.weight` | `HP x (R + 2N)` (`2HP` rows on the fast path) |
//! | `{path}.dt_proj.weight`, `{path}.dt_proj.bias` | `R x H`, `H` |
//! | `{path}.a_log`, `{path}.d_skip` | `H`, `HP` |
//! | `{path}.regram.ln.{gamma,beta}` | `P` |
//! | `{path}.regram.uv.{w1,b1,w2,b2}` | `H x P·P`, `H x P`, `H x P·2Nr`, `H x 2Nr` |
//! | `{path}.regram.theta.{w1,b1,w2,b2}` | `H x P·P`, `H x P`, `H x P·r`, `H x r` |
//! | `layers.{k}.slow.intensity.{w1,b1,w2,b2}` | `HP x HP/4`, `HP/4`, `HP/4 x 1`, `1` |
//! | `layers.{k}.out_norm.gamma`, `layers.{k}.out_proj.weight` | `HP`, `HP x D` |
//! | `layers.{k}.ffn.{w1,b1,w2,b2}` | `D x 4D`, `4D`, `4D x D`, `D` |
//! | `head.norm.{gamma,beta}`, `head.in_proj.weight` | `D`, `D x 2HP` |
//! | `head.out.weight`, `head.out.bias` | `HP x C`, `C` |
//!
//! `{path}` is `layers.{k}.slow`, `layers.{k}.fast` or `head`. Plane vectors
//! are laid out per head as `U` (`N x r`, row-major) followed by `V`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::softplus;
use crate::regram::RegramMlp;
use crate::ssm::{ChunkDims, ConvCarry, SsmState};
use crate::tensor::Tensor;
use crate::timewarp::IntensityNet;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the per-frame input features.
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub d_conv: usize,
    pub chunk_size: usize,
    pub layers: usize,
    pub classes: usize,
    /// Rotation planes per head.
    pub rank: usize,
    /// Width of the low-rank step projection.
    pub dt_rank: usize,
    pub ffn_mult: usize,
    pub use_intensity: bool,
    pub use_regram: bool,
    pub use_d_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 256,
            d_model: 256,
            heads: 8,
            head_dim: 64,
            state_dim: 64,
            d_conv: 4,
            chunk_size: 64,
            layers: 4,
            classes: 7,
            rank: 16,
            dt_rank: 16,
            ffn_mult: 4,
            use_intensity: true,
            use_regram: true,
            use_d_skip: true,
        }
    }
}

impl ModelConfig {
    /// The largest configuration accepted by the gradient checker.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 12,
            d_model: 16,
            heads: 2,
            head_dim: 8,
            state_dim: 8,
            d_conv: 3,
            chunk_size: 8,
            layers: 1,
            classes: 4,
            rank: 2,
            dt_rank: 4,
            ffn_mult: 2,
            ..Default::default()
        }
    }

    pub fn d_inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn intensity_hidden(&self) -> usize {
        IntensityNet::<f64>::hidden_width(self.d_inner())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("state_dim", self.state_dim),
            ("d_conv", self.d_conv),
            ("chunk_size", self.chunk_size),
            ("layers", self.layers),
            ("rank", self.rank),
            ("dt_rank", self.dt_rank),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Slow-path baggage of one layer carried across clip boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub ssm: SsmState<f64>,
    pub conv: ConvCarry<f64>,
}

impl Carry {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Carry {
            ssm: SsmState::zeros(cfg.heads, cfg.head_dim, cfg.state_dim),
            conv: ConvCarry::zeros(cfg.d_conv, cfg.d_inner()),
        }
    }
}

/// Carry held on a tape: `ssm` is `H x P·N`, `conv` is `(d_conv-1) x HP`.
#[derive(Clone, Copy, Debug)]
pub struct CarryVars {
    pub ssm: Var,
    pub conv: Var,
}

#[derive(Clone, Debug)]
pub struct RegramIds {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub uv: [ParamId; 4],
    pub theta: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub struct PathIds {
    pub conv: ParamId,
    pub x_proj: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub regram: RegramIds,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub slow_in: ParamId,
    pub fast_in: ParamId,
    pub slow: PathIds,
    pub fast: PathIds,
    pub intensity: [ParamId; 4],
    pub out_norm: ParamId,
    pub out_proj: ParamId,
    pub ffn: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub(crate) struct HeadIds {
    pub norm: (ParamId, ParamId),
    pub in_proj: ParamId,
    pub path: PathIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub embed_ln: (ParamId, ParamId),
    pub blocks: Vec<BlockIds>,
    pub head: HeadIds,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format {
            context: "parameters".into(),
            message: format!("missing tensor {name}"),
        })
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<()> {
    let got = store.get(id).shape();
    if got != shape {
        return Err(Error::Format {
            context: "parameters".into(),
            message: format!("{} has shape {:?}, expected {:?}", store.name(id), got, shape),
        });
    }
    Ok(())
}

/// Canonical parameter names and shapes, in checkpoint order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, hp, h, p, n, r) = (cfg.d_model, cfg.d_inner(), cfg.heads, cfg.head_dim, cfg.state_dim, cfg.rank);
    let sel = cfg.dt_rank + 2 * n;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    push("embed.weight".into(), vec![cfg.feature_dim, d]);
    push("embed.bias".into(), vec![d]);
    push("embed.ln.gamma".into(), vec![d]);
    push("embed.ln.beta".into(), vec![d]);
    let path = |push: &mut dyn FnMut(String, Vec<usize>), pre: &str, sel_in: usize| {
        push(format!("{pre}.conv.weight"), vec![cfg.d_conv, hp]);
        push(format!("{pre}.x_proj.weight"), vec![sel_in, sel]);
        push(format!("{pre}.dt_proj.weight"), vec![cfg.dt_rank, h]);
        push(format!("{pre}.dt_proj.bias"), vec![h]);
        push(format!("{pre}.a_log"), vec![h]);
        push(format!("{pre}.d_skip"), vec![hp]);
        push(format!("{pre}.regram.ln.gamma"), vec![p]);
        push(format!("{pre}.regram.ln.beta"), vec![p]);
        push(format!("{pre}.regram.uv.w1"), vec![h, p * p]);
        push(format!("{pre}.regram.uv.b1"), vec![h, p]);
        push(format!("{pre}.regram.uv.w2"), vec![h, p * 2 * n * r]);
        push(format!("{pre}.regram.uv.b2"), vec![h, 2 * n * r]);
        push(format!("{pre}.regram.theta.w1"), vec![h, p * p]);
        push(format!("{pre}.regram.theta.b1"), vec![h, p]);
        push(format!("{pre}.regram.theta.w2"), vec![h, p * r]);
        push(format!("{pre}.regram.theta.b2"), vec![h, r]);
    };
    for k in 0..cfg.layers {
        let pre = format!("layers.{k}");
        push(format!("{pre}.norm1.gamma"), vec![d]);
        push(format!("{pre}.norm1.beta"), vec![d]);
        push(format!("{pre}.slow.in_proj.weight"), vec![d, hp]);
        path(&mut push, &format!("{pre}.slow"), hp);
        let hid = cfg.intensity_hidden();
        push(format!("{pre}.slow.intensity.w1"), vec![hp, hid]);
        push(format!("{pre}.slow.intensity.b1"), vec![hid]);
        push(format!("{pre}.slow.intensity.w2"), vec![hid, 1]);
        push(format!("{pre}.slow.intensity.b2"), vec![1]);
        push(format!("{pre}.fast.in_proj.weight"), vec![d, 2 * hp]);
        path(&mut push, &format!("{pre}.fast"), 2 * hp);
        push(format!("{pre}.out_norm.gamma"), vec![hp]);
        push(format!("{pre}.out_proj.weight"), vec![hp, d]);
        push(format!("{pre}.norm2.gamma"), vec![d]);
        push(format!("{pre}.norm2.beta"), vec![d]);
        push(format!("{pre}.ffn.w1"), vec![d, cfg.ffn_mult * d]);
        push(format!("{pre}.ffn.b1"), vec![cfg.ffn_mult * d]);
        push(format!("{pre}.ffn.w2"), vec![cfg.ffn_mult * d, d]);
        push(format!("{pre}.ffn.b2"), vec![d]);
    }
    push("head.norm.gamma".into(), vec![d]);
    push("head.norm.beta".into(), vec![d]);
    push("head.in_proj.weight".into(), vec![d, 2 * hp]);
    path(&mut push, "head", hp);
    push("head.out.weight".into(), vec![hp, cfg.classes]);
    push("head.out.bias".into(), vec![cfg.classes]);
    out
}

impl ModelIds {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        for (name, shape) in parameter_layout(cfg) {
            expect_shape(store, lookup(store, &name)?, &shape)?;
        }
        let id = |name: &str| lookup(store, name);
        let path = |pre: &str| -> Result<PathIds> {
            let q = |s: &str| id(&format!("{pre}.{s}"));
            Ok(PathIds {
                conv: q("conv.weight")?,
                x_proj: q("x_proj.weight")?,
                dt_w: q("dt_proj.weight")?,
                dt_b: q("dt_proj.bias")?,
                a_log: q("a_log")?,
                d_skip: q("d_skip")?,
                regram: RegramIds {
                    ln_gamma: q("regram.ln.gamma")?,
                    ln_beta: q("regram.ln.beta")?,
                    uv: [q("regram.uv.w1")?, q("regram.uv.b1")?, q("regram.uv.w2")?, q("regram.uv.b2")?],
                    theta: [
                        q("regram.theta.w1")?,
                        q("regram.theta.b1")?,
                        q("regram.theta.w2")?,
                        q("regram.theta.b2")?,
                    ],
                },
            })
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let pre = format!("layers.{k}");
            let q = |s: &str| id(&format!("{pre}.{s}"));
            blocks.push(BlockIds {
                norm1: (q("norm1.gamma")?, q("norm1.beta")?),
                norm2: (q("norm2.gamma")?, q("norm2.beta")?),
                slow_in: q("slow.in_proj.weight")?,
                fast_in: q("fast.in_proj.weight")?,
                slow: path(&format!("{pre}.slow"))?,
                fast: path(&format!("{pre}.fast"))?,
                intensity: [
                    q("slow.intensity.w1")?,
                    q("slow.intensity.b1")?,
                    q("slow.intensity.w2")?,
                    q("slow.intensity.b2")?,
                ],
                out_norm: q("out_norm.gamma")?,
                out_proj: q("out_proj.weight")?,
                ffn: [q("ffn.w1")?, q("ffn.b1")?, q("ffn.w2")?, q("ffn.b2")?],
            });
        }
        Ok(ModelIds {
            embed_w: id("embed.weight")?,
            embed_b: id("embed.bias")?,
            embed_ln: (id("embed.ln.gamma")?, id("embed.ln.beta")?),
            blocks,
            head: HeadIds {
                norm: (id("head.norm.gamma")?, id("head.norm.beta")?),
                in_proj: id("head.in_proj.weight")?,
                path: path("head")?,
                out_w: id("head.out.weight")?,
                out_b: id("head.out.bias")?,
            },
        })
    }
}

/// Options for one clip-mode forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Record per-frame log-decays and the slow-path rotation operators.
    pub diagnostics: bool,
}

/// Generators and Cayley image of one slow-path chunk boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationRecord {
    pub chunk: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Per layer, `T x H` log-decays `α Δ A` of the slow path.
    pub log_decay: Vec<Vec<f64>>,
    /// Per layer, slow-path rotations in chunk order.
    pub rotations: Vec<Vec<RotationRecord>>,
}

/// Tape handles produced by [`DualPathModel::forward_clip`].
pub struct ClipForward {
    /// `T x C`
    pub logits: Var,
    /// Per layer `T x 1`; `None` when the intensity net is disabled.
    pub lambdas: Vec<Option<Var>>,
    pub carries: Vec<CarryVars>,
    /// Per layer slow-path SSM outputs (`T x HP`).
    pub slow_outputs: Vec<Var>,
    pub diagnostics: Option<Diagnostics>,
}

/// Plain values of one clip-mode forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub logits: Tensor,
    pub probs: Tensor,
    /// `K x T`
    pub lambda_traces: Vec<Vec<f64>>,
    pub carries: Vec<Carry>,
    pub slow_outputs: Vec<Tensor>,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Clone, Debug)]
pub struct DualPathModel {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Inverse of softplus for positive arguments.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl DualPathModel {
    /// Randomly initialized model.
    ///
    /// Decay rates are log-spaced so that the initial per-head decay spans
    /// `[0.9, 0.99]` at unit step; plane biases point each `(head, plane)`
    /// at its own pair of coordinate axes; angle biases start at `-4`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, p, n, r) = (cfg.heads, cfg.head_dim, cfg.state_dim, cfg.rank);
        let dt_bias = softplus_inv(1.0);
        let a_log: Vec<f64> = (0..h)
            .map(|k| {
                let frac = if h == 1 { 0.0 } else { k as f64 / (h - 1) as f64 };
                let (lo, hi) = ((-(0.99f64).ln()).ln(), (-(0.9f64).ln()).ln());
                softplus_inv((lo + frac * (hi - lo)).exp())
            })
            .collect();
        for (name, shape) in parameter_layout(&cfg) {
            let fan_in = if shape.len() >= 2 { shape[0] } else { 1 };
            let leaf = name.rsplit('.').next().unwrap_or("");
            let value = if name.ends_with("gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("beta") || name.ends_with("bias") && !name.contains("dt_proj") {
                Tensor::zeros(&shape)
            } else if name.ends_with("dt_proj.bias") {
                Tensor::full(&shape, dt_bias)
            } else if name.ends_with("a_log") {
                Tensor::new(&shape, a_log.clone())
            } else if name.ends_with("d_skip") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("conv.weight") {
                uniform(&mut rng, &shape, 1.0 / (cfg.d_conv as f64).sqrt())
            } else if name.contains(".regram.") {
                match leaf {
                    "w1" => uniform(&mut rng, &shape, 1.0 / (p as f64).sqrt()),
                    "b1" => Tensor::zeros(&shape),
                    "w2" => uniform(&mut rng, &shape, 0.01 / (p as f64).sqrt()),
                    "b2" if name.contains(".uv.") => {
                        let mut b = vec![0.0; h * 2 * n * r];
                        for k in 0..h {
                            for j in 0..r {
                                let axis = (2 * (k * r + j)) % n;
                                b[k * 2 * n * r + axis * r + j] = 1.0;
                                b[k * 2 * n * r + n * r + ((axis + 1) % n) * r + j] = 1.0;
                            }
                        }
                        Tensor::new(&shape, b)
                    }
                    "b2" => Tensor::full(&shape, -4.0),
                    _ => unreachable!("unexpected regram tensor {name}"),
                }
            } else if name.contains(".intensity.") {
                match leaf {
                    "b1" | "b2" => Tensor::zeros(&shape),
                    _ => uniform(&mut rng, &shape, 1.0 / (fan_in as f64).sqrt()),
                }
            } else {
                uniform(&mut rng, &shape, 1.0 / (fan_in as f64).sqrt())
            };
            store.insert(name, value);
        }
        Self::from_params(cfg, store)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ids = ModelIds::resolve(&cfg, &params)?;
        Ok(DualPathModel { cfg, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn zero_carries(&self) -> Vec<Carry> {
        (0..self.cfg.layers).map(|_| Carry::zeros(&self.cfg)).collect()
    }

    /// Sets the intensity output biases to `-1000` (λ ≡ 0) and the angle
    /// biases of every regram MLP to `-1000` (θ ≡ 0, so Z = I exactly).
    pub fn force_nested_baseline(&mut self) {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, n, _)| n.ends_with("intensity.b2") || n.ends_with("regram.theta.b2"))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let shape = self.params.by_name(&name).expect("listed above").shape().to_vec();
            self.params.set(&name, Tensor::full(&shape, -1000.0)).expect("shape preserved");
        }
    }

    /// Intensity net of layer `k` as a standalone module.
    pub fn intensity_net(&self, k: usize) -> IntensityNet<f64> {
        let ids = &self.ids.blocks[k].intensity;
        let hp = self.cfg.d_inner();
        let mut net = IntensityNet::zeros(hp);
        net.w1 = self.params.get(ids[0]).data().to_vec();
        net.b1 = self.params.get(ids[1]).data().to_vec();
        net.w2 = self.params.get(ids[2]).data().to_vec();
        net.b2 = self.params.get(ids[3]).data()[0];
        net
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub(crate) fn regram_mlp(&self, ids: &RegramIds) -> RegramMlp<f64> {
        let c = &self.cfg;
        let g = |id: ParamId| self.params.get(id).data().to_vec();
        RegramMlp {
            heads: c.heads,
            input_dim: c.head_dim,
            hidden: c.head_dim,
            state_dim: c.state_dim,
            rank: c.rank,
            ln_gamma: g(ids.ln_gamma),
            ln_beta: g(ids.ln_beta),
            uv_w1: g(ids.uv[0]),
            uv_b1: g(ids.uv[1]),
            uv_w2: g(ids.uv[2]),
            uv_b2: g(ids.uv[3]),
            th_w1: g(ids.theta[0]),
            th_b1: g(ids.theta[1]),
            th_w2: g(ids.theta[2]),
            th_b2: g(ids.theta[3]),
        }
    }

    /// Places carries on the tape as constants (gradient-severed).
    pub fn carries_on_tape(&self, tape: &mut Tape, carries: &[Carry]) -> Vec<CarryVars> {
        let (h, p, n) = (self.cfg.heads, self.cfg.head_dim, self.cfg.state_dim);
        carries
            .iter()
            .map(|c| CarryVars {
                ssm: tape.constant(Tensor::new(&[h, p * n], c.ssm.data().to_vec())),
                conv: tape.constant(Tensor::new(&[c.conv.rows(), c.conv.channels()], c.conv.tail().to_vec())),
            })
            .collect()
    }

    pub fn carries_from_tape(&self, tape: &Tape, vars: &[CarryVars]) -> Result<Vec<Carry>> {
        let c = &self.cfg;
        vars.iter()
            .map(|v| {
                Ok(Carry {
                    ssm: SsmState::from_vec(c.heads, c.head_dim, c.state_dim, tape.value(v.ssm).data().to_vec())?,
                    conv: ConvCarry::from_rows(c.d_conv, c.d_inner(), tape.value(v.conv).data().to_vec())?,
                })
            })
            .collect()
    }

    /// Clip-mode forward on a tape. `features` is `T x feature_dim`.
    pub fn forward_clip(&self, tape: &mut Tape, features: &Tensor, carries: &[CarryVars], opts: ForwardOptions) -> Result<ClipForward> {
        let c = &self.cfg;
        ensure!(features.rank() == 2, "features must be a T x F matrix");
        let (t_len, f) = features.dims2();
        ensure!(f == c.feature_dim, "features have {f} channels, model expects {}", c.feature_dim);
        ensure!(t_len >= 1, "clip must contain at least one frame");
        ensure!(
            carries.len() == c.layers,
            "expected {} layer carries, got {}",
            c.layers,
            carries.len()
        );
        for cv in carries {
            ensure!(
                tape.value(cv.ssm).numel() == c.heads * c.head_dim * c.state_dim,
                "carry state does not match H x P x N"
            );
            ensure!(
                tape.value(cv.conv).numel() == (c.d_conv - 1) * c.d_inner(),
                "conv carry must hold d_conv-1 rows of {} channels",
                c.d_inner()
            );
        }
        if !features.is_finite() {
            return Err(Error::domain("features must be finite"));
        }
        let mut diag = opts.diagnostics.then(Diagnostics::default);
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);

        let x_in = tape.constant(features.clone());
        let ew = p(tape, self.ids.embed_w);
        let eb = p(tape, self.ids.embed_b);
        let (lg, lb) = (p(tape, self.ids.embed_ln.0), p(tape, self.ids.embed_ln.1));
        let x = tape.linear(x_in, ew, Some(eb));
        let mut x = tape.layer_norm(x, lg, lb, c.d_model);

        let mut lambdas = Vec::with_capacity(c.layers);
        let mut new_carries = Vec::with_capacity(c.layers);
        let mut slow_outputs = Vec::with_capacity(c.layers);
        for (k, ids) in self.ids.blocks.iter().enumerate() {
            let out = self.block_forward(tape, ids, x, carries[k], t_len, diag.as_mut())?;
            x = out.x;
            lambdas.push(out.lambda);
            new_carries.push(out.carry);
            slow_outputs.push(out.y_slow);
        }
        let logits = self.head_forward(tape, x, t_len)?;
        Ok(ClipForward {
            logits,
            lambdas,
            carries: new_carries,
            slow_outputs,
            diagnostics: diag,
        })
    }

    /// Inference-only forward returning plain values.
    pub fn infer_clip(&self, features: &Tensor, carries: &[Carry], opts: ForwardOptions) -> Result<ModelOutputs> {
        let mut tape = Tape::inference();
        let cv = self.carries_on_tape(&mut tape, carries);
        let out = self.forward_clip(&mut tape, features, &cv, opts)?;
        let logits = tape.value(out.logits).clone();
        let probs = Tensor::new(logits.shape(), crate::nn::softmax_rows(logits.data(), self.cfg.classes));
        let t_len = features.dims2().0;
        let lambda_traces = out
            .lambdas
            .iter()
            .map(|l| match l {
                Some(v) => tape.value(*v).data().to_vec(),
                None => vec![0.0; t_len],
            })
            .collect();
        Ok(ModelOutputs {
            logits,
            probs,
            lambda_traces,
            carries: self.carries_from_tape(&tape, &out.carries)?,
            slow_outputs: out.slow_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
            diagnostics: out.diagnostics,
        })
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        ids: &BlockIds,
        x: Var,
        carry: CarryVars,
        t_len: usize,
        mut diag: Option<&mut Diagnostics>,
    ) -> Result<BlockOut> {
        let c = &self.cfg;
        let hp = c.d_inner();
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);

        let (g1, b1) = (p(tape, ids.norm1.0), p(tape, ids.norm1.1));
        let u = tape.layer_norm(x, g1, b1, c.d_model);

        // slow path
        let w_in = p(tape, ids.slow_in);
        let xs = tape.matmul(u, w_in);
        let xp = tape.concat_rows(&[carry.conv, xs]);
        let kern = p(tape, ids.slow.conv);
        let pre = tape.depthwise_conv(xp, kern);
        let xc_s = tape.silu(pre);
        let conv_out = tape.slice_rows(xp, t_len..t_len + c.d_conv - 1);
        let lambda = if c.use_intensity {
            let [w1, b1, w2, b2] = ids.intensity.map(|id| p(tape, id));
            let a = tape.linear(xc_s, w1, Some(b1));
            let a = tape.silu(a);
            let o = tape.linear(a, w2, Some(b2));
            Some(tape.sigmoid(o))
        } else {
            None
        };
        let mut rot_log = diag.as_ref().map(|_| Vec::new());
        let (y_slow, h_slow, log_decay) =
            self.ssm_path(tape, &ids.slow, xc_s, xc_s, lambda, Some(carry.ssm), true, t_len, rot_log.as_mut())?;
        if let Some(d) = diag.as_deref_mut() {
            d.log_decay.push(log_decay);
            d.rotations.push(rot_log.unwrap_or_default());
        }

        // fast path
        let w_in = p(tape, ids.fast_in);
        let xz = tape.matmul(u, w_in);
        let xf = tape.slice_cols(xz, 0..hp);
        let z = tape.slice_cols(xz, hp..2 * hp);
        let zeros = tape.constant(Tensor::zeros(&[c.d_conv - 1, hp]));
        let xpf = tape.concat_rows(&[zeros, xf]);
        let kern = p(tape, ids.fast.conv);
        let pre = tape.depthwise_conv(xpf, kern);
        let xc_f = tape.silu(pre);
        let sel_in = tape.concat_cols(&[xc_f, y_slow]);
        let (y_fast, _, _) = self.ssm_path(tape, &ids.fast, xc_f, sel_in, None, None, false, t_len, None)?;

        // fusion and read-out
        let fused = tape.add(y_slow, y_fast);
        let gate = tape.silu(z);
        let gated = tape.mul(fused, gate);
        let og = p(tape, ids.out_norm);
        let normed = tape.rms_norm(gated, og);
        let wo = p(tape, ids.out_proj);
        let out = tape.matmul(normed, wo);
        let x1 = tape.add(x, out);

        let (g2, b2) = (p(tape, ids.norm2.0), p(tape, ids.norm2.1));
        let v = tape.layer_norm(x1, g2, b2, c.d_model);
        let [fw1, fb1, fw2, fb2] = ids.ffn.map(|id| p(tape, id));
        let hdn = tape.linear(v, fw1, Some(fb1));
        let hdn = tape.gelu(hdn);
        let f = tape.linear(hdn, fw2, Some(fb2));
        let x2 = tape.add(x1, f);
        Ok(BlockOut {
            x: x2,
            lambda,
            carry: CarryVars {
                ssm: h_slow,
                conv: conv_out,
            },
            y_slow,
        })
    }

    fn head_forward(&self, tape: &mut Tape, x: Var, t_len: usize) -> Result<Var> {
        let c = &self.cfg;
        let hp = c.d_inner();
        let ids = &self.ids.head;
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let (g, b) = (p(tape, ids.norm.0), p(tape, ids.norm.1));
        let u = tape.layer_norm(x, g, b, c.d_model);
        let w_in = p(tape, ids.in_proj);
        let sz = tape.matmul(u, w_in);
        let s = tape.slice_cols(sz, 0..hp);
        let z = tape.slice_cols(sz, hp..2 * hp);
        let zeros = tape.constant(Tensor::zeros(&[c.d_conv - 1, hp]));
        let xp = tape.concat_rows(&[zeros, s]);
        let kern = p(tape, ids.path.conv);
        let pre = tape.depthwise_conv(xp, kern);
        let xc = tape.silu(pre);
        let (y, _, _) = self.ssm_path(tape, &ids.path, xc, xc, None, None, false, t_len, None)?;
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate);
        let (ow, ob) = (p(tape, ids.out_w), p(tape, ids.out_b));
        Ok(tape.linear(gated, ow, Some(ob)))
    }

    /// Selective parameters, chunked scan and per-chunk regram of one path.
    /// Returns `(y, final state, per-frame log-decay T x H)`.
    #[allow(clippy::too_many_arguments)]
    fn ssm_path(
        &self,
        tape: &mut Tape,
        ids: &PathIds,
        xc: Var,
        sel_in: Var,
        lambda: Option<Var>,
        h0: Option<Var>,
        regram_at_end: bool,
        t_len: usize,
        mut rot_log: Option<&mut Vec<RotationRecord>>,
    ) -> Result<(Var, Var, Vec<f64>)> {
        let c = &self.cfg;
        let (h, pd, n, hp) = (c.heads, c.head_dim, c.state_dim, c.d_inner());
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);

        let wx = p(tape, ids.x_proj);
        let sel = tape.matmul(sel_in, wx);
        let draw = tape.slice_cols(sel, 0..c.dt_rank);
        let b_all = tape.slice_cols(sel, c.dt_rank..c.dt_rank + n);
        let c_all = tape.slice_cols(sel, c.dt_rank + n..c.dt_rank + 2 * n);
        let (dw, db) = (p(tape, ids.dt_w), p(tape, ids.dt_b));
        let dt = tape.linear(draw, dw, Some(db));
        let mut dt = tape.softplus(dt);
        if let Some(l) = lambda {
            let alpha = tape.add_scalar(l, 1.0);
            dt = tape.mul_col(dt, alpha);
        }
        let a_log = p(tape, ids.a_log);
        let a_pos = tape.softplus(a_log);
        let a = tape.neg(a_pos);
        let d_skip = c.use_d_skip.then(|| p(tape, ids.d_skip));

        let log_decay: Vec<f64> = {
            let dtv = tape.value(dt).data();
            let av = tape.value(a).data();
            dtv.iter().enumerate().map(|(i, &d)| d * av[i % h]).collect()
        };

        let mut state = match h0 {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[h, pd * n])),
        };
        let mut ys = Vec::new();
        let mut start = 0;
        let mut chunk_idx = 0;
        while start < t_len {
            let end = (start + c.chunk_size).min(t_len);
            let dims = ChunkDims {
                len: end - start,
                heads: h,
                head_dim: pd,
                state_dim: n,
            };
            let xs = tape.slice_rows(xc, start..end);
            let ds = tape.slice_rows(dt, start..end);
            let bs = tape.slice_rows(b_all, start..end);
            let cs = tape.slice_rows(c_all, start..end);
            let (mut y, h_next) = tape.ssd_chunk(xs, ds, a, bs, cs, state, dims);
            if let Some(dsk) = d_skip {
                let skip = tape.mul_row(xs, dsk);
                y = tape.add(y, skip);
            }
            state = h_next;
            let boundary = end < t_len || regram_at_end;
            if c.use_regram && boundary {
                let (z, rec) = self.regram_on_tape(tape, &ids.regram, y)?;
                state = tape.rotate_state(state, z, h, pd, n);
                if let Some(log) = rot_log.as_deref_mut() {
                    log.push(RotationRecord {
                        chunk: chunk_idx,
                        ..rec
                    });
                }
            }
            ys.push(y);
            start = end;
            chunk_idx += 1;
        }
        let y = if ys.len() == 1 { ys[0] } else { tape.concat_rows(&ys) };
        debug_assert_eq!(tape.value(y).shape(), &[t_len, hp]);
        Ok((y, state, log_decay))
    }

    /// Chunk summary → planes and angles → Cayley image, on the tape.
    fn regram_on_tape(&self, tape: &mut Tape, ids: &RegramIds, y_chunk: Var) -> Result<(Var, RotationRecord)> {
        let c = &self.cfg;
        let (h, pd, n, r) = (c.heads, c.head_dim, c.state_dim, c.rank);
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let mean = tape.mean_rows(y_chunk);
        let (g, b) = (p(tape, ids.ln_gamma), p(tape, ids.ln_beta));
        let phi = tape.layer_norm(mean, g, b, pd);

        let [w1, b1, w2, b2] = ids.uv.map(|id| p(tape, id));
        let a = tape.head_linear(phi, w1, b1, h, pd, pd);
        let a = tape.silu(a);
        let uv = tape.head_linear(a, w2, b2, h, pd, 2 * n * r);
        let (ui, vi): (Vec<usize>, Vec<usize>) = {
            let mut ui = Vec::with_capacity(h * n * r);
            let mut vi = Vec::with_capacity(h * n * r);
            for k in 0..h {
                for i in 0..n * r {
                    ui.push(k * 2 * n * r + i);
                    vi.push(k * 2 * n * r + n * r + i);
                }
            }
            (ui, vi)
        };
        let u_raw = tape.gather(uv, ui, &[h, n * r]);
        let v_raw = tape.gather(uv, vi, &[h, n * r]);
        let u = tape.normalize_columns(u_raw, h, n, r);
        let v = tape.normalize_columns(v_raw, h, n, r);

        let [w1, b1, w2, b2] = ids.theta.map(|id| p(tape, id));
        let a = tape.head_linear(phi, w1, b1, h, pd, pd);
        let a = tape.silu(a);
        let th = tape.head_linear(a, w2, b2, h, pd, r);
        let th = tape.softplus(th);
        let th = tape.reshape(th, &[h, r]);
        let z = tape.cayley(u, v, th, h, n, r)?;
        let rec = RotationRecord {
            chunk: 0,
            u: tape.value(u).data().to_vec(),
            v: tape.value(v).data().to_vec(),
            theta: tape.value(th).data().to_vec(),
            z: tape.value(z).data().to_vec(),
        };
        Ok((z, rec))
    }

    /// Per-head decay rates `A = -softplus(a_log)` of a path parameter.
    pub fn decay_rates(&self, a_log_name: &str) -> Result<Vec<f64>> {
        Ok(self.params.by_name(a_log_name)?.data().iter().map(|&v| -softplus(v)).collect())
    }
}

struct BlockOut {
    x: Var,
    lambda: Option<Var>,
    carry: CarryVars,
    y_slow: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            d_model: 8,
            heads: 2,
            head_dim: 4,
            state_dim: 4,
            d_conv: 3,
            chunk_size: 4,
            layers: 2,
            classes: 3,
            rank: 2,
            dt_rank: 2,
            ffn_mult: 2,
            ..Default::default()
        }
    }

    fn features(seed: u64, t: usize, f: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[t, f], (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn layout_matches_store_and_init_targets() {
        let cfg = small_cfg();
        let m = DualPathModel::new(cfg.clone(), 1).unwrap();
        assert_eq!(m.params().len(), parameter_layout(&cfg).len());
        let th = m.params().by_name("layers.0.slow.regram.theta.b2").unwrap();
        assert!(th.data().iter().all(|&v| v == -4.0));
        let rates = m.decay_rates("layers.1.fast.a_log").unwrap();
        assert!((rates[0].exp() - 0.99).abs() < 1e-12);
        assert!((rates[1].exp() - 0.9).abs() < 1e-12);
        let dtb = m.params().by_name("head.dt_proj.bias").unwrap();
        assert!((softplus(dtb.data()[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_model_dimensions() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.d_inner(), 512);
        assert_eq!(cfg.rank, 16);
        assert_eq!(cfg.chunk_size, 64);
        assert_eq!(cfg.classes, 7);
    }

    #[test]
    fn head_planes_start_on_distinct_axes() {
        let cfg = ModelConfig {
            state_dim: 8,
            ..small_cfg()
        };
        let m = DualPathModel::new(cfg.clone(), 2).unwrap();
        let b = m.params().by_name("layers.0.slow.regram.uv.b2").unwrap();
        let (n, r) = (cfg.state_dim, cfg.rank);
        let mut axes = Vec::new();
        for k in 0..cfg.heads {
            for j in 0..r {
                let col_u: Vec<f64> = (0..n).map(|i| b.data()[k * 2 * n * r + i * r + j]).collect();
                let col_v: Vec<f64> = (0..n).map(|i| b.data()[k * 2 * n * r + n * r + i * r + j]).collect();
                let au = col_u.iter().position(|&x| x == 1.0).unwrap();
                let av = col_v.iter().position(|&x| x == 1.0).unwrap();
                assert_eq!(av, au + 1);
                axes.push(au);
            }
        }
        axes.sort_unstable();
        axes.dedup();
        assert_eq!(axes.len(), cfg.heads * r);
    }

    #[test]
    fn clip_forward_shapes_and_ranges() {
        let cfg = small_cfg();
        let m = DualPathModel::new(cfg.clone(), 3).unwrap();
        let out = m
            .infer_clip(&features(4, 11, 6), &m.zero_carries(), ForwardOptions { diagnostics: true })
            .unwrap();
        assert_eq!(out.logits.shape(), &[11, 3]);
        assert_eq!(out.lambda_traces.len(), 2);
        for tr in &out.lambda_traces {
            assert_eq!(tr.len(), 11);
            assert!(tr.iter().all(|&l| (0.0..=1.0).contains(&l)));
        }
        let d = out.diagnostics.unwrap();
        assert_eq!(d.log_decay[0].len(), 11 * 2);
        assert!(d.log_decay[0].iter().all(|&v| v < 0.0));
        // chunks end at 4, 8 and the clip end at 11
        assert_eq!(d.rotations[0].iter().map(|r| r.chunk).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(out.carries[0].ssm.heads(), 2);
    }

    #[test]
    fn wrong_carry_count_is_a_contract_error() {
        let m = DualPathModel::new(small_cfg(), 5).unwrap();
        let err = m.infer_clip(&features(1, 4, 6), &m.zero_carries()[..1], ForwardOptions::default());
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = m.infer_clip(&features(1, 4, 5), &m.zero_carries(), ForwardOptions::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_final_weights_give_bias_logits() {
        let mut m = DualPathModel::new(small_cfg(), 6).unwrap();
        m.params_mut().set("head.out.weight", Tensor::zeros(&[8, 3])).unwrap();
        m.params_mut().set("head.out.bias", Tensor::new(&[3], vec![0.5, -1.0, 2.0])).unwrap();
        let out = m.infer_clip(&features(2, 5, 6), &m.zero_carries(), ForwardOptions::default()).unwrap();
        for t in 0..5 {
            assert_eq!(out.logits.row(t), &[0.5, -1.0, 2.0]);
        }
    }
}
