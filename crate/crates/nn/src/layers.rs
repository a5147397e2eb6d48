//! Parameterized layers built on [`Graph`] operations.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvGeom;
use crate::params::{BufferId, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass state: mode, the random stream for dropout and
/// stochastic depth, and running-statistic updates produced in training.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<(BufferId, Vec<f32>)>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self::with_rng(mode, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Writes pending running-statistic updates into `store`.
    pub fn apply_updates(&mut self, store: &mut ParamStore) {
        for (id, values) in self.updates.drain(..) {
            store.buffer_mut(id).values = values;
        }
    }
}

/// Kaiming-uniform initialization for a fan-in, rectifier gain.
fn kaiming_uniform(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv3d {
    pub fn new(store: &mut ParamStore, name: &str, geom: ConvGeom, bias: bool, rng: &mut impl Rng) -> Self {
        let ws = geom.weight_shape();
        let fan_in = geom.in_channels * geom.kernel.pow(3);
        let weight = store.add(
            format!("{name}.weight"),
            &ws,
            kaiming_uniform(ws.iter().product(), fan_in, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                &[geom.out_channels],
                vec![0.0; geom.out_channels],
            )
        });
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[out_f, in_f],
            kaiming_uniform(in_f * out_f, in_f, rng),
        );
        let bias = store.add(format!("{name}.bias"), &[out_f], vec![0.0; out_f]);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Divisibility {
                op: "group_norm",
                what: "channels",
                value: channels,
                divisor: groups,
            });
        }
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: store.add(format!("{name}.beta"), &[channels], vec![0.0; channels]),
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<Var> {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

/// Batch normalization over `[N, F]` with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[features], vec![1.0; features]),
            beta: store.add(format!("{name}.beta"), &[features], vec![0.0; features]),
            running_mean: store.add_buffer(format!("{name}.running_mean"), &[features], vec![0.0; features]),
            running_var: store.add_buffer(format!("{name}.running_var"), &[features], vec![1.0; features]),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        let store = p.store();
        // A single training sample carries no batch statistics; it is
        // normalized like evaluation and leaves the running stats alone.
        let n = g.shape(x)[0];
        if ctx.mode == Mode::Eval || n == 1 {
            let mean: Vec<f64> = store.buffer(self.running_mean).values.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = store.buffer(self.running_var).values.iter().map(|&v| v as f64).collect();
            return Ok(g.batch_norm(x, gamma, beta, Some((&mean, &var)))?.0);
        }
        let (y, observed) = g.batch_norm(x, gamma, beta, None)?;
        let (mean, var) = observed.expect("batch statistics");
        let m = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        let rm = &store.buffer(self.running_mean).values;
        let rv = &store.buffer(self.running_var).values;
        let new_mean = rm
            .iter()
            .zip(&mean)
            .map(|(&r, b)| ((1.0 - m) * r as f64 + m * b) as f32)
            .collect();
        let new_var = rv
            .iter()
            .zip(&var)
            .map(|(&r, b)| ((1.0 - m) * r as f64 + m * b * unbias) as f32)
            .collect();
        ctx.updates.push((self.running_mean, new_mean));
        ctx.updates.push((self.running_var, new_var));
        Ok(y)
    }
}

/// Concurrent spatial and channel squeeze-and-excitation; the two gated maps
/// are combined by element-wise maximum.
#[derive(Clone, Debug)]
pub struct Scse {
    pub squeeze: Linear,
    pub excite: Linear,
    pub spatial: Conv3d,
}

impl Scse {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::InvalidConfig(format!(
                "scse needs channels ({channels}) >= reduction ({reduction}) > 0"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng),
            excite: Linear::new(store, &format!("{name}.excite"), hidden, channels, rng),
            spatial: Conv3d::new(
                store,
                &format!("{name}.spatial"),
                ConvGeom::same(channels, 1, 1, 1, 1)?,
                true,
                rng,
            ),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<Var> {
        let pooled = g.mean_spatial(x)?;
        let hidden = self.squeeze.forward(g, p, pooled)?;
        let hidden = g.relu(hidden);
        let logits = self.excite.forward(g, p, hidden)?;
        let channel_gate = g.sigmoid(logits);
        let channel = g.scale_channels(x, channel_gate)?;

        let s = self.spatial.forward(g, p, x)?;
        let spatial_gate = g.sigmoid(s);
        let spatial = g.scale_spatial(x, spatial_gate)?;
        g.maximum(channel, spatial)
    }
}

/// Self-attention over `[N, T, E]` tokens with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, embed: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Divisibility {
                op: "multi_head_attention",
                what: "embedding dim",
                value: embed,
                divisor: heads,
            });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), embed, embed, rng),
            key: Linear::new(store, &format!("{name}.key"), embed, embed, rng),
            value: Linear::new(store, &format!("{name}.value"), embed, embed, rng),
            output: Linear::new(store, &format!("{name}.output"), embed, embed, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound<'_>, tokens: Var) -> Result<Var> {
        let q = self.query.forward(g, p, tokens)?;
        let k = self.key.forward(g, p, tokens)?;
        let v = self.value.forward(g, p, tokens)?;
        let attended = g.attention(q, k, v, self.heads)?;
        self.output.forward(g, p, attended)
    }
}

/// Element-wise dropout that is active only in training mode.
pub fn dropout(g: &mut Graph, ctx: &mut ForwardCtx, x: Var, rate: f64) -> Result<Var> {
    match ctx.mode {
        Mode::Train if rate > 0.0 => g.dropout(x, rate, &mut ctx.rng),
        _ => Ok(x),
    }
}

/// Residual wrapper with stochastic depth. In training the branch survives
/// with probability `survival_p` (one draw per call); in evaluation the branch
/// is scaled by `survival_p`.
pub fn stochastic_depth<S, B>(
    g: &mut Graph,
    ctx: &mut ForwardCtx,
    x: Var,
    survival_p: f64,
    skip: S,
    branch: B,
) -> Result<Var>
where
    S: FnOnce(&mut Graph, &mut ForwardCtx, Var) -> Result<Var>,
    B: FnOnce(&mut Graph, &mut ForwardCtx, Var) -> Result<Var>,
{
    if !(survival_p > 0.0 && survival_p <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "survival probability {survival_p} outside (0, 1]"
        )));
    }
    let identity = skip(g, ctx, x)?;
    match ctx.mode {
        Mode::Train => {
            let survive = ctx.rng.gen::<f64>() < survival_p;
            if !survive {
                return Ok(identity);
            }
            let residual = branch(g, ctx, x)?;
            g.add(identity, residual)
        }
        Mode::Eval => {
            let residual = branch(g, ctx, x)?;
            let residual = if survival_p < 1.0 {
                g.scale(residual, survival_p)
            } else {
                residual
            };
            g.add(identity, residual)
        }
    }
}
