//! Experience encoding: the synthetic embedding provider, the topic projector
//! and the two recurrent channel processors.
//!
//! The image and text channels each own a GRU and a layer norm. They are
//! registered under separate parameter names and there is no constructor that
//! shares them.

mod provider;

pub use provider::{cosine, jittered, normalize, EmbeddingProvider, MAX_PROTOTYPE_COSINE};

use crate::error::{validation, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Variance floor of every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Linear layer followed by layer norm, mapping `d_e` to `d_h`.
#[derive(Clone, Debug)]
pub struct TopicProjector {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: ParamId,
    pub shift: ParamId,
}

impl TopicProjector {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_out as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{prefix}.weight"), &[d_in, d_out], bound, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), &[d_out], bound, rng),
            gain: store.add_const(format!("{prefix}.ln_gain"), &[d_out], 1.0),
            shift: store.add_const(format!("{prefix}.ln_bias"), &[d_out], 0.0),
        }
    }

    /// `topic: [1 x d_e]` to `[1 x d_h]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, topic: Var) -> Result<Var> {
        let lin = tape.matmul(topic, p.var(self.weight))?;
        let lin = tape.add_row(lin, p.var(self.bias))?;
        tape.layer_norm_rows(lin, p.var(self.gain), p.var(self.shift), LN_EPS)
    }
}

/// Gate weights of one GRU layer.
///
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wh + (r * h) Uh + bh)`, `h' = (1 - z) * h + z * c`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wh: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub uh: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bh: ParamId,
}

impl GruParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut add = |name: &str, shape: &[usize]| store.add_uniform(format!("{prefix}.{name}"), shape, bound, rng);
        Self {
            wz: add("wz", &[d_in, d_h]),
            wr: add("wr", &[d_in, d_h]),
            wh: add("wh", &[d_in, d_h]),
            uz: add("uz", &[d_h, d_h]),
            ur: add("ur", &[d_h, d_h]),
            uh: add("uh", &[d_h, d_h]),
            bz: add("bz", &[d_h]),
            br: add("br", &[d_h]),
            bh: add("bh", &[d_h]),
        }
    }

    pub fn hidden(&self, p: &Bound, tape: &Tape) -> usize {
        tape.shape(p.var(self.uz))[0]
    }

    /// Runs the recurrence over the rows of `xs: [L x d_in]` from a zero state
    /// and returns the stacked states `[L x d_h]`.
    pub fn run(&self, tape: &mut Tape, p: &Bound, xs: Var) -> Result<Var> {
        let steps = tape.shape(xs)[0];
        let d_h = self.hidden(p, tape);
        let xz = tape.matmul(xs, p.var(self.wz))?;
        let xz = tape.add_row(xz, p.var(self.bz))?;
        let xr = tape.matmul(xs, p.var(self.wr))?;
        let xr = tape.add_row(xr, p.var(self.br))?;
        let xh = tape.matmul(xs, p.var(self.wh))?;
        let xh = tape.add_row(xh, p.var(self.bh))?;
        let mut h = tape.constant(crate::tensor::Tensor::zeros(&[1, d_h]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let gates = [xz, xr, xh].map(|g| tape.gather_rows(g, &[t]));
            let [gz, gr, gh] = gates;
            h = self.step(tape, p, gz?, gr?, gh?, h)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }

    fn step(&self, tape: &mut Tape, p: &Bound, xz: Var, xr: Var, xh: Var, h: Var) -> Result<Var> {
        let hz = tape.matmul(h, p.var(self.uz))?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let hr = tape.matmul(h, p.var(self.ur))?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let hh = tape.matmul(rh, p.var(self.uh))?;
        let c = tape.add(xh, hh)?;
        let c = tape.tanh(c);
        let delta = tape.sub(c, h)?;
        let step = tape.mul(z, delta)?;
        tape.add(h, step)
    }
}

/// One GRU step on explicit inputs: `x: [1 x d_in]`, `h_prev: [1 x d_h]`.
pub fn gru_cell(tape: &mut Tape, p: &Bound, gru: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let d_in = tape.shape(p.var(gru.wz))[0];
    if tape.shape(x) != [1, d_in] || tape.shape(h_prev) != [1, gru.hidden(p, tape)] {
        return Err(crate::error::Error::Dimension {
            op: "gru_cell",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(h_prev).to_vec(),
        });
    }
    let xz = tape.matmul(x, p.var(gru.wz))?;
    let xz = tape.add_row(xz, p.var(gru.bz))?;
    let xr = tape.matmul(x, p.var(gru.wr))?;
    let xr = tape.add_row(xr, p.var(gru.br))?;
    let xh = tape.matmul(x, p.var(gru.wh))?;
    let xh = tape.add_row(xh, p.var(gru.bh))?;
    gru.step(tape, p, xz, xr, xh, h_prev)
}

/// GRU followed by layer norm over its outputs.
#[derive(Clone, Debug)]
pub struct ChannelEncoder {
    gru: GruParams,
    gain: ParamId,
    shift: ParamId,
}

impl ChannelEncoder {
    fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        Self {
            gru: GruParams::register(store, &format!("{prefix}.gru"), d_in, d_h, rng),
            gain: store.add_const(format!("{prefix}.ln_gain"), &[d_h], 1.0),
            shift: store.add_const(format!("{prefix}.ln_bias"), &[d_h], 0.0),
        }
    }

    pub fn gru(&self) -> &GruParams {
        &self.gru
    }

    /// Every parameter owned by this channel.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let g = &self.gru;
        vec![g.wz, g.wr, g.wh, g.uz, g.ur, g.uh, g.bz, g.br, g.bh, self.gain, self.shift]
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, xs: Var) -> Result<Var> {
        let states = self.gru.run(tape, p, xs)?;
        tape.layer_norm_rows(states, p.var(self.gain), p.var(self.shift), LN_EPS)
    }
}

/// Topic projector plus independent image and text channels.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub topic: TopicProjector,
    pub image: ChannelEncoder,
    pub text: ChannelEncoder,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, d_e: usize, d_h: usize, rng: &mut Rng) -> Self {
        Self {
            topic: TopicProjector::register(store, "topic", d_e, d_h, rng),
            image: ChannelEncoder::register(store, "image", d_e, d_h, rng),
            text: ChannelEncoder::register(store, "text", d_e, d_h, rng),
        }
    }

    /// Image and text states, each `[L x d_h]`.
    pub fn process_channels(&self, tape: &mut Tape, p: &Bound, images: Var, texts: Var) -> Result<(Var, Var)> {
        let (li, lt) = (tape.shape(images)[0], tape.shape(texts)[0]);
        if li != lt {
            return Err(validation(format!("image channel has {li} steps, text channel {lt}")));
        }
        Ok((self.image.forward(tape, p, images)?, self.text.forward(tape, p, texts)?))
    }
}
