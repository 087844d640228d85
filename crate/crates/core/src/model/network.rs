//! Two-channel encoder, shared joint layer and per-view decoders.
//!
//! Parameter names follow `enc.{x,y}.*`, `dec.*`; running batch-norm
//! statistics are keyed by the layer prefix (`enc.x.bn0`, `dec.bn`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{ArchitectureSpec, LossWeights};
use crate::engine::{Activation, BatchStats, Mode, ParamSet, PoolPolicy, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const VIEW_TAGS: [&str; 2] = ["x", "y"];

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub weights: LossWeights,
    pub params: ParamSet,
    pub running: BTreeMap<String, RunningStats>,
}

enum Init {
    /// Uniform ±√(6/fan_in); layers feeding a relu.
    He(usize),
    /// Uniform ±√(6/(fan_in+fan_out)).
    Xavier(usize, usize),
    Zeros,
    Ones,
}

/// Every parameter in construction order, with its shape and initializer.
fn layout(spec: &ArchitectureSpec) -> Result<Vec<(String, Vec<usize>, Init)>> {
    let mut out = Vec::new();
    let feeds = |act: Activation, fan_in: usize, fan_out: usize| match act {
        Activation::Relu => Init::He(fan_in),
        _ => Init::Xavier(fan_in, fan_out),
    };
    for (v, t) in VIEW_TAGS.iter().enumerate() {
        let [mut c, _, _] = spec.image_shape(v);
        for (i, s) in spec.conv_stack.iter().enumerate() {
            let fan_in = c * s.kernel * s.kernel;
            out.push((
                format!("enc.{t}.conv{i}.kernel"),
                vec![s.filters, c, s.kernel, s.kernel],
                feeds(spec.activation, fan_in, s.filters * s.kernel * s.kernel),
            ));
            out.push((format!("enc.{t}.conv{i}.bias"), vec![s.filters], Init::Zeros));
            c = s.filters;
        }
        let mut width = spec.conv_output_dim(v)?;
        for (j, &w) in spec.dense_widths.iter().enumerate() {
            out.push((format!("enc.{t}.dense{j}.weight"), vec![width, w], feeds(spec.activation, width, w)));
            out.push((format!("enc.{t}.dense{j}.bias"), vec![w], Init::Zeros));
            out.push((format!("enc.{t}.bn{j}.gamma"), vec![w], Init::Ones));
            out.push((format!("enc.{t}.bn{j}.beta"), vec![w], Init::Zeros));
            width = w;
        }
        let joint = spec.joint_dim;
        out.push((format!("enc.{t}.proj.weight"), vec![width, joint], feeds(spec.joint_activation, width, joint)));
        out.push((format!("enc.{t}.proj.bias"), vec![joint], Init::Zeros));
    }
    let dw = spec.decoder_width;
    out.push(("dec.dense.weight".into(), vec![spec.joint_dim, dw], feeds(spec.activation, spec.joint_dim, dw)));
    out.push(("dec.dense.bias".into(), vec![dw], Init::Zeros));
    out.push(("dec.bn.gamma".into(), vec![dw], Init::Ones));
    out.push(("dec.bn.beta".into(), vec![dw], Init::Zeros));
    for (v, t) in VIEW_TAGS.iter().enumerate() {
        let d = spec.view_dim(v);
        match (&spec.deconv_paths, spec.use_deconv_decoder) {
            (Some(paths), true) => {
                let p = &paths[v];
                let seed: usize = p.seed.iter().product();
                out.push((format!("dec.{t}.seed.weight"), vec![dw, seed], feeds(spec.activation, dw, seed)));
                out.push((format!("dec.{t}.seed.bias"), vec![seed], Init::Zeros));
                let mut c = p.seed[0];
                for (i, s) in p.stages.iter().enumerate() {
                    let last = i + 1 == p.stages.len();
                    let act = if last { spec.output_activation } else { spec.activation };
                    let (kh, kw) = s.kernel;
                    out.push((
                        format!("dec.{t}.deconv{i}.kernel"),
                        vec![c, s.filters, kh, kw],
                        feeds(act, c * kh * kw, s.filters * kh * kw),
                    ));
                    out.push((format!("dec.{t}.deconv{i}.bias"), vec![s.filters], Init::Zeros));
                    c = s.filters;
                }
            }
            _ => {
                if !spec.ties_output() {
                    out.push((format!("dec.{t}.out.weight"), vec![dw, d], Init::Xavier(dw, d)));
                }
                out.push((format!("dec.{t}.out.bias"), vec![d], Init::Zeros));
            }
        }
    }
    Ok(out)
}

fn bn_layers(spec: &ArchitectureSpec) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for t in VIEW_TAGS {
        for (j, &w) in spec.dense_widths.iter().enumerate() {
            out.push((format!("enc.{t}.bn{j}"), w));
        }
    }
    out.push(("dec.bn".into(), spec.decoder_width));
    out
}

impl Model {
    /// Seeded initialization: identical seeds give bitwise identical models.
    pub fn new(spec: ArchitectureSpec, weights: LossWeights, seed: u64) -> Result<Self> {
        spec.validate(&weights)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&spec)? {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::He(fan_in) => uniform(&shape, (6.0 / fan_in as f64).sqrt(), &mut rng),
                Init::Xavier(i, o) => uniform(&shape, (6.0 / (i + o) as f64).sqrt(), &mut rng),
            };
            params.insert(name, t);
        }
        let running = bn_layers(&spec)
            .into_iter()
            .map(|(n, f)| (n, RunningStats::new(f)))
            .collect();
        Ok(Self {
            spec,
            weights,
            params,
            running,
        })
    }

    /// Checks that parameters and running statistics match the layout.
    pub fn check_layout(&self) -> Result<()> {
        let expected = layout(&self.spec)?;
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match self.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        for (name, f) in bn_layers(&self.spec) {
            match self.running.get(&name) {
                Some(r) if r.mean.len() == f && r.var.len() == f => {}
                _ => return Err(Error::Checkpoint(format!("missing or malformed running statistics {name}"))),
            }
        }
        Ok(())
    }

    pub fn forward(&self, mode: Mode, dropout_seed: u64) -> Forward<'_> {
        Forward {
            tape: Tape::new(),
            model: self,
            vars: BTreeMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            bn_updates: Vec::new(),
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        for (name, stats) in updates {
            if let Some(r) = self.running.get_mut(name) {
                r.update(stats, self.spec.bn_momentum);
            }
        }
    }

    /// Eval-mode joint representation of both views (`None` = absent view).
    pub fn encode(&self, x: Option<&Tensor>, y: Option<&Tensor>) -> Result<Tensor> {
        let mut f = self.forward(Mode::Eval, 0);
        let enc = f.encode(x, y)?;
        Ok(f.tape.value(enc.joint).clone())
    }

    /// Eval-mode reconstruction of both views from a joint representation.
    pub fn decode(&self, joint: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut f = self.forward(Mode::Eval, 0);
        let h = f.tape.constant(joint.clone());
        let dec = f.decode(h)?;
        Ok((f.tape.value(dec.recon[0]).clone(), f.tape.value(dec.recon[1]).clone()))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Single-pass encoder output.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// Per-view activations after each encoder dense step (`h(x^j)`, `h(y^j)`).
    pub steps: [Vec<Var>; 2],
    pub joint: Var,
}

#[derive(Clone, Debug)]
pub struct Decoding {
    /// Decoder dense-step activations, before dropout.
    pub hidden: Var,
    /// Flattened reconstructions `[N, d_x]`, `[N, d_y]`.
    pub recon: [Var; 2],
}

/// Everything the objective needs from one batch: the full pass and the two
/// masked single-view passes.
#[derive(Clone, Debug)]
pub struct EncodingTrace {
    pub batch: usize,
    /// Reconstruction target `z = [x, y]`.
    pub target: Var,
    /// `h(x^j)` and `h(y^j)` per encoder step, from the single-view passes.
    pub steps: [Vec<Var>; 2],
    /// `h(z)`, `h(X)` (x only), `h(Y)` (y only).
    pub joint_both: Var,
    pub joint_x: Var,
    pub joint_y: Var,
    /// Decoder dense activations for the x-only and y-only passes.
    pub hidden_x: Var,
    pub hidden_y: Var,
    /// `g(h(z))`, `g(h(X))`, `g(h(Y))`, each `[B, d_x + d_y]`.
    pub recon_both: Var,
    pub recon_from_x: Var,
    pub recon_from_y: Var,
}

/// One recorded forward computation.
pub struct Forward<'m> {
    pub tape: Tape,
    model: &'m Model,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'m> Forward<'m> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?
            .clone();
        let v = self.tape.param(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn batch_norm(&mut self, prefix: &str, input: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = self.model.spec.bn_epsilon;
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.tape.batch_norm_train(input, gamma, beta, eps)?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(out)
            }
            Mode::Eval => {
                let r = self
                    .model
                    .running
                    .get(prefix)
                    .ok_or_else(|| Error::Checkpoint(format!("missing running statistics {prefix}")))?;
                self.tape.batch_norm_eval(input, gamma, beta, &r.mean, &r.var, eps)
            }
        }
    }

    fn dense(&mut self, prefix: &str, input: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.dense(input, w, b)
    }

    fn check_view(&self, v: usize, t: &Tensor) -> Result<()> {
        let d = self.model.spec.view_dim(v);
        if t.rank() < 2 || t.row_len() != d {
            return Err(Error::Dimension(format!(
                "view {} expects [batch, {d}] input, got {:?}",
                VIEW_TAGS[v],
                t.shape()
            )));
        }
        Ok(())
    }

    /// Runs channel `v` over `input` (`[N, d_v]`), returning per-step
    /// activations and the pre-activation joint projection.
    fn channel(&mut self, v: usize, input: &Tensor) -> Result<(Vec<Var>, Var)> {
        let model: &'m Model = self.model;
        let spec = &model.spec;
        let t = VIEW_TAGS[v];
        let n = input.rows();
        let act = spec.activation;
        let mut h = if spec.conv_stack.is_empty() {
            self.tape.constant(input.clone().reshape(&[n, spec.view_dim(v)])?)
        } else {
            let [c, hh, ww] = spec.image_shape(v);
            let mut h = self.tape.constant(input.clone().reshape(&[n, c, hh, ww])?);
            for (i, s) in spec.conv_stack.iter().enumerate() {
                let k = self.param(&format!("enc.{t}.conv{i}.kernel"))?;
                let b = self.param(&format!("enc.{t}.conv{i}.bias"))?;
                h = self.tape.conv2d(h, k, b, s.pad)?;
                h = self.tape.activation(h, act);
                if s.pool {
                    h = self.tape.maxpool2x2(h, PoolPolicy::Floor)?;
                }
            }
            self.tape.flatten(h)?
        };
        let mut steps = Vec::new();
        for j in 0..spec.dense_widths.len() {
            h = self.dense(&format!("enc.{t}.dense{j}"), h)?;
            h = self.batch_norm(&format!("enc.{t}.bn{j}"), h)?;
            h = self.tape.activation(h, act);
            steps.push(h);
        }
        let proj = self.dense(&format!("enc.{t}.proj"), h)?;
        Ok((steps, proj))
    }

    /// Encodes one pass; an absent view is replaced by zeros.
    pub fn encode(&mut self, x: Option<&Tensor>, y: Option<&Tensor>) -> Result<Encoding> {
        let n = match (x, y) {
            (Some(a), _) | (None, Some(a)) => a.rows(),
            (None, None) => return Err(Error::Usage("encode needs at least one view".into())),
        };
        let mut steps: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut proj = Vec::new();
        for (v, view) in [x, y].into_iter().enumerate() {
            let input = match view {
                Some(t) => {
                    self.check_view(v, t)?;
                    if t.rows() != n {
                        return Err(Error::Dimension(format!(
                            "views disagree on batch size: {n} vs {}",
                            t.rows()
                        )));
                    }
                    t.clone()
                }
                None => Tensor::zeros(&[n, self.model.spec.view_dim(v)]),
            };
            let (s, p) = self.channel(v, &input)?;
            steps[v] = s;
            proj.push(p);
        }
        let pre = self.tape.add(proj[0], proj[1])?;
        let joint = self.tape.activation(pre, self.model.spec.joint_activation);
        Ok(Encoding { steps, joint })
    }

    /// Decodes `joint` (`[N, joint_dim]`) into both views.
    pub fn decode(&mut self, joint: Var) -> Result<Decoding> {
        let spec = self.model.spec.clone();
        let mut h = self.dense("dec.dense", joint)?;
        h = self.batch_norm("dec.bn", h)?;
        let hidden = self.tape.activation(h, spec.activation);
        let dropped = self
            .tape
            .dropout(hidden, spec.dropout_rate, self.mode, &mut self.rng)?;
        let n = self.tape.shape(joint)[0];
        let mut recon = Vec::with_capacity(2);
        for (v, t) in VIEW_TAGS.iter().enumerate() {
            let out = match (&spec.deconv_paths, spec.use_deconv_decoder) {
                (Some(paths), true) => {
                    let p = &paths[v];
                    let mut g = self.dense(&format!("dec.{t}.seed"), dropped)?;
                    g = self.tape.activation(g, spec.activation);
                    let [c, sh, sw] = p.seed;
                    g = self.tape.reshape(g, &[n, c, sh, sw])?;
                    for i in 0..p.stages.len() {
                        let last = i + 1 == p.stages.len();
                        g = self.tape.upsample2x(g)?;
                        let k = self.param(&format!("dec.{t}.deconv{i}.kernel"))?;
                        let b = self.param(&format!("dec.{t}.deconv{i}.bias"))?;
                        g = self.tape.deconv2d(g, k, b)?;
                        let act = if last { spec.output_activation } else { spec.activation };
                        g = self.tape.activation(g, act);
                    }
                    self.tape.flatten(g)?
                }
                _ => {
                    let w = if spec.ties_output() {
                        let enc = self.param(&format!("enc.{t}.dense0.weight"))?;
                        self.tape.transpose(enc)?
                    } else {
                        self.param(&format!("dec.{t}.out.weight"))?
                    };
                    let b = self.param(&format!("dec.{t}.out.bias"))?;
                    let g = self.tape.dense(dropped, w, b)?;
                    self.tape.activation(g, spec.output_activation)
                }
            };
            recon.push(out);
        }
        Ok(Decoding {
            hidden,
            recon: [recon[0], recon[1]],
        })
    }

    /// Full pass plus both masked single-view passes over one batch.
    ///
    /// Each channel sees its real rows stacked on top of the zero rows of the
    /// masked pass, so in train mode the three passes share batch-norm
    /// statistics; the decoder likewise sees all three joint codes at once.
    pub fn trace(&mut self, x: &Tensor, y: &Tensor) -> Result<EncodingTrace> {
        self.check_view(0, x)?;
        self.check_view(1, y)?;
        let b = x.rows();
        if y.rows() != b {
            return Err(Error::Dimension(format!("views disagree on batch size: {b} vs {}", y.rows())));
        }
        let flat = |t: &Tensor, d: usize| t.clone().reshape(&[b, d]);
        let (dx, dy) = (self.model.spec.view_dim(0), self.model.spec.view_dim(1));
        let (xf, yf) = (flat(x, dx)?, flat(y, dy)?);
        let stacked = |t: &Tensor, d: usize| {
            let mut data = t.data().to_vec();
            data.resize(2 * b * d, 0.0);
            Tensor::new(&[2 * b, d], data)
        };
        let (sx, px) = self.channel(0, &stacked(&xf, dx)?)?;
        let (sy, py) = self.channel(1, &stacked(&yf, dy)?)?;
        let top = |f: &mut Self, v: Var| f.tape.slice_rows(v, 0, b);
        let bottom = |f: &mut Self, v: Var| f.tape.slice_rows(v, b, 2 * b);
        let steps_x = sx.iter().map(|&s| top(self, s)).collect::<Result<Vec<_>>>()?;
        let steps_y = sy.iter().map(|&s| top(self, s)).collect::<Result<Vec<_>>>()?;
        let (px_real, px_zero) = (top(self, px)?, bottom(self, px)?);
        let (py_real, py_zero) = (top(self, py)?, bottom(self, py)?);
        let both = self.tape.add(px_real, py_real)?;
        let only_x = self.tape.add(px_real, py_zero)?;
        let only_y = self.tape.add(px_zero, py_real)?;
        let pre = self.tape.concat_rows(&[both, only_x, only_y])?;
        let joint = self.tape.activation(pre, self.model.spec.joint_activation);
        let dec = self.decode(joint)?;
        let recon = self.tape.concat_cols(&dec.recon)?;
        let third = |f: &mut Self, v: Var, i: usize| f.tape.slice_rows(v, i * b, (i + 1) * b);
        let target = {
            let mut data = Vec::with_capacity(b * (dx + dy));
            for i in 0..b {
                data.extend_from_slice(xf.row(i));
                data.extend_from_slice(yf.row(i));
            }
            self.tape.constant(Tensor::new(&[b, dx + dy], data)?)
        };
        Ok(EncodingTrace {
            batch: b,
            target,
            steps: [steps_x, steps_y],
            joint_both: third(self, joint, 0)?,
            joint_x: third(self, joint, 1)?,
            joint_y: third(self, joint, 2)?,
            hidden_x: third(self, dec.hidden, 1)?,
            hidden_y: third(self, dec.hidden, 2)?,
            recon_both: third(self, recon, 0)?,
            recon_from_x: third(self, recon, 1)?,
            recon_from_y: third(self, recon, 2)?,
        })
    }

    /// Gradients of `loss` for every parameter touched by this pass, plus
    /// the batch statistics collected along the way.
    pub fn finish(self, loss: Var) -> Result<(ParamSet, Vec<(String, BatchStats)>)> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            if let Some(g) = grads.take(*v) {
                out.insert(name.clone(), g);
            }
        }
        Ok((out, self.bn_updates))
    }

    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }
}
