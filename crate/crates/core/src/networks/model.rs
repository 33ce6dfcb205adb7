//! Parameter layout, initialization and forward passes of every network.
//!
//! Parameter names:
//!
//! - `backbone.{i}.{w,b}`: backbone blocks
//! - `metacnn.{0,1}.{w,b}`: novel-feature extractor on the backbone tap
//! - `mergenet.{pre,meta}.{0..3}.{w,b}`: mixture-weight generators
//! - `tconnet.{gamma,beta,lambda}.{0..2}.{w,b}`: classifier conditioning
//! - `classifier.base`, `classifier.tau`: pretrained base weights and cosine scale
//! - `tapnet.phi`: per-class reference vectors
//! - `lwof.{keys,phi_avg,phi_att,gamma}`: attention weight generator

use rand::Rng;

use super::config::{BackboneConfig, ModelConfig, Variant};
use super::graph::Graph;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RealArray, Var};

pub const MERGENET_DEPTH: usize = 4;
pub const TCONNET_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub config: ModelConfig,
}

fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> RealArray {
    RealArray::randn(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng)
}

fn insert_linear<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut R) {
    let w = if zero {
        RealArray::zeros(&[fan_in, fan_out])
    } else {
        he(fan_in, fan_out, rng)
    };
    p.insert(format!("{prefix}.w"), w);
    p.insert(format!("{prefix}.b"), RealArray::zeros(&[1, fan_out]));
}

impl Networks {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn d(&self) -> usize {
        self.config.feature_dim()
    }

    /// Channel count or width of the tap output.
    fn tap_width(&self) -> usize {
        match &self.config.backbone {
            BackboneConfig::Dense { widths, tap_after } => widths[tap_after - 1],
            BackboneConfig::Conv { channels, tap_after } => channels[tap_after - 1],
        }
    }

    /// Fresh parameters. Final layers of MetaCNN, both MergeNet stacks and
    /// the scale/shift TconNet stacks start at zero, so an untrained model
    /// mixes `1 * f + 1 * 0` and leaves base weights unconditioned.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let cfg = &self.config;
        let d = self.d();
        let nb = cfg.n_base;
        let mut p = ParamStore::new();

        match &cfg.backbone {
            BackboneConfig::Dense { widths, .. } => {
                let mut fan_in = cfg.input_shape[0];
                for (i, &w) in widths.iter().enumerate() {
                    insert_linear(&mut p, &format!("backbone.{i}"), fan_in, w, false, rng);
                    fan_in = w;
                }
                insert_linear(&mut p, "metacnn.0", self.tap_width(), d, false, rng);
            }
            BackboneConfig::Conv { channels, .. } => {
                let mut cin = cfg.input_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    insert_linear(&mut p, &format!("backbone.{i}"), 9 * cin, c, false, rng);
                    cin = c;
                }
                insert_linear(&mut p, "metacnn.0", 9 * self.tap_width(), d, false, rng);
            }
        }
        insert_linear(&mut p, "metacnn.1", d, d, true, rng);

        for stack in ["pre", "meta"] {
            for l in 0..MERGENET_DEPTH {
                let last = l == MERGENET_DEPTH - 1;
                let out = if last { d } else { 2 * d };
                insert_linear(&mut p, &format!("mergenet.{stack}.{l}"), 2 * d, out, last, rng);
            }
        }
        for stack in ["gamma", "beta"] {
            for l in 0..TCONNET_DEPTH {
                insert_linear(&mut p, &format!("tconnet.{stack}.{l}"), d, d, l == TCONNET_DEPTH - 1, rng);
            }
        }
        for l in 0..TCONNET_DEPTH {
            insert_linear(&mut p, &format!("tconnet.lambda.{l}"), nb, nb, false, rng);
        }

        p.insert("classifier.base", RealArray::randn(&[nb, d], (1.0 / d as f64).sqrt(), rng));
        p.insert("classifier.tau", RealArray::scalar(cfg.init_tau));
        match cfg.variant {
            Variant::Imprint => {}
            Variant::Tapnet => {
                p.insert("tapnet.phi", RealArray::randn(&[cfg.n_way, d], (1.0 / d as f64).sqrt(), rng));
            }
            Variant::Lwof => {
                p.insert("lwof.keys", RealArray::randn(&[nb, d], (1.0 / d as f64).sqrt(), rng));
                p.insert("lwof.phi_avg", RealArray::ones(&[1, d]));
                p.insert("lwof.phi_att", RealArray::full(&[1, d], 0.5));
                p.insert("lwof.gamma", RealArray::scalar(10.0));
            }
        }
        p
    }

    /// Stacks samples into the backbone's batch layout: `[b, p]` for dense
    /// backbones, NHWC for convolutional ones.
    pub fn batch(&self, inputs: &[&RealArray]) -> Result<RealArray> {
        let shape = &self.config.input_shape;
        if let Some(bad) = inputs.iter().find(|x| x.shape() != shape.as_slice()) {
            return Err(Error::shape(
                "backbone_forward",
                format!("input {:?}, expected {shape:?}", bad.shape()),
            ));
        }
        let b = inputs.len();
        match &self.config.backbone {
            BackboneConfig::Dense { .. } => {
                let rows: Vec<&[f64]> = inputs.iter().map(|x| x.data()).collect();
                RealArray::stack_rows(&rows)
            }
            BackboneConfig::Conv { .. } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut out = vec![0.0; b * h * w * c];
                for (bi, x) in inputs.iter().enumerate() {
                    let xd = x.data();
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                out[((bi * h + y) * w + xx) * c + ci] = xd[(ci * h + y) * w + xx];
                            }
                        }
                    }
                }
                RealArray::new(vec![b, h, w, c], out)
            }
        }
    }

    fn conv_block(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.w"))?;
        let b = g.param(&format!("{prefix}.b"))?;
        let y = g.tape.conv3x3(x, w)?;
        let shape = g.value(y).shape().to_vec();
        let flat = g.tape.reshape(y, &[shape[0] * shape[1] * shape[2], shape[3]])?;
        let flat = g.tape.add_row(flat, b)?;
        let flat = g.tape.relu(flat)?;
        let y = g.tape.reshape(flat, &shape)?;
        if shape[1] % 2 == 0 && shape[2] % 2 == 0 {
            g.tape.avg_pool2(y)
        } else {
            Ok(y)
        }
    }

    /// Returns `(tap, f)`: the output of block `tap_after` and the final
    /// length-D feature.
    pub fn backbone(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let tap_after = self.config.backbone.tap_after();
        let blocks = self.config.backbone.blocks();
        let mut h = x;
        let mut tap = None;
        for i in 0..blocks {
            let prefix = format!("backbone.{i}");
            h = match &self.config.backbone {
                BackboneConfig::Dense { .. } if i + 1 == blocks => g.linear(h, &prefix)?,
                BackboneConfig::Dense { .. } => g.linear_relu(h, &prefix)?,
                BackboneConfig::Conv { .. } => Self::conv_block(g, h, &prefix)?,
            };
            if i + 1 == tap_after {
                tap = Some(h);
            }
        }
        if let BackboneConfig::Conv { .. } = self.config.backbone {
            h = g.tape.global_avg_pool(h)?;
        }
        Ok((tap.expect("tap_after validated"), h))
    }

    /// Novel feature `g(a)` of length D.
    pub fn metacnn(&self, g: &mut Graph, tap: Var) -> Result<Var> {
        let hidden = match self.config.backbone {
            BackboneConfig::Dense { .. } => g.linear_relu(tap, "metacnn.0")?,
            BackboneConfig::Conv { .. } => {
                let y = Self::conv_block(g, tap, "metacnn.0")?;
                g.tape.global_avg_pool(y)?
            }
        };
        g.linear(hidden, "metacnn.1")
    }

    /// `(omega_pre, omega_meta)`, each `2 * sigmoid(u)` of its stack's last
    /// pre-activation, so every entry lies in `(0, 2)`.
    pub fn mergenet(&self, g: &mut Graph, c: Var) -> Result<(Var, Var)> {
        let d = self.d();
        if g.value(c).shape() != [1, 2 * d] {
            return Err(Error::shape(
                "mergenet_forward",
                format!("task representation {:?}, expected [1, {}]", g.value(c).shape(), 2 * d),
            ));
        }
        let mut out = Vec::with_capacity(2);
        for stack in ["pre", "meta"] {
            let mut h = c;
            for l in 0..MERGENET_DEPTH {
                let prefix = format!("mergenet.{stack}.{l}");
                h = if l + 1 == MERGENET_DEPTH {
                    g.linear(h, &prefix)?
                } else {
                    g.linear_relu(h, &prefix)?
                };
            }
            let s = g.tape.sigmoid(h)?;
            out.push(g.tape.scale(s, 2.0)?);
        }
        Ok((out[0], out[1]))
    }

    /// Scale/shift stack: two residual `relu` layers and a linear output.
    fn tcon_stack(&self, g: &mut Graph, x: Var, stack: &str) -> Result<Var> {
        let mut h = x;
        for l in 0..TCONNET_DEPTH - 1 {
            let r = g.linear_relu(h, &format!("tconnet.{stack}.{l}"))?;
            h = g.tape.add(h, r)?;
        }
        g.linear(h, &format!("tconnet.{stack}.{}", TCONNET_DEPTH - 1))
    }

    /// `(h_gamma(c*), h_beta(c*))` for a `[1, D]` mean prototype.
    pub fn tconnet_gamma_beta(&self, g: &mut Graph, c_star: Var) -> Result<(Var, Var)> {
        if g.value(c_star).shape() != [1, self.d()] {
            return Err(Error::shape("condition_base", "c* must be [1, D]"));
        }
        let gamma = self.tcon_stack(g, c_star, "gamma")?;
        let beta = self.tcon_stack(g, c_star, "beta")?;
        Ok((gamma, beta))
    }

    /// `h_lambda` on correlation rows `[n, N_b]`: a `relu` layer followed by
    /// two layers with skip connections (`relu`, then linear).
    pub fn tconnet_lambda(&self, g: &mut Graph, sigma: Var) -> Result<Var> {
        if g.value(sigma).cols() != self.config.n_base {
            return Err(Error::shape("adapt_novel", "correlation rows must have N_b entries"));
        }
        let h1 = g.linear_relu(sigma, "tconnet.lambda.0")?;
        let r2 = g.linear_relu(h1, "tconnet.lambda.1")?;
        let h2 = g.tape.add(h1, r2)?;
        let r3 = g.linear(h2, "tconnet.lambda.2")?;
        g.tape.add(h2, r3)
    }

    /// Attention-based novel weights from prototypes `[n, D]` and the base
    /// weights `[a, D]` of the active base classes `active` (0-based):
    /// `w_k = phi_avg * c_k/|c_k| + sum_j att_kj * (phi_att * w_j/|w_j|)`,
    /// `att_k = softmax_j(gamma * cos(key_j, c_k))`.
    pub fn lwof_generate(&self, g: &mut Graph, prototypes: Var, base: Var, active: &[usize]) -> Result<Var> {
        let c_hat = g.tape.row_normalize(prototypes)?;
        let mut keys = g.param("lwof.keys")?;
        if active.len() != self.config.n_base {
            keys = g.tape.select_rows(keys, active)?;
        }
        let keys = g.tape.row_normalize(keys)?;
        let keys_t = g.tape.transpose(keys)?;
        let cos = g.tape.matmul(c_hat, keys_t)?;
        let gamma = g.param("lwof.gamma")?;
        let logits = g.tape.scale_by(cos, gamma)?;
        let att = g.tape.softmax_rows(logits)?;
        let w_hat = g.tape.row_normalize(base)?;
        let phi_att = g.param("lwof.phi_att")?;
        let w_hat = g.tape.mul_row(w_hat, phi_att)?;
        let attended = g.tape.matmul(att, w_hat)?;
        let phi_avg = g.param("lwof.phi_avg")?;
        let direct = g.tape.mul_row(c_hat, phi_avg)?;
        g.tape.add(direct, attended)
    }

    /// Names meta-training may update for the given modules and variant.
    pub fn meta_trainable(&self, stages: &super::Stages) -> impl Fn(&str) -> bool {
        let stages = *stages;
        let variant = self.config.variant;
        move |name: &str| {
            (stages.metacnn && name.starts_with("metacnn."))
                || (stages.mergenet && name.starts_with("mergenet."))
                || (stages.tconnet && name.starts_with("tconnet."))
                || (variant == Variant::Tapnet && name.starts_with("tapnet."))
                || (variant == Variant::Lwof && name.starts_with("lwof."))
        }
    }

    /// Plain (tape-free) backbone pass over a single input.
    pub fn backbone_forward(&self, params: &ParamStore, x: &RealArray) -> Result<(RealArray, RealArray)> {
        let mut g = Graph::new(params);
        let xb = g.constant(self.batch(&[x])?)?;
        let (tap, f) = self.backbone(&mut g, xb)?;
        Ok((g.value(tap).clone(), g.value(f).clone()))
    }

    /// Plain MetaCNN pass over a batched tap tensor.
    pub fn metacnn_forward(&self, params: &ParamStore, tap: &RealArray) -> Result<RealArray> {
        let mut g = Graph::new(params);
        let t = g.constant(tap.clone())?;
        let out = self.metacnn(&mut g, t)?;
        Ok(g.value(out).clone())
    }

    pub fn mergenet_forward(&self, params: &ParamStore, c: &RealArray) -> Result<(RealArray, RealArray)> {
        let mut g = Graph::new(params);
        let cv = g.constant(c.clone())?;
        let (a, b) = self.mergenet(&mut g, cv)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    }

    pub fn lwof_forward(&self, params: &ParamStore, prototypes: &RealArray, base: &RealArray) -> Result<RealArray> {
        let mut g = Graph::new(params);
        let p = g.constant(prototypes.clone())?;
        let b = g.constant(base.clone())?;
        let active: Vec<usize> = (0..self.config.n_base).collect();
        let w = self.lwof_generate(&mut g, p, b, &active)?;
        Ok(g.value(w).clone())
    }
}
