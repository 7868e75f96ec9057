use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::input::{PreparedInput, INSTANCE_NORM_EPS, LOG_FLOOR};
use super::{NeuralError, Stage, PSD_FLOOR};
use crate::autodiff::{CVar, Graph, ParamStore, Tensor, Var};
use crate::container::Container;

/// Floor added to posterior variances.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Diagonal loading of the mask-weighted covariances (mixtures are
/// normalized to unit mean power).
pub const COV_LOADING: f64 = 1e-6;
/// Added to the frequency-wise gain estimates before normalization so that
/// silent input yields uniform gains.
pub const GAIN_FLOOR: f64 = 1e-10;

const CHECKPOINT_KIND: &str = "neural-fastfca";

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralConfig {
    /// Frequency bins `F`.
    pub bins: usize,
    /// Microphones `M`.
    pub channels: usize,
    /// Source slots `N`.
    pub sources: usize,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// ISS blocks `B`; the encoder has `B + 1` DNN blocks.
    pub iss_blocks: usize,
    /// Channel width of the encoder blocks.
    pub width: usize,
    /// Channel width of the decoder.
    pub decoder_width: usize,
    /// Convolution layers per DNN block.
    pub layers: usize,
    /// Convolution kernel size (odd).
    pub kernel: usize,
}

impl NeuralConfig {
    pub fn desk(bins: usize, channels: usize) -> Self {
        Self { bins, channels, sources: 3, latent_dim: 8, iss_blocks: 4, width: 32, decoder_width: 32, layers: 5, kernel: 5 }
    }

    pub fn paper(bins: usize, channels: usize) -> Self {
        Self { bins, channels, sources: 5, latent_dim: 50, iss_blocks: 8, width: 256, decoder_width: 256, layers: 5, kernel: 5 }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let positive = [
            ("bins", self.bins),
            ("sources", self.sources),
            ("latent_dim", self.latent_dim),
            ("width", self.width),
            ("decoder_width", self.decoder_width),
            ("kernel", self.kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NeuralError::Config(format!("{name} must be positive")));
        }
        if self.channels < 2 {
            return Err(NeuralError::Config(format!("need at least 2 channels, got {}", self.channels)));
        }
        if self.kernel % 2 == 0 {
            return Err(NeuralError::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub(crate) fn feature_rows(&self) -> usize {
        self.bins * self.channels + 2 * self.bins * (self.channels - 1)
    }

    fn to_tensor(&self) -> Tensor {
        let v = [
            self.bins,
            self.channels,
            self.sources,
            self.latent_dim,
            self.iss_blocks,
            self.width,
            self.decoder_width,
            self.layers,
            self.kernel,
        ];
        Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("config shape")
    }

    fn from_tensor(t: &Tensor) -> Result<Self, NeuralError> {
        let d = t.data();
        if d.len() != 9 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(NeuralError::Config("malformed config entry in checkpoint".into()));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self {
            bins: u(0),
            channels: u(1),
            sources: u(2),
            latent_dim: u(3),
            iss_blocks: u(4),
            width: u(5),
            decoder_width: u(6),
            layers: u(7),
            kernel: u(8),
        })
    }
}

/// Inference network `φ` and decoder `θ` parameters.
#[derive(Clone, Debug)]
pub struct NeuralModel {
    pub config: NeuralConfig,
    pub params: ParamStore,
    index: HashMap<String, usize>,
}

/// Graph handles for the inference network outputs.
#[derive(Clone, Debug)]
pub struct InferenceVars {
    /// Final diagonalizer `Q^(B)`, `[F, M, M]`.
    pub q: CVar,
    /// `x̃ = Q x`, `[F, M, T]`.
    pub xt: CVar,
    /// Gains `[N, M]`.
    pub g: Var,
    /// Posterior mean `[N, D, T]`.
    pub mu: Var,
    /// Posterior variance `[N, D, T]`.
    pub sigma2: Var,
    /// Masks feeding each ISS block, `[F, M, T]`.
    pub masks: Vec<Var>,
}

/// Parameter leaves of one graph, addressable by name.
pub(crate) struct Bound<'a> {
    pub vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn p(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) {
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
        let rng = &mut self.rng;
        self.store.insert(name, Tensor::from_fn(shape, |_| normal.sample(rng)));
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// 1×1 convolution `[out, in]` with bias `[out, 1]`.
    fn dense(&mut self, name: &str, out: usize, inp: usize, gain: f64, bias: f64) {
        self.weight(format!("{name}.w"), &[out, inp], inp, gain);
        self.fill(format!("{name}.b"), &[out, 1], bias);
    }
}

/// `ln(e − 1)`: softplus of this is 1.
const SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1;
const PRELU_INIT: f64 = 0.25;

impl NeuralModel {
    pub fn new(config: NeuralConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let c = &config;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::new() };
        let (w, fm) = (c.width, c.bins * c.channels);

        init.dense("in0", w, c.feature_rows(), 1.0, 0.0);
        init.fill("in0.a".into(), &[w], PRELU_INIT);
        for b in 0..=c.iss_blocks {
            if b > 0 {
                init.dense(&format!("emb{b}"), w, fm, 1.0, 0.0);
                init.dense(&format!("mix{b}"), w, 2 * w, 1.0, 0.0);
                init.fill(format!("mix{b}.a"), &[w], PRELU_INIT);
            }
            for l in 0..c.layers {
                init.weight(format!("blk{b}.conv{l}.w"), &[w, w, c.kernel], w * c.kernel, 0.5);
                init.fill(format!("blk{b}.conv{l}.b"), &[w], 0.0);
                init.fill(format!("blk{b}.conv{l}.a"), &[w], PRELU_INIT);
            }
            if b < c.iss_blocks {
                init.dense(&format!("mask{b}"), fm, w, 1.0, 0.0);
            }
        }
        init.dense("mu", c.sources * c.latent_dim, w, 1.0, 0.0);
        init.dense("var", c.sources * c.latent_dim, w, 0.1, SOFTPLUS_ONE);
        init.dense("omega", c.sources * fm, w, 1.0, 0.0);

        init.dense("dec1", c.decoder_width, c.latent_dim, 1.0, 0.0);
        init.fill("dec1.a".into(), &[c.decoder_width], PRELU_INIT);
        init.dense("dec2", c.decoder_width, c.decoder_width, 1.0, 0.0);
        init.fill("dec2.a".into(), &[c.decoder_width], PRELU_INIT);
        init.dense("dec3", c.bins, c.decoder_width, 1.0, SOFTPLUS_ONE);

        Ok(Self::assemble(config, init.store))
    }

    fn assemble(config: NeuralConfig, params: ParamStore) -> Self {
        let index = params.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { config, params, index }
    }

    /// Rebuilds a model from a configuration and a parameter set with the
    /// expected names and shapes.
    pub fn from_params(config: NeuralConfig, params: ParamStore) -> Result<Self, NeuralError> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.names() != params.names() {
            return Err(NeuralError::Config("parameter names do not match the architecture".into()));
        }
        for ((name, a), (_, b)) in template.params.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(NeuralError::Config(format!("{name}: expected {:?}, got {:?}", a.shape(), b.shape())));
            }
        }
        Ok(Self::assemble(config, params))
    }

    pub fn to_container(&self) -> Container {
        let mut entries = ParamStore::new();
        entries.insert("config", self.config.to_tensor());
        for (name, t) in self.params.iter() {
            entries.insert(name, t.clone());
        }
        Container::new(CHECKPOINT_KIND, entries)
    }

    pub fn from_container(c: &Container) -> Result<Self, NeuralError> {
        if c.kind != CHECKPOINT_KIND {
            return Err(NeuralError::Config(format!("checkpoint kind {:?}", c.kind)));
        }
        let config = NeuralConfig::from_tensor(
            c.entries.by_name("config").ok_or_else(|| NeuralError::Config("checkpoint has no config".into()))?,
        )?;
        let mut params = ParamStore::new();
        for (name, t) in c.entries.iter().filter(|(n, _)| *n != "config") {
            params.insert(name, t.clone());
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Self::from_container(&Container::load(path)?)
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = if trainable { self.params.bind(g) } else { self.params.bind_frozen(g) };
        Bound { vars, index: &self.index }
    }

    pub(crate) fn check_input(&self, input: &PreparedInput) -> Result<(), NeuralError> {
        if input.bins != self.config.bins {
            return Err(NeuralError::BinMismatch { expected: self.config.bins, got: input.bins });
        }
        if input.channels != self.config.channels {
            return Err(NeuralError::ChannelMismatch { expected: self.config.channels, got: input.channels });
        }
        Ok(())
    }

    /// Builds the inference network on `g`.
    pub(crate) fn infer_graph(&self, g: &mut Graph, p: &Bound, input: &PreparedInput) -> Result<InferenceVars, NeuralError> {
        self.check_input(input)?;
        let c = &self.config;
        let (nf, nm, nt) = (c.bins, c.channels, input.frames);
        let x = g.c_constant(input.x_re.clone(), input.x_im.clone());
        let xx = g.c_constant(input.xx_re.clone(), input.xx_im.clone());
        let feats = g.constant(input.features.clone());
        let eye = Tensor::from_fn(&[nf, nm, nm], |i| if (i / nm) % nm == i % nm { 1.0 } else { 0.0 });
        let mut q = g.c_constant(eye, Tensor::zeros(&[nf, nm, nm]));
        let loading = g.constant(Tensor::from_fn(&[nm, nm], |i| if i / nm == i % nm { COV_LOADING } else { 0.0 }));

        let mut h = dense(g, p, "in0", feats).stage("block 0")?;
        h = g.prelu(h, p.p("in0.a")).stage("block 0")?;
        h = self.res_stack(g, p, 0, h).stage("block 0")?;

        let mut xt = x;
        let mut masks = Vec::with_capacity(c.iss_blocks);
        for b in 0..c.iss_blocks {
            let label = format!("ISS block {}", b + 1);
            let m = dense(g, p, &format!("mask{b}"), h).stage(&label)?;
            let m = g.sigmoid(m).stage(&label)?;
            let m = g.reshape(m, &[nf, nm, nt]).stage(&label)?;
            masks.push(m);
            let u = (|| {
                let ur = g.matmul(m, xx.re)?;
                let ui = g.matmul(m, xx.im)?;
                let ur = g.scale(ur, 1.0 / nt as f64)?;
                let ui = g.scale(ui, 1.0 / nt as f64)?;
                let ur = g.reshape(ur, &[nf, nm, nm, nm])?;
                let ui = g.reshape(ui, &[nf, nm, nm, nm])?;
                let ur = g.add(ur, loading)?;
                Ok(CVar { re: ur, im: ui })
            })()
            .stage(&label)?;
            q = iss_graph(g, q, u).stage(&label)?;
            xt = g.c_matmul(q, x).stage(&label)?;

            let label = format!("block {}", b + 1);
            let lp = log_power(g, xt, nf * nm, nt).stage(&label)?;
            let e = dense(g, p, &format!("emb{}", b + 1), lp).stage(&label)?;
            let cat = g.concat(&[h, e], 0).stage(&label)?;
            h = dense(g, p, &format!("mix{}", b + 1), cat).stage(&label)?;
            h = g.prelu(h, p.p(&format!("mix{}.a", b + 1))).stage(&label)?;
            h = self.res_stack(g, p, b + 1, h).stage(&label)?;
        }

        let (n, d) = (c.sources, c.latent_dim);
        let heads = (|| {
            let mu = dense(g, p, "mu", h)?;
            let mu = g.reshape(mu, &[n, d, nt])?;
            let s = dense(g, p, "var", h)?;
            let s = g.softplus(s)?;
            let s = g.add_scalar(s, SIGMA_FLOOR)?;
            let sigma2 = g.reshape(s, &[n, d, nt])?;
            let om = dense(g, p, "omega", h)?;
            let om = g.sigmoid(om)?;
            let om = g.reshape(om, &[n, nf, nm, nt])?;
            let pow = g.c_abs2(xt)?;
            let wp = g.mul(om, pow)?;
            let wp = g.sum_axis(wp, 3, false)?;
            let wp = g.add_scalar(wp, GAIN_FLOOR)?;
            let avg = g.sum_axis(wp, 2, true)?;
            let avg = g.scale(avg, 1.0 / nm as f64)?;
            let ratio = g.div(wp, avg)?;
            let gsum = g.sum_axis(ratio, 1, false)?;
            let gains = g.scale(gsum, 1.0 / nf as f64)?;
            Ok((mu, sigma2, gains))
        })()
        .stage("output heads")?;
        let (mu, sigma2, gains) = heads;
        Ok(InferenceVars { q, xt, g: gains, mu, sigma2, masks })
    }

    fn res_stack(&self, g: &mut Graph, p: &Bound, block: usize, mut h: Var) -> Result<Var, crate::autodiff::AutodiffError> {
        for l in 0..self.config.layers {
            let name = format!("blk{block}.conv{l}");
            let y = g.conv1d(h, p.p(&format!("{name}.w")), p.p(&format!("{name}.b")), 1 << l)?;
            let y = g.prelu(y, p.p(&format!("{name}.a")))?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }

    /// Decoder: latent `z` `[N, D, T]` to power spectra `[N, F, T]`.
    pub(crate) fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, NeuralError> {
        let c = &self.config;
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[0] != c.sources || s[1] != c.latent_dim {
            return Err(NeuralError::Config(format!("latent shape {s:?}")));
        }
        let (n, d, nt) = (s[0], s[1], s[2]);
        (|| {
            let z = g.permute(z, &[1, 0, 2])?;
            let z = g.reshape(z, &[d, n * nt])?;
            let h = dense(g, p, "dec1", z)?;
            let h = g.prelu(h, p.p("dec1.a"))?;
            let h = dense(g, p, "dec2", h)?;
            let h = g.prelu(h, p.p("dec2.a"))?;
            let o = dense(g, p, "dec3", h)?;
            let o = g.softplus(o)?;
            let o = g.add_scalar(o, PSD_FLOOR)?;
            let o = g.reshape(o, &[c.bins, n, nt])?;
            g.permute(o, &[1, 0, 2])
        })()
        .stage("decoder")
    }

    /// Evaluates the decoder on concrete latents.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, NeuralError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let lam = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(lam).clone())
    }
}

fn dense(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, crate::autodiff::AutodiffError> {
    let y = g.matmul(p.p(&format!("{name}.w")), x)?;
    g.add(y, p.p(&format!("{name}.b")))
}

/// Standardized `ln(|x̃|² + floor)` reshaped to `[rows, T]`.
fn log_power(g: &mut Graph, xt: CVar, rows: usize, nt: usize) -> Result<Var, crate::autodiff::AutodiffError> {
    let pw = g.c_abs2(xt)?;
    let pw = g.add_scalar(pw, LOG_FLOOR)?;
    let lp = g.log(pw)?;
    let lp = g.reshape(lp, &[rows, nt])?;
    let mean = g.mean(lp)?;
    let centered = g.sub(lp, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq)?;
    let var = g.add_scalar(var, INSTANCE_NORM_EPS)?;
    let std = g.powf(var, 0.5)?;
    g.div(centered, std)
}

/// One ISS sweep on `q` `[F, M, M]` with weighted covariances `u`
/// `[F, M, M, M]` (`u[f, m']` drives row `m'`).
pub(crate) fn iss_graph(g: &mut Graph, mut q: CVar, u: CVar) -> Result<CVar, crate::autodiff::AutodiffError> {
    let s = g.shape(q.re).to_vec();
    let (nf, nm) = (s[0], s[1]);
    for m in 0..nm {
        let onehot = g.constant(Tensor::from_fn(&[nm], |i| if i == m { 1.0 } else { 0.0 }));
        let off = g.constant(Tensor::from_fn(&[nm], |i| if i == m { 0.0 } else { 1.0 }));
        let r = g.c_narrow(q, 1, m, 1)?;
        let rc = g.c_conj(r)?;
        let rc = g.c_reshape(rc, &[nf, 1, 1, nm])?;
        let w = g.c_mul(u, rc)?;
        let w = g.c_sum_axis(w, 3, false)?;
        let num = g.c_mul(q, w)?;
        let num = g.c_sum_axis(num, 2, false)?;
        let a = g.mul(r.re, w.re)?;
        let b = g.mul(r.im, w.im)?;
        let den = g.sub(a, b)?;
        let den = g.sum_axis(den, 2, false)?;
        let ratio_re = g.div(num.re, den)?;
        let ratio_im = g.div(num.im, den)?;
        let inv_sqrt = g.powf(den, -0.5)?;
        let diag = g.neg(inv_sqrt)?;
        let diag = g.add_scalar(diag, 1.0)?;
        let v_re = g.mul(ratio_re, off)?;
        let d_part = g.mul(diag, onehot)?;
        let v_re = g.add(v_re, d_part)?;
        let v_im = g.mul(ratio_im, off)?;
        let v_re = g.reshape(v_re, &[nf, nm, 1])?;
        let v_im = g.reshape(v_im, &[nf, nm, 1])?;
        let step = g.c_mul(CVar { re: v_re, im: v_im }, r)?;
        q = g.c_sub(q, step)?;
    }
    Ok(q)
}
