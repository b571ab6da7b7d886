//! Cascade encoder: node features, a bidirectional GRU over the
//! time-ordered node sequence, a projection head and a regression head.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamSet, Tensor, Var};
use crate::graph::CascadeGraph;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("eigendecomposition did not converge after {0} attempts")]
    EigenFailure(usize),
    #[error("cannot encode an empty graph")]
    EmptyGraph,
    #[error("feature width {got} does not match the model ({expected})")]
    FeatureWidth { expected: usize, got: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Structural,
    Wavelet,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "structural" => Some(FeatureMode::Structural),
            "wavelet" => Some(FeatureMode::Wavelet),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureMode::Structural => "structural",
            FeatureMode::Wavelet => "wavelet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeatureSpec {
    pub mode: FeatureMode,
    /// Heat-kernel scale `s_w`.
    pub scale: f64,
    /// Characteristic-function sample count `d_w`.
    pub samples: usize,
    /// Largest sample point; points are evenly spaced on `[0, t_max]`.
    pub t_max: f64,
}

impl Default for NodeFeatureSpec {
    fn default() -> Self {
        NodeFeatureSpec {
            mode: FeatureMode::Structural,
            scale: 1.0,
            samples: 8,
            t_max: 10.0,
        }
    }
}

impl NodeFeatureSpec {
    pub fn wavelet(scale: f64, samples: usize, t_max: f64) -> Self {
        NodeFeatureSpec {
            mode: FeatureMode::Wavelet,
            scale,
            samples,
            t_max,
        }
    }

    pub fn width(&self) -> usize {
        match self.mode {
            FeatureMode::Structural => 4,
            FeatureMode::Wavelet => 2 * self.samples + 1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.mode == FeatureMode::Wavelet {
            if !(self.scale > 0.0 && self.scale.is_finite()) {
                return Err(EncoderError::InvalidConfig(format!("wavelet scale {}", self.scale)));
            }
            if self.samples < 2 {
                return Err(EncoderError::InvalidConfig(format!("wavelet samples {}", self.samples)));
            }
            if !(self.t_max > 0.0 && self.t_max.is_finite()) {
                return Err(EncoderError::InvalidConfig(format!("wavelet t_max {}", self.t_max)));
            }
        }
        Ok(())
    }

    /// The sample points `t_k`.
    pub fn sample_points(&self) -> Vec<f64> {
        let d = self.samples;
        (0..d).map(|k| self.t_max * k as f64 / (d - 1) as f64).collect()
    }
}

/// `L = D − A` of the undirected tree.
pub fn laplacian(g: &CascadeGraph) -> DMatrix<f64> {
    let n = g.len();
    let mut l = DMatrix::zeros(n, n);
    for (p, c) in g.edges() {
        l[(p, c)] -= 1.0;
        l[(c, p)] -= 1.0;
        l[(p, p)] += 1.0;
        l[(c, c)] += 1.0;
    }
    l
}

const EIGEN_ATTEMPTS: usize = 4;

/// Heat kernel `U·exp(−sΛ)·Uᵀ` and the Laplacian eigenvalues.
pub fn heat_kernel(g: &CascadeGraph, scale: f64) -> Result<(DMatrix<f64>, Vec<f64>), EncoderError> {
    let l = laplacian(g);
    let n = l.nrows();
    for attempt in 0..EIGEN_ATTEMPTS {
        let jitter = if attempt == 0 { 0.0 } else { 1e-12 * 10f64.powi(attempt as i32) };
        let m = &l + DMatrix::identity(n, n) * jitter;
        if let Some(eig) = SymmetricEigen::try_new(m, f64::EPSILON, 10_000) {
            let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|v| v - jitter).collect();
            let mut scaled = eig.eigenvectors.clone();
            for (k, lam) in lambdas.iter().enumerate() {
                let w = (-scale * lam).exp();
                scaled.column_mut(k).iter_mut().for_each(|v| *v *= w);
            }
            let h = scaled * eig.eigenvectors.transpose();
            return Ok((h, lambdas));
        }
    }
    Err(EncoderError::EigenFailure(EIGEN_ATTEMPTS))
}

/// Per-node feature rows in adoption-time order.
pub fn node_features(g: &CascadeGraph, spec: &NodeFeatureSpec, t_o: f64) -> Result<Tensor, EncoderError> {
    if g.is_empty() {
        return Err(EncoderError::EmptyGraph);
    }
    if !(t_o > 0.0 && t_o.is_finite()) {
        return Err(EncoderError::InvalidConfig(format!("observation time {t_o}")));
    }
    let n = g.len();
    match spec.mode {
        FeatureMode::Structural => {
            let depths = g.depths();
            let max_depth = depths.iter().copied().max().unwrap_or(0);
            let mut t = Tensor::zeros(n, 4);
            for i in 0..n {
                t.set(i, 0, g.time(i) / t_o);
                t.set(i, 1, (1.0 + g.degree(i) as f64).ln());
                if max_depth > 0 {
                    t.set(i, 2, depths[i] as f64 / max_depth as f64);
                }
                t.set(i, 3, if g.is_leaf(i) { 1.0 } else { 0.0 });
            }
            Ok(t)
        }
        FeatureMode::Wavelet => {
            spec.validate()?;
            let (h, _) = heat_kernel(g, spec.scale)?;
            let ts = spec.sample_points();
            let d = ts.len();
            let mut out = Tensor::zeros(n, 2 * d + 1);
            for a in 0..n {
                for (k, &tk) in ts.iter().enumerate() {
                    let (mut re, mut im) = (0.0, 0.0);
                    for m in 0..n {
                        let x = tk * h[(m, a)];
                        re += x.cos();
                        im += x.sin();
                    }
                    out.set(a, k, re / n as f64);
                    out.set(a, d + k, im / n as f64);
                }
                out.set(a, 2 * d, g.time(a) / t_o);
            }
            Ok(out)
        }
    }
}

/// Projection head design `i-j`: `i` layers, the task head reads layer `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDesign {
    pub depth: usize,
    pub finetune_layer: usize,
}

impl HeadDesign {
    pub const MAX_DEPTH: usize = 4;

    pub fn new(depth: usize, finetune_layer: usize) -> Result<Self, EncoderError> {
        if depth > Self::MAX_DEPTH || finetune_layer > depth {
            return Err(EncoderError::InvalidConfig(format!("head {depth}-{finetune_layer}")));
        }
        Ok(HeadDesign { depth, finetune_layer })
    }

    /// Parses `"i-j"`.
    pub fn parse(s: &str) -> Result<Self, EncoderError> {
        let bad = || EncoderError::InvalidConfig(format!("head design {s:?}"));
        let (i, j) = s.trim().split_once('-').ok_or_else(bad)?;
        HeadDesign::new(i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?)
    }

    /// The tuned design for a given label fraction.
    pub fn for_label_fraction(f: f64) -> Self {
        if f >= 1.0 {
            HeadDesign { depth: 4, finetune_layer: 1 }
        } else if f >= 0.1 {
            HeadDesign { depth: 4, finetune_layer: 4 }
        } else {
            HeadDesign { depth: 4, finetune_layer: 3 }
        }
    }
}

impl std::fmt::Display for HeadDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.depth, self.finetune_layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub features: NodeFeatureSpec,
    pub d_emb: usize,
    /// Width of `h`; each GRU direction has `d_h / 2` units.
    pub d_h: usize,
    pub d_z: usize,
    pub head: HeadDesign,
    /// Hidden width of the regression head.
    pub d_down: usize,
}

/// Width unit that the model-size multiplier scales.
pub const WIDTH_UNIT: usize = 32;

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::sized(64, 4, HeadDesign { depth: 4, finetune_layer: 4 })
    }
}

impl EncoderConfig {
    pub fn sized(d_emb: usize, model_size: usize, head: HeadDesign) -> Self {
        let d_h = WIDTH_UNIT * model_size;
        EncoderConfig {
            features: NodeFeatureSpec::default(),
            d_emb,
            d_h,
            d_z: d_h,
            head,
            d_down: (d_h / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        self.features.validate()?;
        if self.d_emb == 0 || self.d_z == 0 || self.d_down == 0 {
            return Err(EncoderError::InvalidConfig("zero width".into()));
        }
        if self.d_h < 2 || self.d_h % 2 != 0 {
            return Err(EncoderError::InvalidConfig(format!("d_h {} must be even and >= 2", self.d_h)));
        }
        HeadDesign::new(self.head.depth, self.head.finetune_layer)?;
        Ok(())
    }

    /// Width of the activation the regression head reads.
    pub fn downstream_input(&self) -> usize {
        if self.head.finetune_layer == self.head.depth && self.head.depth > 0 {
            self.d_z
        } else {
            self.d_h
        }
    }

    fn head_shape(&self, k: usize) -> (usize, usize) {
        let out = if k + 1 == self.head.depth { self.d_z } else { self.d_h };
        (self.d_h, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GruIds {
    wx: ParamId,
    wh: ParamId,
    uh: ParamId,
    b: ParamId,
}

/// Encoder, projection head and regression head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    pub params: ParamSet,
    emb_w: ParamId,
    emb_b: ParamId,
    fwd: GruIds,
    bwd: GruIds,
    head: Vec<(ParamId, ParamId)>,
    down: [ParamId; 4],
}

impl EncoderModel {
    /// Glorot-initialised weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        Self::build(config, &mut |r, c, bias| {
            if bias {
                Tensor::zeros(r, c)
            } else {
                Tensor::glorot(r, c, rng)
            }
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self, EncoderError> {
        Self::build(config, &mut |r, c, _| Tensor::zeros(r, c))
    }

    fn build(config: EncoderConfig, init: &mut dyn FnMut(usize, usize, bool) -> Tensor) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut p = ParamSet::new();
        let f = config.features.width();
        let g = config.d_h / 2;
        let emb_w = p.add("emb.w", init(f, config.d_emb, false));
        let emb_b = p.add("emb.b", init(1, config.d_emb, true));
        let mut gru = |dir: &str, p: &mut ParamSet| GruIds {
            wx: p.add(format!("gru.{dir}.wx"), init(config.d_emb, 3 * g, false)),
            wh: p.add(format!("gru.{dir}.wh"), init(g, 2 * g, false)),
            uh: p.add(format!("gru.{dir}.uh"), init(g, g, false)),
            b: p.add(format!("gru.{dir}.b"), init(1, 3 * g, true)),
        };
        let fwd = gru("fwd", &mut p);
        let bwd = gru("bwd", &mut p);
        let head = (0..config.head.depth)
            .map(|k| {
                let (i, o) = config.head_shape(k);
                (
                    p.add(format!("head.{k}.w"), init(i, o, false)),
                    p.add(format!("head.{k}.b"), init(1, o, true)),
                )
            })
            .collect();
        let d_in = config.downstream_input();
        let down = [
            p.add("down.w1", init(d_in, config.d_down, false)),
            p.add("down.b1", init(1, config.d_down, true)),
            p.add("down.w2", init(config.d_down, 1, false)),
            p.add("down.b2", init(1, 1, true)),
        ];
        Ok(EncoderModel {
            config,
            params: p,
            emb_w,
            emb_b,
            fwd,
            bwd,
            head,
            down,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Sets the regression head's output bias.
    pub fn set_output_bias(&mut self, v: f64) {
        *self.params.value_mut(self.down[3]) = Tensor::scalar(v);
    }

    fn gru_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        [self.fwd, self.bwd].into_iter().flat_map(|d| [d.wx, d.wh, d.uh, d.b])
    }

    /// Encoder and every projection-head layer.
    pub fn pretrain_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb_w, self.emb_b];
        ids.extend(self.gru_ids());
        ids.extend(self.head.iter().flat_map(|&(w, b)| [w, b]));
        ids
    }

    pub fn downstream_ids(&self) -> Vec<ParamId> {
        self.down.to_vec()
    }

    /// Parameters that reach the regression output: the encoder, head
    /// layers below the cut, and the regression head. With `freeze` only
    /// the regression head.
    pub fn finetune_ids(&self, freeze: bool) -> Vec<ParamId> {
        if freeze {
            return self.downstream_ids();
        }
        let mut ids = vec![self.emb_w, self.emb_b];
        ids.extend(self.gru_ids());
        ids.extend(
            self.head[..self.config.head.finetune_layer]
                .iter()
                .flat_map(|&(w, b)| [w, b]),
        );
        ids.extend(self.down);
        ids
    }

    pub fn features(&self, g: &CascadeGraph, t_o: f64) -> Result<Tensor, EncoderError> {
        node_features(g, &self.config.features, t_o)
    }

    /// Encodes a batch of feature sequences into `h`, one row per sequence.
    pub fn encode_batch(&self, tape: &mut Graph, feats: &[Tensor]) -> Result<Var, EncoderError> {
        let width = self.config.features.width();
        let mut offsets = Vec::with_capacity(feats.len());
        let mut data = Vec::new();
        for f in feats {
            if f.cols() != width {
                return Err(EncoderError::FeatureWidth {
                    expected: width,
                    got: f.cols(),
                });
            }
            if f.rows() == 0 {
                return Err(EncoderError::EmptyGraph);
            }
            offsets.push(data.len() / width);
            data.extend_from_slice(f.data());
        }
        let lens: Vec<usize> = feats.iter().map(Tensor::rows).collect();
        let x = tape.constant(Tensor::from_vec(data.len() / width, width, data));
        let w = tape.param(&self.params, self.emb_w);
        let b = tape.param(&self.params, self.emb_b);
        let xw = tape.matmul(x, w)?;
        let e = tape.add_row(xw, b)?;
        let hf = self.run_direction(tape, e, &offsets, &lens, self.fwd, false)?;
        let hb = self.run_direction(tape, e, &offsets, &lens, self.bwd, true)?;
        Ok(tape.concat_cols(&[hf, hb])?)
    }

    fn run_direction(
        &self,
        tape: &mut Graph,
        e: Var,
        offsets: &[usize],
        lens: &[usize],
        ids: GruIds,
        reverse: bool,
    ) -> Result<Var, EncoderError> {
        let g = self.config.d_h / 2;
        let batch = lens.len();
        let wx = tape.param(&self.params, ids.wx);
        let wh = tape.param(&self.params, ids.wh);
        let uh = tape.param(&self.params, ids.uh);
        let b = tape.param(&self.params, ids.b);
        let ex = tape.matmul(e, wx)?;
        let xw = tape.add_row(ex, b)?;
        let mut h = tape.constant(Tensor::zeros(batch, g));
        let steps = lens.iter().copied().max().unwrap_or(0);
        for t in 0..steps {
            let index: Vec<Option<usize>> = offsets
                .iter()
                .zip(lens)
                .map(|(&off, &len)| (t < len).then(|| off + if reverse { len - 1 - t } else { t }))
                .collect();
            let all_live = index.iter().all(Option::is_some);
            let mut mask = Tensor::zeros(batch, g);
            if !all_live {
                for (r, idx) in index.iter().enumerate() {
                    if idx.is_some() {
                        mask.data_mut()[r * g..(r + 1) * g].iter_mut().for_each(|v| *v = 1.0);
                    }
                }
            }
            let gx = tape.gather_rows(xw, index)?;
            let gx_zr = tape.slice_cols(gx, 0, 2 * g)?;
            let gx_h = tape.slice_cols(gx, 2 * g, g)?;
            let gh = tape.matmul(h, wh)?;
            let pre = tape.add(gx_zr, gh)?;
            let zr = tape.sigmoid(pre);
            let mut z = tape.slice_cols(zr, 0, g)?;
            let r = tape.slice_cols(zr, g, g)?;
            let rh = tape.mul(r, h)?;
            let rhu = tape.matmul(rh, uh)?;
            let cand_pre = tape.add(gx_h, rhu)?;
            let cand = tape.tanh(cand_pre);
            let diff = tape.sub(cand, h)?;
            if !all_live {
                let m = tape.constant(mask);
                z = tape.mul(z, m)?;
            }
            let step = tape.mul(z, diff)?;
            h = tape.add(h, step)?;
        }
        Ok(h)
    }

    /// Activation after `layers` projection-head layers.
    pub fn head_activation(&self, tape: &mut Graph, h: Var, layers: usize) -> Result<Var, EncoderError> {
        let depth = self.config.head.depth;
        let mut a = h;
        for (k, &(w, b)) in self.head.iter().take(layers).enumerate() {
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            let lin = tape.matmul(a, wv)?;
            a = tape.add_row(lin, bv)?;
            if k + 1 < depth {
                a = tape.tanh(a);
            }
        }
        Ok(a)
    }

    /// `z` from `h`; the identity for a depth-0 head.
    pub fn project(&self, tape: &mut Graph, h: Var) -> Result<Var, EncoderError> {
        self.head_activation(tape, h, self.config.head.depth)
    }

    /// Regression output (log₂ popularity or a logit), one row per input.
    pub fn predict(&self, tape: &mut Graph, h: Var) -> Result<Var, EncoderError> {
        let a = self.head_activation(tape, h, self.config.head.finetune_layer)?;
        let [w1, b1, w2, b2] = self.down.map(|id| tape.param(&self.params, id));
        let l1 = tape.matmul(a, w1)?;
        let l1 = tape.add_row(l1, b1)?;
        let hid = tape.tanh(l1);
        let l2 = tape.matmul(hid, w2)?;
        Ok(tape.add_row(l2, b2)?)
    }

    /// `h` for one graph.
    pub fn encode(&self, g: &CascadeGraph, t_o: f64) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Graph::new();
        let f = self.features(g, t_o)?;
        let h = self.encode_batch(&mut tape, &[f])?;
        Ok(tape.value(h).data().to_vec())
    }

    /// `z` for one graph.
    pub fn embed(&self, g: &CascadeGraph, t_o: f64) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Graph::new();
        let f = self.features(g, t_o)?;
        let h = self.encode_batch(&mut tape, &[f])?;
        let z = self.project(&mut tape, h)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Regression outputs for many graphs, evaluated in chunks.
    pub fn predict_graphs(&self, graphs: &[&CascadeGraph], t_o: f64) -> Result<Vec<f64>, EncoderError> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(128) {
            let feats = chunk
                .iter()
                .map(|g| self.features(g, t_o))
                .collect::<Result<Vec<_>, _>>()?;
            out.extend(self.predict_features(&feats)?);
        }
        Ok(out)
    }

    pub fn predict_features(&self, feats: &[Tensor]) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Graph::new();
        let h = self.encode_batch(&mut tape, feats)?;
        let y = self.predict(&mut tape, h)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut s = String::from("casgraph-checkpoint 1\n");
        let _ = writeln!(
            s,
            "config features={} scale={} samples={} t_max={} d_emb={} d_h={} d_z={} head={} d_down={}",
            c.features.mode.as_str(),
            c.features.scale,
            c.features.samples,
            c.features.t_max,
            c.d_emb,
            c.d_h,
            c.d_z,
            c.head,
            c.d_down
        );
        for id in self.params.ids() {
            let t = self.params.value(id);
            let _ = writeln!(s, "param {} {} {}", self.params.name(id), t.rows(), t.cols());
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, EncoderError> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("casgraph-checkpoint 1") {
            return Err(bad("unknown header"));
        }
        let cfg_line = lines.next().ok_or_else(|| bad("missing config"))?;
        let mut cfg = EncoderConfig::default();
        for kv in cfg_line.strip_prefix("config ").ok_or_else(|| bad("missing config"))?.split(' ') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
            let num = || v.parse::<usize>().map_err(|_| bad(kv));
            let real = || v.parse::<f64>().map_err(|_| bad(kv));
            match k {
                "features" => cfg.features.mode = FeatureMode::parse(v).ok_or_else(|| bad(kv))?,
                "scale" => cfg.features.scale = real()?,
                "samples" => cfg.features.samples = num()?,
                "t_max" => cfg.features.t_max = real()?,
                "d_emb" => cfg.d_emb = num()?,
                "d_h" => cfg.d_h = num()?,
                "d_z" => cfg.d_z = num()?,
                "head" => cfg.head = HeadDesign::parse(v)?,
                "d_down" => cfg.d_down = num()?,
                _ => return Err(bad(kv)),
            }
        }
        let mut model = EncoderModel::zeros(cfg)?;
        let mut seen = 0;
        loop {
            let header = lines.next().ok_or_else(|| bad("truncated"))?;
            if header == "end" {
                break;
            }
            let parts: Vec<&str> = header.split(' ').collect();
            let [_, name, rows, cols] = parts[..] else {
                return Err(bad(header));
            };
            let id = model.params.find(name).ok_or_else(|| bad(name))?;
            let shape: [usize; 2] = [rows.parse().map_err(|_| bad(header))?, cols.parse().map_err(|_| bad(header))?];
            if model.params.value(id).shape() != shape {
                return Err(bad(&format!("shape of {name}")));
            }
            let body = lines.next().ok_or_else(|| bad("truncated"))?;
            let vals = body
                .split_ascii_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(name))?;
            let dst = model.params.value_mut(id);
            if vals.len() != dst.len() {
                return Err(bad(&format!("length of {name}")));
            }
            dst.data_mut().copy_from_slice(&vals);
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(bad("missing parameters"));
        }
        model.params.all_finite()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_checkpoint(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Adoption;
    use crate::seed::rng;

    fn chain(n: usize) -> CascadeGraph {
        let mut a = vec![Adoption::root("u0")];
        for i in 1..n {
            a.push(Adoption::new(format!("u{i}"), i as f64, format!("u{}", i - 1)));
        }
        CascadeGraph::build(a, "c", 0.0).unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            features: NodeFeatureSpec::default(),
            d_emb: 3,
            d_h: 4,
            d_z: 4,
            head: HeadDesign { depth: 2, finetune_layer: 1 },
            d_down: 2,
        }
    }

    #[test]
    fn single_node_wavelet() {
        let g = chain(1);
        let spec = NodeFeatureSpec::wavelet(1.0, 5, 4.0);
        let f = node_features(&g, &spec, 10.0).unwrap();
        for (k, t) in spec.sample_points().iter().enumerate() {
            assert!((f.get(0, k) - t.cos()).abs() < 1e-12);
            assert!((f.get(0, 5 + k) - t.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_heat_trace() {
        let s = 0.7;
        let (h, lambdas) = heat_kernel(&chain(2), s).unwrap();
        let mut l = lambdas.clone();
        l.sort_by(f64::total_cmp);
        assert!(l[0].abs() < 1e-12 && (l[1] - 2.0).abs() < 1e-12);
        assert!((h.trace() - (1.0 + (-2.0 * s).exp())).abs() < 1e-12);
    }

    #[test]
    fn structural_root_features() {
        let g = chain(4);
        let f = node_features(&g, &NodeFeatureSpec::default(), 8.0).unwrap();
        assert_eq!(f.get(0, 0), 0.0);
        assert_eq!(f.get(0, 2), 0.0);
        assert_eq!(f.get(3, 2), 1.0);
        assert_eq!(f.get(3, 3), 1.0);
        assert_eq!(f.get(1, 1), 3f64.ln());
    }

    #[test]
    fn zero_model_length_one_gives_zero() {
        let m = EncoderModel::zeros(small_config()).unwrap();
        assert_eq!(m.encode(&chain(1), 1.0).unwrap(), vec![0.0; 4]);
        // Inputs are irrelevant with zero weights; the state stays at zero.
        assert_eq!(m.encode(&chain(6), 10.0).unwrap(), vec![0.0; 4]);
        assert_eq!(m.embed(&chain(6), 10.0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn head_depth_zero_is_identity() {
        let mut cfg = small_config();
        cfg.head = HeadDesign::new(0, 0).unwrap();
        let m = EncoderModel::new(cfg, &mut rng(3)).unwrap();
        let g = chain(5);
        assert_eq!(m.encode(&g, 5.0).unwrap(), m.embed(&g, 5.0).unwrap());
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = EncoderModel::new(small_config(), &mut rng(1)).unwrap();
        let graphs = [chain(3), chain(7), chain(1)];
        let feats: Vec<Tensor> = graphs.iter().map(|g| m.features(g, 10.0).unwrap()).collect();
        let mut tape = Graph::new();
        let h = m.encode_batch(&mut tape, &feats).unwrap();
        for (r, g) in graphs.iter().enumerate() {
            let single = m.encode(g, 10.0).unwrap();
            for (a, b) in single.iter().zip(tape.value(h).row_slice(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn order_sensitivity() {
        let m = EncoderModel::new(small_config(), &mut rng(2)).unwrap();
        let f = m.features(&chain(5), 5.0).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..5).map(|r| f.row_slice(r).to_vec()).collect();
        rows.swap(1, 3);
        let p = Tensor::from_rows(&rows);
        let mut tape = Graph::new();
        let a = m.encode_batch(&mut tape, &[f]).unwrap();
        let b = m.encode_batch(&mut tape, &[p]).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = EncoderModel::new(small_config(), &mut rng(9)).unwrap();
        let back = EncoderModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(m, back);
        assert!(EncoderModel::from_checkpoint("nope").is_err());
    }

    #[test]
    fn head_design_parsing() {
        assert_eq!(HeadDesign::parse("4-1").unwrap(), HeadDesign { depth: 4, finetune_layer: 1 });
        assert!(HeadDesign::parse("2-3").is_err());
        assert!(HeadDesign::parse("5-0").is_err());
        assert_eq!(HeadDesign::for_label_fraction(0.01).to_string(), "4-3");
    }
}
