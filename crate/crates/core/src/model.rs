//! The PGCN network: gated dilated temporal units, progressive graph
//! convolution, residual/skip wiring and the two-layer output head.
//!
//! Hidden features are laid out `[batch, node, time, channel]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{
    progressive_adjacency, self_adaptive_adjacency, transition_matrix, AdjustorMatrix,
    ProgressiveAdjacency, RoadGraph, SelfAdaptiveEmbeddings, TransitionPair,
};
use crate::kv::KeyValues;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which adjacency matrices feed the graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdjacencyCombo {
    pub transition: bool,
    pub progressive: bool,
    pub self_adaptive: bool,
}

impl AdjacencyCombo {
    pub const fn new(transition: bool, progressive: bool, self_adaptive: bool) -> Self {
        AdjacencyCombo {
            transition,
            progressive,
            self_adaptive,
        }
    }

    /// Transition plus progressive: the full model.
    pub const PGCN: Self = Self::new(true, true, false);

    /// The five variants compared in the adjacency ablation, in table order.
    pub const ABLATIONS: [Self; 5] = [
        Self::new(false, true, false),
        Self::new(false, true, true),
        Self::new(true, false, true),
        Self::PGCN,
        Self::new(true, true, true),
    ];

    pub fn is_empty(&self) -> bool {
        !(self.transition || self.progressive || self.self_adaptive)
    }

    fn parts(&self) -> Vec<&'static str> {
        let mut parts = Vec::new();
        if self.transition {
            parts.push("T");
        }
        if self.progressive {
            parts.push("P");
        }
        if self.self_adaptive {
            parts.push("SA");
        }
        parts
    }

    /// Row label used in ablation reports, e.g. `T + P (PGCN)`.
    pub fn label(&self) -> String {
        let base = self.parts().join(" + ");
        if *self == Self::PGCN {
            format!("{base} (PGCN)")
        } else {
            base
        }
    }
}

impl fmt::Display for AdjacencyCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.parts().join("+"))
    }
}

impl FromStr for AdjacencyCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cleaned = s.replace("(PGCN)", "");
        let mut combo = AdjacencyCombo::new(false, false, false);
        for token in cleaned.split('+').map(str::trim).filter(|t| !t.is_empty()) {
            match token.to_ascii_uppercase().as_str() {
                "T" => combo.transition = true,
                "P" => combo.progressive = true,
                "SA" => combo.self_adaptive = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown adjacency `{other}` (use T, P, SA)"
                    )))
                }
            }
        }
        if combo.is_empty() {
            return Err(Error::Config("adjacency combination is empty".into()));
        }
        Ok(combo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgcnConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub diffusion_steps: usize,
    pub input_window: usize,
    pub output_window: usize,
    pub input_channels: usize,
    pub skip_dim: usize,
    pub end_dim: usize,
    pub adjacency: AdjacencyCombo,
    pub embedding_dim: usize,
    /// Use the progressive adjacency un-powered in every diffusion step.
    pub unpowered_progressive: bool,
}

impl Default for PgcnConfig {
    fn default() -> Self {
        PgcnConfig {
            num_layers: 8,
            hidden_dim: 32,
            dilations: vec![1, 2, 1, 2, 1, 2, 1, 2],
            kernel_size: 2,
            diffusion_steps: 2,
            input_window: 12,
            output_window: 12,
            input_channels: 1,
            skip_dim: 256,
            end_dim: 512,
            adjacency: AdjacencyCombo::PGCN,
            embedding_dim: 10,
            unpowered_progressive: false,
        }
    }
}

impl PgcnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dilations.len() != self.num_layers {
            return fail(format!(
                "{} dilations for {} layers",
                self.dilations.len(),
                self.num_layers
            ));
        }
        if self.num_layers == 0 || self.dilations.contains(&0) {
            return fail("need at least one layer and dilations >= 1".into());
        }
        if self.diffusion_steps == 0 || self.kernel_size == 0 {
            return fail("diffusion_steps and kernel_size must be >= 1".into());
        }
        let dims = [
            self.hidden_dim,
            self.input_window,
            self.output_window,
            self.input_channels,
            self.skip_dim,
            self.end_dim,
            self.embedding_dim,
        ];
        if dims.contains(&0) {
            return fail("dimensions must be positive".into());
        }
        if self.adjacency.is_empty() {
            return fail("adjacency combination is empty".into());
        }
        Ok(())
    }

    /// Number of input steps that can influence one output position of the stack.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }

    /// Temporal length fed to the stack after left zero-padding.
    pub fn padded_length(&self) -> usize {
        self.input_window.max(self.receptive_field())
    }

    /// Temporal length left after the last layer.
    pub fn final_length(&self) -> usize {
        self.padded_length() + 1 - self.receptive_field()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.insert("num_layers", self.num_layers);
        kv.insert("hidden_dim", self.hidden_dim);
        kv.insert(
            "dilations",
            self.dilations
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("kernel_size", self.kernel_size);
        kv.insert("diffusion_steps", self.diffusion_steps);
        kv.insert("input_window", self.input_window);
        kv.insert("output_window", self.output_window);
        kv.insert("input_channels", self.input_channels);
        kv.insert("skip_dim", self.skip_dim);
        kv.insert("end_dim", self.end_dim);
        kv.insert("adjacency", self.adjacency);
        kv.insert("embedding_dim", self.embedding_dim);
        kv.insert("unpowered_progressive", self.unpowered_progressive);
    }

    /// Reads config keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = PgcnConfig::default();
        let num_layers = kv.get_or("num_layers", d.num_layers)?;
        let dilations = match kv.get_list("dilations")? {
            Some(v) => v,
            None if num_layers == d.num_layers => d.dilations.clone(),
            None => [1, 2].iter().copied().cycle().take(num_layers).collect(),
        };
        let cfg = PgcnConfig {
            num_layers,
            hidden_dim: kv.get_or("hidden_dim", d.hidden_dim)?,
            dilations,
            kernel_size: kv.get_or("kernel_size", d.kernel_size)?,
            diffusion_steps: kv.get_or("diffusion_steps", d.diffusion_steps)?,
            input_window: kv.get_or("input_window", d.input_window)?,
            output_window: kv.get_or("output_window", d.output_window)?,
            input_channels: kv.get_or("input_channels", d.input_channels)?,
            skip_dim: kv.get_or("skip_dim", d.skip_dim)?,
            end_dim: kv.get_or("end_dim", d.end_dim)?,
            adjacency: kv.get_or("adjacency", d.adjacency)?,
            embedding_dim: kv.get_or("embedding_dim", d.embedding_dim)?,
            unpowered_progressive: kv.get_or("unpowered_progressive", d.unpowered_progressive)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Number of past steps one output of the configured stack can see.
pub fn receptive_field(config: &PgcnConfig) -> usize {
    config.receptive_field()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionTerm {
    Forward,
    Backward,
    Progressive,
    SelfAdaptive,
}

impl DiffusionTerm {
    fn tag(self) -> &'static str {
        match self {
            DiffusionTerm::Forward => "fwd",
            DiffusionTerm::Backward => "bwd",
            DiffusionTerm::Progressive => "prog",
            DiffusionTerm::SelfAdaptive => "sa",
        }
    }
}

/// Parameters of one spatial-temporal layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub dilation: usize,
    pub filter: ParamId,
    pub filter_bias: ParamId,
    pub gate: ParamId,
    pub gate_bias: ParamId,
    /// One weight per diffusion step for every active adjacency term.
    pub diffusion: Vec<(DiffusionTerm, Vec<ParamId>)>,
    pub residual: ParamId,
    pub residual_bias: ParamId,
    pub skip: ParamId,
    pub skip_bias: ParamId,
}

impl LayerWeights {
    pub fn diffusion_weight_count(&self) -> usize {
        self.diffusion.iter().map(|(_, w)| w.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct PgcnModel {
    config: PgcnConfig,
    params: ParamStore,
    num_nodes: usize,
    graph: RoadGraph,
    transition: Option<TransitionPair>,
    input_proj: ParamId,
    input_bias: ParamId,
    layers: Vec<LayerWeights>,
    adjustor: Option<AdjustorMatrix>,
    self_adaptive: Option<SelfAdaptiveEmbeddings>,
    head: Head,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

/// Adjacency matrices available to every layer of one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphInputs {
    /// `[1, N, N]`
    pub forward: Option<Var>,
    /// `[1, N, N]`, absent for undirected graphs.
    pub backward: Option<Var>,
    pub progressive: Option<ProgressiveAdjacency>,
    /// `[1, N, N]`
    pub self_adaptive: Option<Var>,
}

impl GraphInputs {
    fn get(&self, term: DiffusionTerm) -> Option<Var> {
        match term {
            DiffusionTerm::Forward => self.forward,
            DiffusionTerm::Backward => self.backward,
            DiffusionTerm::Progressive => self.progressive.map(|p| p.weights),
            DiffusionTerm::SelfAdaptive => self.self_adaptive,
        }
    }
}

/// One adjacency term of the graph convolution.
#[derive(Debug, Clone)]
pub struct DiffusionInput {
    /// `[1, N, N]` or `[B, N, N]`.
    pub adjacency: Var,
    /// Raise the adjacency to the step index (`A⁰ = I`); otherwise use `A` at every step.
    pub powered: bool,
    /// `[D_in, D_out]`, one per diffusion step.
    pub weights: Vec<Var>,
}

/// `Σ_terms Σ_k (A^k Z) W_k` applied independently at every time position of `z[B, N, T, D]`.
pub fn progressive_graph_convolution(
    tape: &mut Tape,
    z: Var,
    terms: &[DiffusionInput],
) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Config(
            "graph convolution needs at least one adjacency term".into(),
        ));
    }
    let zs = tape.shape(z).to_vec();
    if zs.len() != 4 {
        return Err(Error::Shape {
            shape: zs,
            reason: "expected [batch, node, time, channel]".into(),
        });
    }
    let (b, n, t, d) = (zs[0], zs[1], zs[2], zs[3]);
    let flat = tape.reshape(z, [b, n, t * d])?;
    let mut out: Option<Var> = None;
    for term in terms {
        let a = tape.shape(term.adjacency).to_vec();
        if a.len() != 3 || a[1] != n || a[2] != n || (a[0] != 1 && a[0] != b) {
            return Err(Error::dim("progressive_graph_convolution", &a, &zs));
        }
        let mut diffused = if term.powered {
            flat
        } else {
            tape.batch_matmul(term.adjacency, flat)?
        };
        for (k, &w) in term.weights.iter().enumerate() {
            if term.powered && k > 0 {
                diffused = tape.batch_matmul(term.adjacency, diffused)?;
            }
            let grid = tape.reshape(diffused, [b, n, t, d])?;
            let contrib = tape.linear(grid, w)?;
            out = Some(match out {
                None => contrib,
                Some(acc) => tape.add(acc, contrib)?,
            });
        }
    }
    Ok(out.expect("non-empty terms"))
}

/// `tanh(conv(x; filter)) ⊙ σ(conv(x; gate))` along the time axis of `x[.., T, C]`.
pub fn gated_temporal_unit(
    tape: &mut Tape,
    x: Var,
    filter: (Var, Option<Var>),
    gate: (Var, Option<Var>),
    dilation: usize,
) -> Result<Var> {
    let branch = |tape: &mut Tape, (kernel, bias): (Var, Option<Var>)| -> Result<Var> {
        let c = tape.dilated_causal_conv1d(x, kernel, dilation)?;
        match bias {
            Some(b) => tape.add_bias(c, b),
            None => Ok(c),
        }
    };
    let f = branch(tape, filter)?;
    let f = tape.tanh(f);
    let g = branch(tape, gate)?;
    let g = tape.sigmoid(g);
    tape.hadamard(f, g)
}

/// Result of the pre-head temporal stack.
#[derive(Debug, Clone)]
pub struct StackOutput {
    /// Output of every layer, `[B, N, T_l, D]`.
    pub layer_outputs: Vec<Var>,
    /// Summed skip contributions, `[B, N, L, S]`.
    pub skip_sum: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T', N]` in normalized units.
    pub prediction: Var,
    pub graphs: GraphInputs,
}

impl PgcnModel {
    /// Builds and initializes a model for `graph` with a seeded generator.
    pub fn new(config: PgcnConfig, graph: &RoadGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = graph.num_nodes();
        let (c, d, p) = (config.input_channels, config.hidden_dim, config.kernel_size);
        let transition = if config.adjacency.transition {
            Some(transition_matrix(graph)?)
        } else {
            None
        };

        let adjustor = if config.adjacency.progressive {
            Some(AdjustorMatrix::init(
                &mut params,
                config.input_window,
                &mut rng,
            )?)
        } else {
            None
        };
        let self_adaptive = if config.adjacency.self_adaptive {
            Some(SelfAdaptiveEmbeddings::init(
                &mut params,
                n,
                config.embedding_dim,
                &mut rng,
            )?)
        } else {
            None
        };

        let input_proj = params.add("input.weight", uniform(&mut rng, &[c, d], c)?);
        let input_bias = params.add("input.bias", Tensor::zeros([d])?);

        let mut terms = Vec::new();
        if let Some(tp) = &transition {
            terms.push(DiffusionTerm::Forward);
            if !tp.undirected {
                terms.push(DiffusionTerm::Backward);
            }
        }
        if config.adjacency.progressive {
            terms.push(DiffusionTerm::Progressive);
        }
        if config.adjacency.self_adaptive {
            terms.push(DiffusionTerm::SelfAdaptive);
        }

        let final_len = config.final_length();
        let mut layers = Vec::with_capacity(config.num_layers);
        for (l, &dilation) in config.dilations.iter().enumerate() {
            let name = |s: &str| format!("layer{l}.{s}");
            let filter = params.add(name("filter"), uniform(&mut rng, &[p, d, d], p * d)?);
            let filter_bias = params.add(name("filter_bias"), Tensor::zeros([d])?);
            let gate = params.add(name("gate"), uniform(&mut rng, &[p, d, d], p * d)?);
            let gate_bias = params.add(name("gate_bias"), Tensor::zeros([d])?);
            let mut diffusion = Vec::new();
            for &term in &terms {
                let ws = (0..config.diffusion_steps)
                    .map(|k| {
                        let t = uniform(&mut rng, &[d, d], d)?;
                        Ok(params.add(name(&format!("diffusion.{}.{k}", term.tag())), t))
                    })
                    .collect::<Result<Vec<_>>>()?;
                diffusion.push((term, ws));
            }
            let residual = params.add(name("residual"), uniform(&mut rng, &[d, d], d)?);
            let residual_bias = params.add(name("residual_bias"), Tensor::zeros([d])?);
            let skip = params.add(name("skip"), uniform(&mut rng, &[d, config.skip_dim], d)?);
            let skip_bias = params.add(name("skip_bias"), Tensor::zeros([config.skip_dim])?);
            layers.push(LayerWeights {
                dilation,
                filter,
                filter_bias,
                gate,
                gate_bias,
                diffusion,
                residual,
                residual_bias,
                skip,
                skip_bias,
            });
        }

        let head_in = final_len * config.skip_dim;
        let head = Head {
            w1: params.add(
                "head.fc1",
                uniform(&mut rng, &[head_in, config.end_dim], head_in)?,
            ),
            b1: params.add("head.fc1_bias", Tensor::zeros([config.end_dim])?),
            w2: params.add(
                "head.fc2",
                uniform(
                    &mut rng,
                    &[config.end_dim, config.output_window],
                    config.end_dim,
                )?,
            ),
            b2: params.add("head.fc2_bias", Tensor::zeros([config.output_window])?),
        };

        Ok(PgcnModel {
            config,
            params,
            num_nodes: n,
            graph: graph.clone(),
            transition,
            input_proj,
            input_bias,
            layers,
            adjustor,
            self_adaptive,
            head,
        })
    }

    pub fn config(&self) -> &PgcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Road graph the model was built for.
    pub fn graph(&self) -> &RoadGraph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn adjustor(&self) -> Option<AdjustorMatrix> {
        self.adjustor
    }

    pub fn transition(&self) -> Option<&TransitionPair> {
        self.transition.as_ref()
    }

    /// Exact number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// `(name, shape)` of every parameter in registration order.
    pub fn parameter_inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().shape().to_vec()))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [
            x.shape().first().copied().unwrap_or(0),
            c.input_window,
            self.num_nodes,
            c.input_channels,
        ];
        if x.shape() != expected {
            return Err(Error::dim("pgcn_forward", x.shape(), &expected));
        }
        Ok(())
    }

    /// Builds the adjacency inputs for a batch whose primary channel windows are
    /// `window[B, N, T]`.
    pub fn prepare_graphs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        window: &Tensor,
    ) -> Result<GraphInputs> {
        let n = self.num_nodes;
        let mut graphs = GraphInputs::default();
        if let Some(tp) = &self.transition {
            graphs.forward = Some(tape.constant(tp.forward.reshape([1, n, n])?));
            if !tp.undirected {
                graphs.backward = Some(tape.constant(tp.backward.reshape([1, n, n])?));
            }
        }
        if let Some(adj) = &self.adjustor {
            let w = tape.param(store, adj.id);
            graphs.progressive = Some(progressive_adjacency(tape, window, w)?);
        }
        if let Some(emb) = &self.self_adaptive {
            let a = self_adaptive_adjacency(tape, store, emb)?;
            graphs.self_adaptive = Some(tape.reshape(a, [1, n, n])?);
        }
        Ok(graphs)
    }

    /// One spatial-temporal layer. Returns `(layer output, skip contribution)`;
    /// the skip is taken over the last `skip_len` aligned positions.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        x_in: Var,
        graphs: &GraphInputs,
        skip_len: usize,
    ) -> Result<(Var, Var)> {
        let layer = &self.layers[index];
        let mut p = |id| tape.param(store, id);
        let filter = (p(layer.filter), Some(p(layer.filter_bias)));
        let gate = (p(layer.gate), Some(p(layer.gate_bias)));
        let h = gated_temporal_unit(tape, x_in, filter, gate, layer.dilation)?;

        let t_in = tape.shape(x_in)[2];
        let t_out = tape.shape(h)[2];
        if skip_len > t_out {
            return Err(Error::Length {
                op: "layer_forward",
                got: t_out,
                required: skip_len,
            });
        }
        let tail = tape.slice(h, 2, t_out - skip_len, skip_len)?;
        let ws = tape.param(store, layer.skip);
        let bs = tape.param(store, layer.skip_bias);
        let skip = tape.linear(tail, ws)?;
        let skip = tape.add_bias(skip, bs)?;

        let mut terms = Vec::with_capacity(layer.diffusion.len());
        for (term, ids) in &layer.diffusion {
            let adjacency = graphs
                .get(*term)
                .ok_or_else(|| Error::Config(format!("missing adjacency for {term:?}")))?;
            let powered = !(self.config.unpowered_progressive && *term == DiffusionTerm::Progressive);
            let weights = ids.iter().map(|&id| tape.param(store, id)).collect();
            terms.push(DiffusionInput {
                adjacency,
                powered,
                weights,
            });
        }
        let g = progressive_graph_convolution(tape, h, &terms)?;

        let recent = tape.slice(x_in, 2, t_in - t_out, t_out)?;
        let wr = tape.param(store, layer.residual);
        let br = tape.param(store, layer.residual_bias);
        let res = tape.linear(recent, wr)?;
        let res = tape.add_bias(res, br)?;
        let out = tape.add(g, res)?;
        Ok((out, skip))
    }

    /// Runs input projection and every layer over `x[B, N, L, C]` with
    /// `L >= receptive_field`.
    pub fn stack_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        graphs: &GraphInputs,
    ) -> Result<StackOutput> {
        let rf = self.config.receptive_field();
        let len = x.shape()[2];
        if len < rf {
            return Err(Error::Length {
                op: "stack_forward",
                got: len,
                required: rf,
            });
        }
        let skip_len = len + 1 - rf;
        let xv = tape.constant(x.clone());
        let w = tape.param(store, self.input_proj);
        let b = tape.param(store, self.input_bias);
        let h = tape.linear(xv, w)?;
        let mut h = tape.add_bias(h, b)?;

        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut skip_sum: Option<Var> = None;
        for i in 0..self.layers.len() {
            let (out, skip) = self.layer_forward(tape, store, i, h, graphs, skip_len)?;
            skip_sum = Some(match skip_sum {
                None => skip,
                Some(acc) => tape.add(acc, skip)?,
            });
            outputs.push(out);
            h = out;
        }
        Ok(StackOutput {
            layer_outputs: outputs,
            skip_sum: skip_sum.expect("at least one layer"),
        })
    }

    /// `relu(skip) → affine → relu → affine`, returning `[B, T', N]`.
    pub fn head_forward(&self, tape: &mut Tape, store: &ParamStore, skip_sum: Var) -> Result<Var> {
        let s = tape.shape(skip_sum).to_vec();
        let (b, n) = (s[0], s[1]);
        let act = tape.relu(skip_sum);
        let flat = tape.reshape(act, [b, n, s[2] * s[3]])?;
        let w1 = tape.param(store, self.head.w1);
        let b1 = tape.param(store, self.head.b1);
        let hidden = tape.linear(flat, w1)?;
        let hidden = tape.add_bias(hidden, b1)?;
        let hidden = tape.relu(hidden);
        let w2 = tape.param(store, self.head.w2);
        let b2 = tape.param(store, self.head.b2);
        let out = tape.linear(hidden, w2)?;
        let out = tape.add_bias(out, b2)?;
        tape.permute(out, &[0, 2, 1])
    }

    /// Stack input for `x[B, T, N, C]`: node-major layout, left zero-padded to
    /// the receptive field.
    pub fn stack_input(&self, x: &Tensor) -> Result<Tensor> {
        let nodes_first = x.permute(&[0, 2, 1, 3])?;
        nodes_first.pad_front(2, self.config.padded_length() - self.config.input_window)
    }

    /// Primary-channel windows `[B, N, T]` of `x[B, T, N, C]`.
    pub fn primary_windows(x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let c = s[3];
        let primary: Vec<f64> = x.data().iter().step_by(c).copied().collect();
        Tensor::new([s[0], s[1], s[2]], primary)?.permute(&[0, 2, 1])
    }

    /// Forward pass with parameters taken from `store` (same layout as the
    /// model's own store).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let graphs = self.prepare_graphs(tape, store, &Self::primary_windows(x)?)?;
        let stack = self.stack_forward(tape, store, &self.stack_input(x)?, &graphs)?;
        let prediction = self.head_forward(tape, store, stack.skip_sum)?;
        Ok(ForwardOutput { prediction, graphs })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.params, x)
    }

    /// Normalized-space prediction `[B, T', N]` without keeping the tape.
    pub fn predict_normalized(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// Progressive adjacency `[B, N, N]` for `x[B, T, N, C]`.
    pub fn progressive_weights(&self, x: &Tensor) -> Result<Tensor> {
        let adj = self
            .adjustor
            .ok_or_else(|| Error::Config("model has no progressive adjacency".into()))?;
        self.check_input(x)?;
        let mut tape = Tape::new();
        let w = tape.param(&self.params, adj.id);
        let pa = progressive_adjacency(&mut tape, &Self::primary_windows(x)?, w)?;
        Ok(tape.value(pa.weights).clone())
    }
}
