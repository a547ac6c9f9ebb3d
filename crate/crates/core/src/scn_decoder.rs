//! Semantic compositional LSTM decoder.
//!
//! For every gate `z ∈ {c, i, f, o}` the input, visual and recurrent
//! transforms are factorized through the semantic feature `s`:
//!
//! ```text
//! x̂_z = W_zc · ((W_za · x_t)    ⊙ (W_zb · s))
//! v̂_z = C_zc · ((C_za · v)      ⊙ (C_zb · s))
//! ĥ_z = U_zc · ((U_za · h_{t-1}) ⊙ (U_zb · s))
//! ```
//!
//! followed by the usual LSTM gating. The backward pass is written out by
//! hand; [`backward_sequence`] is checked against central differences in the
//! tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    add_assign, argmax, hadamard, multinomial_draw, sigmoid_scalar, softmax, Matrix, ParamBlocks,
    SeededRng,
};
use crate::corpus::EOS_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Cell,
    Input,
    Forget,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Cell, Gate::Input, Gate::Forget, Gate::Output];

    fn index(self) -> usize {
        match self {
            Gate::Cell => 0,
            Gate::Input => 1,
            Gate::Forget => 2,
            Gate::Output => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Gate::Cell => "cell",
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScnDims {
    pub hidden: usize,
    /// Shared inner rank of every a/b/c triple.
    pub factor: usize,
    /// Word embedding size D_w.
    pub embed: usize,
    /// Visual feature size D_v.
    pub visual: usize,
    /// Number of tags K.
    pub tags: usize,
    pub vocab: usize,
}

impl ScnDims {
    fn validate(&self) -> Result<()> {
        let all = [self.hidden, self.factor, self.embed, self.visual, self.tags, self.vocab];
        if all.contains(&0) {
            return Err(Error::invalid(format!("decoder dims must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// `c · ((a · x) ⊙ (b · s))`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorized {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl Factorized {
    fn init(out: usize, factor: usize, inp: usize, tags: usize, rng: &mut SeededRng) -> Self {
        let glorot = |rows: usize, cols: usize, rng: &mut SeededRng| {
            Matrix::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
        };
        Factorized {
            a: glorot(factor, inp, rng),
            b: glorot(factor, tags, rng),
            c: glorot(out, factor, rng),
        }
    }

    fn zeros(out: usize, factor: usize, inp: usize, tags: usize) -> Self {
        Factorized {
            a: Matrix::zeros(factor, inp),
            b: Matrix::zeros(factor, tags),
            c: Matrix::zeros(out, factor),
        }
    }

    pub fn apply(&self, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.matvec(x)?;
        let bs = self.b.matvec(s)?;
        self.c.matvec(&hadamard(&ax, &bs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// W: word input.
    pub input: Factorized,
    /// C: visual feature.
    pub visual: Factorized,
    /// U: previous hidden state.
    pub recurrent: Factorized,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScnParameters {
    pub dims: ScnDims,
    pub cell: GateParams,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    /// V × D_w word embeddings.
    pub embedding: Matrix,
    /// Step-0 input `start_weight · v + start_bias`.
    pub start_weight: Matrix,
    pub start_bias: Vec<f64>,
    /// V × hidden projection to word logits.
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

impl ScnParameters {
    pub fn gate(&self, z: Gate) -> &GateParams {
        match z {
            Gate::Cell => &self.cell,
            Gate::Input => &self.input_gate,
            Gate::Forget => &self.forget_gate,
            Gate::Output => &self.output_gate,
        }
    }

    pub fn gate_mut(&mut self, z: Gate) -> &mut GateParams {
        match z {
            Gate::Cell => &mut self.cell,
            Gate::Input => &mut self.input_gate,
            Gate::Forget => &mut self.forget_gate,
            Gate::Output => &mut self.output_gate,
        }
    }

    pub fn zeros(dims: ScnDims) -> Result<Self> {
        dims.validate()?;
        let ScnDims { hidden, factor, embed, visual, tags, vocab } = dims;
        let gate = || GateParams {
            input: Factorized::zeros(hidden, factor, embed, tags),
            visual: Factorized::zeros(hidden, factor, visual, tags),
            recurrent: Factorized::zeros(hidden, factor, hidden, tags),
            bias: vec![0.0; hidden],
        };
        Ok(ScnParameters {
            dims,
            cell: gate(),
            input_gate: gate(),
            forget_gate: gate(),
            output_gate: gate(),
            embedding: Matrix::zeros(vocab, embed),
            start_weight: Matrix::zeros(embed, visual),
            start_bias: vec![0.0; embed],
            out_weight: Matrix::zeros(vocab, hidden),
            out_bias: vec![0.0; vocab],
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(dims: ScnDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ScnDims { hidden, factor, embed, visual, tags, vocab } = dims;
        let mut rng = SeededRng::new(seed);
        let gate = |rng: &mut SeededRng| GateParams {
            input: Factorized::init(hidden, factor, embed, tags, rng),
            visual: Factorized::init(hidden, factor, visual, tags, rng),
            recurrent: Factorized::init(hidden, factor, hidden, tags, rng),
            bias: vec![0.0; hidden],
        };
        let cell = gate(&mut rng);
        let input_gate = gate(&mut rng);
        let forget_gate = gate(&mut rng);
        let output_gate = gate(&mut rng);
        let glorot = |rows: usize, cols: usize, rng: &mut SeededRng| {
            Matrix::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
        };
        Ok(ScnParameters {
            dims,
            cell,
            input_gate,
            forget_gate,
            output_gate,
            embedding: glorot(vocab, embed, &mut rng),
            start_weight: glorot(embed, visual, &mut rng),
            start_bias: vec![0.0; embed],
            out_weight: glorot(vocab, hidden, &mut rng),
            out_bias: vec![0.0; vocab],
        })
    }

    /// Overwrites the embedding table, e.g. with pretrained vectors.
    pub fn set_embedding(&mut self, table: Matrix) -> Result<()> {
        if table.shape() != self.embedding.shape() {
            return Err(Error::shape(
                "set_embedding",
                format!("{:?}", self.embedding.shape()),
                format!("{:?}", table.shape()),
            ));
        }
        self.embedding = table;
        Ok(())
    }
}

pub fn init_parameters(dims: ScnDims, seed: u64) -> Result<ScnParameters> {
    ScnParameters::init(dims, seed)
}

impl ParamBlocks for ScnParameters {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for z in Gate::ALL {
            let g = self.gate(z);
            for (part, f) in [("W", &g.input), ("C", &g.visual), ("U", &g.recurrent)] {
                out.push((format!("{}.{part}_a", z.name()), f.a.data()));
                out.push((format!("{}.{part}_b", z.name()), f.b.data()));
                out.push((format!("{}.{part}_c", z.name()), f.c.data()));
            }
            out.push((format!("{}.bias", z.name()), &g.bias[..]));
        }
        out.push(("embedding".into(), self.embedding.data()));
        out.push(("start.weight".into(), self.start_weight.data()));
        out.push(("start.bias".into(), &self.start_bias[..]));
        out.push(("output.weight".into(), self.out_weight.data()));
        out.push(("output.bias".into(), &self.out_bias[..]));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let gates = [
            (Gate::Cell, &mut self.cell),
            (Gate::Input, &mut self.input_gate),
            (Gate::Forget, &mut self.forget_gate),
            (Gate::Output, &mut self.output_gate),
        ];
        for (z, g) in gates {
            for (part, f) in [("W", &mut g.input), ("C", &mut g.visual), ("U", &mut g.recurrent)] {
                out.push((format!("{}.{part}_a", z.name()), f.a.data_mut()));
                out.push((format!("{}.{part}_b", z.name()), f.b.data_mut()));
                out.push((format!("{}.{part}_c", z.name()), f.c.data_mut()));
            }
            out.push((format!("{}.bias", z.name()), &mut g.bias[..]));
        }
        out.push(("embedding".into(), self.embedding.data_mut()));
        out.push(("start.weight".into(), self.start_weight.data_mut()));
        out.push(("start.bias".into(), &mut self.start_bias[..]));
        out.push(("output.weight".into(), self.out_weight.data_mut()));
        out.push(("output.bias".into(), &mut self.out_bias[..]));
        out
    }
}

/// The three semantics-related terms of gate `z`: `(x̂_z, v̂_z, ĥ_z)`.
pub fn semantic_factorize(
    params: &ScnParameters,
    z: Gate,
    x_t: &[f64],
    v: &[f64],
    s: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = params.gate(z);
    Ok((
        g.input.apply(x_t, s)?,
        g.visual.apply(v, s)?,
        g.recurrent.apply(h_prev, s)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Per-sequence quantities that depend only on `v` and `s`.
#[derive(Debug, Clone)]
pub struct SemanticContext {
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    wb_s: [Vec<f64>; 4],
    ub_s: [Vec<f64>; 4],
    cb_s: [Vec<f64>; 4],
    ca_v: [Vec<f64>; 4],
    v_prod: [Vec<f64>; 4],
    v_hat: [Vec<f64>; 4],
}

impl SemanticContext {
    pub fn new(params: &ScnParameters, v: &[f64], s: &[f64]) -> Result<Self> {
        let d = params.dims;
        if v.len() != d.visual {
            return Err(Error::shape("SCN visual feature", d.visual, v.len()));
        }
        if s.len() != d.tags {
            return Err(Error::shape("SCN semantic feature", d.tags, s.len()));
        }
        let per_gate = |f: &dyn Fn(&GateParams) -> Vec<f64>| -> [Vec<f64>; 4] {
            Gate::ALL.map(|z| f(params.gate(z)))
        };
        let wb_s = per_gate(&|g| g.input.b.matvec_unchecked(s));
        let ub_s = per_gate(&|g| g.recurrent.b.matvec_unchecked(s));
        let cb_s = per_gate(&|g| g.visual.b.matvec_unchecked(s));
        let ca_v = per_gate(&|g| g.visual.a.matvec_unchecked(v));
        let v_prod: [Vec<f64>; 4] = std::array::from_fn(|k| hadamard(&ca_v[k], &cb_s[k]));
        let v_hat: [Vec<f64>; 4] =
            std::array::from_fn(|k| params.gate(Gate::ALL[k]).visual.c.matvec_unchecked(&v_prod[k]));
        Ok(SemanticContext {
            v: v.to_vec(),
            s: s.to_vec(),
            wb_s,
            ub_s,
            cb_s,
            ca_v,
            v_prod,
            v_hat,
        })
    }
}

/// Where a step's input vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    /// Learned affine map of `v` (step 0).
    Start,
    /// Embedding of a token; `sampled` marks tokens drawn from the model
    /// rather than taken from the ground truth.
    Token { id: usize, sampled: bool },
}

/// Cached intermediates of one executed step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub source: InputSource,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    wa_x: [Vec<f64>; 4],
    ua_h: [Vec<f64>; 4],
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    /// Raw cell candidate ĉ_t.
    pub candidate: Vec<f64>,
    pub c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    /// Output distribution over the vocabulary.
    pub dist: Vec<f64>,
}

/// One recurrent step. Returns the next state and the step's trace (without
/// the output distribution, which [`output_distribution`] supplies).
pub fn scn_step(
    params: &ScnParameters,
    ctx: &SemanticContext,
    x_t: &[f64],
    state: &CellState,
    source: InputSource,
) -> Result<(CellState, StepTrace)> {
    let d = params.dims;
    if x_t.len() != d.embed {
        return Err(Error::shape("scn_step input", d.embed, x_t.len()));
    }
    if state.h.len() != d.hidden || state.c.len() != d.hidden {
        return Err(Error::shape("scn_step state", d.hidden, state.h.len()));
    }
    let mut wa_x: [Vec<f64>; 4] = Default::default();
    let mut ua_h: [Vec<f64>; 4] = Default::default();
    let mut pre: [Vec<f64>; 4] = Default::default();
    for z in Gate::ALL {
        let k = z.index();
        let g = params.gate(z);
        wa_x[k] = g.input.a.matvec_unchecked(x_t);
        ua_h[k] = g.recurrent.a.matvec_unchecked(&state.h);
        let x_hat = g.input.c.matvec_unchecked(&hadamard(&wa_x[k], &ctx.wb_s[k]));
        let h_hat = g.recurrent.c.matvec_unchecked(&hadamard(&ua_h[k], &ctx.ub_s[k]));
        pre[k] = (0..d.hidden)
            .map(|j| x_hat[j] + h_hat[j] + ctx.v_hat[k][j] + g.bias[j])
            .collect();
    }
    let candidate: Vec<f64> = pre[Gate::Cell.index()].iter().map(|x| x.tanh()).collect();
    let act = |z: Gate| -> Vec<f64> { pre[z.index()].iter().map(|&x| sigmoid_scalar(x)).collect() };
    let (ig, fg, og) = (act(Gate::Input), act(Gate::Forget), act(Gate::Output));
    let c: Vec<f64> = (0..d.hidden)
        .map(|j| fg[j] * state.c[j] + ig[j] * candidate[j])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = og.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
    let next = CellState {
        h: h.clone(),
        c: c.clone(),
    };
    Ok((
        next,
        StepTrace {
            source,
            x: x_t.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            wa_x,
            ua_h,
            input_gate: ig,
            forget_gate: fg,
            output_gate: og,
            candidate,
            c,
            tanh_c,
            h,
            dist: Vec::new(),
        },
    ))
}

/// `softmax(out_weight · h + out_bias)`.
pub fn output_distribution(params: &ScnParameters, h: &[f64]) -> Result<Vec<f64>> {
    let mut logits = params.out_weight.matvec(h)?;
    add_assign(&mut logits, &params.out_bias);
    Ok(softmax(&logits))
}

/// Chooses the input token of the next step after each executed step.
pub trait Guide {
    /// Called with the output distribution of step `step`; returns the token
    /// whose embedding feeds step `step + 1`, or `None` to stop.
    fn next_input(&mut self, step: usize, dist: &[f64]) -> Result<Option<InputSource>>;
}

/// Feeds the ground-truth token at every step; runs exactly `targets.len()`
/// steps.
pub struct TeacherForcing<'a> {
    targets: &'a [usize],
}

impl<'a> TeacherForcing<'a> {
    pub fn new(targets: &'a [usize]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("teacher forcing needs a non-empty target sequence"));
        }
        Ok(TeacherForcing { targets })
    }
}

impl Guide for TeacherForcing<'_> {
    fn next_input(&mut self, step: usize, _dist: &[f64]) -> Result<Option<InputSource>> {
        Ok((step + 1 < self.targets.len()).then(|| InputSource::Token {
            id: self.targets[step],
            sampled: false,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Argmax,
    Multinomial,
}

/// Free-running generation: feeds back the model's own token until `<eos>`.
pub struct FreeRun<'a> {
    rng: Option<&'a mut SeededRng>,
    pub tokens: Vec<usize>,
}

impl<'a> FreeRun<'a> {
    pub fn argmax() -> Self {
        FreeRun {
            rng: None,
            tokens: Vec::new(),
        }
    }

    pub fn multinomial(rng: &'a mut SeededRng) -> Self {
        FreeRun {
            rng: Some(rng),
            tokens: Vec::new(),
        }
    }
}

impl Guide for FreeRun<'_> {
    fn next_input(&mut self, _step: usize, dist: &[f64]) -> Result<Option<InputSource>> {
        let tok = match self.rng.as_deref_mut() {
            Some(rng) => multinomial_draw(dist, rng)?,
            None => argmax(dist),
        };
        self.tokens.push(tok);
        Ok((tok != EOS_ID).then_some(InputSource::Token {
            id: tok,
            sampled: true,
        }))
    }
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub ctx: SemanticContext,
    pub steps: Vec<StepTrace>,
}

impl SequenceTrace {
    pub fn distributions(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.dist.as_slice())
    }

    pub fn states(&self) -> impl Iterator<Item = CellState> + '_ {
        self.steps.iter().map(|s| CellState {
            h: s.h.clone(),
            c: s.c.clone(),
        })
    }
}

fn input_vector(params: &ScnParameters, ctx: &SemanticContext, src: InputSource) -> Result<Vec<f64>> {
    match src {
        InputSource::Start => {
            let mut x = params.start_weight.matvec_unchecked(&ctx.v);
            add_assign(&mut x, &params.start_bias);
            Ok(x)
        }
        InputSource::Token { id, .. } => {
            if id >= params.dims.vocab {
                return Err(Error::invalid(format!(
                    "token {id} outside vocabulary of {}",
                    params.dims.vocab
                )));
            }
            Ok(params.embedding.row(id).to_vec())
        }
    }
}

/// Runs the decoder from the zero state. Step 0 consumes the start input
/// derived from `v`; later inputs come from `guide`. Stops when the guide
/// returns `None` or after `max_steps` steps.
pub fn forward_sequence(
    params: &ScnParameters,
    v: &[f64],
    s: &[f64],
    guide: &mut dyn Guide,
    max_steps: usize,
) -> Result<SequenceTrace> {
    if max_steps == 0 {
        return Err(Error::invalid("forward_sequence: max_steps must be >= 1"));
    }
    let ctx = SemanticContext::new(params, v, s)?;
    let mut state = CellState::zeros(params.dims.hidden);
    let mut steps = Vec::new();
    let mut src = InputSource::Start;
    for t in 0..max_steps {
        let x = input_vector(params, &ctx, src)?;
        let (next, mut trace) = scn_step(params, &ctx, &x, &state, src)?;
        trace.dist = output_distribution(params, &next.h)?;
        let choice = guide.next_input(t, &trace.dist)?;
        steps.push(trace);
        state = next;
        match choice {
            Some(next_src) => src = next_src,
            None => break,
        }
    }
    Ok(SequenceTrace { ctx, steps })
}

/// Gradient of `-weight · Σ_t log p_t(targets[t])` with respect to every
/// parameter, accumulated into `grads`. Tokens sampled from the model are
/// treated as constants: no gradient flows back through the sampling choice.
pub fn accumulate_backward(
    params: &ScnParameters,
    trace: &SequenceTrace,
    targets: &[usize],
    weight: f64,
    grads: &mut ScnParameters,
) -> Result<()> {
    if targets.len() != trace.steps.len() {
        return Err(Error::shape(
            "backward_sequence",
            format!("{} executed steps", trace.steps.len()),
            format!("{} targets", targets.len()),
        ));
    }
    let d = params.dims;
    if let Some(&bad) = targets.iter().find(|&&t| t >= d.vocab) {
        return Err(Error::invalid(format!("target {bad} outside vocabulary of {}", d.vocab)));
    }
    let ctx = &trace.ctx;
    let mut dh_next = vec![0.0; d.hidden];
    let mut dc_next = vec![0.0; d.hidden];
    let mut dv_hat: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.hidden]);

    for (st, &target) in trace.steps.iter().zip(targets).rev() {
        let mut dlogits: Vec<f64> = st.dist.iter().map(|p| weight * p).collect();
        dlogits[target] -= weight;

        let mut dh = dh_next.clone();
        params.out_weight.matvec_t_acc(&dlogits, &mut dh);
        grads.out_weight.add_outer(&dlogits, &st.h);
        add_assign(&mut grads.out_bias, &dlogits);

        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.hidden]);
        let mut dc_prev = vec![0.0; d.hidden];
        for j in 0..d.hidden {
            let (i, f, o, ch, tc) = (
                st.input_gate[j],
                st.forget_gate[j],
                st.output_gate[j],
                st.candidate[j],
                st.tanh_c[j],
            );
            let d_o = dh[j] * tc;
            let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
            da[Gate::Input.index()][j] = dc * ch * i * (1.0 - i);
            da[Gate::Forget.index()][j] = dc * st.c_prev[j] * f * (1.0 - f);
            da[Gate::Output.index()][j] = d_o * o * (1.0 - o);
            da[Gate::Cell.index()][j] = dc * i * (1.0 - ch * ch);
            dc_prev[j] = dc * f;
        }

        let mut dx = vec![0.0; d.embed];
        let mut dh_prev = vec![0.0; d.hidden];
        for z in Gate::ALL {
            let k = z.index();
            let g = params.gate(z);
            let da_z = &da[k];
            let gg = grads.gate_mut(z);
            add_assign(&mut gg.bias, da_z);
            add_assign(&mut dv_hat[k], da_z);

            // word input branch
            let x_prod = hadamard(&st.wa_x[k], &ctx.wb_s[k]);
            gg.input.c.add_outer(da_z, &x_prod);
            let dprod = g.input.c.matvec_t(da_z)?;
            let d_ax = hadamard(&dprod, &ctx.wb_s[k]);
            gg.input.a.add_outer(&d_ax, &st.x);
            gg.input.b.add_outer(&hadamard(&dprod, &st.wa_x[k]), &ctx.s);
            g.input.a.matvec_t_acc(&d_ax, &mut dx);

            // recurrent branch
            let h_prod = hadamard(&st.ua_h[k], &ctx.ub_s[k]);
            gg.recurrent.c.add_outer(da_z, &h_prod);
            let dprod = g.recurrent.c.matvec_t(da_z)?;
            let d_uh = hadamard(&dprod, &ctx.ub_s[k]);
            gg.recurrent.a.add_outer(&d_uh, &st.h_prev);
            gg.recurrent.b.add_outer(&hadamard(&dprod, &st.ua_h[k]), &ctx.s);
            g.recurrent.a.matvec_t_acc(&d_uh, &mut dh_prev);
        }

        match st.source {
            InputSource::Start => {
                grads.start_weight.add_outer(&dx, &ctx.v);
                add_assign(&mut grads.start_bias, &dx);
            }
            InputSource::Token { id, .. } => {
                add_assign(grads.embedding.row_mut(id), &dx);
            }
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    // visual branch is constant over time: accumulate once
    for z in Gate::ALL {
        let k = z.index();
        let g = params.gate(z);
        let gg = grads.gate_mut(z);
        gg.visual.c.add_outer(&dv_hat[k], &ctx.v_prod[k]);
        let dprod = g.visual.c.matvec_t(&dv_hat[k])?;
        gg.visual.a.add_outer(&hadamard(&dprod, &ctx.cb_s[k]), &ctx.v);
        gg.visual.b.add_outer(&hadamard(&dprod, &ctx.ca_v[k]), &ctx.s);
    }
    Ok(())
}

/// Gradients of one weighted sequence loss as a fresh parameter-shaped value.
pub fn backward_sequence(
    params: &ScnParameters,
    trace: &SequenceTrace,
    targets: &[usize],
    weight: f64,
) -> Result<ScnParameters> {
    let mut grads = params.zeros_like();
    accumulate_backward(params, trace, targets, weight, &mut grads)?;
    Ok(grads)
}
