//! Parameter storage and the layers the encoders are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Gradients, Graph, Scalar, Var};

/// Handle to one named parameter array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::of(x.to_f64()))).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of a store bound onto a graph. Each parameter is copied onto
/// the tape the first time it is used, so parameters a forward pass never
/// touches get no gradient at all.
pub struct Binding<'g, F: Scalar> {
    graph: &'g Graph<F>,
    store: &'g ParamStore<F>,
    vars: RefCell<Vec<Option<Var<'g, F>>>>,
}

impl<'g, F: Scalar> Binding<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Binding {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var<'g, F> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.graph.param(self.store.get(id).clone()))
    }

    /// Gradient of every parameter; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients<F>) -> Vec<Array2<F>> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| {
                vars[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(self.store.get(id).raw_dim()))
            })
            .collect()
    }

    /// Parameters that were placed on the tape.
    pub fn touched(&self) -> Vec<ParamId> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }
}

/// Everything a forward pass needs: the tape, bound parameters, and the
/// dropout state.
pub struct Ctx<'g, F: Scalar> {
    pub params: Binding<'g, F>,
    pub train: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, F: Scalar> Ctx<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &'g ParamStore<F>, train: bool, dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            params: Binding::new(graph, store),
            train,
            dropout,
            rng: RefCell::new(rng),
        }
    }

    /// Inference context: no dropout.
    pub fn eval(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Self::new(graph, store, false, 0.0, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.params.graph()
    }

    pub fn p(&self, id: ParamId) -> Var<'g, F> {
        self.params.get(id)
    }

    pub fn constant(&self, a: Array2<F>) -> Var<'g, F> {
        self.graph().constant(a)
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng.into_inner()
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&self, x: Var<'g, F>) -> Var<'g, F> {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let scale = F::of(1.0 / keep);
        let (r, c) = x.shape();
        let mut rng = self.rng.borrow_mut();
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random_bool(keep) { scale } else { F::zero() });
        x * self.constant(mask)
    }
}

/// Initialisation helpers shared by the layer constructors.
pub struct Init<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Init<'_, F> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| F::of(rng.random_range(-limit..limit)));
        self.store.add(name, w)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let w = Array2::from_shape_fn((rows, cols), |_| F::of(std * rng.sample::<f64, _>(StandardNormal)));
        self.store.add(name, w)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::ones((rows, cols)))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), fan_in, fan_out);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), 1, fan_out));
        Linear { weight, bias }
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let y = x.matmul(ctx.p(self.weight));
        match self.bias {
            Some(b) => y.add_row(ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.ones(&format!("{name}.gain"), 1, dim),
            bias: init.zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias), F::of(1e-5))
    }
}

/// Additive row mask: `0` for kept positions, a large negative number for
/// masked ones.
pub(crate) fn mask_row<F: Scalar>(mask: &[bool]) -> Array2<F> {
    Array2::from_shape_fn((1, mask.len()), |(_, i)| if mask[i] { F::zero() } else { F::of(-1e9) })
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, dim: usize, num_heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(init, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(init, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(init, &format!("{name}.value"), dim, dim, true),
            out: Linear::new(init, &format!("{name}.out"), dim, dim, true),
            num_heads,
        }
    }

    /// Self-attention over the rows of `x`. `key_mask[i] == false` hides row
    /// `i` from every query.
    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, x: Var<'g, F>, key_mask: Option<&[bool]>) -> Var<'g, F> {
        let (_, dim) = x.shape();
        let head = dim / self.num_heads;
        let scale = F::of(1.0 / (head as f64).sqrt());
        let q = self.query.forward(ctx, x);
        let k = self.key.forward(ctx, x);
        let v = self.value.forward(ctx, x);
        let mask = key_mask.map(|m| ctx.constant(mask_row(m)));
        let heads: Vec<_> = (0..self.num_heads)
            .map(|h| {
                let (a, b) = (h * head, (h + 1) * head);
                let mut scores = q.slice_cols(a, b).matmul_t(k.slice_cols(a, b)).scale(scale);
                if let Some(m) = mask {
                    scores = scores.add_row(m);
                }
                scores.softmax_rows().matmul(v.slice_cols(a, b))
            })
            .collect();
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.graph().concat_cols(&heads)
        };
        self.out.forward(ctx, joined)
    }
}

/// Pre-norm Transformer encoder layer with a ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, dim: usize, num_heads: usize, ff_dim: usize) -> Self {
        TransformerLayer {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(init, &format!("{name}.attention"), dim, num_heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            ff_in: Linear::new(init, &format!("{name}.ff_in"), dim, ff_dim, true),
            ff_out: Linear::new(init, &format!("{name}.ff_out"), ff_dim, dim, true),
        }
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, x: Var<'g, F>, key_mask: Option<&[bool]>) -> Var<'g, F> {
        let attended = self.attention.forward(ctx, self.norm1.forward(ctx, x), key_mask);
        let x = x + ctx.dropout(attended);
        let hidden = self.ff_in.forward(ctx, self.norm2.forward(ctx, x)).relu();
        let ff = self.ff_out.forward(ctx, ctx.dropout(hidden));
        x + ctx.dropout(ff)
    }
}

/// Additive attention pooling: `s_i = w2 · tanh(W1 h_i)`, softmax over the
/// unmasked positions, weighted sum of rows.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl AttentionPool {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        AttentionPool {
            w1: init.xavier(&format!("{name}.w1"), dim, dim),
            w2: init.xavier(&format!("{name}.w2"), dim, 1),
        }
    }

    /// Attention weights as a `1 × L` row.
    pub fn weights<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, h: Var<'g, F>, mask: Option<&[bool]>) -> Var<'g, F> {
        let scores = h.matmul(ctx.p(self.w1)).tanh().matmul(ctx.p(self.w2)).t();
        let scores = match mask {
            Some(m) => scores.add_row(ctx.constant(mask_row(m))),
            None => scores,
        };
        scores.softmax_rows()
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, h: Var<'g, F>, mask: Option<&[bool]>) -> Var<'g, F> {
        self.weights(ctx, h, mask).matmul(h)
    }
}
