//! Learnable building blocks: MLPs, sinusoidal positional encodings, masked
//! single-query attention, and dilated residual temporal-convolution layers.
//!
//! Parameters live in a [`ParamStore`] owned by the model; a [`Forward`]
//! binds them into a fresh [`Graph`] per pass so gradients accumulate in one
//! leaf per parameter no matter how often a block is reused.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Index of a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (off for biases and the category table).
    pub decay: bool,
}

/// Flat registry of learnable tensors with unique names.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry {
        &mut self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Sets every parameter to zero; used by residual-structure tests.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Uniform(-a, a) with a = 1/sqrt(fan_in).
pub fn uniform_init<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// One forward pass: a graph plus the parameter bindings made on it.
pub struct Forward<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Forward { graph: Graph::new(), store, bound: vec![None; store.len()] }
    }

    /// Leaf var for a parameter, registered at most once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.value(id).value_clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Post-backward gradients aligned with store indices; `None` where the
    /// loss never reached a parameter.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}

// Tensor::clone is fine but keep the intent visible at the call site.
trait ValueClone {
    fn value_clone(&self) -> Tensor;
}

impl ValueClone for Tensor {
    fn value_clone(&self) -> Tensor {
        self.clone()
    }
}

/// Affine-ReLU-...-affine stack. ReLU between layers, none at the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `widths` = [in, hidden..., out]; needs at least one transition.
    /// `decay_from` marks the first layer whose weight gets weight decay
    /// (0 for all; 1 exempts the input layer, e.g. a one-hot lookup table).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        widths: &[usize],
        decay_from: usize,
    ) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one transition");
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let w = store.add(
                format!("{prefix}.w{i}"),
                uniform_init(rng, vec![fan_in, fan_out], fan_in),
                i >= decay_from,
            );
            let b = store.add(
                format!("{prefix}.b{i}"),
                uniform_init(rng, vec![fan_out], fan_in),
                false,
            );
            layers.push((w, b));
        }
        Mlp { widths: widths.to_vec(), layers }
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let got = f.graph.value(x).cols();
        if got != self.in_width() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {} != expected {}", got, self.in_width()),
            ));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = f.param(w);
            let bv = f.param(b);
            h = f.graph.matmul(h, wv)?;
            h = f.graph.add_bias(h, bv)?;
            if i + 1 < self.layers.len() {
                h = f.graph.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Precomputed sinusoidal table: row p, column 2i holds sin(p/10000^(2i/D)),
/// column 2i+1 holds cos of the same argument.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    max_len: usize,
    dim: usize,
    table: Tensor,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Contract(format!(
                "positional encoding dimension must be even and positive, got {dim}"
            )));
        }
        let mut data = vec![0.0; max_len * dim];
        for p in 0..max_len {
            for i in 0..dim / 2 {
                let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                data[p * dim + 2 * i] = angle.sin();
                data[p * dim + 2 * i + 1] = angle.cos();
            }
        }
        Ok(PositionalEncoding { max_len, dim, table: Tensor::new(vec![max_len, dim], data)? })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// First `len` rows as an owned tensor (for graph constants).
    pub fn prefix(&self, len: usize) -> Result<Tensor> {
        if len > self.max_len {
            return Err(Error::Contract(format!(
                "positional encoding holds {} rows, {} requested",
                self.max_len, len
            )));
        }
        let d = self.dim;
        Tensor::new(vec![len, d], self.table.data()[..len * d].to_vec())
    }
}

/// Attention with an additive {0, -inf} mask on the scores.
///
/// `query` is [Q×D] (one row per attending element), `keys`/`values` are
/// [S×D], `mask` is [Q×S]. Output row q = softmax(mask_q + query_q · Kᵀ) · V.
/// Fully masked rows produce an exactly-zero output row and bump the graph's
/// empty-attention-row counter.
pub fn masked_attention(g: &mut Graph, query: Var, keys: Var, values: Var, mask: Var) -> Result<Var> {
    let (q, d) = dims2(g, "masked_attention", query)?;
    let (s, dk) = dims2(g, "masked_attention", keys)?;
    let (sv, dv) = dims2(g, "masked_attention", values)?;
    let (mq, ms) = dims2(g, "masked_attention", mask)?;
    if s == 0 {
        return Err(Error::Contract("masked_attention: need at least one key".to_string()));
    }
    if dk != d || sv != s || dv != d || mq != q || ms != s {
        return Err(Error::shape(
            "masked_attention",
            format!("query {q}x{d}, keys {s}x{dk}, values {sv}x{dv}, mask {mq}x{ms}"),
        ));
    }
    if g.value(mask).data().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
        return Err(Error::Contract(
            "masked_attention: mask entries must be 0 or -inf".to_string(),
        ));
    }
    let kt = g.transpose(keys)?;
    let scores = g.matmul(query, kt)?;
    let masked = g.add(scores, mask)?;
    let weights = g.softmax_lastdim(masked)?;
    g.matmul(weights, values)
}

fn dims2(g: &Graph, op: &'static str, v: Var) -> Result<(usize, usize)> {
    let t = g.value(v);
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank-2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// One temporal residual layer: y = x + pointwise(ReLU(dilated_conv(x))).
/// Same-padding with zeros keeps the output length equal to the input.
#[derive(Debug, Clone)]
pub struct DilatedResidualLayer {
    pub dilation: usize,
    pub kernel: usize,
    conv_w: ParamId,
    conv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl DilatedResidualLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let conv_fan = kernel * channels;
        let conv_w = store.add(
            format!("{prefix}.conv_w"),
            uniform_init(rng, vec![kernel, channels, channels], conv_fan),
            true,
        );
        let conv_b = store.add(
            format!("{prefix}.conv_b"),
            uniform_init(rng, vec![channels], conv_fan),
            false,
        );
        let proj_w = store.add(
            format!("{prefix}.proj_w"),
            uniform_init(rng, vec![channels, channels], channels),
            true,
        );
        let proj_b = store.add(
            format!("{prefix}.proj_b"),
            uniform_init(rng, vec![channels], channels),
            false,
        );
        DilatedResidualLayer { dilation, kernel, conv_w, conv_b, proj_w, proj_b }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let branch = self.branch(f, x)?;
        f.graph.add(x, branch)
    }

    /// The non-residual branch: pointwise(ReLU(dilated_conv(x))).
    pub fn branch(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let cw = f.param(self.conv_w);
        let cb = f.param(self.conv_b);
        let pw = f.param(self.proj_w);
        let pb = f.param(self.proj_b);
        let h = f.graph.conv1d_dilated(x, cw, cb, self.dilation)?;
        let h = f.graph.relu(h)?;
        let h = f.graph.matmul(h, pw)?;
        f.graph.add_bias(h, pb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_grad_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn mlp_zero_weights_broadcast_bias() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[3, 2], 0);
        store.zero_all();
        let (_, b) = mlp.layer_params()[0];
        store.value_mut(b).data_mut().copy_from_slice(&[0.5, -1.5]);

        let mut f = Forward::new(&store);
        let x = f.graph.constant(randt(&mut r, vec![4, 3]));
        let y = mlp.forward(&mut f, x).unwrap();
        for i in 0..4 {
            assert_eq!(f.graph.value(y).row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn mlp_identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[2, 2], 0);
        store.zero_all();
        let (w, _) = mlp.layer_params()[0];
        store.value_mut(w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);

        let mut f = Forward::new(&store);
        let input = randt(&mut r, vec![3, 2]);
        let x = f.graph.constant(input.clone());
        let y = mlp.forward(&mut f, x).unwrap();
        assert_eq!(f.graph.value(y).data(), input.data());
    }

    #[test]
    fn mlp_matches_hand_composition() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[3, 5, 2], 0);
        let input = randt(&mut r, vec![4, 3]);

        let mut f = Forward::new(&store);
        let x = f.graph.constant(input.clone());
        let y = mlp.forward(&mut f, x).unwrap();

        // Hand-composed matmul/add_bias/relu sequence on the same params.
        let mut g = Graph::new();
        let xv = g.constant(input);
        let (w0, b0) = mlp.layer_params()[0];
        let (w1, b1) = mlp.layer_params()[1];
        let w0v = g.constant(store.value(w0).clone());
        let b0v = g.constant(store.value(b0).clone());
        let w1v = g.constant(store.value(w1).clone());
        let b1v = g.constant(store.value(b1).clone());
        let h = g.matmul(xv, w0v).unwrap();
        let h = g.add_bias(h, b0v).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.matmul(h, w1v).unwrap();
        let h = g.add_bias(h, b1v).unwrap();

        assert_eq!(f.graph.value(y).data(), g.value(h).data());
    }

    #[test]
    fn mlp_width_mismatch_is_error() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[3, 2], 0);
        let mut f = Forward::new(&store);
        let x = f.graph.constant(Tensor::zeros(vec![2, 4]));
        assert!(mlp.forward(&mut f, x).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[3, 4, 2], 0);
        let input = randt(&mut r, vec![2, 3]);

        // Check d loss / d input through the block.
        let f = |g: &mut Graph, vs: &[Var]| {
            let mut fw = Forward { graph: std::mem::take(g), store: &store, bound: vec![None; store.len()] };
            let y = mlp.forward(&mut fw, vs[0])?;
            *g = fw.graph;
            let s = g.sum_all(y)?;
            g.mul_scalar(s, 1.0)
        };
        let err = max_grad_error(&f, &[input], 1e-5).unwrap();
        assert!(err < 1e-4, "mlp grad rel err {err}");
    }

    #[test]
    fn positional_encoding_row_zero_alternates() {
        let pe = PositionalEncoding::new(5, 6).unwrap();
        assert_eq!(pe.table().row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_encoding_formula_at_origin_dims() {
        let pe = PositionalEncoding::new(4, 8).unwrap();
        assert!((pe.table().at2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.table().at2(1, 1) - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn positional_encoding_matches_scalar_evaluation() {
        let (max_len, d) = (50, 16);
        let pe = PositionalEncoding::new(max_len, d).unwrap();
        let mut r = rng();
        for _ in 0..100 {
            let p = r.gen_range(0..max_len);
            let i = r.gen_range(0..d / 2);
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            assert!((pe.table().at2(p, 2 * i) - angle.sin()).abs() < 1e-12);
            assert!((pe.table().at2(p, 2 * i + 1) - angle.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(PositionalEncoding::new(4, 7).is_err());
    }

    #[test]
    fn attention_forced_selection_returns_value_row() {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.constant(randt(&mut r, vec![1, 4]));
        let keys = g.constant(randt(&mut r, vec![3, 4]));
        let values = randt(&mut r, vec![3, 4]);
        let vv = g.constant(values.clone());
        let ninf = f64::NEG_INFINITY;
        let mask = g.constant(Tensor::from_rows(&[vec![ninf, 0.0, ninf]]).unwrap());
        let out = masked_attention(&mut g, q, keys, vv, mask).unwrap();
        assert!(g.value(out).max_abs_diff(&Tensor::from_rows(&[values.row(1).to_vec()]).unwrap()) < 1e-12);
    }

    #[test]
    fn attention_identical_values_recovered_under_symmetry() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![1, 4])); // uniform scores
        let keys = g.constant(Tensor::zeros(vec![3, 4]));
        let row = vec![0.3, -0.7, 0.1, 2.0];
        let vv = g.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap());
        let mask = g.constant(Tensor::zeros(vec![1, 3]));
        let out = masked_attention(&mut g, q, keys, vv, mask).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_bruteforce_weights() {
        let mut r = rng();
        let q = randt(&mut r, vec![1, 4]);
        let keys = randt(&mut r, vec![4, 4]);
        let values = randt(&mut r, vec![4, 4]);
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[vec![0.0, ninf, 0.0, 0.0]]).unwrap();

        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kv = g.constant(keys.clone());
        let vv = g.constant(values.clone());
        let mv = g.constant(mask.clone());
        let out = masked_attention(&mut g, qv, kv, vv, mv).unwrap();

        // Brute force: explicit scores, exp, normalize, weighted sum.
        let mut scores = vec![0.0; 4];
        for s in 0..4 {
            for d in 0..4 {
                scores[s] += q.at2(0, d) * keys.at2(s, d);
            }
            scores[s] += mask.at2(0, s);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expected = vec![0.0; 4];
        for s in 0..4 {
            let w = exps[s] / z;
            for d in 0..4 {
                expected[d] += w * values.at2(s, d);
            }
        }
        for (a, b) in g.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_all_masked_gives_zero_and_flag() {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.constant(randt(&mut r, vec![1, 4]));
        let keys = g.constant(randt(&mut r, vec![2, 4]));
        let values = g.constant(randt(&mut r, vec![2, 4]));
        let mask = g.constant(Tensor::filled(vec![1, 2], f64::NEG_INFINITY));
        let out = masked_attention(&mut g, q, keys, values, mask).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
        assert_eq!(g.empty_softmax_rows(), 1);
    }

    #[test]
    fn attention_rejects_invalid_masks() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![1, 2]));
        let k = g.constant(Tensor::zeros(vec![2, 2]));
        let v = g.constant(Tensor::zeros(vec![2, 2]));
        let bad = g.constant(Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap());
        assert!(masked_attention(&mut g, q, k, v, bad).is_err());
    }

    #[test]
    fn attention_permutation_equivariant_over_keys() {
        let mut r = rng();
        let q = randt(&mut r, vec![1, 3]);
        let keys = randt(&mut r, vec![4, 3]);
        let values = randt(&mut r, vec![4, 3]);
        let ninf = f64::NEG_INFINITY;
        let mask_rows = [0.0, ninf, 0.0, 0.0];

        let run = |perm: &[usize]| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let k = Tensor::from_rows(&perm.iter().map(|&i| keys.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let v = Tensor::from_rows(&perm.iter().map(|&i| values.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let m = Tensor::from_rows(&[perm.iter().map(|&i| mask_rows[i]).collect::<Vec<_>>()]).unwrap();
            let kv = g.constant(k);
            let vv = g.constant(v);
            let mv = g.constant(m);
            let out = masked_attention(&mut g, qv, kv, vv, mv).unwrap();
            g.value(out).data().to_vec()
        };
        let identity = run(&[0, 1, 2, 3]);
        let shuffled = run(&[2, 0, 3, 1]);
        for (a, b) in identity.iter().zip(&shuffled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shift_invariant_on_open_scores() {
        // Adding c to every unmasked score leaves the weights unchanged.
        let mut r = rng();
        let keys = randt(&mut r, vec![3, 2]);
        let values = randt(&mut r, vec![3, 2]);
        let ninf = f64::NEG_INFINITY;

        let run = |shift: f64| {
            let mut g = Graph::new();
            let q = g.constant(Tensor::from_rows(&[vec![0.4, -0.2]]).unwrap());
            let kv = g.constant(keys.clone());
            let kt = g.transpose(kv).unwrap();
            let scores = g.matmul(q, kt).unwrap();
            let shifted = {
                let c = g.constant(Tensor::filled(vec![1, 3], shift));
                g.add(scores, c).unwrap()
            };
            let mask = g.constant(Tensor::from_rows(&[vec![0.0, ninf, 0.0]]).unwrap());
            let masked = g.add(shifted, mask).unwrap();
            let w = g.softmax_lastdim(masked).unwrap();
            let vv = g.constant(values.clone());
            let out = g.matmul(w, vv).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(0.0);
        let shifted = run(13.7);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng();
        let q = randt(&mut r, vec![2, 3]);
        let keys = randt(&mut r, vec![4, 3]);
        let values = randt(&mut r, vec![4, 3]);
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[vec![0.0, 0.0, ninf, 0.0], vec![ninf, 0.0, 0.0, 0.0]]).unwrap();
        let f = move |g: &mut Graph, vs: &[Var]| {
            let mv = g.constant(mask.clone());
            let out = masked_attention(g, vs[0], vs[1], vs[2], mv)?;
            g.sum_all(out)
        };
        let err = max_grad_error(&f, &[q, keys, values], 1e-5).unwrap();
        assert!(err < 1e-4, "attention grad rel err {err}");
    }

    #[test]
    fn dilated_layer_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DilatedResidualLayer::new(&mut store, &mut r, "d", 3, 3, 2);
        store.zero_all();
        let input = randt(&mut r, vec![6, 3]);
        let mut f = Forward::new(&store);
        let x = f.graph.constant(input.clone());
        let y = layer.forward(&mut f, x).unwrap();
        assert_eq!(f.graph.value(y).data(), input.data());
    }

    #[test]
    fn dilated_layer_single_frame_matches_scalar_computation() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DilatedResidualLayer::new(&mut store, &mut r, "d", 1, 3, 1);
        let x_val = 0.7;
        // T=1: only the center tap fires.
        let cw = store.value(store.find("d.conv_w").unwrap()).data().to_vec();
        let cb = store.value(store.find("d.conv_b").unwrap()).first();
        let pw = store.value(store.find("d.proj_w").unwrap()).first();
        let pb = store.value(store.find("d.proj_b").unwrap()).first();
        let conv = cb + cw[1] * x_val;
        let expected = x_val + pb + pw * conv.max(0.0);

        let mut f = Forward::new(&store);
        let x = f.graph.constant(Tensor::from_rows(&[vec![x_val]]).unwrap());
        let y = layer.forward(&mut f, x).unwrap();
        assert!((f.graph.value(y).first() - expected).abs() < 1e-12);
    }

    #[test]
    fn dilated_branch_impulse_stays_on_stencil() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DilatedResidualLayer::new(&mut store, &mut r, "d", 1, 3, 2);
        // Zero conv bias so silence stays silent through the branch.
        store.value_mut(store.find("d.conv_b").unwrap()).data_mut()[0] = 0.0;
        store.value_mut(store.find("d.proj_b").unwrap()).data_mut()[0] = 0.0;

        let mut input = Tensor::zeros(vec![9, 1]);
        input.data_mut()[4] = 1.0;
        let mut f = Forward::new(&store);
        let x = f.graph.constant(input);
        let branch = layer.branch(&mut f, x).unwrap();
        let out = f.graph.value(branch).data();
        for (t, &v) in out.iter().enumerate() {
            if t == 2 || t == 4 || t == 6 {
                continue;
            }
            assert_eq!(v, 0.0, "branch leaked outside the dilation-2 stencil at t={t}");
        }
    }

    #[test]
    fn dilated_layer_preserves_length() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DilatedResidualLayer::new(&mut store, &mut r, "d", 2, 3, 4);
        for t_len in [1usize, 2, 7, 100] {
            let mut f = Forward::new(&store);
            let x = f.graph.constant(randt(&mut r, vec![t_len, 2]));
            let y = layer.forward(&mut f, x).unwrap();
            assert_eq!(f.graph.value(y).shape(), &[t_len, 2]);
        }
    }

    #[test]
    fn dilated_layer_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = DilatedResidualLayer::new(&mut store, &mut r, "d", 2, 3, 2);
        let input = randt(&mut r, vec![5, 2]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let mut fw = Forward { graph: std::mem::take(g), store: &store, bound: vec![None; store.len()] };
            let y = layer.forward(&mut fw, vs[0])?;
            *g = fw.graph;
            g.sum_all(y)
        };
        let err = max_grad_error(&f, &[input], 1e-5).unwrap();
        assert!(err < 1e-4, "dilated layer grad rel err {err}");
    }

    #[test]
    fn uniform_init_stays_in_bounds() {
        let mut r = rng();
        let t = uniform_init(&mut r, vec![10, 10], 25);
        for &v in t.data() {
            assert!(v.abs() <= 0.2);
        }
    }
}
