use rand::Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}/w"), in_dim, out_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}/b"), 1, out_dim, in_dim, rng);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of linear layers with `tanh` between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Single-layer GRU cell; gates stacked in (reset, update, candidate) order.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let g3 = 3 * hidden_dim;
        // Both weight blocks use the hidden size as fan-in, as recurrent
        // cells conventionally do.
        Self {
            input_dim,
            hidden_dim,
            w_input: store.add_uniform(format!("{name}/w_ih"), input_dim, g3, hidden_dim, rng),
            w_hidden: store.add_uniform(format!("{name}/w_hh"), hidden_dim, g3, hidden_dim, rng),
            b_input: store.add_uniform(format!("{name}/b_ih"), 1, g3, hidden_dim, rng),
            b_hidden: store.add_uniform(format!("{name}/b_hh"), 1, g3, hidden_dim, rng),
        }
    }
}

/// `h' = (1 - z) * n + z * h` with
/// `r = sigma(x W_r + b_ir + h U_r + b_hr)`, `z = sigma(x W_z + b_iz + h U_z + b_hz)`,
/// `n = tanh(x W_n + b_in + r * (h U_n + b_hn))`.
pub fn gru_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &GruParams,
    x: Var,
    h: Var,
) -> Result<Var, NumericsError> {
    let (xs, hs) = (g.value(x), g.value(h));
    if xs.cols() != p.input_dim || hs.cols() != p.hidden_dim || xs.rows() != hs.rows() {
        return Err(NumericsError::Shape(format!(
            "gru_step expects x:Bx{} h:Bx{}, got {}x{} and {}x{}",
            p.input_dim,
            p.hidden_dim,
            xs.rows(),
            xs.cols(),
            hs.rows(),
            hs.cols()
        )));
    }
    let wi = g.param(store, p.w_input);
    let wh = g.param(store, p.w_hidden);
    let bi = g.param(store, p.b_input);
    let bh = g.param(store, p.b_hidden);
    g.gru_cell(x, h, wi, wh, bi, bh)
}

/// Single-head graph attention layer with an ELU on the aggregated output.
#[derive(Clone, Debug)]
pub struct GatParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    /// `2 * hidden_dim x 1`: the first half scores the receiving node, the
    /// second half the sending node.
    pub attention: ParamId,
    pub leaky_slope: f64,
}

impl GatParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            in_dim,
            hidden_dim,
            weight: store.add_uniform(format!("{name}/w"), in_dim, hidden_dim, in_dim, rng),
            attention: store.add_uniform(format!("{name}/a"), 2 * hidden_dim, 1, 2 * hidden_dim, rng),
            leaky_slope,
        }
    }
}

/// Output of [`gat_forward`].
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    /// `(groups*n) x hidden` node embeddings (absent rows are zero).
    pub nodes: Var,
    /// `(groups*n) x n` attention; rows over present nodes sum to one.
    pub attention: Var,
}

/// Graph attention over `groups` stacked complete graphs of `n` slots each.
///
/// `features` is `(groups*n) x in_dim`; `present[g*n + i]` says whether slot
/// `i` of graph `g` is a node. Absent slots get no attention mass and emit
/// zero rows. Every graph needs at least one present node.
pub fn gat_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &GatParams,
    features: Var,
    present: &[bool],
    n: usize,
) -> Result<GatOutput, NumericsError> {
    let ft = g.value(features);
    if ft.cols() != p.in_dim || ft.rows() != present.len() || n == 0 || present.len() % n != 0 {
        return Err(NumericsError::Shape(format!(
            "gat_forward: features {}x{}, {} mask entries, n = {n}",
            ft.rows(),
            ft.cols(),
            present.len()
        )));
    }
    if store.get(p.attention).len() != 2 * p.hidden_dim {
        return Err(NumericsError::Shape("attention vector must be 2*hidden".into()));
    }
    let groups = present.len() / n;
    for gi in 0..groups {
        if !present[gi * n..(gi + 1) * n].iter().any(|&b| b) {
            return Err(NumericsError::EmptyGraph);
        }
    }
    let w = g.param(store, p.weight);
    let a = g.param(store, p.attention);
    let wh = g.matmul(features, w)?;
    let a_dst = g.slice_rows(a, 0, p.hidden_dim)?;
    let a_src = g.slice_rows(a, p.hidden_dim, 2 * p.hidden_dim)?;
    let f1 = g.matmul(wh, a_dst)?;
    let f2 = g.matmul(wh, a_src)?;
    let scores = g.pair_scores(f1, f2, n)?;
    let scores = g.leaky_relu(scores, p.leaky_slope);
    let mut mask = vec![false; present.len() * n];
    for (row, &pi) in present.iter().enumerate() {
        if !pi {
            continue;
        }
        let base = (row / n) * n;
        for j in 0..n {
            mask[row * n + j] = present[base + j];
        }
    }
    let attention = g.softmax_rows(scores, Some(mask))?;
    let agg = g.group_attend(attention, wh, n)?;
    let nodes = g.elu(agg);
    Ok(GatOutput { nodes, attention })
}

/// Mean over the present rows of each group, giving `groups x cols`.
pub fn masked_group_mean(
    g: &mut Graph,
    x: Var,
    present: &[bool],
    n: usize,
) -> Result<Var, NumericsError> {
    let mut weights = vec![0.0; present.len()];
    for (gi, chunk) in present.chunks(n).enumerate() {
        let count = chunk.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(NumericsError::EmptyGraph);
        }
        let w = 1.0 / count as f64;
        for (j, &b) in chunk.iter().enumerate() {
            if b {
                weights[gi * n + j] = w;
            }
        }
    }
    g.group_weighted_sum(x, weights, n)
}

/// Convenience for building constants from row-major data.
pub fn constant_matrix(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    g.constant(Tensor::matrix(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(input: usize, hidden: usize) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::new(&mut store, "gru", input, hidden, &mut rng);
        for id in [p.w_input, p.w_hidden, p.b_input, p.b_hidden] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        (store, p)
    }

    #[test]
    fn zero_parameter_gru_halves_hidden() {
        let (store, p) = zero_gru(3, 4);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(vec![0.3, -2.0, 5.0]));
        let h = g.constant(Tensor::row(vec![1.0, -0.5, 0.25, 0.0]));
        let out = gru_step(&mut g, &store, &p, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -0.25, 0.125, 0.0]);
    }

    #[test]
    fn zero_hidden_zero_parameters_gives_zero() {
        let (store, p) = zero_gru(2, 3);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(vec![4.0, -1.0]));
        let h = g.constant(Tensor::zeros(1, 3));
        let out = gru_step(&mut g, &store, &p, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_dimension_mismatch() {
        let (store, p) = zero_gru(2, 3);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(vec![4.0, -1.0, 0.0]));
        let h = g.constant(Tensor::zeros(1, 3));
        assert!(matches!(
            gru_step(&mut g, &store, &p, x, h),
            Err(NumericsError::Shape(_))
        ));
    }

    fn gat(in_dim: usize, hidden: usize, seed: u64) -> (ParamStore, GatParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GatParams::new(&mut store, "gat", in_dim, hidden, 0.2, &mut rng);
        (store, p)
    }

    #[test]
    fn single_node_attends_to_itself() {
        let (store, p) = gat(3, 4, 1);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let out = gat_forward(&mut g, &store, &p, x, &[true], 1).unwrap();
        assert_eq!(g.value(out.attention).data(), &[1.0]);
    }

    #[test]
    fn identical_nodes_split_attention_evenly() {
        let (store, p) = gat(3, 4, 2);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]));
        let out = gat_forward(&mut g, &store, &p, x, &[true, true], 2).unwrap();
        assert_eq!(g.value(out.attention).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn absent_slots_are_excluded() {
        let (store, p) = gat(2, 3, 3);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 0.0, 0.0, -1.0, 0.5]));
        let out = gat_forward(&mut g, &store, &p, x, &[true, false, true], 3).unwrap();
        let att = g.value(out.attention);
        assert_eq!(att.row_slice(1), &[0.0, 0.0, 0.0]);
        assert_eq!(att.get(0, 1), 0.0);
        assert_eq!(att.get(2, 1), 0.0);
        assert!((att.get(0, 0) + att.get(0, 2) - 1.0).abs() < 1e-12);
        assert_eq!(g.value(out.nodes).row_slice(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_graph_is_an_error() {
        let (store, p) = gat(2, 3, 4);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            gat_forward(&mut g, &store, &p, x, &[false, false], 2),
            Err(NumericsError::EmptyGraph)
        ));
    }
}
