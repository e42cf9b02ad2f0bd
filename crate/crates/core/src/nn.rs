//! Layers built from graph primitives: affine maps, ReLU MLPs and a GRU cell.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::SeededRng;

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        store.init_weight(&format!("{}.w", self.name), self.fan_in, self.fan_out, rng)?;
        store.init_zeros(&format!("{}.b", self.name), &[1, self.fan_out])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them. The output layer is
/// linear unless `final_relu` is set.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    final_relu: bool,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], final_relu: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, final_relu }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, store, x)?;
        self.finish(g, store, h)
    }

    /// Same function as `forward` on the column concatenation of the
    /// blocks, where block `i` contributes `rows[i]` of its input (all rows
    /// when `None`). The first layer is applied blockwise before the row
    /// gather, so repeated rows are only multiplied once.
    pub fn forward_blocks(&self, g: &mut Graph, store: &ParamStore, blocks: &[(Var, Option<&[usize]>)]) -> Result<Var> {
        let first = &self.layers[0];
        let w = g.param(store, &format!("{}.w", first.name))?;
        let b = g.param(store, &format!("{}.b", first.name))?;
        let mut offset = 0;
        let mut sum: Option<Var> = None;
        for &(x, rows) in blocks {
            let width = g.value(x).cols();
            let wi = g.slice_rows(w, offset, width)?;
            offset += width;
            let mut y = g.matmul(x, wi)?;
            if let Some(idx) = rows {
                y = g.gather_rows(y, idx)?;
            }
            sum = Some(match sum {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        if offset != first.fan_in {
            return Err(crate::error::Error::shape("forward_blocks", format!("blocks span {offset} of {} inputs", first.fan_in)));
        }
        let h = sum.ok_or_else(|| crate::error::Error::invalid("forward_blocks needs at least one block"))?;
        let h = g.add_row(h, b)?;
        self.finish(g, store, h)
    }

    fn finish(&self, g: &mut Graph, store: &ParamStore, mut h: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = layer.forward(g, store, h)?;
            }
            if i < last || self.final_relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Row-batched GRU cell.
///
/// ```text
/// z  = σ(x Wz + h Uz + bz)
/// r  = σ(x Wr + h Ur + br)
/// n  = tanh(x Wn + bn + r ⊙ (h Un + bhn))
/// h' = z ⊙ h + (1 − z) ⊙ n
/// ```
///
/// so a saturated update gate (`z = 1`) keeps the previous state.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            name: name.into(),
            input_dim,
            hidden_dim,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        for gate in ["z", "r", "n"] {
            store.init_weight(&self.key(&format!("w{gate}")), i, h, rng)?;
            store.init_weight(&self.key(&format!("u{gate}")), h, h, rng)?;
            store.init_zeros(&self.key(&format!("b{gate}")), &[1, h])?;
        }
        store.init_zeros(&self.key("bhn"), &[1, h])
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, v: Var, w: &str, b: &str) -> Result<Var> {
        let w = g.param(store, &self.key(w))?;
        let b = g.param(store, &self.key(b))?;
        let y = g.matmul(v, w)?;
        g.add_row(y, b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_prev: Var, x: Var) -> Result<Var> {
        let uz = g.param(store, &self.key("uz"))?;
        let ur = g.param(store, &self.key("ur"))?;

        let xz = self.affine(g, store, x, "wz", "bz")?;
        let hz = g.matmul(h_prev, uz)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;

        let xr = self.affine(g, store, x, "wr", "br")?;
        let hr = g.matmul(h_prev, ur)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;

        let xn = self.affine(g, store, x, "wn", "bn")?;
        let hn = self.affine(g, store, h_prev, "un", "bhn")?;
        let rhn = g.mul(r, hn)?;
        let n = g.add(xn, rhn)?;
        let n = g.tanh(n)?;

        let keep = g.mul(z, h_prev)?;
        let one_minus_z = g.one_minus(z)?;
        let fresh = g.mul(one_minus_z, n)?;
        g.add(keep, fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::Tensor;

    fn cell_store(cell: &GruCell, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        cell.init(&mut s, &mut SeededRng::new(seed)).unwrap();
        s
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let cell = GruCell::new("gru", 2, 2);
        let mut s = cell_store(&cell, 1);
        s.set("gru.bz", Tensor::row_vector(&[800.0, 800.0])).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::row_vector(&[0.3, -0.7])).unwrap();
        let x = g.constant(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        let out = cell.forward(&mut g, &s, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.3, -0.7]);
    }

    #[test]
    fn zero_weights_halve_state() {
        let cell = GruCell::new("gru", 1, 1);
        let mut s = cell_store(&cell, 1);
        for name in ["wz", "uz", "wr", "ur", "wn", "un"] {
            s.set(&format!("gru.{name}"), Tensor::zeros(&[1, 1])).unwrap();
        }
        let mut g = Graph::new();
        let h = g.constant(Tensor::row_vector(&[0.8])).unwrap();
        let x = g.constant(Tensor::row_vector(&[5.0])).unwrap();
        let out = cell.forward(&mut g, &s, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.4]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cell = GruCell::new("gru", 3, 2);
        let s = cell_store(&cell, 1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::row_vector(&[0.0, 0.0])).unwrap();
        let x = g.constant(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        assert!(cell.forward(&mut g, &s, h, x).is_err());
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let cell = GruCell::new("gru", 3, 4);
        let mut s = cell_store(&cell, 2);
        let mut rng = SeededRng::new(3);
        for name in ["gru.bz", "gru.br", "gru.bn", "gru.bhn"] {
            let b: Vec<f64> = (0..4).map(|_| 0.3 * rng.normal()).collect();
            s.set(name, Tensor::row_vector(&b)).unwrap();
        }
        s.insert("h0", Tensor::matrix(2, 4, (0..8).map(|_| rng.normal()).collect()).unwrap())
            .unwrap();
        s.insert("x", Tensor::matrix(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap())
            .unwrap();
        let report = finite_diff_check(
            |g, st| {
                let h = g.param(st, "h0")?;
                let x = g.param(st, "x")?;
                let out = cell.forward(g, st, h, x)?;
                let sq = g.square(out)?;
                g.sum_all(sq)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mlp = Mlp::new("m", &[3, 5, 2], false);
        let mut s = ParamStore::new();
        mlp.init(&mut s, &mut SeededRng::new(4)).unwrap();
        let mut rng = SeededRng::new(5);
        s.insert("x", Tensor::matrix(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap())
            .unwrap();
        let report = finite_diff_check(
            |g, st| {
                let x = g.param(st, "x")?;
                let y = mlp.forward(g, st, x)?;
                let sq = g.square(y)?;
                g.sum_all(sq)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
