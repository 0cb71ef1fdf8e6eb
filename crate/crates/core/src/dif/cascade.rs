use super::{chain_log_density, DifStack, Layer, Transport};
use crate::diffable::{with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::maps::{ChainMap, Diffeomorphism};

/// Two consecutive layers viewed as one layer with `K_0 K_1` components.
///
/// Component `p = k0 K_1 + k1` has map `T_{k0,k1} = T^{[1]}_{k1} o T^{[0]}_{k0}`
/// and weight `w_{k0,k1}(z) = w^{[0]}_{k0}(T^{[1]-1}_{k1}(z)) w^{[1]}_{k1}(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCascade {
    pub outer: Layer,
    pub inner: Layer,
}

/// Expands a two-layer stack. `stack.layers[0]` is the data-side layer.
pub fn expand_cascade(stack: &DifStack) -> Result<ExpandedCascade> {
    match stack.layers.as_slice() {
        [outer, inner] => {
            if outer.dim() != inner.dim() {
                return Err(DifError::DimensionMismatch {
                    expected: outer.dim(),
                    got: inner.dim(),
                });
            }
            Ok(ExpandedCascade {
                outer: outer.clone(),
                inner: inner.clone(),
            })
        }
        other => Err(DifError::InvalidArgument(format!(
            "cascade expansion needs exactly two layers, got {}",
            other.len()
        ))),
    }
}

fn layer_maps(layer: &Layer) -> Vec<Diffeomorphism> {
    match layer {
        Layer::Dif(l) => l.maps.clone(),
        Layer::Coupling(c) => vec![c.clone().into()],
    }
}

impl ExpandedCascade {
    fn ks(&self) -> (usize, usize) {
        (self.outer.k(), self.inner.k())
    }

    /// The `K_0 K_1` composed maps in component order.
    pub fn maps(&self) -> Vec<Diffeomorphism> {
        let inner = layer_maps(&self.inner);
        layer_maps(&self.outer)
            .into_iter()
            .flat_map(|m0| {
                inner.iter().map(move |m1| {
                    ChainMap {
                        maps: vec![m0.clone(), m1.clone()],
                    }
                    .into()
                })
            })
            .collect()
    }

    pub fn log_weights_at(&self, store: &ParameterStore, z: &[f64]) -> Result<Vec<f64>> {
        with_bind(store, |b| {
            let (_, lw, _) = self.inverse_all(b, b.constant(Tensor::row(z)))?;
            Ok(lw.to_tensor().into_data())
        })
    }

    pub fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        chain_log_density(bind, &[self], x)
    }

    pub fn log_density_at(&self, store: &ParameterStore, x: &[f64]) -> Result<f64> {
        with_bind(store, |b| Ok(self.log_density(b, b.constant(Tensor::row(x)))?.item()))
    }
}

/// Repeats column `c` of an `n x a` matrix into the `n x (a b)` layout where
/// output column `j` reads input column `pick(j)`.
fn spread_cols<'a>(m: Var<'a>, width: usize, pick: impl Fn(usize) -> usize) -> Var<'a> {
    let (n, a) = m.shape();
    let idx = (0..n * width).map(|r| (r / width) * a + pick(r % width)).collect();
    m.gather(idx, n, width)
}

impl Transport for ExpandedCascade {
    fn k(&self) -> usize {
        let (k0, k1) = self.ks();
        k0 * k1
    }

    fn dim(&self) -> usize {
        self.outer.dim()
    }

    fn forward_all<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let n = x.rows();
        let (k0, k1) = self.ks();
        let k = k0 * k1;
        let (y, h0) = self.outer.forward_all(bind, x)?;
        // rows of z are (i K0 + k0) K1 + k1 = i K + p already
        let (z, h1) = self.inner.forward_all(bind, y)?;
        let h0 = spread_cols(h0, k, |p| p / k1);
        Ok((z, h0 + h1.reshape(n, k)))
    }

    fn inverse_all<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>, Var<'a>)> {
        let n = z.rows();
        let (k0, k1) = self.ks();
        let k = k0 * k1;
        let (y, w1, ld1) = self.inner.inverse_all(bind, z)?;
        let (x, w0, ld0) = self.outer.inverse_all(bind, y)?;
        // x and w0/ld0 come out ordered k1 K0 + k0; reorder to k0 K1 + k1
        let src = |p: usize| (p % k1) * k0 + p / k1;
        let rows: Vec<usize> = (0..n * k).map(|r| (r / k) * k + src(r % k)).collect();
        let x = x.select_rows(&rows);
        let w0 = spread_cols(w0.reshape(n, k), k, src);
        let ld0 = spread_cols(ld0.reshape(n, k), k, src);
        let w1 = spread_cols(w1, k, |p| p % k1);
        let ld1 = spread_cols(ld1, k, |p| p % k1);
        Ok((x, w0 + w1, ld0 + ld1))
    }
}
