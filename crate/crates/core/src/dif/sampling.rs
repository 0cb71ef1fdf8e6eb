use rand::Rng;

use super::{DifStack, Transport, EVAL_CHUNK};
use crate::diffable::{with_bind, ParameterStore, Tensor};
use crate::error::{DifError, Result};
use crate::rng::{categorical_from_logs, standard_normal, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `n x d`
    pub points: Tensor,
    /// `paths[i][l]` is the component chosen in layer `l` for sample `i`.
    pub paths: Option<Vec<Vec<usize>>>,
}

impl DifStack {
    /// Backward transport of `n` prior draws. Seeded from stream 0 of `seed`.
    pub fn sample_backward(
        &self,
        store: &ParameterStore,
        n: usize,
        seed: u64,
        record_paths: bool,
    ) -> Result<SampleOutput> {
        let mut rng = stream(seed, 0);
        self.sample_backward_with(store, n, &mut rng, record_paths)
    }

    pub fn sample_backward_with<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        n: usize,
        rng: &mut R,
        record_paths: bool,
    ) -> Result<SampleOutput> {
        if n == 0 {
            return Err(DifError::InvalidArgument("sample count must be at least 1".into()));
        }
        let d = self.dim;
        let mut data = Vec::with_capacity(n * d);
        let mut paths = record_paths.then(|| Vec::with_capacity(n));
        let chunk = (EVAL_CHUNK / self.layers.iter().map(Transport::k).max().unwrap_or(1)).max(64);
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let mut z = standard_normal(rng, m, d);
            let mut chunk_paths = vec![vec![0usize; self.layers.len()]; m];
            for (l, layer) in self.layers.iter().enumerate().rev() {
                let k = layer.k();
                let (x_all, lw) = with_bind(store, |b| {
                    let (x, lw, _) = layer.inverse_all(b, b.constant(z.clone()))?;
                    Ok((x.to_tensor(), lw.to_tensor()))
                })?;
                let picks: Vec<usize> = (0..m)
                    .map(|i| {
                        let u = if k == 1 { 0 } else { categorical_from_logs(rng, lw.row_slice(i)) };
                        chunk_paths[i][l] = u;
                        i * k + u
                    })
                    .collect();
                z = x_all.select_rows(&picks);
            }
            if !z.all_finite() {
                return Err(DifError::NonFinite("backward sample".into()));
            }
            data.extend_from_slice(z.data());
            if let Some(p) = paths.as_mut() {
                p.extend(chunk_paths);
            }
            done += m;
        }
        Ok(SampleOutput {
            points: Tensor::new(n, d, data),
            paths,
        })
    }

    /// Forward transport through the first layer: draws `U ~ v(x)` and
    /// returns `(T_U(x), U)`.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        x: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, usize)> {
        let (z, u) = self.sample_forward_batch(store, &Tensor::row(x), rng)?;
        Ok((z.row_slice(0).to_vec(), u[0]))
    }

    pub fn sample_forward_batch<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<usize>)> {
        if x.cols() != self.dim {
            return Err(DifError::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        if !x.all_finite() {
            return Err(DifError::NonFinite("forward sample input".into()));
        }
        let first = self
            .layers
            .first()
            .ok_or_else(|| DifError::InvalidArgument("stack has no layers".into()))?;
        let k = first.k();
        let (z_all, log_v) = with_bind(store, |b| {
            let xv = b.constant(x.clone());
            let (z, _) = first.forward_all(b, xv)?;
            Ok((z.to_tensor(), self.forward_log_weights(b, xv)?.to_tensor()))
        })?;
        let us: Vec<usize> = (0..x.rows())
            .map(|i| if k == 1 { 0 } else { categorical_from_logs(rng, log_v.row_slice(i)) })
            .collect();
        let picks: Vec<usize> = us.iter().enumerate().map(|(i, u)| i * k + u).collect();
        Ok((z_all.select_rows(&picks), us))
    }
}
