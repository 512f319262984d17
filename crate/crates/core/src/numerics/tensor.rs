use crate::error::{config_err, Result, TtaError};

/// Rank-3 feature map laid out row-major by `(batch, channel, position)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    batch: usize,
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(batch: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 || len == 0 {
            return config_err(format!(
                "tensor dimensions must be positive, got {batch}x{channels}x{len}"
            ));
        }
        if data.len() != batch * channels * len {
            return config_err(format!(
                "tensor {batch}x{channels}x{len} needs {} values, got {}",
                batch * channels * len,
                data.len()
            ));
        }
        Ok(Self { batch, channels, len, data })
    }

    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        assert!(batch > 0 && channels > 0 && len > 0, "tensor dimensions must be positive");
        Self { batch, channels, len, data: vec![0.0; batch * channels * len] }
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        len: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(batch, channels, len);
        for b in 0..batch {
            for c in 0..channels {
                for l in 0..len {
                    t.data[(b * channels + c) * len + l] = f(b, c, l);
                }
            }
        }
        t
    }

    /// Stack single samples (each `1 x C x L`, all of equal shape) along the batch axis.
    pub fn stack<'a>(samples: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut iter = samples.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| TtaError::Config("cannot stack an empty list of samples".into()))?;
        let (c, l) = (first.channels, first.len);
        let mut data = first.data.clone();
        let mut batch = first.batch;
        for s in iter {
            if s.channels != c || s.len != l {
                return config_err(format!(
                    "cannot stack {}x{} sample onto {c}x{l} batch",
                    s.channels, s.len
                ));
            }
            data.extend_from_slice(&s.data);
            batch += s.batch;
        }
        Ok(Self { batch, channels: c, len: l, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Positions per channel.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.len)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, l: usize) -> usize {
        (b * self.channels + c) * self.len + l
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, l: usize) -> f64 {
        self.data[self.index(b, c, l)]
    }

    /// Positions of one `(sample, channel)` row.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.len;
        let len = self.len;
        &mut self.data[start..start + len]
    }

    /// All values of sample `b` (channel-major).
    pub fn sample_values(&self, b: usize) -> &[f64] {
        let n = self.channels * self.len;
        &self.data[b * n..(b + 1) * n]
    }

    /// Sample `b` as its own `1 x C x L` tensor.
    pub fn sample(&self, b: usize) -> Tensor {
        Tensor {
            batch: 1,
            channels: self.channels,
            len: self.len,
            data: self.sample_values(b).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TtaError::Numeric(format!("{what} contains non-finite values")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(0, 1, 1, vec![]).is_err());
        assert!(Tensor::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::new(1, 2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::from_fn(2, 3, 4, |b, c, l| (b * 100 + c * 10 + l) as f64);
        assert_eq!(t.at(1, 2, 3), 123.0);
        assert_eq!(t.row(1, 0), &[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(t.sample(1).row(0, 2), t.row(1, 2));
    }

    #[test]
    fn stack_roundtrips_samples() {
        let t = Tensor::from_fn(3, 2, 5, |b, c, l| (b + c * l) as f64);
        let parts: Vec<_> = (0..3).map(|b| t.sample(b)).collect();
        assert_eq!(Tensor::stack(&parts).unwrap(), t);
        let other = Tensor::zeros(1, 3, 5);
        assert!(Tensor::stack([&parts[0], &other]).is_err());
    }
}
