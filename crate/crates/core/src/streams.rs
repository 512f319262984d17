//! Orderings of a labeled dataset: Dirichlet-token (temporally correlated),
//! i.i.d. shuffle, and class-sorted.
//!
//! A Dirichlet stream draws, for every class, a proportion vector over `T`
//! tokens from `Dir(delta * p)`, splits that class's indices across the tokens
//! by largest-remainder rounding, shuffles inside each token and concatenates
//! the tokens in order. Small `delta` concentrates each class in few tokens.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result, TtaError};
use crate::rng::{derive_rng, stream_id};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub delta: f64,
    /// Prior over tokens; sums to one.
    pub prior: Vec<f64>,
    pub seed: u64,
}

impl StreamSpec {
    /// Uniform prior over `tokens`.
    pub fn uniform(delta: f64, tokens: usize, seed: u64) -> Self {
        Self { delta, prior: vec![1.0 / tokens as f64; tokens], seed }
    }

    pub fn tokens(&self) -> usize {
        self.prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return input_err(format!("concentration must be positive and finite, got {}", self.delta));
        }
        if self.prior.is_empty() {
            return input_err("stream needs at least one token");
        }
        let sum: f64 = self.prior.iter().sum();
        if self.prior.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return input_err("token prior must be a positive probability vector");
        }
        Ok(())
    }
}

/// Dataset indices in presentation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamOrder(pub Vec<usize>);

impl StreamOrder {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels<'a>(&'a self, labels: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        self.0.iter().map(move |&i| labels[i])
    }

    /// One index per line.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for i in &self.0 {
            writeln!(out, "{i}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut order = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let i = line
                .parse()
                .map_err(|_| TtaError::Format(format!("line {}: {line:?} is not an index", n + 1)))?;
            order.push(i);
        }
        Ok(Self(order))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Natural log of a `Gamma(shape, 1)` variate (Marsaglia–Tsang; shapes below
/// one use `G(a) = G(a + 1) * U^(1/a)`, done in log space so tiny shapes do
/// not underflow).
fn ln_gamma_variate(shape: f64, rng: &mut impl Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.random();
        return ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return (d * v).ln();
        }
    }
}

/// Draw from `Dir(concentration)` by normalizing Gamma variates.
pub fn dirichlet_sample(concentration: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if concentration.is_empty() {
        return input_err("empty concentration vector");
    }
    if concentration.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return input_err("Dirichlet concentrations must be positive and finite");
    }
    let logs: Vec<f64> = concentration.iter().map(|&a| ln_gamma_variate(a, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / sum).collect())
}

/// Integer counts summing to `total` that follow `proportions`, rounding by largest remainder.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn indices_by_class(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return input_err(format!("class {c} has no samples"));
    }
    Ok(by_class)
}

/// Temporally correlated ordering built from Dirichlet token proportions.
pub fn make_dirichlet_stream(labels: &[usize], spec: &StreamSpec) -> Result<StreamOrder> {
    spec.validate()?;
    if labels.is_empty() {
        return input_err("cannot build a stream from an empty dataset");
    }
    let by_class = indices_by_class(labels)?;
    let mut rng = derive_rng(spec.seed, stream_id::STREAM_ORDER);
    let concentration: Vec<f64> = spec.prior.iter().map(|&p| spec.delta * p).collect();
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); spec.tokens()];
    for members in &by_class {
        let q = dirichlet_sample(&concentration, &mut rng)?;
        let counts = largest_remainder(&q, members.len());
        let mut next = members.iter();
        for (token, &n) in tokens.iter_mut().zip(&counts) {
            token.extend(next.by_ref().take(n));
        }
    }
    let mut order = Vec::with_capacity(labels.len());
    for mut token in tokens {
        token.shuffle(&mut rng);
        order.extend(token);
    }
    Ok(StreamOrder(order))
}

/// Uniform shuffle.
pub fn make_iid_stream(len: usize, seed: u64) -> StreamOrder {
    let mut rng = derive_rng(seed, stream_id::STREAM_ORDER);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    StreamOrder(order)
}

/// Indices grouped by ascending class, original order within each class.
pub fn make_sorted_stream(labels: &[usize]) -> StreamOrder {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    StreamOrder(order)
}

/// Mean length of runs of identical consecutive labels.
pub fn mean_run_length(labels: impl IntoIterator<Item = usize>) -> f64 {
    let mut runs = 0usize;
    let mut total = 0usize;
    let mut prev = None;
    for y in labels {
        total += 1;
        if prev != Some(y) {
            runs += 1;
        }
        prev = Some(y);
    }
    if runs == 0 {
        0.0
    } else {
        total as f64 / runs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn is_permutation(order: &StreamOrder, n: usize) -> bool {
        let mut seen = vec![false; n];
        order.len() == n && order.indices().iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    }

    #[test]
    fn dirichlet_output_is_simplex() {
        let mut rng = derive_rng(0, 0);
        for a in [vec![0.001, 0.001, 0.001], vec![0.5; 7], vec![3.0, 1.0]] {
            for _ in 0..200 {
                let q = dirichlet_sample(&a, &mut rng).unwrap();
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(q.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
        assert!(dirichlet_sample(&[1.0, 0.0], &mut rng).is_err());
        assert!(dirichlet_sample(&[1.0, -2.0], &mut rng).is_err());
    }

    #[test]
    fn dirichlet_concentrated_and_sparse() {
        let mut rng = derive_rng(1, 0);
        let trials = 2000;
        let close = (0..trials)
            .filter(|_| {
                let q = dirichlet_sample(&[1000.0, 1000.0], &mut rng).unwrap();
                q.iter().all(|v| (v - 0.5).abs() <= 0.05)
            })
            .count();
        assert!(close as f64 / trials as f64 >= 0.99);
        let peaked = (0..trials)
            .filter(|_| {
                let q = dirichlet_sample(&[0.01, 0.01], &mut rng).unwrap();
                q.iter().copied().fold(0.0, f64::max) > 0.95
            })
            .count();
        assert!(peaked as f64 / trials as f64 >= 0.90);
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut rng = derive_rng(2, 0);
        for shape in [0.3, 1.0, 4.5] {
            let n = 40_000;
            let mean = (0..n).map(|_| ln_gamma_variate(shape, &mut rng).exp()).sum::<f64>() / n as f64;
            // variance of the mean is shape / n
            assert!((mean - shape).abs() < 4.0 * (shape / n as f64).sqrt(), "{shape}: {mean}");
        }
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn single_token_is_plain_shuffle() {
        let labels = balanced_labels(3, 20);
        let order = make_dirichlet_stream(&labels, &StreamSpec::uniform(0.1, 1, 4)).unwrap();
        assert!(is_permutation(&order, labels.len()));
        assert_ne!(order.indices(), (0..labels.len()).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn huge_delta_matches_global_histogram() {
        let classes = 4;
        let labels = balanced_labels(classes, 500);
        let tokens = 5;
        let order = make_dirichlet_stream(&labels, &StreamSpec::uniform(1e6, tokens, 9)).unwrap();
        let per_token = labels.len() / tokens;
        for chunk in order.indices().chunks(per_token) {
            let mut hist = vec![0usize; classes];
            for &i in chunk {
                hist[labels[i]] += 1;
            }
            let expect = per_token as f64 / classes as f64;
            for h in hist {
                assert!((h as f64 - expect).abs() <= 0.1 * expect);
            }
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        assert!(make_dirichlet_stream(&[0, 2, 2], &StreamSpec::uniform(1.0, 2, 0)).is_err());
        assert!(make_dirichlet_stream(&[0, 1], &StreamSpec::uniform(0.0, 2, 0)).is_err());
    }

    #[test]
    fn sorted_and_iid() {
        let labels = [1, 0, 1, 0];
        let order = make_sorted_stream(&labels);
        assert_eq!(order.labels(&labels).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        assert_eq!(order.indices(), &[1, 3, 0, 2]);
        let a = make_iid_stream(50, 1);
        let b = make_iid_stream(50, 2);
        assert!(is_permutation(&a, 50) && is_permutation(&b, 50));
        assert_ne!(a, b);
        assert_eq!(a, make_iid_stream(50, 1));
    }

    #[test]
    fn index_file_roundtrip() {
        let order = StreamOrder(vec![3, 0, 2, 1]);
        let mut buf = Vec::new();
        order.write_to(&mut buf).unwrap();
        assert_eq!(buf, b"3\n0\n2\n1\n");
        assert_eq!(StreamOrder::read_from(&buf[..]).unwrap(), order);
        assert!(StreamOrder::read_from(&b"1\nx\n"[..]).is_err());
    }
}
