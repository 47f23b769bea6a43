//! Associative scan over the linear recurrence `h_k = A_k * h_{k-1} + b_k`.
//!
//! Elements compose with `(A_i, b_i) ∘ (A_j, b_j) = (A_j A_i, A_j b_i + b_j)`,
//! where `A` is either a scalar (one shared decay per block) or a diagonal.
//! The `b` part of the k-th inclusive prefix is the hidden state `h_k`
//! starting from `h_{-1} = 0`.
//!
//! The tree path is a work-efficient up-sweep/down-sweep over a power-of-two
//! padded buffer. Every level's combines are independent, so they may run on
//! the rayon pool; the combine order is fixed by the tree shape and the output
//! bits do not depend on the worker count.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("gradient count {grads} does not match element count {elements}")]
    LengthMismatch { elements: usize, grads: usize },
}

/// Transition coefficient of one scan element.
#[derive(Debug, Clone, PartialEq)]
pub enum Decay {
    /// `A = a·I`.
    Scalar(f64),
    /// `A = diag(a)`.
    Diagonal(Vec<f64>),
}

impl Decay {
    /// Diagonal entry `i` of `A`.
    #[inline]
    pub fn factor(&self, i: usize) -> f64 {
        match self {
            Decay::Scalar(a) => *a,
            Decay::Diagonal(a) => a[i],
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Decay::Scalar(_) => None,
            Decay::Diagonal(a) => Some(a.len()),
        }
    }

    /// `self` applied after `earlier`, i.e. the product `self · earlier`.
    fn after(&self, earlier: &Decay) -> Decay {
        match (self, earlier) {
            (Decay::Scalar(r), Decay::Scalar(l)) => Decay::Scalar(r * l),
            (Decay::Scalar(r), Decay::Diagonal(l)) => {
                Decay::Diagonal(l.iter().map(|l| r * l).collect())
            }
            (Decay::Diagonal(r), Decay::Scalar(l)) => {
                Decay::Diagonal(r.iter().map(|r| r * l).collect())
            }
            (Decay::Diagonal(r), Decay::Diagonal(l)) => {
                Decay::Diagonal(r.iter().zip(l).map(|(r, l)| r * l).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    pub decay: Decay,
    pub b: Vec<f64>,
}

impl ScanElement {
    pub fn scalar(a: f64, b: Vec<f64>) -> Self {
        Self {
            decay: Decay::Scalar(a),
            b,
        }
    }

    pub fn diagonal(a: Vec<f64>, b: Vec<f64>) -> Self {
        Self {
            decay: Decay::Diagonal(a),
            b,
        }
    }

    /// The identity `(1, 0)` of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        Self::scalar(1.0, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check(&self) -> Result<(), ScanError> {
        match self.decay.dim() {
            Some(d) if d != self.b.len() => Err(ScanError::DimensionMismatch {
                left: d,
                right: self.b.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// `left ∘ right = (A_r A_l, A_r b_l + b_r)`; `left` is the earlier element.
pub fn combine(left: &ScanElement, right: &ScanElement) -> Result<ScanElement, ScanError> {
    if left.b.len() != right.b.len() {
        return Err(ScanError::DimensionMismatch {
            left: left.b.len(),
            right: right.b.len(),
        });
    }
    left.check()?;
    right.check()?;
    Ok(combine_unchecked(left, right))
}

#[inline]
fn combine_unchecked(left: &ScanElement, right: &ScanElement) -> ScanElement {
    let b = match &right.decay {
        Decay::Scalar(a) => left
            .b
            .iter()
            .zip(&right.b)
            .map(|(l, r)| a * l + r)
            .collect(),
        Decay::Diagonal(a) => left
            .b
            .iter()
            .zip(&right.b)
            .zip(a)
            .map(|((l, r), a)| a * l + r)
            .collect(),
    };
    ScanElement {
        decay: right.decay.after(&left.decay),
        b,
    }
}

fn validate(elements: &[ScanElement]) -> Result<usize, ScanError> {
    let dim = elements.first().map_or(0, ScanElement::dim);
    for e in elements {
        e.check()?;
        if e.dim() != dim {
            return Err(ScanError::DimensionMismatch {
                left: dim,
                right: e.dim(),
            });
        }
    }
    Ok(dim)
}

/// Scan driver. Inputs shorter than `parallel_threshold` take the sequential
/// path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanEngine {
    pub parallel_threshold: usize,
}

impl Default for ScanEngine {
    fn default() -> Self {
        Self {
            parallel_threshold: 1024,
        }
    }
}

/// Levels with fewer combines than this stay on the calling thread.
const PAR_LEVEL_MIN: usize = 256;

impl ScanEngine {
    pub fn new(parallel_threshold: usize) -> Self {
        Self { parallel_threshold }
    }

    /// Always uses the tree, regardless of length.
    pub fn tree_only() -> Self {
        Self {
            parallel_threshold: 0,
        }
    }

    /// Always uses the sequential fold.
    pub fn sequential_only() -> Self {
        Self {
            parallel_threshold: usize::MAX,
        }
    }

    /// Inclusive prefix composition: output `k` is `e_0 ∘ … ∘ e_k`.
    pub fn inclusive_scan(&self, elements: &[ScanElement]) -> Result<Vec<ScanElement>, ScanError> {
        validate(elements)?;
        if elements.len() < self.parallel_threshold.max(2) {
            Ok(sequential_unchecked(elements))
        } else {
            Ok(tree_unchecked(elements))
        }
    }

    /// Hidden states `h_k` (the `b` components of the inclusive scan).
    pub fn states(&self, elements: &[ScanElement]) -> Result<Vec<Vec<f64>>, ScanError> {
        Ok(self
            .inclusive_scan(elements)?
            .into_iter()
            .map(|e| e.b)
            .collect())
    }

    /// Reverse-mode gradients of a scalar loss through the recurrence.
    ///
    /// `upstream[k]` is `∂L/∂h_k`. The adjoint state
    /// `μ_k = g_k + A_{k+1} μ_{k+1}` is itself a linear recurrence run
    /// backward, evaluated here with the same scan. Then `∂L/∂b_k = μ_k` and
    /// `∂L/∂A_k = μ_k ⊙ h_{k-1}` (summed over the state for a scalar `A`),
    /// with `h_{-1} = 0`.
    pub fn adjoint(
        &self,
        elements: &[ScanElement],
        states: &[Vec<f64>],
        upstream: &[Vec<f64>],
    ) -> Result<ScanGradients, ScanError> {
        let n = elements.len();
        if upstream.len() != n || states.len() != n {
            return Err(ScanError::LengthMismatch {
                elements: n,
                grads: upstream.len().min(states.len()),
            });
        }
        let dim = validate(elements)?;
        for g in upstream.iter().chain(states) {
            if g.len() != dim {
                return Err(ScanError::DimensionMismatch {
                    left: dim,
                    right: g.len(),
                });
            }
        }
        // Reversed recurrence: element for position k carries A_{k+1}.
        let reversed: Vec<ScanElement> = (0..n)
            .rev()
            .map(|k| ScanElement {
                decay: if k + 1 < n {
                    elements[k + 1].decay.clone()
                } else {
                    Decay::Scalar(1.0)
                },
                b: upstream[k].clone(),
            })
            .collect();
        let mut adj = self.states(&reversed)?;
        adj.reverse();

        let d_decay = (0..n)
            .map(|k| match &elements[k].decay {
                Decay::Scalar(_) => Decay::Scalar(if k == 0 {
                    0.0
                } else {
                    adj[k].iter().zip(&states[k - 1]).map(|(m, h)| m * h).sum()
                }),
                Decay::Diagonal(_) => Decay::Diagonal(if k == 0 {
                    vec![0.0; dim]
                } else {
                    adj[k].iter().zip(&states[k - 1]).map(|(m, h)| m * h).collect()
                }),
            })
            .collect();
        Ok(ScanGradients {
            d_decay,
            d_b: adj,
        })
    }
}

/// Gradients of a scalar loss with respect to every `(A_k, b_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGradients {
    pub d_decay: Vec<Decay>,
    pub d_b: Vec<Vec<f64>>,
}

/// Left fold, the reference evaluation order.
pub fn sequential_scan(elements: &[ScanElement]) -> Result<Vec<ScanElement>, ScanError> {
    validate(elements)?;
    Ok(sequential_unchecked(elements))
}

/// Up-sweep/down-sweep tree scan.
pub fn tree_scan(elements: &[ScanElement]) -> Result<Vec<ScanElement>, ScanError> {
    validate(elements)?;
    Ok(tree_unchecked(elements))
}

/// Gradients via the default engine; see [`ScanEngine::adjoint`].
pub fn scan_adjoint(
    elements: &[ScanElement],
    upstream: &[Vec<f64>],
) -> Result<ScanGradients, ScanError> {
    let engine = ScanEngine::default();
    let states = engine.states(elements)?;
    engine.adjoint(elements, &states, upstream)
}

fn sequential_unchecked(elements: &[ScanElement]) -> Vec<ScanElement> {
    let mut out: Vec<ScanElement> = Vec::with_capacity(elements.len());
    for e in elements {
        let next = match out.last() {
            Some(prev) => combine_unchecked(prev, e),
            None => e.clone(),
        };
        out.push(next);
    }
    out
}

fn tree_unchecked(elements: &[ScanElement]) -> Vec<ScanElement> {
    let n = elements.len();
    if n <= 1 {
        return elements.to_vec();
    }
    let dim = elements[0].dim();
    let size = n.next_power_of_two();
    let mut tree: Vec<ScanElement> = Vec::with_capacity(size);
    tree.extend_from_slice(elements);
    tree.resize(size, ScanElement::identity(dim));

    // Up-sweep: node (i + 2d - 1) accumulates its left sibling subtree.
    let mut d = 1;
    while d < size {
        let step = 2 * d;
        level(&mut tree, step, |pair| {
            let (l, r) = pair.split_at_mut(d);
            r[d - 1] = combine_unchecked(&l[d - 1], &r[d - 1]);
        });
        d = step;
    }

    // Down-sweep to exclusive prefixes.
    tree[size - 1] = ScanElement::identity(dim);
    let mut d = size / 2;
    while d >= 1 {
        let step = 2 * d;
        level(&mut tree, step, |pair| {
            let (l, r) = pair.split_at_mut(d);
            let left_sum = std::mem::replace(&mut l[d - 1], r[d - 1].clone());
            r[d - 1] = combine_unchecked(&r[d - 1], &left_sum);
        });
        d /= 2;
    }

    // Inclusive = exclusive ∘ element.
    let finish = |(excl, e): (&ScanElement, &ScanElement)| combine_unchecked(excl, e);
    if n >= PAR_LEVEL_MIN {
        tree[..n].par_iter().zip(elements).map(finish).collect()
    } else {
        tree[..n].iter().zip(elements).map(finish).collect()
    }
}

/// Applies `f` to every disjoint `step`-sized chunk of `tree`.
fn level<F>(tree: &mut [ScanElement], step: usize, f: F)
where
    F: Fn(&mut [ScanElement]) + Sync + Send,
{
    if tree.len() / step >= PAR_LEVEL_MIN {
        tree.par_chunks_mut(step).for_each(f);
    } else {
        tree.chunks_mut(step).for_each(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_elements(rng: &mut ChaCha8Rng, n: usize, dim: usize, diagonal: bool) -> Vec<ScanElement> {
        (0..n)
            .map(|_| {
                let b = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if diagonal {
                    ScanElement::diagonal((0..dim).map(|_| rng.random_range(0.05..1.0)).collect(), b)
                } else {
                    ScanElement::scalar(rng.random_range(0.05..1.0), b)
                }
            })
            .collect()
    }

    #[test]
    fn combine_hand_case() {
        let x = ScanElement::scalar(0.5, vec![1.0]);
        let y = combine(&x, &x).unwrap();
        assert_eq!(y, ScanElement::scalar(0.25, vec![1.5]));
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for e in random_elements(&mut rng, 10, 3, true) {
            let id = ScanElement::identity(3);
            let l = combine(&id, &e).unwrap();
            let r = combine(&e, &id).unwrap();
            assert_eq!(l.b, e.b);
            assert_eq!(r.b, e.b);
            for i in 0..3 {
                assert_eq!(l.decay.factor(i), e.decay.factor(i));
                assert_eq!(r.decay.factor(i), e.decay.factor(i));
            }
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = ScanElement::scalar(0.5, vec![1.0]);
        let b = ScanElement::scalar(0.5, vec![1.0, 2.0]);
        assert!(combine(&a, &b).is_err());
        let bad = ScanElement::diagonal(vec![0.5], vec![1.0, 2.0]);
        assert!(tree_scan(&[bad]).is_err());
    }

    #[test]
    fn not_commutative() {
        let x = ScanElement::scalar(0.5, vec![1.0]);
        let y = ScanElement::scalar(0.25, vec![2.0]);
        assert_ne!(combine(&x, &y).unwrap(), combine(&y, &x).unwrap());
    }

    #[test]
    fn empty_and_single() {
        assert!(tree_scan(&[]).unwrap().is_empty());
        let one = vec![ScanElement::scalar(0.3, vec![2.0, 1.0])];
        assert_eq!(tree_scan(&one).unwrap(), one);
        assert_eq!(sequential_scan(&one).unwrap(), one);
    }

    #[test]
    fn tree_matches_sequential_small_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 0..70 {
            for diagonal in [false, true] {
                let e = random_elements(&mut rng, n, 3, diagonal);
                let t = tree_scan(&e).unwrap();
                let s = sequential_scan(&e).unwrap();
                for (a, b) in t.iter().zip(&s) {
                    for (x, y) in a.b.iter().zip(&b.b) {
                        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_single_element() {
        let e = vec![ScanElement::scalar(0.7, vec![3.0])];
        let g = scan_adjoint(&e, &[vec![1.0]]).unwrap();
        assert_eq!(g.d_b, vec![vec![1.0]]);
        assert_eq!(g.d_decay, vec![Decay::Scalar(0.0)]);
    }

    #[test]
    fn adjoint_two_elements_hand() {
        let (a0, a1, b0, b1) = (0.6, 0.3, 2.0, -1.0);
        let e = vec![
            ScanElement::scalar(a0, vec![b0]),
            ScanElement::scalar(a1, vec![b1]),
        ];
        // loss = h_1
        let g = scan_adjoint(&e, &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(g.d_b[0], vec![a1]);
        assert_eq!(g.d_b[1], vec![1.0]);
        assert_eq!(g.d_decay[1], Decay::Scalar(b0));
        assert_eq!(g.d_decay[0], Decay::Scalar(0.0));
    }

    #[test]
    fn adjoint_length_mismatch() {
        let e = vec![ScanElement::scalar(0.7, vec![3.0])];
        assert!(matches!(
            scan_adjoint(&e, &[]),
            Err(ScanError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let e = random_elements(&mut rng, 5000, 4, false);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| tree_scan(&e).unwrap());
        let b = four.install(|| tree_scan(&e).unwrap());
        assert_eq!(a, b);
    }
}
