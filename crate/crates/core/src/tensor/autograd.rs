use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Run `f` without recording any graph nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Recorded operations reachable from a tensor, in topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub entries: Vec<GraphEntry>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Result<Graph> {
        let order = topo_order(root)?;
        let entries = order
            .iter()
            .map(|t| GraphEntry {
                op: t.op(),
                inputs: t.node_inputs().iter().map(|i| i.id()).collect(),
                output: t.id(),
            })
            .collect();
        Ok(Graph { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Post-order over interior (non-leaf) tensors that still carry a node.
fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (tensor, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if t.is_leaf() || !t.requires_grad() {
            continue;
        }
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        if !t.has_node() {
            if t.is_consumed() {
                return Err(Error::Backward(format!(
                    "graph through `{}` (tensor {}) was already consumed by a previous backward",
                    t.op(),
                    t.id()
                )));
            }
            continue;
        }
        stack.push((t.clone(), true));
        for input in t.node_inputs().into_iter().rev() {
            if !visited.contains(&input.id()) {
                stack.push((input, false));
            }
        }
    }
    Ok(order)
}

impl Tensor {
    /// Accumulate d(self)/d(leaf) into every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if self.is_consumed() {
            return Err(Error::Backward("backward called twice on the same graph".into()));
        }
        if !self.requires_grad() {
            return Err(Error::Backward(
                "loss is detached from any tensor requiring grad".into(),
            ));
        }
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }
        let order = topo_order(self)?;
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let node = t.take_node();
            t.mark_consumed();
            let (Some(node), Some(g)) = (node, grads.remove(&t.id())) else {
                continue;
            };
            let inputs = node.inputs;
            let input_grads = (node.backward)(&g);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (input, gi) in inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), input.numel(), "grad size for input of {}", t.op());
                if input.is_leaf() {
                    input.accumulate_grad(&gi);
                } else {
                    match grads.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(input.id(), gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (a.abs() + fd.abs() + 1e-8)
}

/// Compare autodiff against central finite differences for a scalar function of one tensor.
///
/// Returns the largest per-coordinate relative error
/// `|autodiff - fd| / (|autodiff| + |fd| + 1e-8)`.
pub fn grad_check(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    let leaf = x.detach_param();
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            let probe = Tensor::new(x.shape(), v)?;
            no_grad(|| f(&probe))?.item()
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok(worst)
}

/// Finite-difference check over several parameter leaves at once.
///
/// `f` must read the current values of `params`; each coordinate is perturbed
/// in place and restored afterwards. Returns the per-coordinate metric of
/// [`grad_check`].
pub fn grad_check_many(f: impl Fn() -> Result<Tensor>, params: &[Tensor], eps: f64) -> Result<f64> {
    Ok(grad_check_report(f, params, eps, None)?.coordinate)
}

/// Outcome of [`grad_check_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - fd| / (|a| + |fd| + 1e-8)` over checked coordinates.
    pub coordinate: f64,
    /// Largest per-tensor `max|a - fd| / (max|a| + max|fd| + 1e-12)`, which
    /// judges each error against the gradient scale of its own tensor.
    pub tensorwise: f64,
    pub checked: usize,
}

/// Finite-difference check with an optional deterministic coordinate sample.
///
/// With `sample = Some((per_tensor, seed))` at most `per_tensor` coordinates of
/// each parameter are perturbed, chosen uniformly without replacement.
pub fn grad_check_report(
    f: impl Fn() -> Result<Tensor>,
    params: &[Tensor],
    eps: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let mut report = GradCheckReport {
        coordinate: 0.0,
        tensorwise: 0.0,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        let coords: Vec<usize> = match sample {
            Some((per, seed)) if per < base.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut c = rand::seq::index::sample(&mut rng, base.len(), per).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..base.len()).collect(),
        };
        let (mut diff, mut amax, mut fmax) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                p.set_data(v)?;
                no_grad(&f)?.item()
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            let fd = (plus - minus) / (2.0 * eps);
            report.coordinate = report.coordinate.max(rel_err(analytic[i], fd));
            diff = diff.max((analytic[i] - fd).abs());
            amax = amax.max(analytic[i].abs());
            fmax = fmax.max(fd.abs());
        }
        p.set_data(base)?;
        report.tensorwise = report.tensorwise.max(diff / (amax + fmax + 1e-12));
        report.checked += coords.len();
    }
    for p in params {
        p.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_grad() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let loss = x.scale(0.0).add(&c).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Backward(_))));
    }

    #[test]
    fn reusing_consumed_intermediate_is_an_error() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.exp();
        y.sum_all().backward().unwrap();
        assert!(y.scale(2.0).sum_all().backward().is_err());
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(x.exp().backward().is_err());
        let c = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(c.backward().is_err());
    }

    #[test]
    fn graph_is_topologically_ordered() {
        let x = Tensor::param(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = x.exp();
        let z = y.mul(&x).unwrap().add(&y).unwrap();
        let loss = z.sum_all();
        let g = Graph::trace(&loss).unwrap();
        assert_eq!(g.entries.last().unwrap().output, loss.id());
        let mut produced: HashSet<usize> = HashSet::new();
        for e in &g.entries {
            for i in &e.inputs {
                assert!(*i == x.id() || produced.contains(i), "input {i} not yet produced");
            }
            produced.insert(e.output);
        }
        // the shared `y` node appears exactly once
        assert_eq!(g.entries.iter().filter(|e| e.output == y.id()).count(), 1);
    }

    #[test]
    fn diamond_graph_accumulates() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let a = x.scale(2.0);
        let b = x.scale(5.0);
        a.add(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.exp());
        assert!(!y.requires_grad());
    }

    #[test]
    fn grad_check_square() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|t| Ok(t.mul(t)?.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
