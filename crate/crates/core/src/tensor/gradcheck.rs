//! Central finite-difference checks of [`Graph::backward`].

use super::{Graph, NodeId, ParamStore};
use crate::error::Result;

/// Gradient norms below this are treated as zero when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-6;

/// Step reductions tried when a ReLU or max-pool kink lies within `±h`.
const MAX_STEP_REDUCTIONS: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)
    pub rel_error: f64,
    /// Elements whose difference quotient needed a step below `h` to avoid a kink.
    pub reduced_steps: usize,
}

/// Compares analytic and numeric gradients of every trainable parameter.
///
/// `build` constructs the scalar loss on a fresh graph; it is called once for
/// the analytic pass and at least twice per parameter element. Graphs share
/// `seed` so dropout masks are identical across evaluations. Where `±h`
/// would flip a ReLU or change a max-pool selection the step is divided by
/// ten, up to three times, so the quotient measures the same smooth branch
/// the analytic gradient belongs to.
pub fn check<F>(params: &ParamStore<f64>, train: bool, seed: u64, h: f64, build: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId>,
{
    let eval = |p: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new(p, train, seed);
        let loss = build(&mut g)?;
        Ok((g.value(loss)[0], g.kink_signature()))
    };
    let (grads, base_sig) = {
        let mut g = Graph::new(params, train, seed);
        let loss = build(&mut g)?;
        (g.backward(loss)?, g.kink_signature())
    };
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let entry = params.entry(id);
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.len();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        let mut reduced_steps = 0;
        for j in 0..n {
            let orig = work.get(id).data[j];
            let mut step = h;
            for attempt in 0..=MAX_STEP_REDUCTIONS {
                work.get_mut(id).data[j] = orig + step;
                let (plus, sig_p) = eval(&work)?;
                work.get_mut(id).data[j] = orig - step;
                let (minus, sig_m) = eval(&work)?;
                numeric[j] = (plus - minus) / (2.0 * step);
                if (sig_p == base_sig && sig_m == base_sig) || attempt == MAX_STEP_REDUCTIONS {
                    break;
                }
                if attempt == 0 {
                    reduced_steps += 1;
                }
                step /= 10.0;
            }
            work.get_mut(id).data[j] = orig;
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (an, nn) = (norm(&analytic), norm(&numeric));
        out.push(ParamCheck {
            name: entry.name.clone(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: norm(&diff) / an.max(nn).max(NORM_FLOOR),
            reduced_steps,
        });
    }
    Ok(out)
}
