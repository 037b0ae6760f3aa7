//! Finite-difference verification of tape gradients.
//!
//! [`grad_check`] compares the analytic gradient of a scalar-valued function
//! against central differences, coordinate by coordinate. Coordinates flagged
//! by a caller-supplied kink predicate (activation boundaries and other
//! non-smooth points, where finite differences are meaningless) are reported
//! as skipped rather than compared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{TVar, Tape, Tensor};

/// Which coordinates of the input to probe.
#[derive(Debug, Clone)]
pub enum CoordSelection {
    All,
    /// A fixed-size random subset, drawn without replacement.
    Sample { count: usize, seed: u64 },
}

pub struct GradCheckOptions<'k> {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Relative errors divide by max(|analytic|, |numeric|, `abs_floor`), so
    /// coordinates where both gradients are tiny are compared absolutely at
    /// `tol * abs_floor`.
    pub abs_floor: f64,
    pub coords: CoordSelection,
    /// Flags coordinates too close to a non-smooth point to difference,
    /// given the coordinate index and its value.
    pub kink: Option<&'k dyn Fn(usize, f64) -> bool>,
}

impl Default for GradCheckOptions<'_> {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            tol: 1e-4,
            abs_floor: 1e-3,
            coords: CoordSelection::All,
            kink: None,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates the kink predicate excluded.
    pub skipped: Vec<usize>,
    pub max_rel_err: f64,
    /// Coordinate achieving `max_rel_err`.
    pub worst_coord: Option<usize>,
    pub pass: bool,
}

/// Compare analytic and central-difference gradients of `f` at `point`.
///
/// `f` must build a scalar loss from the given input variable on the given
/// tape; it is re-invoked on fresh tapes for each probe, so any constants it
/// needs must be captured by value and recreated identically on every call.
/// Panics if the function fails to produce a scalar or backward fails, since
/// this is a test-support facility.
pub fn grad_check<F>(f: F, point: &Tensor, opts: &GradCheckOptions<'_>) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, TVar<'t>) -> TVar<'t>,
{
    let eval = |p: &Tensor| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(p.clone());
        f(&tape, x).value().item()
    };

    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&tape, x);
    tape.backward(loss).expect("grad_check: backward failed");
    let analytic = x.grad().expect("grad_check: input received no gradient");

    let coords: Vec<usize> = match &opts.coords {
        CoordSelection::All => (0..point.numel()).collect(),
        CoordSelection::Sample { count, seed } => {
            if *count >= point.numel() {
                (0..point.numel()).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rand::seq::index::sample(&mut rng, point.numel(), *count).into_vec()
            }
        }
    };

    let mut report = GradCheckReport {
        checked: 0,
        skipped: Vec::new(),
        max_rel_err: 0.0,
        worst_coord: None,
        pass: true,
    };
    let mut probe = point.clone();
    for &i in &coords {
        let v = point.data()[i];
        if opts.kink.map_or(false, |k| k(i, v)) {
            report.skipped.push(i);
            continue;
        }
        probe.data_mut()[i] = v + opts.step;
        let up = eval(&probe);
        probe.data_mut()[i] = v - opts.step;
        let down = eval(&probe);
        probe.data_mut()[i] = v;
        let fd = (up - down) / (2.0 * opts.step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.abs_floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = Some(i);
        }
        if rel > opts.tol {
            report.pass = false;
        }
    }
    report
}
