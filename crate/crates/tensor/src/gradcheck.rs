//! Central finite-difference verification of analytic gradients.

use crate::conv::ConvImpl;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by [`GradCheck::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(param index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Finite-difference checker.
///
/// Relative error is `|a - n| / max(|a|, |n|)`; when both magnitudes fall
/// below `abs_floor` the absolute difference is used instead.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub abs_floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
    pub conv_impl: ConvImpl,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            abs_floor: 1e-7,
            max_per_param: None,
            conv_impl: ConvImpl::default(),
        }
    }
}

impl GradCheck {
    pub fn with_h(h: f64) -> Self {
        Self { h, ..Self::default() }
    }

    pub fn sampled(mut self, max_per_param: usize) -> Self {
        self.max_per_param = Some(max_per_param);
        self
    }

    pub fn with_conv_impl(mut self, conv_impl: ConvImpl) -> Self {
        self.conv_impl = conv_impl;
        self
    }

    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale < self.abs_floor {
            diff
        } else {
            diff / scale
        }
    }

    /// `build` receives one tracked leaf per entry of `params` and returns a
    /// scalar loss. It is re-run for every perturbation, so it must be
    /// deterministic.
    pub fn run<F>(&self, params: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut g = Graph::with_conv_impl(self.conv_impl);
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::with_conv_impl(self.conv_impl);
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
        };
        let mut work = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            let n = p.numel();
            let step = match self.max_per_param {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for e in (0..n).step_by(step) {
                let orig = p.data()[e];
                work[pi].data_mut()[e] = orig + self.h;
                let plus = eval(&work)?;
                work[pi].data_mut()[e] = orig - self.h;
                let minus = eval(&work)?;
                work[pi].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic[pi].data()[e];
                let err = self.rel_err(a, numeric);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    if err >= report.max_rel_err {
                        report.worst = Some((pi, e, a, numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}
