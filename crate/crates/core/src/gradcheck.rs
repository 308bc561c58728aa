//! Central finite-difference checks of analytic gradients.

use crate::error::{Error, Result};
use crate::params::Parameterized;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_block(&self) -> Option<&BlockError> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "step\t{:e}", self.step)?;
        for b in &self.blocks {
            writeln!(f, "{}\t{}\t{:.3e}", b.name, b.checked, b.max_rel_error)?;
        }
        write!(f, "max\t{:.3e}", self.max_error())
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// The error per entry is `|analytic - numeric| / max(1, |numeric|)`. When
/// `max_per_block` is set, only that many evenly strided entries of each block
/// are perturbed. `loss` must be deterministic: any sampling noise has to be
/// frozen outside the closure.
pub fn grad_check<P, F>(
    params: &P,
    analytic: &P,
    step: f64,
    max_per_block: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let analytic_blocks = analytic.blocks();
    let layout: Vec<(String, usize)> = params.blocks().iter().map(|b| (b.name.clone(), b.data.len())).collect();
    if analytic_blocks.len() != layout.len() {
        return Err(Error::shape("gradient blocks", layout.len(), analytic_blocks.len()));
    }

    let mut report = GradCheckReport {
        step,
        blocks: Vec::with_capacity(layout.len()),
    };
    for (bi, (name, len)) in layout.iter().enumerate() {
        if analytic_blocks[bi].data.len() != *len {
            return Err(Error::shape(
                "gradient block length",
                *len,
                analytic_blocks[bi].data.len(),
            ));
        }
        let stride = match max_per_block {
            Some(m) if m > 0 && *len > m => len.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..*len).step_by(stride) {
            let orig = params.blocks()[bi].data[i];
            let eval = |probe: &mut P, value: f64| -> Result<f64> {
                probe.blocks_mut()[bi].data[i] = value;
                let v = loss(probe)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss while perturbing block `{name}`")));
                }
                Ok(v)
            };
            let plus = eval(&mut probe, orig + step)?;
            let minus = eval(&mut probe, orig - step)?;
            probe.blocks_mut()[bi].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic_blocks[bi].data[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        report.blocks.push(BlockError {
            name: name.clone(),
            max_rel_error: worst,
            checked,
        });
    }
    Ok(report)
}
