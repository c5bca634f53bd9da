use std::path::Path;

use crate::error::{Error, Result};

/// Prior weight per grid index.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Prior {
    #[default]
    Uniform,
    Weights(Vec<f64>),
}

/// Task prior (what poses are likely in use) and training prior (how the
/// encoder's training poses were distributed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorSpec {
    pub task: Prior,
    pub train: Prior,
}

impl Prior {
    /// `index,weight` rows, header optional. Missing indices get weight 0.
    pub fn from_csv(text: &str, n: usize) -> Result<Self> {
        let mut w = vec![0.0; n];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (ln == 0 && line.starts_with("index")) {
                continue;
            }
            let bad = |m: &str| Error::Parse { format: "prior CSV", location: format!("line {}", ln + 1), message: m.into() };
            let (i, v) = line.split_once(',').ok_or_else(|| bad("expected index,weight"))?;
            let i: usize = i.trim().parse().map_err(|_| bad("bad index"))?;
            let v: f64 = v.trim().parse().map_err(|_| bad("bad weight"))?;
            if i >= n {
                return Err(bad("index outside the grid"));
            }
            w[i] = v;
        }
        let p = Prior::Weights(w);
        p.log_weights(n)?;
        Ok(p)
    }

    /// `"uniform"` or a path to a CSV file.
    pub fn parse(spec: &str, n: usize) -> Result<Self> {
        if spec == "uniform" {
            return Ok(Prior::Uniform);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Prior::from_csv(&text, n)
    }

    /// Normalized log weights, or `None` for the uniform prior (a constant
    /// that normalization removes anyway).
    pub fn log_weights(&self, n: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Prior::Uniform => Ok(None),
            Prior::Weights(w) => {
                if w.len() != n {
                    return Err(Error::InvalidInput(format!("prior has {} weights, grid has {n} poses", w.len())));
                }
                if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidInput("prior weights must be finite and non-negative".into()));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidInput("prior weights are all zero".into()));
                }
                Ok(Some(w.iter().map(|v| (v / total).ln()).collect()))
            }
        }
    }
}
