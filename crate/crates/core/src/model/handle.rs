use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::external::{ExternalOracle, ProcessSpec};
use super::single::SingleModel;
use super::{label_of, MlpModel, Precision};
use crate::error::{Error, Result};
use crate::exec::Execution;

type ScoreFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

enum Backend {
    InProcess(Arc<MlpModel>, Option<Arc<SingleModel>>),
    Function(Arc<ScoreFn>),
    External(Mutex<ExternalOracle>),
}

/// A scoring oracle with a batch-call counter.
///
/// Predictions must be a pure function of the input rows. Each call to
/// [`ModelHandle::forward`] counts as one invocation whatever the batch size.
/// External handles allow a single in-flight batch; open several handles for
/// concurrent use.
pub struct ModelHandle {
    backend: Backend,
    input_dim: usize,
    invocations: AtomicU64,
    exec: Execution,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.backend {
            Backend::InProcess(..) => "in_process",
            Backend::Function(_) => "function",
            Backend::External(_) => "external",
        };
        f.debug_struct("ModelHandle")
            .field("kind", &kind)
            .field("input_dim", &self.input_dim)
            .field("invocations", &self.invocations())
            .finish()
    }
}

impl ModelHandle {
    fn with_backend(backend: Backend, input_dim: usize) -> Self {
        ModelHandle {
            backend,
            input_dim,
            invocations: AtomicU64::new(0),
            exec: Execution::default(),
        }
    }

    pub fn in_process(model: impl Into<Arc<MlpModel>>) -> Self {
        let model = model.into();
        let dim = model.input_dim();
        Self::with_backend(Backend::InProcess(model, None), dim)
    }

    /// Wraps a closure returning a confidence in `[0, 1]` per row.
    pub fn from_fn<F>(input_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::with_backend(Backend::Function(Arc::new(f)), input_dim)
    }

    /// Spawns `spec` and talks to it over the line-delimited JSON protocol.
    pub fn connect_external(spec: &ProcessSpec, input_dim: usize) -> Result<Self> {
        let oracle = ExternalOracle::spawn(spec)?;
        Ok(Self::with_backend(
            Backend::External(Mutex::new(oracle)),
            input_dim,
        ))
    }

    /// Execution mode for in-process batch evaluation.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Forward-pass precision of an in-process model; other backends
    /// compute however they compute and ignore this.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        if let Backend::InProcess(model, single) = &mut self.backend {
            *single = match precision {
                Precision::F64 => None,
                Precision::F32 => Some(Arc::new(SingleModel::new(model))),
            };
        }
        self
    }

    pub fn precision(&self) -> Precision {
        match &self.backend {
            Backend::InProcess(_, Some(_)) => Precision::F32,
            _ => Precision::F64,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// The wrapped network, when evaluation happens in this process.
    pub fn model(&self) -> Option<&MlpModel> {
        match &self.backend {
            Backend::InProcess(m, _) => Some(m),
            _ => None,
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self.backend, Backend::External(_))
    }

    /// Evaluates a batch; one invocation regardless of its size.
    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        for row in batch {
            if row.len() != self.input_dim {
                return Err(Error::Dimension {
                    expected: self.input_dim,
                    actual: row.len(),
                });
            }
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        match &self.backend {
            Backend::InProcess(_, Some(single)) => Ok(single.predict_batch(batch, self.exec)),
            Backend::InProcess(m, None) => m.predict_batch(batch, self.exec),
            Backend::Function(f) => Ok(batch.iter().map(|row| f(row)).collect()),
            Backend::External(o) => {
                let mut oracle = o
                    .lock()
                    .map_err(|_| Error::Protocol("oracle handle poisoned".into()))?;
                oracle.score(batch)
            }
        }
    }

    /// Confidence for one row (one invocation).
    pub fn confidence(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(std::slice::from_ref(&x.to_vec()))?[0])
    }

    /// 1 iff the confidence is strictly above 0.5.
    pub fn predict_label(&self, x: &[f64]) -> Result<u8> {
        self.confidence(x).map(label_of)
    }

    fn require_model(&self) -> Result<&MlpModel> {
        self.model().ok_or_else(|| {
            Error::Unsupported("exact gradients need an in-process model".into())
        })
    }

    /// Backprop gradient of the predicted-class confidence. Not counted as an
    /// invocation.
    pub fn output_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_model()?.output_gradient(x)
    }

    /// Backprop gradient of the cross-entropy loss against `label`.
    pub fn loss_gradient(&self, x: &[f64], label: u8) -> Result<Vec<f64>> {
        self.require_model()?.loss_gradient(x, label)
    }
}
