//! Cooperative cancellation and progress reporting for long-running work.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

type ProgressFn = dyn Fn(&str, usize, usize) + Send + Sync;

/// Shared by a caller and the stage it runs. Cloning shares the flag.
#[derive(Clone, Default)]
pub struct Control {
    cancel: Arc<AtomicBool>,
    progress: Option<Arc<ProgressFn>>,
}

impl std::fmt::Debug for Control {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Control")
            .field("cancelled", &self.is_cancelled())
            .finish_non_exhaustive()
    }
}

impl Control {
    pub fn new() -> Self {
        Control::default()
    }

    /// Calls `f(task, done, total)` on every progress report.
    pub fn with_progress(mut self, f: impl Fn(&str, usize, usize) + Send + Sync + 'static) -> Self {
        self.progress = Some(Arc::new(f));
        self
    }

    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// `Err(Interrupted)` once cancellation was requested.
    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Interrupted)
        } else {
            Ok(())
        }
    }

    /// A control sharing this one's cancellation flag whose reports go to
    /// `f` and then to this control's own callback.
    pub fn also_report(&self, f: impl Fn(&str, usize, usize) + Send + Sync + 'static) -> Control {
        let inner = self.progress.clone();
        Control {
            cancel: self.cancel.clone(),
            progress: Some(Arc::new(move |task: &str, done: usize, total: usize| {
                f(task, done, total);
                if let Some(g) = &inner {
                    g(task, done, total);
                }
            })),
        }
    }

    pub fn report(&self, task: &str, done: usize, total: usize) {
        if let Some(f) = &self.progress {
            f(task, done, total);
        }
    }
}
