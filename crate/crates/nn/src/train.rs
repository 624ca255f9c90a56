//! Pieces shared by the training loops: batch prefetching, log records and loss checks.

use std::path::Path;
use std::sync::mpsc;

use candle_core::{DType, Tensor};
use serde_json::Value;

use crate::error::{Error, Result};

/// Receives one structured record per logged iteration.
pub type LogSink<'a> = &'a mut dyn FnMut(&Value);

/// A sink that drops every record.
pub fn discard(_: &Value) {}

/// Runs `produce(0..n)` on a helper thread and `consume` on the caller's thread, delivering
/// items strictly in index order through a bounded queue.
pub fn prefetch<T: Send>(
    n: usize,
    depth: usize,
    produce: impl Fn(usize) -> Result<T> + Send,
    mut consume: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Result<T>>(depth.max(1));
        scope.spawn(move || {
            for i in 0..n {
                let item = produce(i);
                let failed = item.is_err();
                // a closed channel means the consumer stopped early
                if tx.send(item).is_err() || failed {
                    return;
                }
            }
        });
        for i in 0..n {
            let item = rx
                .recv()
                .map_err(|_| Error::aborted("batch producer stopped unexpectedly"))??;
            consume(i, item)?;
        }
        Ok(())
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Aborts on NaN/∞, pointing at the last checkpoint written (if any).
pub fn ensure_finite(loss: f64, iteration: usize, last_good: Option<&Path>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let hint = match last_good {
        Some(p) => format!("; last good checkpoint: {}", p.display()),
        None => "; no checkpoint written yet".to_string(),
    };
    Err(Error::aborted(format!("non-finite loss {loss} at iteration {iteration}{hint}")))
}

/// Whether iteration `k` (zero-based) of `total` should be logged / checkpointed every `every`.
pub fn due(k: usize, total: usize, every: usize) -> bool {
    k + 1 == total || (every > 0 && (k + 1) % every == 0)
}
