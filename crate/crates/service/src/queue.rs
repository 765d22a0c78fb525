//! Bounded FIFO admission for generation jobs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::Semaphore;

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("generation queue is full ({0} requests admitted)")]
    Busy(usize),
    #[error("request waited longer than {0:?} for a worker")]
    DeadlineExceeded(Duration),
    #[error("generation worker failed: {0}")]
    Worker(String),
}

/// `workers` jobs run at once and at most `depth` more wait; waiting jobs are
/// served in arrival order and give up after `deadline`.
#[derive(Debug, Clone)]
pub struct GenerationQueue {
    workers: Arc<Semaphore>,
    admitted: Arc<AtomicUsize>,
    capacity: usize,
    deadline: Duration,
}

struct Admission(Arc<AtomicUsize>);

impl Drop for Admission {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl GenerationQueue {
    pub fn new(workers: usize, depth: usize, deadline: Duration) -> Self {
        let workers = workers.max(1);
        Self {
            workers: Arc::new(Semaphore::new(workers)),
            admitted: Arc::new(AtomicUsize::new(0)),
            capacity: workers + depth,
            deadline,
        }
    }

    pub fn admitted(&self) -> usize {
        self.admitted.load(Ordering::SeqCst)
    }

    /// Runs `job` on the blocking pool once a worker is free.
    pub async fn run<T, F>(&self, job: F) -> Result<T, QueueError>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let previous = self.admitted.fetch_add(1, Ordering::SeqCst);
        let _admission = Admission(self.admitted.clone());
        if previous >= self.capacity {
            return Err(QueueError::Busy(previous));
        }
        let permit = tokio::time::timeout(self.deadline, self.workers.clone().acquire_owned())
            .await
            .map_err(|_| QueueError::DeadlineExceeded(self.deadline))?
            .map_err(|e| QueueError::Worker(e.to_string()))?;
        let out = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            job()
        })
        .await
        .map_err(|e| QueueError::Worker(e.to_string()))?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn overflow_is_rejected_and_capacity_recovers() {
        let q = GenerationQueue::new(1, 1, Duration::from_secs(5));
        let (tx, rx) = std::sync::mpsc::channel::<()>();
        let rx = Arc::new(std::sync::Mutex::new(rx));
        let running = {
            let q = q.clone();
            let rx = rx.clone();
            tokio::spawn(async move { q.run(move || rx.lock().unwrap().recv().unwrap()).await })
        };
        while q.admitted() < 1 {
            tokio::task::yield_now().await;
        }
        let waiting = {
            let q = q.clone();
            tokio::spawn(async move { q.run(|| 7).await })
        };
        while q.admitted() < 2 {
            tokio::task::yield_now().await;
        }
        assert!(matches!(q.run(|| 0).await, Err(QueueError::Busy(2))));
        tx.send(()).unwrap();
        running.await.unwrap().unwrap();
        assert_eq!(waiting.await.unwrap().unwrap(), 7);
        assert_eq!(q.admitted(), 0);
        assert_eq!(q.run(|| 1).await.unwrap(), 1);
    }

    #[tokio::test]
    async fn waiting_past_the_deadline_fails() {
        let q = GenerationQueue::new(1, 4, Duration::from_millis(50));
        let (tx, rx) = std::sync::mpsc::channel::<()>();
        let blocker = {
            let q = q.clone();
            tokio::spawn(async move { q.run(move || rx.recv().unwrap()).await })
        };
        while q.admitted() < 1 {
            tokio::task::yield_now().await;
        }
        assert!(matches!(q.run(|| ()).await, Err(QueueError::DeadlineExceeded(_))));
        tx.send(()).unwrap();
        blocker.await.unwrap().unwrap();
    }
}
