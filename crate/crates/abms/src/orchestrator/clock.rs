//! Injected time source so runs are replayable and tests can pin the clock.

use std::sync::Mutex;

use chrono::{DateTime, Local, NaiveDateTime, Utc};

pub trait Clock: Send + Sync {
    /// Local wall-clock time; drives event timestamps and the daily reset.
    fn now_local(&self) -> NaiveDateTime;
    /// UTC time; drives backup file naming.
    fn now_utc(&self) -> DateTime<Utc>;
}

/// The real system clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_local(&self) -> NaiveDateTime {
        Local::now().naive_local()
    }

    fn now_utc(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A settable clock. `now_utc` reports the same instant as `now_local`,
/// which is all the pipeline needs for reproducible runs.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<NaiveDateTime>,
}

impl ManualClock {
    pub fn new(start: NaiveDateTime) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn set(&self, to: NaiveDateTime) {
        *self.now.lock().unwrap() = to;
    }

    pub fn advance(&self, by: chrono::Duration) {
        let mut now = self.now.lock().unwrap();
        *now += by;
    }
}

impl Clock for ManualClock {
    fn now_local(&self) -> NaiveDateTime {
        *self.now.lock().unwrap()
    }

    fn now_utc(&self) -> DateTime<Utc> {
        DateTime::from_naive_utc_and_offset(self.now_local(), Utc)
    }
}
