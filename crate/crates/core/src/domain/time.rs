use std::fmt;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::DomainError;

/// Milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_hours(h: i64) -> Self {
        Timestamp(h * 3_600_000)
    }

    pub fn from_secs(s: i64) -> Self {
        Timestamp(s * 1000)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    /// Saturating difference `self - earlier`, clamped at zero.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis((self.0 - earlier.0).max(0) as u64)
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 + rhs.as_millis() as i64)
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 - rhs.as_millis() as i64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

pub fn hours(h: u64) -> Duration {
    Duration::from_secs(h * 3600)
}

/// A usage window. `end` is exclusive: at `now == end` the period is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Period {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self, DomainError> {
        if start >= end {
            return Err(DomainError::InvalidPeriod { start, end });
        }
        Ok(Period { start, end })
    }

    pub fn starting_at(start: Timestamp, length: Duration) -> Result<Self, DomainError> {
        Period::new(start, start + length)
    }

    pub fn length(&self) -> Duration {
        self.end.since(self.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PeriodStatus {
    NotStarted,
    Running {
        #[serde(with = "duration_ms")]
        remaining: Duration,
    },
    Over,
}

impl PeriodStatus {
    /// Position in the order NotStarted < Running < Over.
    pub fn rank(&self) -> u8 {
        match self {
            PeriodStatus::NotStarted => 0,
            PeriodStatus::Running { .. } => 1,
            PeriodStatus::Over => 2,
        }
    }
}

/// Classifies `now` against a usage window.
pub fn period_status(
    start: Timestamp,
    end: Timestamp,
    now: Timestamp,
) -> Result<PeriodStatus, DomainError> {
    if start >= end {
        return Err(DomainError::InvalidPeriod { start, end });
    }
    Ok(if now >= end {
        PeriodStatus::Over
    } else if now < start {
        PeriodStatus::NotStarted
    } else {
        PeriodStatus::Running {
            remaining: end.since(now),
        }
    })
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Source of "now". Production uses the wall clock; tests fast-forward a
/// [`ManualClock`].
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        Timestamp(d.as_millis() as i64)
    }
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicI64>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: Arc::new(AtomicI64::new(start.0)),
        }
    }

    pub fn advance(&self, by: Duration) -> Timestamp {
        let ms = by.as_millis() as i64;
        Timestamp(self.now.fetch_add(ms, Ordering::SeqCst) + ms)
    }

    pub fn set(&self, to: Timestamp) {
        self.now.store(to.0, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }
}
