use chrono::{DateTime, NaiveDate, Utc};
use chrono_tz::Europe::Madrid;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;

    /// Civil date in Madrid, which is what the portal's days refer to.
    fn today(&self) -> NaiveDate {
        self.now().with_timezone(&Madrid).date_naive()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    /// Noon UTC on `day`, which is the same civil day in Madrid.
    pub fn on(day: NaiveDate) -> Self {
        FixedClock(day.and_hms_opt(12, 0, 0).unwrap().and_utc())
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}
