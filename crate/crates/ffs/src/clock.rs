//! Injectable time sources.
//!
//! Inodes and the superblock carry wall-clock seconds; transfer metrics
//! accumulate monotonic microseconds; quota grace periods compare wall
//! seconds. Tests drive all three by hand through [`FakeClock`].

use std::cell::RefCell;
use std::rc::Rc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub trait Clock {
    /// Wall clock as (seconds, nanoseconds) since the Unix epoch.
    fn wall(&mut self) -> (i64, i32);
    /// Monotonic microseconds. Only differences are meaningful.
    fn mono_micros(&mut self) -> u64;
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn wall(&mut self) -> (i64, i32) {
        match SystemTime::now().duration_since(UNIX_EPOCH) {
            Ok(d) => (d.as_secs() as i64, d.subsec_nanos() as i32),
            Err(e) => (-(e.duration().as_secs() as i64), 0),
        }
    }

    fn mono_micros(&mut self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}

/// Hand-advanced clock. `mono_micros` ticks by `auto_tick_us` per reading so
/// that busy-time accounting stays strictly increasing even when a test never
/// advances it explicitly.
pub struct FakeClock {
    pub sec: i64,
    pub nsec: i32,
    pub micros: u64,
    pub auto_tick_us: u64,
}

impl FakeClock {
    pub fn at(sec: i64) -> Self {
        FakeClock {
            sec,
            nsec: 0,
            micros: 0,
            auto_tick_us: 0,
        }
    }

    pub fn advance_secs(&mut self, s: i64) {
        self.sec += s;
        self.micros += (s as u64) * 1_000_000;
    }
}

impl Clock for FakeClock {
    fn wall(&mut self) -> (i64, i32) {
        (self.sec, self.nsec)
    }

    fn mono_micros(&mut self) -> u64 {
        self.micros += self.auto_tick_us;
        self.micros
    }
}

/// A clone-able handle onto one [`FakeClock`], so a test can keep advancing
/// the same clock it handed to a filesystem or an image.
#[derive(Clone)]
pub struct SharedClock(pub Rc<RefCell<FakeClock>>);

impl SharedClock {
    pub fn at(sec: i64) -> Self {
        SharedClock(Rc::new(RefCell::new(FakeClock::at(sec))))
    }

    pub fn advance_secs(&self, s: i64) {
        self.0.borrow_mut().advance_secs(s);
    }

    pub fn advance_micros(&self, us: u64) {
        self.0.borrow_mut().micros += us;
    }
}

impl Clock for SharedClock {
    fn wall(&mut self) -> (i64, i32) {
        self.0.borrow_mut().wall()
    }

    fn mono_micros(&mut self) -> u64 {
        self.0.borrow_mut().mono_micros()
    }
}
