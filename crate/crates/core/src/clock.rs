use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Monotonic run clock in model microseconds. Real time is compressed by
/// `time_scale`: one model µs lasts `time_scale` real µs.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    epoch: Instant,
    time_scale: f64,
}

impl RunClock {
    pub fn start(time_scale: f64) -> Self {
        assert!(time_scale.is_finite() && time_scale > 0.0, "time_scale must be positive");
        Self { epoch: Instant::now(), time_scale }
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn now_us(&self) -> u64 {
        (self.epoch.elapsed().as_secs_f64() * 1e6 / self.time_scale) as u64
    }

    pub fn sleep_us(&self, model_us: f64) {
        if model_us > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(model_us * self.time_scale / 1e6));
        }
    }

    /// Sleeps until the clock reads at least `model_us`.
    pub fn sleep_until(&self, model_us: u64) {
        let now = self.now_us();
        if model_us > now {
            self.sleep_us((model_us - now) as f64);
        }
    }
}

pub fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
