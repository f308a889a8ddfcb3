use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Up,
    Down,
}

/// Rotation in which exactly one of `group_size` links is up per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkSchedule {
    pub group_size: u32,
    pub index: u32,
    pub slot: Duration,
    pub epoch: SystemTime,
}

impl LinkSchedule {
    pub fn new(group_size: u32, index: u32, slot: Duration, epoch: SystemTime) -> Self {
        assert!(group_size > 0 && index < group_size, "index must be inside the group");
        assert!(!slot.is_zero(), "slot must be positive");
        Self { group_size, index, slot, epoch }
    }

    fn slot_number(&self, since_epoch: Duration) -> u128 {
        since_epoch.as_nanos() / self.slot.as_nanos()
    }

    /// State `since_epoch` after the schedule started.
    pub fn state_after(&self, since_epoch: Duration) -> LinkState {
        if self.slot_number(since_epoch) % u128::from(self.group_size) == u128::from(self.index) {
            LinkState::Up
        } else {
            LinkState::Down
        }
    }

    /// How long from `t` until this link is next up (zero if up now).
    pub fn time_until_up(&self, t: SystemTime) -> Duration {
        let Ok(since) = t.duration_since(self.epoch) else {
            return self.epoch.duration_since(t).unwrap_or_default()
                + self.slot * self.index;
        };
        let n = self.slot_number(since);
        let group = u128::from(self.group_size);
        let pos = n % group;
        let idx = u128::from(self.index);
        if pos == idx {
            return Duration::ZERO;
        }
        let ahead = (idx + group - pos) % group;
        let start_nanos = (n + ahead) * self.slot.as_nanos();
        Duration::from_nanos(start_nanos as u64).saturating_sub(since)
    }

    /// How long from `t` until this link next goes down (zero if down now).
    pub fn time_until_down(&self, t: SystemTime) -> Duration {
        let Ok(since) = t.duration_since(self.epoch) else {
            return Duration::ZERO;
        };
        if self.state_after(since) == LinkState::Down {
            return Duration::ZERO;
        }
        let end = (self.slot_number(since) + 1) * self.slot.as_nanos();
        Duration::from_nanos(end as u64).saturating_sub(since)
    }
}

/// Up iff `floor((t - epoch) / slot) mod group_size == index`. Before the
/// epoch every link is down.
pub fn link_state(schedule: &LinkSchedule, t: SystemTime) -> LinkState {
    match t.duration_since(schedule.epoch) {
        Ok(since) => schedule.state_after(since),
        Err(_) => LinkState::Down,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad schedule {0:?}: expected group:index:slot_ms:epoch_ms")]
pub struct ScheduleParseError(pub String);

impl FromStr for LinkSchedule {
    type Err = ScheduleParseError;

    /// `group:index:slot_ms:epoch_ms`, epoch in milliseconds since the Unix epoch.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ScheduleParseError(s.to_string());
        let parts: Vec<u64> = s.split(':').map(|p| p.parse().map_err(|_| err())).collect::<Result<_, _>>()?;
        let [group, index, slot_ms, epoch_ms] = parts[..] else {
            return Err(err());
        };
        if group == 0 || index >= group || slot_ms == 0 || group > u64::from(u32::MAX) {
            return Err(err());
        }
        Ok(LinkSchedule::new(
            group as u32,
            index as u32,
            Duration::from_millis(slot_ms),
            UNIX_EPOCH + Duration::from_millis(epoch_ms),
        ))
    }
}
