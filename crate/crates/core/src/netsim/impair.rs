use std::time::{Duration, SystemTime};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{link_state, LinkSchedule, LinkState};

/// What an established TCP connection experiences while its link is down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownBehavior {
    /// Bytes are held until the link is up again, as segments dropped by a
    /// router are eventually retransmitted by TCP.
    #[default]
    Stall,
    /// Both sides are reset when the link goes down.
    Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpairmentSpec {
    /// Per-datagram drop probability (UDP only).
    pub loss_rate: f64,
    /// One-way added delay.
    pub latency: Duration,
    pub schedule: Option<LinkSchedule>,
    pub seed: u64,
    pub on_down: DownBehavior,
}

impl Default for ImpairmentSpec {
    fn default() -> Self {
        Self { loss_rate: 0.0, latency: Duration::ZERO, schedule: None, seed: 0, on_down: DownBehavior::Stall }
    }
}

impl ImpairmentSpec {
    pub fn lossy(loss_rate: f64, seed: u64) -> Self {
        Self { loss_rate, seed, ..Self::default() }
    }

    pub fn delayed(latency: Duration) -> Self {
        Self { latency, ..Self::default() }
    }

    pub fn link_state(&self, t: SystemTime) -> LinkState {
        match &self.schedule {
            Some(s) => link_state(s, t),
            None => LinkState::Up,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Deliver { after: Duration },
    Drop,
}

/// Per-link, per-direction datagram fate generator. One random draw is
/// consumed for every datagram, so the loss pattern depends only on the seed
/// and the datagram order.
#[derive(Debug)]
pub struct Impairer {
    spec: ImpairmentSpec,
    rng: ChaCha8Rng,
}

impl Impairer {
    pub fn new(spec: ImpairmentSpec) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self { spec, rng }
    }

    pub fn spec(&self) -> &ImpairmentSpec {
        &self.spec
    }

    pub fn decide(&mut self, now: SystemTime) -> Verdict {
        let draw: f64 = self.rng.gen();
        if self.spec.link_state(now) == LinkState::Down || draw < self.spec.loss_rate {
            Verdict::Drop
        } else {
            Verdict::Deliver { after: self.spec.latency }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::UNIX_EPOCH;

    #[test]
    fn clean_link_always_delivers_immediately() {
        let mut imp = Impairer::new(ImpairmentSpec::default());
        for _ in 0..1000 {
            assert_eq!(imp.decide(SystemTime::now()), Verdict::Deliver { after: Duration::ZERO });
        }
    }

    #[test]
    fn one_percent_loss_over_a_million_draws() {
        // Binomial(1e6, 0.01) has sd ~99.5, so [9000, 11000] is a ~10 sigma band.
        let mut imp = Impairer::new(ImpairmentSpec::lossy(0.01, 0x5eed));
        let dropped = (0..1_000_000).filter(|_| imp.decide(SystemTime::now()) == Verdict::Drop).count();
        let frac = dropped as f64 / 1e6;
        assert!((0.009..=0.011).contains(&frac), "{frac}");
    }

    #[test]
    fn down_link_drops_everything() {
        let spec = ImpairmentSpec {
            schedule: Some(LinkSchedule::new(3, 1, Duration::from_secs(1), UNIX_EPOCH)),
            ..ImpairmentSpec::default()
        };
        let mut imp = Impairer::new(spec);
        let down = UNIX_EPOCH + Duration::from_millis(500);
        let up = UNIX_EPOCH + Duration::from_millis(1500);
        assert_eq!(imp.decide(down), Verdict::Drop);
        assert_eq!(imp.decide(up), Verdict::Deliver { after: Duration::ZERO });
    }

    #[test]
    fn latency_is_reported() {
        let mut imp = Impairer::new(ImpairmentSpec::delayed(Duration::from_millis(150)));
        assert_eq!(imp.decide(SystemTime::now()), Verdict::Deliver { after: Duration::from_millis(150) });
    }

    #[test]
    fn same_seed_same_pattern() {
        let pattern = |seed| {
            let mut imp = Impairer::new(ImpairmentSpec::lossy(0.3, seed));
            (0..500).map(|_| imp.decide(SystemTime::now()) == Verdict::Drop).collect::<Vec<_>>()
        };
        assert_eq!(pattern(11), pattern(11));
        assert_ne!(pattern(11), pattern(12));
    }
}
