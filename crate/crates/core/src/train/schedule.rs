use crate::ensemble::AgentRole;
use crate::error::{Error, Result};

/// Control alternation: `xi` protagonist-only warmup steps, then cycles of
/// `m` protagonist steps followed by `n` adversary steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleXi {
    pub xi: u64,
    pub m: u64,
    pub n: u64,
}

impl ScheduleXi {
    pub fn new(xi: u64, m: u64, n: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config(vec!["schedule.m must be >= 1".into()]));
        }
        Ok(Self { xi, m, n })
    }

    /// Protagonist-only schedule.
    pub fn protagonist_only() -> Self {
        Self { xi: 0, m: 1, n: 0 }
    }
}

pub fn active_agent(t: u64, sched: &ScheduleXi) -> AgentRole {
    if t < sched.xi || sched.n == 0 {
        return AgentRole::Protagonist;
    }
    if (t - sched.xi) % (sched.m + sched.n) < sched.m {
        AgentRole::Protagonist
    } else {
        AgentRole::Adversary
    }
}

/// Linear decay from `start` at `t0` to `end` at `t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub t0: u64,
    pub t1: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if t <= self.t0 {
            self.start
        } else if t >= self.t1 {
            self.end
        } else {
            let frac = (t - self.t0) as f64 / (self.t1 - self.t0) as f64;
            self.start + (self.end - self.start) * frac
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.t0 >= self.t1 {
            errs.push(format!(
                "epsilon.decay_start ({}) must be < epsilon.decay_end ({})",
                self.t0, self.t1
            ));
        }
        for (name, v) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("epsilon.{name} must lie in [0, 1], got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AgentRole::*;

    #[test]
    fn warmup_is_protagonist_only() {
        let s = ScheduleXi::new(550_000, 10, 1).unwrap();
        assert_eq!(active_agent(0, &s), Protagonist);
        assert_eq!(active_agent(549_999, &s), Protagonist);
        assert_eq!(active_agent(550_010, &s), Adversary);
    }

    #[test]
    fn ten_to_one_cycle() {
        let s = ScheduleXi::new(0, 10, 1).unwrap();
        for t in 0..10 {
            assert_eq!(active_agent(t, &s), Protagonist);
        }
        assert_eq!(active_agent(10, &s), Adversary);
        assert_eq!(active_agent(11, &s), Protagonist);
    }

    #[test]
    fn disabled_adversary() {
        let s = ScheduleXi::new(0, 3, 0).unwrap();
        assert!((0..1000).all(|t| active_agent(t, &s) == Protagonist));
        assert!(ScheduleXi::new(0, 0, 1).is_err());
    }

    #[test]
    fn epsilon_decay_points() {
        let e = EpsilonSchedule {
            start: 1.0,
            end: 0.02,
            t0: 10_000,
            t1: 500_000,
        };
        assert_eq!(e.value(0), 1.0);
        assert_eq!(e.value(10_000), 1.0);
        assert_eq!(e.value(500_000), 0.02);
        assert_eq!(e.value(900_000), 0.02);
        assert!((e.value(255_000) - 0.51).abs() < 1e-12);
        assert!(EpsilonSchedule { t0: 5, t1: 5, ..e }.validate().is_err());
    }
}
