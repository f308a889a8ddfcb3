//! Scenario reports. Aggregates are derived only from the trial records so
//! a reader can recompute them from the JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: u32,
    /// Groups trials within a run, e.g. `stage1` or `direct`.
    pub label: String,
    pub success: bool,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lost: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtt_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconfig_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl Trial {
    pub fn new(index: u32, label: &str, success: bool, duration_ms: f64) -> Self {
        Self {
            index,
            label: label.to_string(),
            success,
            duration_ms,
            sent: None,
            lost: None,
            rtt_ms: None,
            reconfig_ms: None,
            detail: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: u32,
    pub success_ratio: f64,
    pub duration_mean_ms: f64,
    pub duration_stddev_ms: f64,
    /// Total lost over total sent, across trials that carry counts.
    pub loss_fraction: Option<f64>,
    pub rtt_mean_ms: Option<f64>,
    pub rtt_stddev_ms: Option<f64>,
    pub reconfig_mean_ms: Option<f64>,
    pub reconfig_max_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub all: Summary,
    pub by_label: BTreeMap<String, Summary>,
}

/// Mean and population standard deviation.
fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn summarize<'a>(trials: impl IntoIterator<Item = &'a Trial>) -> Summary {
    let trials: Vec<&Trial> = trials.into_iter().collect();
    let durations: Vec<f64> = trials.iter().map(|t| t.duration_ms).collect();
    let rtts: Vec<f64> = trials.iter().filter_map(|t| t.rtt_ms).collect();
    let reconfigs: Vec<f64> = trials.iter().filter_map(|t| t.reconfig_ms).collect();
    let counted: Vec<(u64, u64)> = trials.iter().filter_map(|t| Some((t.sent?, t.lost?))).collect();
    let (dm, ds) = mean_sd(&durations).unwrap_or_default();
    let sent: u64 = counted.iter().map(|c| c.0).sum();
    let lost: u64 = counted.iter().map(|c| c.1).sum();
    Summary {
        trials: trials.len() as u32,
        success_ratio: if trials.is_empty() {
            0.0
        } else {
            trials.iter().filter(|t| t.success).count() as f64 / trials.len() as f64
        },
        duration_mean_ms: dm,
        duration_stddev_ms: ds,
        loss_fraction: (!counted.is_empty()).then(|| if sent == 0 { 0.0 } else { lost as f64 / sent as f64 }),
        rtt_mean_ms: mean_sd(&rtts).map(|m| m.0),
        rtt_stddev_ms: mean_sd(&rtts).map(|m| m.1),
        reconfig_mean_ms: mean_sd(&reconfigs).map(|m| m.0),
        reconfig_max_ms: reconfigs.iter().copied().reduce(f64::max),
    }
}

pub fn aggregate(trials: &[Trial]) -> Aggregates {
    let mut labels: BTreeMap<&str, Vec<&Trial>> = BTreeMap::new();
    for t in trials {
        labels.entry(&t.label).or_default().push(t);
    }
    Aggregates {
        all: summarize(trials),
        by_label: labels.into_iter().map(|(l, ts)| (l.to_string(), summarize(ts))).collect(),
    }
}

/// One parameter as run here next to the value it stands in for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub parameter: String,
    pub reference: String,
    pub here: String,
    pub note: String,
}

impl Scaling {
    pub fn new(parameter: &str, reference: &str, here: &str, note: &str) -> Self {
        Self { parameter: parameter.into(), reference: reference.into(), here: here.into(), note: note.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub scaling: Vec<Scaling>,
    pub trials: Vec<Trial>,
    pub aggregates: Aggregates,
    /// Config version each node ended the run with.
    pub config_versions: BTreeMap<String, u64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    pub fn new(scenario: &str, mode: &str, seed: u64, params: serde_json::Value) -> Self {
        Self {
            scenario: scenario.into(),
            mode: mode.into(),
            seed,
            params,
            scaling: Vec::new(),
            trials: Vec::new(),
            aggregates: Aggregates::default(),
            config_versions: BTreeMap::new(),
            checks: Vec::new(),
            pass: false,
        }
    }

    /// Recomputes aggregates and the overall verdict.
    pub fn finish(mut self) -> Self {
        self.aggregates = aggregate(&self.trials);
        self.pass = !self.checks.is_empty() && self.checks.iter().all(|c| c.pass);
        self
    }

    pub fn label(&self, label: &str) -> Summary {
        self.aggregates.by_label.get(label).cloned().unwrap_or_default()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(i: u32, label: &str, ok: bool, d: f64) -> Trial {
        Trial::new(i, label, ok, d)
    }

    #[test]
    fn summary_of_known_values() {
        let mut a = t(0, "x", true, 2.0);
        a.rtt_ms = Some(10.0);
        a.sent = Some(100);
        a.lost = Some(1);
        let mut b = t(1, "x", false, 4.0);
        b.rtt_ms = Some(30.0);
        b.sent = Some(300);
        b.lost = Some(3);
        let s = summarize([&a, &b]);
        assert_eq!(s.trials, 2);
        assert_eq!(s.success_ratio, 0.5);
        assert_eq!((s.duration_mean_ms, s.duration_stddev_ms), (3.0, 1.0));
        assert_eq!((s.rtt_mean_ms, s.rtt_stddev_ms), (Some(20.0), Some(10.0)));
        assert_eq!(s.loss_fraction, Some(0.01));
        assert_eq!(s.reconfig_max_ms, None);
    }

    #[test]
    fn report_round_trips_and_aggregates_recompute() {
        let mut r = Report::new("demo", "overlay", 1, serde_json::json!({"n": 2}));
        r.trials = vec![t(0, "a", true, 1.0), t(1, "b", false, 3.0)];
        r.checks.push(Check::new("ok", true, ""));
        let r = r.finish();
        assert!(r.pass);
        assert_eq!(r.label("a").success_ratio, 1.0);
        assert_eq!(r.aggregates.all.success_ratio, 0.5);
        let back: Report = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(aggregate(&back.trials), back.aggregates);
    }
}
