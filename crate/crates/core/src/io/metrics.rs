//! Per-step training metrics and their CSV form.

use std::io::Write;
use std::path::Path;

use crate::ensemble::AgentRole;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "t",
    "episode",
    "acting_role",
    "eps",
    "reward_total",
    "reward_progress_total",
    "reward_progress_pure",
    "catastrophes_this_episode",
    "loss_P",
    "loss_A",
    "mean_variance_selected_actions",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub episode: u64,
    pub acting_role: AgentRole,
    pub eps: f64,
    pub reward_total: f64,
    pub reward_progress_total: f64,
    pub reward_progress_pure: f64,
    pub catastrophes_this_episode: u32,
    /// Loss of the protagonist update taken at this step, if any.
    pub loss_p: Option<f64>,
    pub loss_a: Option<f64>,
    /// Running mean over the episode of the ensemble variance of every
    /// network-chosen action so far.
    pub mean_variance_selected_actions: Option<f64>,
}

impl MetricsRow {
    fn record(&self) -> [String; 11] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.t.to_string(),
            self.episode.to_string(),
            self.acting_role.to_string(),
            self.eps.to_string(),
            self.reward_total.to_string(),
            self.reward_progress_total.to_string(),
            self.reward_progress_pure.to_string(),
            self.catastrophes_this_episode.to_string(),
            opt(self.loss_p),
            opt(self.loss_a),
            opt(self.mean_variance_selected_actions),
        ]
    }
}

/// Totals for one finished (or still running) episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub steps: u64,
    pub reward_total: f64,
    pub progress_total: f64,
    pub progress_pure: f64,
    pub catastrophes: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn episodes(&self) -> Vec<EpisodeSummary> {
        let mut out: Vec<EpisodeSummary> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(e) if e.episode == r.episode => {
                    e.steps += 1;
                    e.reward_total += r.reward_total;
                    e.progress_total += r.reward_progress_total;
                    e.progress_pure += r.reward_progress_pure;
                    e.catastrophes = r.catastrophes_this_episode;
                }
                _ => out.push(EpisodeSummary {
                    episode: r.episode,
                    steps: 1,
                    reward_total: r.reward_total,
                    progress_total: r.reward_progress_total,
                    progress_pure: r.reward_progress_pure,
                    catastrophes: r.catastrophes_this_episode,
                }),
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            wr.write_record(r.record())?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }
}
