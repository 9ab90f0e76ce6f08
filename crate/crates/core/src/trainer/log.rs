use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub improved: bool,
    pub best_ndcg10: f64,
    pub bad_epochs: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Stage1 {
        epoch: usize,
        step: u64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Stage2 {
        epoch: usize,
        step: u64,
        l_prime: f64,
    },
    Joint {
        epoch: usize,
        step: u64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch(EpochRecord),
}

impl LogRecord {
    pub fn epoch(&self) -> usize {
        match self {
            LogRecord::Stage1 { epoch, .. } | LogRecord::Stage2 { epoch, .. } | LogRecord::Joint { epoch, .. } => {
                *epoch
            }
            LogRecord::Epoch(e) => e.epoch,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log record serializes");
        s.push('\n');
        s
    }
}
