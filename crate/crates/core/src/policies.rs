//! Per-UE heuristic split policies.
//!
//! Each heuristic looks only at the UE's own measurement from the previous
//! interval and returns the Wi-Fi share for the next one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{quantize, SPLIT_LEVELS};
use crate::simnet::Measurement;

/// Delay gap (ms) above which `system_default` shifts towards the faster link.
pub const SYSTEM_DEFAULT_DELAY_GAP_MS: f64 = 10.0;
/// Per-step change of `system_default`: one action quantum.
pub const SYSTEM_DEFAULT_STEP: f64 = 1.0 / SPLIT_LEVELS as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    ThroughputArgmax,
    SystemDefault,
    UtilityLogistic,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 3] = [
        HeuristicKind::ThroughputArgmax,
        HeuristicKind::SystemDefault,
        HeuristicKind::UtilityLogistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::ThroughputArgmax => "throughput_argmax",
            HeuristicKind::SystemDefault => "system_default",
            HeuristicKind::UtilityLogistic => "utility_logistic",
        }
    }

    /// Wi-Fi split for one UE given its last measurement.
    pub fn split(self, m: &Measurement) -> f64 {
        match self {
            HeuristicKind::ThroughputArgmax => throughput_argmax(m),
            HeuristicKind::SystemDefault => system_default(m, m.sr_wifi),
            HeuristicKind::UtilityLogistic => utility_logistic(m),
        }
    }

    /// Action for all UEs.
    pub fn act(self, measurements: &[Measurement]) -> Vec<f64> {
        measurements.iter().map(|m| self.split(m)).collect()
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown policy `{0}` (expected throughput_argmax, system_default or utility_logistic)")]
pub struct UnknownPolicy(pub String);

impl FromStr for HeuristicKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

/// All traffic on whichever link had the larger capacity; ties go to Wi-Fi.
pub fn throughput_argmax(m: &Measurement) -> f64 {
    if m.lc_wifi >= m.lc_lte {
        1.0
    } else {
        0.0
    }
}

/// Delay-first, loss-second incremental controller.
pub fn system_default(m: &Measurement, prev_sr: f64) -> f64 {
    let delta = if (m.owd_wifi - m.owd_lte).abs() > SYSTEM_DEFAULT_DELAY_GAP_MS {
        if m.owd_wifi < m.owd_lte {
            SYSTEM_DEFAULT_STEP
        } else {
            -SYSTEM_DEFAULT_STEP
        }
    } else if m.dropped_wifi < m.dropped_lte {
        SYSTEM_DEFAULT_STEP
    } else if m.dropped_wifi > m.dropped_lte {
        -SYSTEM_DEFAULT_STEP
    } else {
        0.0
    };
    quantize(prev_sr + delta)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigma(u_wifi - u_lte)` with `u_k = ln(1 + tp_out_k) - ln(1 + owd_k)`,
/// throughput in Mbps and delay in ms.
pub fn utility_logistic(m: &Measurement) -> f64 {
    let u_wifi = m.tp_out_wifi.ln_1p() - m.owd_wifi.ln_1p();
    let u_lte = m.tp_out_lte.ln_1p() - m.owd_lte.ln_1p();
    logistic(u_wifi - u_lte)
}
