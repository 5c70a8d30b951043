//! Fluid-flow simulator of UEs served by Wi-Fi access points and one LTE cell.
//!
//! Each UE offers constant-rate downlink traffic that is split between its
//! attached Wi-Fi AP and the LTE base station. Every link keeps a fluid
//! backlog; one call to [`SimState::advance_interval`] moves the simulation
//! forward by one measurement interval and reports per-UE [`Measurement`]s.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Lowest PHY rate a link can report, in Mbps.
pub const MIN_PHY_RATE_MBPS: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("split ratio {value} for UE {ue} is outside [0, 1]")]
    SplitOutOfRange { ue: usize, value: f64 },
    #[error("expected {expected} split ratios, got {actual}")]
    SplitCount { expected: usize, actual: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkType {
    Wifi,
    Lte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_users: usize,
    pub enb_location: [f64; 3],
    pub ap_locations: Vec<[f64; 3]>,
    /// `[min_x, max_x]` in metres.
    pub user_x_range: [f64; 2],
    pub user_y: f64,
    pub user_z: f64,
    /// m/s
    pub user_speed: f64,
    /// Measurement interval in seconds.
    pub interval_s: f64,
    pub steps_per_episode: usize,
    pub input_rate_mbps: f64,
    pub wifi_peak_rate_mbps: f64,
    pub lte_cell_rate_mbps: f64,
    pub pathloss_exponent: f64,
    pub reference_distance_m: f64,
    pub prop_delay_wifi_ms: f64,
    pub prop_delay_lte_ms: f64,
    pub dy_max_ms: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_users: 4,
            enb_location: [40.0, 0.0, 3.0],
            ap_locations: vec![[30.0, 0.0, 3.0], [50.0, 0.0, 3.0]],
            user_x_range: [0.0, 80.0],
            user_y: 0.0,
            user_z: 1.5,
            user_speed: 1.0,
            interval_s: 0.1,
            steps_per_episode: 10_000,
            input_rate_mbps: 6.0,
            wifi_peak_rate_mbps: 75.0,
            lte_cell_rate_mbps: 37.0,
            pathloss_exponent: 2.0,
            reference_distance_m: 10.0,
            prop_delay_wifi_ms: 1.0,
            prop_delay_lte_ms: 10.0,
            dy_max_ms: 1000.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.num_users == 0 {
            return bad("num_users must be at least 1");
        }
        if self.ap_locations.is_empty() {
            return bad("at least one Wi-Fi access point is required");
        }
        if !(self.user_x_range[0] < self.user_x_range[1]) {
            return bad("user_x_range requires min_x < max_x");
        }
        if !(self.interval_s > 0.0) {
            return bad("measurement interval must be positive");
        }
        if !(self.dy_max_ms > 0.0) {
            return bad("dy_max must be positive");
        }
        if !(self.input_rate_mbps > 0.0
            && self.wifi_peak_rate_mbps > 0.0
            && self.lte_cell_rate_mbps > 0.0)
        {
            return bad("all rates must be positive");
        }
        if !(self.reference_distance_m > 0.0) || !(self.pathloss_exponent >= 0.0) {
            return bad("channel model parameters must be positive");
        }
        if self.user_speed < 0.0 || self.prop_delay_wifi_ms < 0.0 || self.prop_delay_lte_ms < 0.0 {
            return bad("speed and propagation delays must be nonnegative");
        }
        if self.prop_delay_wifi_ms.max(self.prop_delay_lte_ms) > self.dy_max_ms {
            return bad("propagation delay exceeds dy_max");
        }
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode must be at least 1");
        }
        Ok(())
    }

    pub fn prop_delay_ms(&self, link: LinkType) -> f64 {
        match link {
            LinkType::Wifi => self.prop_delay_wifi_ms,
            LinkType::Lte => self.prop_delay_lte_ms,
        }
    }

    pub fn peak_rate_mbps(&self, link: LinkType) -> f64 {
        match link {
            LinkType::Wifi => self.wifi_peak_rate_mbps,
            LinkType::Lte => self.lte_cell_rate_mbps,
        }
    }

    /// Reads the environment-config JSON subset.
    ///
    /// Recognised keys: `enb_locations`, `ap_locations`, `num_users`,
    /// `user_location_range`, `steps_per_episode`, `random_seed`,
    /// `measurement_interval_ms`, `min_udp_rate_per_user_mbps`,
    /// `max_udp_rate_per_user_mbps`. Anything else is rejected. Keys that are
    /// absent keep their [`Default`] value.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let obj = as_object(&root, "config")?;
        let mut cfg = SimConfig::default();
        let mut min_rate = None;
        let mut max_rate = None;
        for (key, value) in obj {
            match key.as_str() {
                "enb_locations" => cfg.enb_location = parse_point(value, key)?,
                "ap_locations" => {
                    let list = value
                        .as_array()
                        .ok_or_else(|| invalid(format!("{key} must be an array")))?;
                    cfg.ap_locations = list
                        .iter()
                        .map(|p| parse_point(p, key))
                        .collect::<Result<_>>()?;
                }
                "num_users" => cfg.num_users = parse_count(value, key)?,
                "user_location_range" => {
                    let range = as_object(value, key)?;
                    let mut min_y = cfg.user_y;
                    let mut max_y = cfg.user_y;
                    for (k, v) in range {
                        let v = parse_f64(v, k)?;
                        match k.as_str() {
                            "min_x" => cfg.user_x_range[0] = v,
                            "max_x" => cfg.user_x_range[1] = v,
                            "min_y" => min_y = v,
                            "max_y" => max_y = v,
                            "z" => cfg.user_z = v,
                            other => {
                                return Err(SimError::UnknownKey(format!("{key}.{other}")))
                            }
                        }
                    }
                    if min_y != max_y {
                        return Err(invalid("UEs move along a line: min_y must equal max_y"));
                    }
                    cfg.user_y = min_y;
                }
                "steps_per_episode" => cfg.steps_per_episode = parse_count(value, key)?,
                "random_seed" => {
                    cfg.seed = value
                        .as_u64()
                        .ok_or_else(|| invalid(format!("{key} must be a nonnegative integer")))?
                }
                "measurement_interval_ms" => cfg.interval_s = parse_f64(value, key)? / 1000.0,
                "min_udp_rate_per_user_mbps" => min_rate = Some(parse_f64(value, key)?),
                "max_udp_rate_per_user_mbps" => max_rate = Some(parse_f64(value, key)?),
                other => return Err(SimError::UnknownKey(other.to_string())),
            }
        }
        match (min_rate, max_rate) {
            (Some(lo), Some(hi)) if lo != hi => {
                return Err(invalid("per-user traffic is constant-rate: min and max rates must match"))
            }
            (Some(r), _) | (None, Some(r)) => cfg.input_rate_mbps = r,
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self {
            steps_per_episode: steps,
            ..self.clone()
        }
    }
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

fn as_object<'a>(value: &'a Value, key: &str) -> Result<&'a serde_json::Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| invalid(format!("{key} must be an object")))
}

fn parse_f64(value: &Value, key: &str) -> Result<f64> {
    value
        .as_f64()
        .ok_or_else(|| invalid(format!("{key} must be a number")))
}

fn parse_count(value: &Value, key: &str) -> Result<usize> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| invalid(format!("{key} must be a nonnegative integer")))
}

fn parse_point(value: &Value, key: &str) -> Result<[f64; 3]> {
    let obj = as_object(value, key)?;
    let mut point = [0.0; 3];
    for (k, v) in obj {
        let slot = match k.as_str() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            other => return Err(SimError::UnknownKey(format!("{key}.{other}"))),
        };
        point[slot] = parse_f64(v, k)?;
    }
    Ok(point)
}

/// Per-link fluid queue of one UE.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkQueue {
    /// Mbit waiting to be served.
    pub backlog: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeState {
    pub position: [f64; 3],
    /// +1 moving towards max_x, -1 towards min_x.
    pub direction: f64,
    pub attached_ap: usize,
    pub wifi: LinkQueue,
    pub lte: LinkQueue,
    pub sr_wifi: f64,
}

impl UeState {
    pub fn sr_lte(&self) -> f64 {
        1.0 - self.sr_wifi
    }
}

/// One UE's report for one measurement interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub lc_lte: f64,
    pub lc_wifi: f64,
    pub tp_in: f64,
    pub tp_out_lte: f64,
    pub tp_out_wifi: f64,
    pub owd_lte: f64,
    pub owd_wifi: f64,
    pub owd_max_lte: f64,
    pub owd_max_wifi: f64,
    pub id_wifi: usize,
    pub sr_lte: f64,
    pub sr_wifi: f64,
    pub x: f64,
    pub y: f64,
    /// Mbit dropped on each link because the backlog exceeded the delay bound.
    pub dropped_lte: f64,
    pub dropped_wifi: f64,
}

/// Number of values a [`Measurement`] contributes to an observation row.
pub const MEASUREMENT_FEATURES: usize = 14;

impl Measurement {
    /// Observation row in the fixed column order
    /// `lc_LTE, lc_Wi-Fi, tp_in, tp_out_LTE, tp_out_Wi-Fi, owd_LTE, owd_Wi-Fi,
    /// owd_max_LTE, owd_max_Wi-Fi, id_Wi-Fi, sr_LTE, sr_Wi-Fi, x, y`.
    pub fn to_row(&self) -> [f64; MEASUREMENT_FEATURES] {
        [
            self.lc_lte,
            self.lc_wifi,
            self.tp_in,
            self.tp_out_lte,
            self.tp_out_wifi,
            self.owd_lte,
            self.owd_wifi,
            self.owd_max_lte,
            self.owd_max_wifi,
            self.id_wifi as f64,
            self.sr_lte,
            self.sr_wifi,
            self.x,
            self.y,
        ]
    }

    pub fn tp_out(&self) -> f64 {
        self.tp_out_lte + self.tp_out_wifi
    }

    pub fn lc_total(&self) -> f64 {
        self.lc_lte + self.lc_wifi
    }
}

/// Fluid bookkeeping of one (UE, link, interval), exposed for conservation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowRecord {
    pub arrivals: f64,
    pub served: f64,
    pub backlog_before: f64,
    pub backlog_after: f64,
    pub dropped: f64,
}

impl FlowRecord {
    /// `arrivals - served - (backlog_after - backlog_before) - dropped`.
    pub fn residual(&self) -> f64 {
        self.arrivals - self.served - (self.backlog_after - self.backlog_before) - self.dropped
    }
}

#[derive(Debug, Clone)]
pub struct IntervalOutcome {
    pub measurements: Vec<Measurement>,
    pub wifi_flows: Vec<FlowRecord>,
    pub lte_flows: Vec<FlowRecord>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    config: SimConfig,
    ues: Vec<UeState>,
    intervals: u64,
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Index of the closest AP; ties go to the lower index.
pub fn nearest_ap(position: &[f64; 3], aps: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, ap) in aps.iter().enumerate() {
        let d = distance(position, ap);
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    best
}

/// Per-UE PHY rate: `peak * min(1, (r0 / dist)^eta)`, floored at
/// [`MIN_PHY_RATE_MBPS`].
pub fn link_capacity(
    config: &SimConfig,
    ue_position: &[f64; 3],
    node_position: &[f64; 3],
    link: LinkType,
) -> f64 {
    let peak = config.peak_rate_mbps(link);
    let dist = distance(ue_position, node_position);
    let gain = if dist <= config.reference_distance_m {
        1.0
    } else {
        (config.reference_distance_m / dist).powf(config.pathloss_exponent)
    };
    (peak * gain.min(1.0)).max(MIN_PHY_RATE_MBPS)
}

/// Equal-airtime sharing: a UE gets its PHY rate divided by the number of
/// UEs attached to the same node. `attachment[i]` names UE `i`'s node.
pub fn shared_capacity(phy_rates: &[f64], attachment: &[usize]) -> Vec<f64> {
    let mut load: BTreeMap<usize, usize> = BTreeMap::new();
    for &node in attachment {
        *load.entry(node).or_default() += 1;
    }
    phy_rates
        .iter()
        .zip(attachment)
        .map(|(&rate, node)| rate / load[node] as f64)
        .collect()
}

/// Reflecting walk along x. Returns the new `(x, direction)`.
pub fn reflect_step(x: f64, direction: f64, step: f64, min_x: f64, max_x: f64) -> (f64, f64) {
    let mut x = x + direction * step;
    let mut direction = direction;
    let width = max_x - min_x;
    // A step can only overshoot by more than the whole range when speed*dt > width.
    for _ in 0..64 {
        if x > max_x {
            x = max_x - (x - max_x);
            direction = -1.0;
        } else if x < min_x {
            x = min_x + (min_x - x);
            direction = 1.0;
        } else {
            break;
        }
    }
    if width > 0.0 {
        x = x.clamp(min_x, max_x);
    }
    if x == min_x && direction < 0.0 {
        direction = 1.0;
    } else if x == max_x && direction > 0.0 {
        direction = -1.0;
    }
    (x, direction)
}

struct LinkStep {
    flow: FlowRecord,
    owd_start: f64,
    owd_end: f64,
    tp_out: f64,
}

fn queue_delay(config: &SimConfig, link: LinkType, backlog: f64, lc: f64, at_floor: bool) -> f64 {
    if at_floor {
        return config.dy_max_ms;
    }
    let owd = config.prop_delay_ms(link) + 1000.0 * backlog / lc;
    owd.min(config.dy_max_ms)
}

fn step_link(
    config: &SimConfig,
    link: LinkType,
    queue: &mut LinkQueue,
    share: f64,
    lc: f64,
    at_floor: bool,
) -> LinkStep {
    let dt = config.interval_s;
    let before = queue.backlog;
    let owd_start = queue_delay(config, link, before, lc, at_floor);
    let arrivals = share * config.input_rate_mbps * dt;
    let available = before + arrivals;
    let served = available.min(lc * dt);
    let mut after = available - served;
    let cap = lc * config.dy_max_ms / 1000.0;
    let mut dropped = 0.0;
    if after > cap {
        dropped = after - cap;
        after = cap;
    }
    queue.backlog = after;
    LinkStep {
        flow: FlowRecord {
            arrivals,
            served,
            backlog_before: before,
            backlog_after: after,
            dropped,
        },
        owd_start,
        owd_end: queue_delay(config, link, after, lc, at_floor),
        tp_out: served / dt,
    }
}

impl SimState {
    /// Places UEs uniformly on `[min_x, max_x]` from the config seed.
    pub fn init_episode(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [min_x, max_x] = config.user_x_range;
        let ues = (0..config.num_users)
            .map(|_| {
                let x = rng.random_range(min_x..=max_x);
                UeState::new(config, [x, config.user_y, config.user_z])
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            ues,
            intervals: 0,
        })
    }

    /// Starts from explicit UE x-positions instead of random placement.
    pub fn with_positions(config: &SimConfig, xs: &[f64]) -> Result<Self> {
        config.validate()?;
        if xs.len() != config.num_users {
            return Err(invalid("one position per UE is required"));
        }
        let [min_x, max_x] = config.user_x_range;
        if xs.iter().any(|&x| !(min_x..=max_x).contains(&x)) {
            return Err(invalid("UE position outside user_x_range"));
        }
        Ok(Self {
            config: config.clone(),
            ues: xs
                .iter()
                .map(|&x| UeState::new(config, [x, config.user_y, config.user_z]))
                .collect(),
            intervals: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn ues(&self) -> &[UeState] {
        &self.ues
    }

    pub fn ues_mut(&mut self) -> &mut [UeState] {
        &mut self.ues
    }

    pub fn intervals(&self) -> u64 {
        self.intervals
    }

    pub fn move_ues(&mut self, dt: f64) {
        let [min_x, max_x] = self.config.user_x_range;
        let step = self.config.user_speed * dt;
        for ue in &mut self.ues {
            let (x, dir) = reflect_step(ue.position[0], ue.direction, step, min_x, max_x);
            ue.position[0] = x;
            ue.direction = dir;
        }
    }

    /// Applies `splits` (Wi-Fi share per UE) for one interval.
    pub fn advance_interval(&mut self, splits: &[f64]) -> Result<IntervalOutcome> {
        let cfg = &self.config;
        if splits.len() != self.ues.len() {
            return Err(SimError::SplitCount {
                expected: self.ues.len(),
                actual: splits.len(),
            });
        }
        for (ue, &s) in splits.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(SimError::SplitOutOfRange { ue, value: s });
            }
        }

        for ue in &mut self.ues {
            ue.attached_ap = nearest_ap(&ue.position, &cfg.ap_locations);
        }
        let wifi_phy: Vec<f64> = self
            .ues
            .iter()
            .map(|ue| {
                link_capacity(cfg, &ue.position, &cfg.ap_locations[ue.attached_ap], LinkType::Wifi)
            })
            .collect();
        let lte_phy: Vec<f64> = self
            .ues
            .iter()
            .map(|ue| link_capacity(cfg, &ue.position, &cfg.enb_location, LinkType::Lte))
            .collect();
        let attachment: Vec<usize> = self.ues.iter().map(|ue| ue.attached_ap).collect();
        let wifi_lc = shared_capacity(&wifi_phy, &attachment);
        let lte_lc = shared_capacity(&lte_phy, &vec![0; self.ues.len()]);

        let mut measurements = Vec::with_capacity(self.ues.len());
        let mut wifi_flows = Vec::with_capacity(self.ues.len());
        let mut lte_flows = Vec::with_capacity(self.ues.len());
        for (i, ue) in self.ues.iter_mut().enumerate() {
            ue.sr_wifi = splits[i];
            let w = step_link(
                cfg,
                LinkType::Wifi,
                &mut ue.wifi,
                ue.sr_wifi,
                wifi_lc[i],
                wifi_phy[i] <= MIN_PHY_RATE_MBPS,
            );
            let l = step_link(
                cfg,
                LinkType::Lte,
                &mut ue.lte,
                1.0 - ue.sr_wifi,
                lte_lc[i],
                lte_phy[i] <= MIN_PHY_RATE_MBPS,
            );
            measurements.push(Measurement {
                lc_lte: lte_lc[i],
                lc_wifi: wifi_lc[i],
                tp_in: cfg.input_rate_mbps,
                tp_out_lte: l.tp_out,
                tp_out_wifi: w.tp_out,
                owd_lte: l.owd_end,
                owd_wifi: w.owd_end,
                owd_max_lte: l.owd_start.max(l.owd_end),
                owd_max_wifi: w.owd_start.max(w.owd_end),
                id_wifi: ue.attached_ap,
                sr_lte: 1.0 - ue.sr_wifi,
                sr_wifi: ue.sr_wifi,
                x: ue.position[0],
                y: ue.position[1],
                dropped_lte: l.flow.dropped,
                dropped_wifi: w.flow.dropped,
            });
            wifi_flows.push(w.flow);
            lte_flows.push(l.flow);
        }
        let dt = self.config.interval_s;
        self.move_ues(dt);
        self.intervals += 1;
        Ok(IntervalOutcome {
            measurements,
            wifi_flows,
            lte_flows,
        })
    }
}

impl UeState {
    fn new(config: &SimConfig, position: [f64; 3]) -> Self {
        Self {
            position,
            direction: 1.0,
            attached_ap: nearest_ap(&position, &config.ap_locations),
            wifi: LinkQueue::default(),
            lte: LinkQueue::default(),
            sr_wifi: 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_ue_config() -> SimConfig {
        SimConfig {
            num_users: 1,
            ..SimConfig::default()
        }
    }

    #[test]
    fn defaults_are_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = SimConfig::default().with_seed(5);
        let a = SimState::init_episode(&cfg).unwrap();
        let b = SimState::init_episode(&cfg).unwrap();
        assert_eq!(a.ues(), b.ues());
        for ue in a.ues() {
            assert!((0.0..=80.0).contains(&ue.position[0]));
            assert_eq!(ue.direction, 1.0);
            assert_eq!(ue.wifi.backlog, 0.0);
            assert_eq!(ue.sr_wifi, 0.5);
        }
    }

    #[test]
    fn nearest_ap_with_tie_break() {
        let aps = SimConfig::default().ap_locations;
        assert_eq!(nearest_ap(&[31.0, 0.0, 1.5], &aps), 0);
        assert_eq!(nearest_ap(&[49.0, 0.0, 1.5], &aps), 1);
        assert_eq!(nearest_ap(&[40.0, 0.0, 1.5], &aps), 0);
    }

    #[test]
    fn reflection_arithmetic() {
        let (x, d) = reflect_step(10.0, 1.0, 0.1, 0.0, 80.0);
        assert!((x - 10.1).abs() < 1e-12);
        assert_eq!(d, 1.0);
        let (x, d) = reflect_step(79.95, 1.0, 0.1, 0.0, 80.0);
        assert!((x - 79.95).abs() < 1e-9);
        assert_eq!(d, -1.0);
        let (x, d) = reflect_step(0.0, -1.0, 0.0, 0.0, 80.0);
        assert_eq!((x, d), (0.0, 1.0));
        let (x, d) = reflect_step(0.05, -1.0, 0.1, 0.0, 80.0);
        assert!((x - 0.05).abs() < 1e-9);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn capacity_formula() {
        let cfg = SimConfig::default();
        let ue = [0.0, 0.0, 0.0];
        assert_eq!(link_capacity(&cfg, &ue, &[5.0, 0.0, 0.0], LinkType::Wifi), 75.0);
        let c = link_capacity(&cfg, &ue, &[20.0, 0.0, 0.0], LinkType::Wifi);
        assert!((c - 18.75).abs() < 1e-12);
        let c = link_capacity(&cfg, &ue, &[1e6, 0.0, 0.0], LinkType::Lte);
        assert_eq!(c, MIN_PHY_RATE_MBPS);
    }

    #[test]
    fn airtime_sharing() {
        assert_eq!(shared_capacity(&[30.0], &[0]), vec![30.0]);
        assert_eq!(shared_capacity(&[40.0, 20.0], &[1, 1]), vec![20.0, 10.0]);
        assert_eq!(shared_capacity(&[37.0; 4], &[0; 4]), vec![9.25; 4]);
        assert_eq!(shared_capacity(&[40.0, 20.0, 10.0], &[0, 1, 0]), vec![20.0, 20.0, 5.0]);
    }

    #[test]
    fn uncongested_wifi_only() {
        let cfg = single_ue_config();
        let mut sim = SimState::with_positions(&cfg, &[30.0]).unwrap();
        let out = sim.advance_interval(&[1.0]).unwrap();
        let m = &out.measurements[0];
        assert!((m.tp_out_wifi - 6.0).abs() < 1e-12);
        assert_eq!(m.owd_wifi, cfg.prop_delay_wifi_ms);
        assert_eq!(m.tp_out_lte, 0.0);
        assert_eq!(m.sr_lte, 0.0);
    }

    #[test]
    fn congested_link_builds_delay() {
        // Far from both APs so that the Wi-Fi link runs at exactly 3 Mbps.
        let mut cfg = single_ue_config();
        cfg.ap_locations = vec![[0.0, 0.0, 0.0]];
        cfg.user_speed = 0.0;
        cfg.user_z = 0.0;
        // 75 * (10 / d)^2 = 3  =>  d = 50
        let mut sim = SimState::with_positions(&cfg, &[50.0]).unwrap();
        let out = sim.advance_interval(&[1.0]).unwrap();
        let f = out.wifi_flows[0];
        assert!((out.measurements[0].lc_wifi - 3.0).abs() < 1e-12);
        assert!((f.arrivals - 0.6).abs() < 1e-12);
        assert!((f.served - 0.3).abs() < 1e-12);
        assert!((f.backlog_after - 0.3).abs() < 1e-12);
        let owd = out.measurements[0].owd_wifi;
        assert!((owd - (cfg.prop_delay_wifi_ms + 100.0)).abs() < 1e-9);
        assert_eq!(out.measurements[0].owd_max_wifi, owd);

        let mut last = None;
        for _ in 0..200 {
            last = Some(sim.advance_interval(&[1.0]).unwrap());
        }
        let last = last.unwrap();
        let f = last.wifi_flows[0];
        assert!((f.backlog_after - 3.0).abs() < 1e-9);
        assert!((f.dropped - 0.3).abs() < 1e-9);
        assert_eq!(last.measurements[0].owd_wifi, cfg.dy_max_ms);
        assert!(f.residual().abs() < 1e-12);
    }

    #[test]
    fn phy_floor_reports_dy_max() {
        let mut cfg = single_ue_config();
        cfg.enb_location = [1e7, 0.0, 0.0];
        let mut sim = SimState::with_positions(&cfg, &[30.0]).unwrap();
        let out = sim.advance_interval(&[1.0]).unwrap();
        assert_eq!(out.measurements[0].owd_lte, cfg.dy_max_ms);
        assert_eq!(out.measurements[0].owd_max_lte, cfg.dy_max_ms);
    }

    #[test]
    fn rejects_bad_splits() {
        let mut sim = SimState::init_episode(&SimConfig::default()).unwrap();
        assert!(matches!(
            sim.advance_interval(&[0.5, 0.5, 1.2, 0.0]),
            Err(SimError::SplitOutOfRange { ue: 2, .. })
        ));
        assert!(matches!(
            sim.advance_interval(&[0.5]),
            Err(SimError::SplitCount { .. })
        ));
    }

    #[test]
    fn handover_follows_position() {
        let mut cfg = single_ue_config();
        cfg.user_speed = 100.0;
        let mut sim = SimState::with_positions(&cfg, &[39.0]).unwrap();
        let first = sim.advance_interval(&[0.5]).unwrap();
        assert_eq!(first.measurements[0].id_wifi, 0);
        // moved 10 m to x = 49
        let second = sim.advance_interval(&[0.5]).unwrap();
        assert_eq!(second.measurements[0].id_wifi, 1);
    }

    #[test]
    fn json_config_subset() {
        let text = r#"{
            "enb_locations": {"x": 40, "y": 0, "z": 3},
            "ap_locations": [{"x": 30, "y": 0, "z": 3}, {"x": 50, "y": 0, "z": 3}],
            "num_users": 4,
            "user_location_range": {"min_x": 0, "max_x": 80, "min_y": 0, "max_y": 0, "z": 1.5},
            "steps_per_episode": 3200,
            "random_seed": 128,
            "measurement_interval_ms": 100,
            "min_udp_rate_per_user_mbps": 6,
            "max_udp_rate_per_user_mbps": 6
        }"#;
        let cfg = SimConfig::from_json_str(text).unwrap();
        let expected = SimConfig::default().with_seed(128).with_steps(3200);
        assert_eq!(cfg, expected);
    }

    #[test]
    fn json_unknown_key_is_named() {
        let err = SimConfig::from_json_str(r#"{"num_users": 2, "transport_protocol": "tcp"}"#)
            .unwrap_err();
        match err {
            SimError::UnknownKey(k) => assert_eq!(k, "transport_protocol"),
            other => panic!("unexpected {other:?}"),
        }
        let err = SimConfig::from_json_str(r#"{"enb_locations": {"x": 1, "w": 2}}"#).unwrap_err();
        assert!(matches!(err, SimError::UnknownKey(k) if k == "enb_locations.w"));
    }

    #[test]
    fn json_rejects_invalid_values() {
        assert!(SimConfig::from_json_str(r#"{"num_users": 0}"#).is_err());
        assert!(SimConfig::from_json_str(
            r#"{"min_udp_rate_per_user_mbps": 2, "max_udp_rate_per_user_mbps": 6}"#
        )
        .is_err());
        assert!(SimConfig::from_json_str(
            r#"{"user_location_range": {"min_x": 10, "max_x": 5}}"#
        )
        .is_err());
    }
}
