//! Camera-node energy budget and duty-cycle simulation.
//!
//! Closed-form estimates work in mAh/day. The simulator keeps charge as an
//! integer number of picocoulombs so every debit and credit is exact and the
//! ledger balances to the last unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::change::{detect_change, preprocess, ChangeParams, GrayFrame};

/// Days per month used when reporting lifetimes.
pub const DAYS_PER_MONTH: f64 = 30.44;
const SECONDS_PER_DAY: u64 = 86_400;
/// Picocoulombs per mAh.
const PC_PER_MAH: f64 = 3.6e12;
/// Picoamperes per mA.
const PA_PER_MA: f64 = 1e9;

/// Solar power density at 500 lux, µW/cm².
pub const SOLAR_DENSITY_500_LUX: f64 = 13.0;
/// Harvester output at 0 dBm input, mA.
pub const RF_CURRENT_0_DBM: f64 = 0.2;
/// Harvester output at -8 dBm input, mA.
pub const RF_CURRENT_MINUS_8_DBM: f64 = 0.018;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeEnergyConfig {
    /// Average current while awake, mA.
    pub active_current: f64,
    /// Awake time spent capturing and comparing, s.
    pub capture_seconds: f64,
    /// Awake time spent uploading, s.
    pub transfer_seconds: f64,
    pub wakes_per_day: u32,
    /// mA, drawn around the clock.
    pub hibernation_current: f64,
    /// mAh.
    pub battery_capacity: f64,
    /// V.
    pub supply_voltage: f64,
}

impl Default for NodeEnergyConfig {
    fn default() -> Self {
        Self {
            active_current: 243.2,
            capture_seconds: 3.5,
            transfer_seconds: 8.5,
            wakes_per_day: 2,
            hibernation_current: 0.006,
            battery_capacity: 1500.0,
            supply_voltage: 3.3,
        }
    }
}

impl NodeEnergyConfig {
    pub fn active_seconds_per_wake(&self) -> f64 {
        self.capture_seconds + self.transfer_seconds
    }

    /// The same node with uploads costing nothing.
    pub fn without_transfer(&self) -> Self {
        Self { transfer_seconds: 0.0, ..*self }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("active_current", self.active_current),
            ("capture_seconds", self.capture_seconds),
            ("transfer_seconds", self.transfer_seconds),
            ("hibernation_current", self.hibernation_current),
            ("battery_capacity", self.battery_capacity),
            ("supply_voltage", self.supply_voltage),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.supply_voltage == 0.0 {
            return Err("supply_voltage must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarvestSource {
    Solar {
        /// cm².
        cell_area: f64,
        /// µW/cm².
        power_density: f64,
        /// Power-management conversion efficiency in (0, 1].
        pmic_efficiency: f64,
    },
    Rf {
        /// Continuous harvester output, mA.
        output_current: f64,
    },
}

impl HarvestSource {
    /// 52 x 27 mm cell under 500 lux with a 70% efficient converter.
    pub fn reference_solar() -> Self {
        Self::solar_at_lux(500.0)
    }

    /// Reference cell with the power density scaled linearly from 500 lux.
    pub fn solar_at_lux(lux: f64) -> Self {
        HarvestSource::Solar {
            cell_area: 5.2 * 2.7,
            power_density: SOLAR_DENSITY_500_LUX * lux / 500.0,
            pmic_efficiency: 0.7,
        }
    }

    pub fn rf_minus_8_dbm() -> Self {
        HarvestSource::Rf { output_current: RF_CURRENT_MINUS_8_DBM }
    }

    /// Average current delivered to the supply rail, mA.
    pub fn current_ma(&self, config: &NodeEnergyConfig) -> f64 {
        match *self {
            HarvestSource::Solar { cell_area, power_density, pmic_efficiency } => {
                cell_area * power_density * pmic_efficiency / (config.supply_voltage * 1000.0)
            }
            HarvestSource::Rf { output_current } => output_current,
        }
    }

    pub fn daily_mah(&self, config: &NodeEnergyConfig) -> f64 {
        self.current_ma(config) * 24.0
    }
}

/// mAh drawn per day.
pub fn daily_consumption(config: &NodeEnergyConfig) -> f64 {
    f64::from(config.wakes_per_day) * config.active_current * config.active_seconds_per_wake() / 3600.0
        + config.hibernation_current * 24.0
}

/// mAh credited per day by all sources.
pub fn harvest_offset(sources: &[HarvestSource], config: &NodeEnergyConfig) -> f64 {
    sources.iter().fold(0.0, |acc, s| acc + s.daily_mah(config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryLife {
    Months(f64),
    Unbounded,
}

impl BatteryLife {
    pub fn months(&self) -> Option<f64> {
        match self {
            BatteryLife::Months(m) => Some(*m),
            BatteryLife::Unbounded => None,
        }
    }
}

impl std::fmt::Display for BatteryLife {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatteryLife::Months(m) => write!(f, "{m:.2} months"),
            BatteryLife::Unbounded => f.write_str("unbounded"),
        }
    }
}

pub fn battery_life(config: &NodeEnergyConfig, sources: &[HarvestSource]) -> BatteryLife {
    let net = daily_consumption(config) - harvest_offset(sources, config);
    if net <= 0.0 {
        BatteryLife::Unbounded
    } else {
        BatteryLife::Months(config.battery_capacity / net / DAYS_PER_MONTH)
    }
}

/// Extra months gained by adding `sources`; `None` when life becomes unbounded.
pub fn life_extension(config: &NodeEnergyConfig, sources: &[HarvestSource]) -> Option<f64> {
    let base = battery_life(config, &[]).months()?;
    battery_life(config, sources).months().map(|m| m - base)
}

/// Supplies the frame captured at each wake.
pub trait SceneFeed {
    fn frame(&mut self, wake: u64) -> GrayFrame;
}

/// The same scene at every wake.
#[derive(Debug, Clone)]
pub struct ConstantScene(pub GrayFrame);

impl SceneFeed for ConstantScene {
    fn frame(&mut self, _wake: u64) -> GrayFrame {
        self.0.clone()
    }
}

/// Two scenes taking turns, so every wake sees a change.
#[derive(Debug, Clone)]
pub struct AlternatingScene(pub GrayFrame, pub GrayFrame);

impl SceneFeed for AlternatingScene {
    fn frame(&mut self, wake: u64) -> GrayFrame {
        if wake % 2 == 0 { self.0.clone() } else { self.1.clone() }
    }
}

/// Seeded scene that is replaced by fresh noise with probability
/// `change_probability` at each wake.
#[derive(Debug, Clone)]
pub struct RandomScene {
    rng: ChaCha8Rng,
    width: usize,
    height: usize,
    change_probability: f64,
    current: Option<GrayFrame>,
}

impl RandomScene {
    pub fn new(seed: u64, width: usize, height: usize, change_probability: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), width, height, change_probability, current: None }
    }

    fn fresh(&mut self) -> GrayFrame {
        let base: f32 = self.rng.gen_range(20.0..235.0);
        let pixels = (0..self.width * self.height)
            .map(|_| (base + self.rng.gen_range(-20.0f32..20.0)).clamp(0.0, 255.0))
            .collect();
        GrayFrame::new(self.width, self.height, pixels).expect("sized to match")
    }
}

impl SceneFeed for RandomScene {
    fn frame(&mut self, _wake: u64) -> GrayFrame {
        let replace = self.current.is_none() || self.rng.gen_bool(self.change_probability);
        if replace {
            self.current = Some(self.fresh());
        }
        self.current.clone().expect("set above")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SceneSpec {
    Constant,
    Alternating,
    Random { seed: u64, change_probability: f64 },
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::Random { seed: 0, change_probability: 0.5 }
    }
}

impl SceneSpec {
    /// Builds the feed on `width x height` frames.
    pub fn build(&self, width: usize, height: usize) -> Box<dyn SceneFeed> {
        let flat = |v: f32| GrayFrame::filled(width, height, v);
        match *self {
            SceneSpec::Constant => Box::new(ConstantScene(flat(120.0))),
            SceneSpec::Alternating => Box::new(AlternatingScene(flat(60.0), flat(200.0))),
            SceneSpec::Random { seed, change_probability } => {
                Box::new(RandomScene::new(seed, width, height, change_probability))
            }
        }
    }
}

/// Live node state. Charge is in picocoulombs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub reference: Option<GrayFrame>,
    pub charge_pc: i64,
    pub capacity_pc: i64,
    pub time_s: u64,
    pub wakes: u64,
    pub transfers: u64,
    pub changes: u64,
}

impl NodeState {
    pub fn charge_mah(&self) -> f64 {
        self.charge_pc as f64 / PC_PER_MAH
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UploadEvent {
    pub time_s: u64,
    pub wake: u64,
    pub changed_fraction: f64,
}

/// One line of the per-day ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: u64,
    pub consumed_mah: f64,
    pub harvested_mah: f64,
    pub spilled_mah: f64,
    pub charge_mah: f64,
    pub wakes: u64,
    pub transfers: u64,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub days: Vec<DayRecord>,
    pub uploads: Vec<UploadEvent>,
    pub state: NodeState,
    pub initial_charge_pc: i64,
    pub debited_pc: i64,
    pub credited_pc: i64,
    pub spilled_pc: i64,
    /// When the charge ran out, seconds from the start.
    pub depleted_at_s: Option<u64>,
}

impl SimulationTrace {
    pub fn depleted_months(&self) -> Option<f64> {
        self.depleted_at_s
            .map(|s| s as f64 / SECONDS_PER_DAY as f64 / DAYS_PER_MONTH)
    }

    /// `initial - debits + credits == final`, exactly.
    pub fn balances(&self) -> bool {
        self.initial_charge_pc - self.debited_pc + self.credited_pc == self.state.charge_pc
    }
}

fn pc(milliamps: f64, seconds: f64) -> i64 {
    (milliamps * PA_PER_MA * seconds).round() as i64
}

struct Ledger {
    debited: i64,
    credited: i64,
    spilled: i64,
}

impl Ledger {
    fn debit(&mut self, state: &mut NodeState, amount: i64) {
        let taken = amount.min(state.charge_pc.max(0));
        state.charge_pc -= taken;
        self.debited += taken;
    }

    fn credit(&mut self, state: &mut NodeState, amount: i64) {
        let room = state.capacity_pc - state.charge_pc;
        let taken = amount.min(room);
        state.charge_pc += taken;
        self.credited += taken;
        self.spilled += amount - taken;
    }
}

/// Runs the wake / capture / compare / upload / hibernate cycle for up to
/// `days` days, halting as soon as the battery is empty.
///
/// Wakes are evenly spaced over each day. Hibernation current and harvest
/// are applied continuously between events. The first wake only stores the
/// reference frame; later wakes upload, and replace the reference, when the
/// frame differs from it.
pub fn simulate_node(
    days: u64,
    feed: &mut dyn SceneFeed,
    config: &NodeEnergyConfig,
    sources: &[HarvestSource],
    change: &ChangeParams,
) -> SimulationTrace {
    let capacity_pc = (config.battery_capacity * PC_PER_MAH).round() as i64;
    let mut state = NodeState {
        reference: None,
        charge_pc: capacity_pc,
        capacity_pc,
        time_s: 0,
        wakes: 0,
        transfers: 0,
        changes: 0,
    };
    let mut trace = SimulationTrace {
        days: Vec::new(),
        uploads: Vec::new(),
        state: state.clone(),
        initial_charge_pc: capacity_pc,
        debited_pc: 0,
        credited_pc: 0,
        spilled_pc: 0,
        depleted_at_s: None,
    };
    if capacity_pc <= 0 {
        trace.depleted_at_s = Some(0);
        return trace;
    }

    let drain_per_s = pc(config.hibernation_current, 1.0);
    let harvest_per_s: i64 = sources.iter().map(|s| pc(s.current_ma(config), 1.0)).sum();
    let capture_cost = pc(config.active_current, config.capture_seconds);
    let transfer_cost = pc(config.active_current, config.transfer_seconds);
    let wakes = u64::from(config.wakes_per_day);
    let mut ledger = Ledger { debited: 0, credited: 0, spilled: 0 };

    'days: for day in 0..days {
        let day_start = day * SECONDS_PER_DAY;
        let before = (ledger.debited, ledger.credited, ledger.spilled);
        let (wakes_before, transfers_before) = (state.wakes, state.transfers);
        let mut events: Vec<u64> = (0..wakes).map(|k| day_start + k * SECONDS_PER_DAY / wakes.max(1)).collect();
        events.push(day_start + SECONDS_PER_DAY);
        for (i, &t) in events.iter().enumerate() {
            let dt = (t - state.time_s) as i64;
            ledger.debit(&mut state, drain_per_s * dt);
            ledger.credit(&mut state, harvest_per_s * dt);
            state.time_s = t;
            if state.charge_pc <= 0 {
                trace.depleted_at_s = Some(t);
                break 'days;
            }
            if i == events.len() - 1 {
                break;
            }

            state.wakes += 1;
            let frame = preprocess(&feed.frame(state.wakes - 1), change);
            ledger.debit(&mut state, capture_cost);
            match state.reference.take() {
                None => state.reference = Some(frame),
                Some(reference) => {
                    let outcome = detect_change(&reference, &frame, change)
                        .expect("scene feed keeps a fixed frame size");
                    if outcome.changed {
                        state.changes += 1;
                        state.transfers += 1;
                        ledger.debit(&mut state, transfer_cost);
                        trace.uploads.push(UploadEvent {
                            time_s: t,
                            wake: state.wakes - 1,
                            changed_fraction: outcome.changed_fraction,
                        });
                        state.reference = Some(frame);
                    } else {
                        state.reference = Some(reference);
                    }
                }
            }
            if state.charge_pc <= 0 {
                trace.depleted_at_s = Some(t);
                break 'days;
            }
        }
        trace.days.push(DayRecord {
            day,
            consumed_mah: (ledger.debited - before.0) as f64 / PC_PER_MAH,
            harvested_mah: (ledger.credited - before.1) as f64 / PC_PER_MAH,
            spilled_mah: (ledger.spilled - before.2) as f64 / PC_PER_MAH,
            charge_mah: state.charge_mah(),
            wakes: state.wakes - wakes_before,
            transfers: state.transfers - transfers_before,
        });
    }

    trace.debited_pc = ledger.debited;
    trace.credited_pc = ledger.credited;
    trace.spilled_pc = ledger.spilled;
    trace.state = state;
    trace
}

/// Everything the power subcommand reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub node: NodeEnergyConfig,
    pub sources: Vec<HarvestSource>,
    pub days: u64,
    pub scene: SceneSpec,
    pub frame_width: usize,
    pub frame_height: usize,
    pub change: ChangeParams,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            node: NodeEnergyConfig::default(),
            sources: Vec::new(),
            days: 365,
            scene: SceneSpec::default(),
            frame_width: 160,
            frame_height: 120,
            change: ChangeParams::default(),
        }
    }
}
