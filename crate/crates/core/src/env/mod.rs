//! Discrete-time EV-charging environment.

mod scenario;
mod sim;

pub use scenario::{
    generate_scenario, ArrivalPeak, ArrivalProcess, ChargingSession, EvModel, GeneralizationShift, Scenario,
    ScenarioConfig, SocArrival, StayDuration, SCENARIO_FORMAT_VERSION,
};
pub use sim::{action_mask, step, ActionVector, Departure, EvChargingEnv, RewardBreakdown, SimState, StepOutcome};
