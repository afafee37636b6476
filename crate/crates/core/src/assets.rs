//! Shipped activity and rule documents.

pub const PREPROCESS: &str = include_str!("../assets/activities/preprocess.yaml");
pub const WEATHER_MODEL: &str = include_str!("../assets/activities/weather_model.yaml");
pub const WILDFIRE: &str = include_str!("../assets/activities/wildfire.yaml");
pub const ACTIVITIES: [&str; 3] = [PREPROCESS, WEATHER_MODEL, WILDFIRE];

pub const WILDFIRE_RULES: &str = include_str!("../assets/rules/wildfire.yaml");

/// Sensor script for the wildfire incident.
pub const WILDFIRE_SCENARIO: &str = include_str!("../assets/scenarios/wildfire.scenario");
