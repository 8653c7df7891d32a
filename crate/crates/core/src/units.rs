//! Conversions between SI (veh/m, m/s, veh/s) and traffic units
//! (veh/km, km/h, veh/h). Everything inside the crate is SI.

use serde::{Deserialize, Serialize};

const M_PER_KM: f64 = 1000.0;
const S_PER_H: f64 = 3600.0;
const KMH_PER_MS: f64 = 3.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Si,
    Traffic,
}

impl Units {
    pub fn density_to_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => density_from_per_km(x),
        }
    }

    pub fn velocity_to_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => velocity_from_kmh(x),
        }
    }

    pub fn flow_to_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => flow_from_per_h(x),
        }
    }

    pub fn density_from_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => density_to_per_km(x),
        }
    }

    pub fn velocity_from_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => velocity_to_kmh(x),
        }
    }

    pub fn flow_from_si(self, x: f64) -> f64 {
        match self {
            Units::Si => x,
            Units::Traffic => flow_to_per_h(x),
        }
    }
}

pub fn density_from_per_km(x: f64) -> f64 {
    x / M_PER_KM
}

pub fn density_to_per_km(x: f64) -> f64 {
    x * M_PER_KM
}

pub fn velocity_from_kmh(x: f64) -> f64 {
    x / KMH_PER_MS
}

pub fn velocity_to_kmh(x: f64) -> f64 {
    x * KMH_PER_MS
}

pub fn flow_from_per_h(x: f64) -> f64 {
    x / S_PER_H
}

pub fn flow_to_per_h(x: f64) -> f64 {
    x * S_PER_H
}
