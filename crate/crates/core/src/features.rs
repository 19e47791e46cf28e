//! Binary feature encoding of an [`Observation`].
//!
//! Five attributes per room, 100 bits in total. Bit index is
//! `room_index * 5 + attribute_index` with rooms in row-major order.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::env::{Observation, Role, RoomCoord, NUM_ROOMS};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const ATTRIBUTES_PER_ROOM: usize = 5;
pub const NUM_FEATURES: usize = NUM_ROOMS * ATTRIBUTES_PER_ROOM;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("feature index {0} out of range (0..{NUM_FEATURES})")]
    OutOfRange(usize),
    #[error("feature schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },
    #[error("feature vector does not describe a valid observation: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Explored,
    Rubble,
    Victim,
    MedicHere,
    EngineerHere,
}

impl Attribute {
    pub const ALL: [Attribute; ATTRIBUTES_PER_ROOM] = [
        Attribute::Explored,
        Attribute::Rubble,
        Attribute::Victim,
        Attribute::MedicHere,
        Attribute::EngineerHere,
    ];

    pub fn agent(role: Role) -> Attribute {
        match role {
            Role::Medic => Attribute::MedicHere,
            Role::Engineer => Attribute::EngineerHere,
        }
    }
}

/// Identifier of one of the 100 binary features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(u8);

impl FeatureId {
    pub fn new(index: usize) -> Result<Self, FeatureError> {
        if index < NUM_FEATURES {
            Ok(Self(index as u8))
        } else {
            Err(FeatureError::OutOfRange(index))
        }
    }

    pub fn of(room: RoomCoord, attribute: Attribute) -> Self {
        Self((room.index() * ATTRIBUTES_PER_ROOM + attribute as usize) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn room(self) -> RoomCoord {
        RoomCoord::from_index(self.index() / ATTRIBUTES_PER_ROOM).expect("feature id in range")
    }

    pub fn attribute(self) -> Attribute {
        Attribute::ALL[self.index() % ATTRIBUTES_PER_ROOM]
    }

    pub fn all() -> impl Iterator<Item = FeatureId> {
        (0..NUM_FEATURES).map(|i| FeatureId(i as u8))
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}@{}", self.0, self.attribute(), self.room())
    }
}

/// Inverse of the index formula.
pub fn feature_descriptor(index: usize) -> Result<(RoomCoord, Attribute), FeatureError> {
    let id = FeatureId::new(index)?;
    Ok((id.room(), id.attribute()))
}

/// 100 binary features packed into a `u128`. Serialises as a string of `0`/`1`
/// characters in feature-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    bits: u128,
    pub schema_version: u32,
}

impl FeatureVector {
    pub fn zeros() -> Self {
        Self {
            bits: 0,
            schema_version: FEATURE_SCHEMA_VERSION,
        }
    }

    pub fn get(&self, feature: FeatureId) -> bool {
        self.bits >> feature.index() & 1 == 1
    }

    pub fn set(&mut self, feature: FeatureId, value: bool) {
        let mask = 1u128 << feature.index();
        if value {
            self.bits |= mask;
        } else {
            self.bits &= !mask;
        }
    }

    pub fn bit(&self, index: usize) -> bool {
        index < NUM_FEATURES && self.bits >> index & 1 == 1
    }

    pub fn raw(&self) -> u128 {
        self.bits
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn check_schema(&self, expected: u32) -> Result<(), FeatureError> {
        if self.schema_version == expected {
            Ok(())
        } else {
            Err(FeatureError::SchemaMismatch {
                expected,
                found: self.schema_version,
            })
        }
    }

    pub fn to_bitstring(&self) -> String {
        (0..NUM_FEATURES).map(|i| if self.bit(i) { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str, schema_version: u32) -> Result<Self, FeatureError> {
        if s.len() != NUM_FEATURES {
            return Err(FeatureError::Invalid(format!("expected {NUM_FEATURES} bits, got {}", s.len())));
        }
        let mut bits = 0u128;
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => bits |= 1 << i,
                '0' => {}
                other => return Err(FeatureError::Invalid(format!("unexpected character '{other}'"))),
            }
        }
        Ok(Self { bits, schema_version })
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureVectorRepr {
    bits: String,
    schema_version: u32,
}

impl Serialize for FeatureVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        FeatureVectorRepr {
            bits: self.to_bitstring(),
            schema_version: self.schema_version,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = FeatureVectorRepr::deserialize(deserializer)?;
        FeatureVector::from_bitstring(&repr.bits, repr.schema_version).map_err(serde::de::Error::custom)
    }
}

pub fn encode_features(obs: &Observation) -> FeatureVector {
    let mut fv = FeatureVector::zeros();
    for room in RoomCoord::all() {
        let i = room.index();
        fv.set(FeatureId::of(room, Attribute::Explored), obs.explored[i]);
        fv.set(FeatureId::of(room, Attribute::Rubble), obs.known_rubble[i]);
        fv.set(FeatureId::of(room, Attribute::Victim), obs.known_victim[i]);
    }
    fv.set(FeatureId::of(obs.medic_pos, Attribute::MedicHere), true);
    fv.set(FeatureId::of(obs.engineer_pos, Attribute::EngineerHere), true);
    fv
}

pub fn decode_features(fv: &FeatureVector) -> Result<Observation, FeatureError> {
    fv.check_schema(FEATURE_SCHEMA_VERSION)?;
    let mut explored = [false; NUM_ROOMS];
    let mut known_rubble = [false; NUM_ROOMS];
    let mut known_victim = [false; NUM_ROOMS];
    let mut medic = Vec::new();
    let mut engineer = Vec::new();
    for room in RoomCoord::all() {
        let i = room.index();
        explored[i] = fv.get(FeatureId::of(room, Attribute::Explored));
        known_rubble[i] = fv.get(FeatureId::of(room, Attribute::Rubble));
        known_victim[i] = fv.get(FeatureId::of(room, Attribute::Victim));
        if fv.get(FeatureId::of(room, Attribute::MedicHere)) {
            medic.push(room);
        }
        if fv.get(FeatureId::of(room, Attribute::EngineerHere)) {
            engineer.push(room);
        }
    }
    let (&[medic_pos], &[engineer_pos]) = (medic.as_slice(), engineer.as_slice()) else {
        return Err(FeatureError::Invalid(format!(
            "expected exactly one medic and one engineer bit, found {} and {}",
            medic.len(),
            engineer.len()
        )));
    };
    let obs = Observation {
        explored,
        known_rubble,
        known_victim,
        medic_pos,
        engineer_pos,
    };
    obs.validate().map_err(|e| FeatureError::Invalid(e.to_string()))?;
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{new_world, observe, EnvConfig};

    fn c(x: u8, y: u8) -> RoomCoord {
        RoomCoord::new(x, y).unwrap()
    }

    #[test]
    fn descriptor_examples() {
        assert_eq!(feature_descriptor(0), Ok((c(0, 0), Attribute::Explored)));
        assert_eq!(feature_descriptor(99), Ok((c(3, 4), Attribute::EngineerHere)));
        // room = 53 / 5 = 10 -> (2, 2); attribute = 53 % 5 = 3
        assert_eq!(feature_descriptor(53), Ok((c(2, 2), Attribute::MedicHere)));
        assert_eq!(feature_descriptor(100), Err(FeatureError::OutOfRange(100)));
    }

    #[test]
    fn medic_bit_position() {
        let mut obs = observe(&new_world(&EnvConfig::default().with_seed(1)).unwrap());
        obs.explored[c(2, 4).index()] = true;
        obs.medic_pos = c(2, 4);
        let fv = encode_features(&obs);
        assert!(fv.bit((4 * 4 + 2) * 5 + 3));
    }

    #[test]
    fn rubble_bit_position() {
        let mut obs = observe(&new_world(&EnvConfig::default().with_seed(1)).unwrap());
        obs.explored[c(2, 2).index()] = true;
        obs.known_rubble[c(2, 2).index()] = true;
        obs.known_victim[c(2, 2).index()] = false;
        let fv = encode_features(&obs);
        assert!(fv.bit((2 * 4 + 2) * 5 + 1));
        assert_eq!(decode_features(&fv).unwrap(), obs);
    }

    #[test]
    fn exactly_one_bit_per_agent() {
        let obs = observe(&new_world(&EnvConfig::default().with_seed(9)).unwrap());
        let fv = encode_features(&obs);
        let count = |attr| RoomCoord::all().filter(|&r| fv.get(FeatureId::of(r, attr))).count();
        assert_eq!(count(Attribute::MedicHere), 1);
        assert_eq!(count(Attribute::EngineerHere), 1);
    }

    #[test]
    fn decode_rejects_bad_vectors() {
        assert!(matches!(decode_features(&FeatureVector::zeros()), Err(FeatureError::Invalid(_))));
        let mut fv = encode_features(&observe(&new_world(&EnvConfig::default()).unwrap()));
        fv.schema_version = 2;
        assert!(matches!(decode_features(&fv), Err(FeatureError::SchemaMismatch { .. })));
    }

    #[test]
    fn serde_uses_bitstring() {
        let obs = observe(&new_world(&EnvConfig::default().with_seed(5)).unwrap());
        let fv = encode_features(&obs);
        let json = serde_json::to_string(&fv).unwrap();
        assert!(json.contains(&fv.to_bitstring()));
        let back: FeatureVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fv);
    }
}
