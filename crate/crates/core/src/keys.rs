//! Fixed-width key sets over the 49-key keyboard.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of keys on the keyboard (MIDI 36..=84).
pub const NUM_KEYS: usize = 49;

/// Lowest MIDI note on the keyboard (C2).
pub const MIDI_LOW: u8 = 36;
/// Highest MIDI note on the keyboard (C6).
pub const MIDI_HIGH: u8 = 84;

const MASK: u64 = (1u64 << NUM_KEYS) - 1;

/// A set of key indices in `0..49`, stored as a bitmask.
///
/// Used for pressed keys, target keys and anything else that is a binary
/// vector over the keyboard.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct KeySet(u64);

impl KeySet {
    pub const EMPTY: KeySet = KeySet(0);

    pub fn from_bits(bits: u64) -> Self {
        KeySet(bits & MASK)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// Builds a set from key indices; indices `>= 49` are ignored.
    pub fn from_indices<I: IntoIterator<Item = usize>>(keys: I) -> Self {
        let mut s = KeySet::EMPTY;
        for k in keys {
            if k < NUM_KEYS {
                s.insert(k);
            }
        }
        s
    }

    pub fn from_bools(flags: &[bool]) -> Self {
        Self::from_indices(flags.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }

    pub fn insert(&mut self, key: usize) {
        debug_assert!(key < NUM_KEYS);
        self.0 |= 1u64 << key;
    }

    pub fn remove(&mut self, key: usize) {
        self.0 &= !(1u64 << key);
    }

    pub fn contains(self, key: usize) -> bool {
        key < NUM_KEYS && (self.0 >> key) & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: KeySet) -> KeySet {
        KeySet(self.0 & other.0)
    }

    pub fn difference(self, other: KeySet) -> KeySet {
        KeySet(self.0 & !other.0)
    }

    pub fn union(self, other: KeySet) -> KeySet {
        KeySet(self.0 | other.0)
    }

    /// True if two keys with consecutive indices are both in the set.
    pub fn has_adjacent_pair(self) -> bool {
        self.0 & (self.0 >> 1) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..NUM_KEYS).filter(move |k| (bits >> k) & 1 == 1)
    }

    pub fn to_indices(self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn to_bools(self) -> [bool; NUM_KEYS] {
        let mut out = [false; NUM_KEYS];
        for k in self.iter() {
            out[k] = true;
        }
        out
    }

    /// Shifts every key by `offset` indices, dropping keys that fall off the board.
    pub fn shifted(self, offset: isize) -> KeySet {
        if offset >= 0 {
            KeySet::from_bits(self.0 << offset as u32)
        } else {
            KeySet(self.0 >> (-offset) as u32)
        }
    }
}

impl fmt::Debug for KeySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for KeySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for KeySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let keys = Vec::<usize>::deserialize(d)?;
        if let Some(bad) = keys.iter().find(|&&k| k >= NUM_KEYS) {
            return Err(serde::de::Error::custom(format!("key index {bad} out of range")));
        }
        Ok(KeySet::from_indices(keys))
    }
}

/// Maps a MIDI note number onto a key index, if it is on the keyboard.
pub fn midi_to_key(note: u8) -> Option<usize> {
    (MIDI_LOW..=MIDI_HIGH)
        .contains(&note)
        .then(|| (note - MIDI_LOW) as usize)
}

pub fn key_to_midi(key: usize) -> u8 {
    debug_assert!(key < NUM_KEYS);
    MIDI_LOW + key as u8
}
