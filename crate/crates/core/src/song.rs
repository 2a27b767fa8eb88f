//! Song ingestion: a Standard MIDI File subset reader/writer, the native
//! text song format, and discretization into per-control-step target sets.

use crate::keys::{key_to_midi, midi_to_key, KeySet, NUM_KEYS};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Control period of the policy (20 Hz).
pub const CONTROL_DT: f64 = 0.05;
/// Number of future control steps exposed to the policy.
pub const LOOKAHEAD_STEPS: usize = 5;

const MAX_TRACKS: usize = 16;
const WRITE_DIVISION: u16 = 480;
const WRITE_TEMPO_US: u32 = 500_000;

#[derive(Debug, Error, PartialEq)]
pub enum SongError {
    #[error("midi parse error at byte {offset}: {msg}")]
    Midi { offset: usize, msg: String },
    #[error("song text line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error("malformed event list: {0}")]
    Events(String),
    #[error("control period must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("step {t} out of range for timeline of length {len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub key: usize,
    pub on: bool,
    pub time: f64,
}

impl NoteEvent {
    pub fn on(key: usize, time: f64) -> Self {
        NoteEvent { key, on: true, time }
    }

    pub fn off(key: usize, time: f64) -> Self {
        NoteEvent { key, on: false, time }
    }
}

/// Canonical ordering: time, then releases before presses, then key.
fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.on.cmp(&b.on))
            .then(a.key.cmp(&b.key))
    });
}

/// A held key over the half-open interval `[on, off)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteInterval {
    pub key: usize,
    pub on: f64,
    pub off: f64,
}

/// Pairs on/off events into intervals, checking that every key alternates
/// on/off and starts with an on.
pub fn to_intervals(events: &[NoteEvent]) -> Result<Vec<NoteInterval>, SongError> {
    let mut sorted = events.to_vec();
    sort_events(&mut sorted);
    let mut open: [Option<f64>; NUM_KEYS] = [None; NUM_KEYS];
    let mut out = Vec::new();
    for ev in sorted {
        if ev.key >= NUM_KEYS {
            return Err(SongError::Events(format!("key index {} out of range", ev.key)));
        }
        if !(ev.time.is_finite() && ev.time >= 0.0) {
            return Err(SongError::Events(format!("invalid time {}", ev.time)));
        }
        match (ev.on, open[ev.key]) {
            (true, None) => open[ev.key] = Some(ev.time),
            (false, Some(on)) => {
                out.push(NoteInterval { key: ev.key, on, off: ev.time });
                open[ev.key] = None;
            }
            (true, Some(_)) => {
                return Err(SongError::Events(format!(
                    "key {} pressed twice without release at {}s",
                    ev.key, ev.time
                )))
            }
            (false, None) => {
                return Err(SongError::Events(format!(
                    "key {} released without press at {}s",
                    ev.key, ev.time
                )))
            }
        }
    }
    if let Some(k) = open.iter().position(Option::is_some) {
        return Err(SongError::Events(format!("key {k} never released")));
    }
    out.sort_by(|a, b| a.on.total_cmp(&b.on).then(a.key.cmp(&b.key)));
    Ok(out)
}

fn from_intervals(intervals: &[NoteInterval]) -> Vec<NoteEvent> {
    let mut events: Vec<NoteEvent> = intervals
        .iter()
        .flat_map(|iv| [NoteEvent::on(iv.key, iv.on), NoteEvent::off(iv.key, iv.off)])
        .collect();
    sort_events(&mut events);
    events
}

// ---------------------------------------------------------------------------
// Native text format: one `key_index on_time off_time` triple per line.
// ---------------------------------------------------------------------------

/// Parses the native text song format. Blank lines and `#` comments are ignored.
pub fn parse_song_text(text: &str) -> Result<Vec<NoteEvent>, SongError> {
    let mut intervals: Vec<(usize, NoteInterval)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SongError::Text { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let key: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad key index {:?}", fields[0])))?;
        if key >= NUM_KEYS {
            return Err(err(format!("key index {key} outside 0..{NUM_KEYS}")));
        }
        let on: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad on time {:?}", fields[1])))?;
        let off: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad off time {:?}", fields[2])))?;
        if !(on.is_finite() && off.is_finite() && on >= 0.0) {
            return Err(err("times must be finite and non-negative".into()));
        }
        if off <= on {
            return Err(err(format!("off time {off} not after on time {on}")));
        }
        intervals.push((line_no, NoteInterval { key, on, off }));
    }

    let mut by_key = intervals.clone();
    by_key.sort_by(|a, b| a.1.key.cmp(&b.1.key).then(a.1.on.total_cmp(&b.1.on)));
    for w in by_key.windows(2) {
        let (_, prev) = w[0];
        let (line, next) = w[1];
        if prev.key == next.key && next.on < prev.off {
            return Err(SongError::Text {
                line,
                msg: format!(
                    "key {} overlaps an earlier interval ending at {}",
                    next.key, prev.off
                ),
            });
        }
    }
    let ivs: Vec<NoteInterval> = intervals.into_iter().map(|(_, iv)| iv).collect();
    Ok(from_intervals(&ivs))
}

/// Renders events in the native text format (inverse of [`parse_song_text`]).
pub fn render_song_text(events: &[NoteEvent]) -> Result<String, SongError> {
    let mut out = String::new();
    for iv in to_intervals(events)? {
        out.push_str(&format!("{} {} {}\n", iv.key, iv.on, iv.off));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Standard MIDI File subset.
// ---------------------------------------------------------------------------

/// Result of reading a MIDI file.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiImport {
    pub events: Vec<NoteEvent>,
    /// Note events outside the 49-key window.
    pub dropped_out_of_range: usize,
    /// Note-ons still held at end of file, closed at the last event time.
    pub unmatched_note_ons: usize,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> SongError {
        SongError::Midi { offset: self.pos, msg: msg.into() }
    }

    fn u8(&mut self) -> Result<u8, SongError> {
        let b = *self.data.get(self.pos).ok_or_else(|| self.err("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], SongError> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!("need {n} bytes, {} left", self.data.len() - self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SongError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, SongError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, SongError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(SongError::Midi { offset: start, msg: "variable-length quantity longer than 4 bytes".into() })
    }
}

#[derive(Debug, Clone, Copy)]
enum Timing {
    PerQuarter(u16),
    Smpte { ticks_per_second: u32 },
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    tick: u64,
    note: u8,
    on: bool,
}

/// Reads a format 0/1 Standard MIDI File. Velocity is ignored; note-on with
/// velocity 0 counts as note-off.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiImport, SongError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.bytes(4).map_err(|_| r.err("missing MThd header"))? != b"MThd" {
        return Err(SongError::Midi { offset: 0, msg: "missing MThd header".into() });
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return Err(r.err(format!("header length {hlen} < 6")));
    }
    let format_pos = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()? as usize;
    let division = r.u16()?;
    r.bytes(hlen - 6)?;
    if format > 1 {
        return Err(SongError::Midi { offset: format_pos, msg: format!("unsupported SMF format {format}") });
    }
    if ntracks > MAX_TRACKS {
        return Err(SongError::Midi {
            offset: format_pos + 2,
            msg: format!("{ntracks} tracks exceeds the supported maximum of {MAX_TRACKS}"),
        });
    }
    let timing = if division & 0x8000 != 0 {
        let fps = -((division >> 8) as u8 as i8) as i32;
        let tpf = (division & 0xff) as u32;
        if fps <= 0 || tpf == 0 {
            return Err(SongError::Midi { offset: format_pos + 4, msg: "invalid SMPTE division".into() });
        }
        Timing::Smpte { ticks_per_second: fps as u32 * tpf }
    } else {
        if division == 0 {
            return Err(SongError::Midi { offset: format_pos + 4, msg: "zero ticks per quarter".into() });
        }
        Timing::PerQuarter(division)
    };

    let mut notes: Vec<RawNote> = Vec::new();
    let mut tempos: Vec<(u64, u32)> = Vec::new();
    let mut last_tick: u64 = 0;
    let mut tracks_read = 0;
    while tracks_read < ntracks {
        let chunk_pos = r.pos;
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            r.bytes(len)?;
            continue;
        }
        if r.pos + len > bytes.len() {
            return Err(SongError::Midi {
                offset: chunk_pos,
                msg: format!("track chunk length {len} runs past end of file"),
            });
        }
        let end = r.pos + len;
        let mut tick: u64 = 0;
        let mut running: Option<u8> = None;
        while r.pos < end {
            tick += r.vlq()? as u64;
            let status_pos = r.pos;
            let first = r.u8()?;
            let (status, first_data) = if first & 0x80 != 0 {
                (first, None)
            } else {
                let s = running.ok_or_else(|| SongError::Midi {
                    offset: status_pos,
                    msg: "data byte without running status".into(),
                })?;
                (s, Some(first))
            };
            match status {
                0xFF => {
                    running = None;
                    let kind = r.u8()?;
                    let len = r.vlq()? as usize;
                    let data = r.bytes(len)?;
                    match kind {
                        0x51 => {
                            if len != 3 {
                                return Err(SongError::Midi { offset: status_pos, msg: "tempo meta must carry 3 bytes".into() });
                            }
                            let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            if us == 0 {
                                return Err(SongError::Midi { offset: status_pos, msg: "zero tempo".into() });
                            }
                            tempos.push((tick, us));
                        }
                        0x2F => {
                            last_tick = last_tick.max(tick);
                            break;
                        }
                        _ => {}
                    }
                }
                0xF0 | 0xF7 => {
                    running = None;
                    let len = r.vlq()? as usize;
                    r.bytes(len)?;
                }
                0x80..=0xEF => {
                    running = Some(status);
                    let nbytes = if matches!(status & 0xF0, 0xC0 | 0xD0) { 1 } else { 2 };
                    let mut data = [0u8; 2];
                    let mut idx = 0;
                    if let Some(d) = first_data {
                        data[0] = d;
                        idx = 1;
                    }
                    while idx < nbytes {
                        data[idx] = r.u8()?;
                        idx += 1;
                    }
                    if data[..nbytes].iter().any(|b| b & 0x80 != 0) {
                        return Err(SongError::Midi { offset: status_pos, msg: "status byte inside channel message".into() });
                    }
                    match status & 0xF0 {
                        0x90 => notes.push(RawNote { tick, note: data[0], on: data[1] > 0 }),
                        0x80 => notes.push(RawNote { tick, note: data[0], on: false }),
                        _ => {}
                    }
                    last_tick = last_tick.max(tick);
                }
                other => {
                    return Err(SongError::Midi { offset: status_pos, msg: format!("unsupported status byte 0x{other:02X}") });
                }
            }
        }
        r.pos = end;
        tracks_read += 1;
    }

    tempos.sort_by_key(|&(t, _)| t);
    let to_seconds = |tick: u64| -> f64 {
        match timing {
            Timing::Smpte { ticks_per_second } => tick as f64 / ticks_per_second as f64,
            Timing::PerQuarter(div) => {
                // Integrate tick * tempo exactly, divide once.
                let mut num: u128 = 0;
                let mut prev_tick = 0u64;
                let mut tempo = WRITE_TEMPO_US as u128;
                for &(t, us) in &tempos {
                    if t >= tick {
                        break;
                    }
                    num += (t - prev_tick) as u128 * tempo;
                    prev_tick = t;
                    tempo = us as u128;
                }
                num += (tick - prev_tick) as u128 * tempo;
                num as f64 / (div as f64 * 1e6)
            }
        }
    };

    notes.sort_by(|a, b| a.tick.cmp(&b.tick).then(a.on.cmp(&b.on)).then(a.note.cmp(&b.note)));
    let mut dropped = 0;
    let mut held = [false; NUM_KEYS];
    let mut events = Vec::new();
    for n in &notes {
        let Some(key) = midi_to_key(n.note) else {
            dropped += 1;
            continue;
        };
        let t = to_seconds(n.tick);
        if n.on && !held[key] {
            held[key] = true;
            events.push(NoteEvent::on(key, t));
        } else if !n.on && held[key] {
            held[key] = false;
            events.push(NoteEvent::off(key, t));
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} note events outside the 49-key window");
    }
    let end_time = to_seconds(last_tick);
    let mut unmatched = 0;
    for (key, h) in held.iter().enumerate() {
        if *h {
            unmatched += 1;
            events.push(NoteEvent::off(key, end_time));
        }
    }
    if unmatched > 0 {
        log::warn!("{unmatched} note-ons without note-off closed at {end_time}s");
    }
    sort_events(&mut events);
    Ok(MidiImport { events, dropped_out_of_range: dropped, unmatched_note_ons: unmatched })
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Writes events as a format-0 SMF at 120 bpm with 480 ticks per quarter.
pub fn write_midi(events: &[NoteEvent]) -> Result<Vec<u8>, SongError> {
    let intervals = to_intervals(events)?;
    let ticks_per_second = WRITE_DIVISION as f64 * 1e6 / WRITE_TEMPO_US as f64;
    let mut evs: Vec<(u64, bool, usize)> = Vec::new();
    for iv in &intervals {
        evs.push(((iv.on * ticks_per_second).round() as u64, true, iv.key));
        evs.push(((iv.off * ticks_per_second).round() as u64, false, iv.key));
    }
    evs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut track = Vec::new();
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x51, 0x03]);
    track.extend_from_slice(&WRITE_TEMPO_US.to_be_bytes()[1..]);
    let mut prev = 0u64;
    for (tick, on, key) in evs {
        let delta = u32::try_from(tick - prev)
            .map_err(|_| SongError::Events("song too long for MIDI delta time".into()))?;
        push_vlq(&mut track, delta);
        prev = tick;
        let note = key_to_midi(key);
        if on {
            track.extend_from_slice(&[0x90, note, 64]);
        } else {
            track.extend_from_slice(&[0x80, note, 0]);
        }
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_DIVISION.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Timeline.
// ---------------------------------------------------------------------------

/// Per-control-step target key sets for one song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongTimeline {
    pub name: String,
    pub dt_control: f64,
    steps: Vec<KeySet>,
}

impl SongTimeline {
    pub fn from_steps(name: impl Into<String>, dt_control: f64, steps: Vec<KeySet>) -> Self {
        assert!(!steps.is_empty(), "timeline needs at least one step");
        SongTimeline { name: name.into(), dt_control, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[KeySet] {
        &self.steps
    }

    /// Targets at step `t`; steps past the end are empty.
    pub fn targets(&self, t: usize) -> KeySet {
        self.steps.get(t).copied().unwrap_or(KeySet::EMPTY)
    }

    /// Targets at steps `t+1 ..= t+horizon`, padded with empty sets past the end.
    pub fn lookahead(&self, t: usize, horizon: usize) -> Result<Vec<KeySet>, SongError> {
        if t >= self.steps.len() {
            return Err(SongError::StepOutOfRange { t, len: self.steps.len() });
        }
        Ok((1..=horizon).map(|r| self.targets(t + r)).collect())
    }

    /// Reconstructs note events: each maximal run of consecutive targeted
    /// steps becomes one interval `[start·dt, end·dt)`.
    pub fn to_events(&self) -> Vec<NoteEvent> {
        let dt = self.dt_control;
        let mut intervals = Vec::new();
        for key in 0..NUM_KEYS {
            let mut start: Option<usize> = None;
            for t in 0..=self.steps.len() {
                let on = self.targets(t).contains(key);
                match (on, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        intervals.push(NoteInterval { key, on: s as f64 * dt, off: t as f64 * dt });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        from_intervals(&intervals)
    }

    /// Number of (step, key) targets over the whole song.
    pub fn total_targets(&self) -> usize {
        self.steps.iter().map(|s| s.len()).sum()
    }
}

/// Discretizes events at control period `dt`. Step `t` targets key `k` iff the
/// step midpoint `(t + 0.5)·dt` lies in one of `k`'s `[on, off)` intervals.
/// The timeline ends with one all-off terminal step.
pub fn discretize(events: &[NoteEvent], dt: f64, name: &str) -> Result<SongTimeline, SongError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SongError::InvalidDt(dt));
    }
    let intervals = to_intervals(events)?;
    let last_off = intervals.iter().map(|iv| iv.off).fold(0.0f64, f64::max);
    // Tolerate representation error in last_off / dt (e.g. 4.0 / 0.05).
    let ratio = last_off / dt;
    let body = if (ratio - ratio.round()).abs() < 1e-9 { ratio.round() } else { ratio.ceil() } as usize;
    let mut steps = vec![KeySet::EMPTY; body + 1];
    for iv in &intervals {
        let first = ((iv.on / dt) - 0.5).ceil().max(0.0) as usize;
        for (t, step) in steps.iter_mut().enumerate().skip(first.saturating_sub(1)) {
            let mid = (t as f64 + 0.5) * dt;
            if mid >= iv.off {
                break;
            }
            if mid >= iv.on {
                step.insert(iv.key);
            }
        }
    }
    Ok(SongTimeline { name: name.to_string(), dt_control: dt, steps })
}

/// Loads a song from a `.mid`/`.midi` file or the native text format.
pub fn load_events(path: &Path) -> Result<Vec<NoteEvent>, SongError> {
    let io = |e: std::io::Error| SongError::Io { path: path.display().to_string(), msg: e.to_string() };
    let is_midi = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
    if is_midi {
        Ok(parse_midi(&std::fs::read(path).map_err(io)?)?.events)
    } else {
        parse_song_text(&std::fs::read_to_string(path).map_err(io)?)
    }
}

/// Loads and discretizes a song file at the 20 Hz control rate.
pub fn load_timeline(path: &Path) -> Result<SongTimeline, SongError> {
    let events = load_events(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("song");
    discretize(&events, CONTROL_DT, name)
}

/// Song fixtures checked into the repository.
pub mod fixtures {
    use super::*;

    pub const ONE_KEY: &str = include_str!("../songs/one_key.txt");
    pub const C_MAJOR_SCALE: &str = include_str!("../songs/c_major_scale.txt");
    pub const D_MAJOR_SCALE: &str = include_str!("../songs/d_major_scale.txt");
    pub const TWINKLE: &str = include_str!("../songs/twinkle_twinkle.txt");
    pub const CHORD_PROGRESSION: &str = include_str!("../songs/chord_progression.txt");

    /// The four evaluation songs, by name.
    pub const SONGS: [(&str, &str); 4] = [
        ("twinkle_twinkle", TWINKLE),
        ("c_major_scale", C_MAJOR_SCALE),
        ("d_major_scale", D_MAJOR_SCALE),
        ("chord_progression", CHORD_PROGRESSION),
    ];

    pub fn timeline(name: &str, text: &str) -> SongTimeline {
        let events = parse_song_text(text).expect("fixture parses");
        discretize(&events, CONTROL_DT, name).expect("fixture discretizes")
    }

    pub fn by_name(name: &str) -> Option<SongTimeline> {
        if name == "one_key" {
            return Some(timeline(name, ONE_KEY));
        }
        SONGS.iter().find(|(n, _)| *n == name).map(|(n, t)| timeline(n, t))
    }
}
