//! Line-delimited JSON bridge to an external plant.
//!
//! Host to device: `{"t": <int>, "cmd": [13 floats]}`. Device to host:
//! `{"t": <int>, "keys": [indices], "joints": [13 floats]}` with `joints`
//! optional. A message with `t = 0` homes the plant.

use super::plant::{PlantBackend, PlantError, PlantReading};
use crate::keys::KeySet;
use crate::physics::NUM_JOINTS;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

pub const DEFAULT_DEADLINE: Duration = Duration::from_millis(25);
pub const MAX_CONSECUTIVE_MISSES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostMessage {
    pub t: u64,
    pub cmd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMessage {
    pub t: u64,
    pub keys: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<f64>>,
}

fn protocol(line: &str, msg: impl Into<String>) -> PlantError {
    PlantError::Protocol { line: line.to_string(), msg: msg.into() }
}

pub fn parse_host_line(line: &str) -> Result<HostMessage, PlantError> {
    let m: HostMessage = serde_json::from_str(line.trim()).map_err(|e| protocol(line, e.to_string()))?;
    if m.cmd.len() != NUM_JOINTS {
        return Err(protocol(line, format!("cmd has {} entries, expected {NUM_JOINTS}", m.cmd.len())));
    }
    Ok(m)
}

pub fn parse_device_line(line: &str) -> Result<DeviceMessage, PlantError> {
    let m: DeviceMessage = serde_json::from_str(line.trim()).map_err(|e| protocol(line, e.to_string()))?;
    if let Some(k) = m.keys.iter().find(|&&k| k >= crate::keys::NUM_KEYS) {
        return Err(protocol(line, format!("key index {k} out of range")));
    }
    if m.joints.as_ref().is_some_and(|j| j.len() != NUM_JOINTS) {
        return Err(protocol(line, format!("joints must have {NUM_JOINTS} entries")));
    }
    Ok(m)
}

impl DeviceMessage {
    pub fn from_reading(t: u64, r: &PlantReading) -> Self {
        DeviceMessage { t, keys: r.pressed.to_indices(), joints: r.joints.map(|j| j.to_vec()) }
    }

    pub fn reading(&self) -> PlantReading {
        PlantReading {
            pressed: KeySet::from_indices(self.keys.iter().copied()),
            joints: self.joints.as_ref().map(|j| std::array::from_fn(|i| j[i])),
            stale: false,
        }
    }
}

/// Byte-stream endpoint carrying one message per line.
pub trait Transport {
    fn send_line(&mut self, line: &str) -> Result<(), PlantError>;
    /// Next line, or `None` if none arrives before `deadline`.
    fn recv_line(&mut self, deadline: Duration) -> Result<Option<String>, PlantError>;
}

/// Device side of the protocol: answers one host line using `plant`.
pub fn serve_line(plant: &mut dyn PlantBackend, line: &str) -> Result<String, PlantError> {
    let msg = parse_host_line(line)?;
    let reading = if msg.t == 0 {
        plant.reset()?
    } else {
        let cmd: [f64; NUM_JOINTS] = std::array::from_fn(|i| msg.cmd[i]);
        plant.command(msg.t, &cmd)?
    };
    Ok(serde_json::to_string(&DeviceMessage::from_reading(msg.t, &reading)).expect("message serializes"))
}

/// In-process transport that runs a device-side plant synchronously.
pub struct Loopback<P> {
    pub device: P,
    pending: VecDeque<String>,
    /// Steps (by `t`) on which the device stays silent, for deadline tests.
    pub drop_replies_at: Vec<u64>,
}

impl<P: PlantBackend> Loopback<P> {
    pub fn new(device: P) -> Self {
        Loopback { device, pending: VecDeque::new(), drop_replies_at: Vec::new() }
    }
}

impl<P: PlantBackend> Transport for Loopback<P> {
    fn send_line(&mut self, line: &str) -> Result<(), PlantError> {
        let reply = serve_line(&mut self.device, line)?;
        let t = parse_host_line(line)?.t;
        if !self.drop_replies_at.contains(&t) {
            self.pending.push_back(reply);
        }
        Ok(())
    }

    fn recv_line(&mut self, _deadline: Duration) -> Result<Option<String>, PlantError> {
        Ok(self.pending.pop_front())
    }
}

/// TCP transport; a reader thread feeds lines through a channel so that
/// receives can time out.
pub struct TcpTransport {
    writer: TcpStream,
    lines: Receiver<std::io::Result<String>>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, PlantError> {
        let stream = TcpStream::connect(addr).map_err(|e| PlantError::Transport(e.to_string()))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, PlantError> {
        stream.set_nodelay(true).map_err(|e| PlantError::Transport(e.to_string()))?;
        let reader = stream.try_clone().map_err(|e| PlantError::Transport(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(TcpTransport { writer: stream, lines: rx })
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

impl Transport for TcpTransport {
    fn send_line(&mut self, line: &str) -> Result<(), PlantError> {
        writeln!(self.writer, "{line}").map_err(|e| PlantError::Transport(e.to_string()))
    }

    fn recv_line(&mut self, deadline: Duration) -> Result<Option<String>, PlantError> {
        match self.lines.recv_timeout(deadline) {
            Ok(Ok(line)) => Ok(Some(line)),
            Ok(Err(e)) => Err(PlantError::Transport(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(PlantError::Transport("device closed the connection".into())),
        }
    }
}

/// Serves the device side of the protocol on `stream` until it closes.
pub fn serve_stream(plant: &mut dyn PlantBackend, stream: TcpStream) -> Result<(), PlantError> {
    let mut writer = stream.try_clone().map_err(|e| PlantError::Transport(e.to_string()))?;
    for line in BufReader::new(stream).lines() {
        let line = line.map_err(|e| PlantError::Transport(e.to_string()))?;
        let reply = serve_line(plant, &line)?;
        writeln!(writer, "{reply}").map_err(|e| PlantError::Transport(e.to_string()))?;
    }
    Ok(())
}

/// Host side: a [`PlantBackend`] speaking the bridge protocol.
pub struct BridgePlant<T> {
    transport: T,
    pub deadline: Duration,
    last: Option<PlantReading>,
    consecutive_misses: u32,
    /// Steps whose reading was reused after a missed deadline.
    pub missed: Vec<u64>,
}

impl<T: Transport> BridgePlant<T> {
    pub fn new(transport: T) -> Self {
        BridgePlant { transport, deadline: DEFAULT_DEADLINE, last: None, consecutive_misses: 0, missed: Vec::new() }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn exchange(&mut self, t: u64, cmd: &[f64; NUM_JOINTS]) -> Result<PlantReading, PlantError> {
        let line = serde_json::to_string(&HostMessage { t, cmd: cmd.to_vec() }).expect("message serializes");
        self.transport.send_line(&line)?;
        loop {
            match self.transport.recv_line(self.deadline)? {
                Some(reply) => {
                    let msg = parse_device_line(&reply)?;
                    if msg.t < t {
                        // late answer to an earlier command
                        continue;
                    }
                    if msg.t > t {
                        return Err(protocol(&reply, format!("reply for step {} while waiting for {t}", msg.t)));
                    }
                    self.consecutive_misses = 0;
                    let r = msg.reading();
                    self.last = Some(r);
                    return Ok(r);
                }
                None => {
                    self.consecutive_misses += 1;
                    self.missed.push(t);
                    log::warn!("bridge deadline missed at step {t} ({} in a row)", self.consecutive_misses);
                    if self.consecutive_misses >= MAX_CONSECUTIVE_MISSES {
                        return Err(PlantError::DeadlineExceeded { consecutive: self.consecutive_misses });
                    }
                    let last = self.last.ok_or(PlantError::DeadlineExceeded { consecutive: self.consecutive_misses })?;
                    return Ok(PlantReading { stale: true, ..last });
                }
            }
        }
    }
}

impl<T: Transport> PlantBackend for BridgePlant<T> {
    fn reset(&mut self) -> Result<PlantReading, PlantError> {
        self.last = None;
        self.consecutive_misses = 0;
        self.missed.clear();
        self.exchange(0, &[0.0; NUM_JOINTS])
    }

    fn command(&mut self, t: u64, targets: &[f64; NUM_JOINTS]) -> Result<PlantReading, PlantError> {
        self.exchange(t, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec_modes::plant::InternalPlant;
    use crate::physics::{PhysicalParams, PlantModel};

    fn internal() -> InternalPlant {
        InternalPlant::new(PlantModel::nominal(), PhysicalParams::nominal())
    }

    #[test]
    fn malformed_line_reports_content() {
        let err = parse_device_line("{\"t\": 3, \"keys\": [1,").unwrap_err();
        match err {
            PlantError::Protocol { line, .. } => assert_eq!(line, "{\"t\": 3, \"keys\": [1,"),
            e => panic!("{e:?}"),
        }
        assert!(matches!(parse_device_line("{\"t\":1,\"keys\":[60]}"), Err(PlantError::Protocol { .. })));
        assert!(matches!(parse_host_line("{\"t\":1,\"cmd\":[0.0]}"), Err(PlantError::Protocol { .. })));
    }

    #[test]
    fn message_shapes() {
        let m = DeviceMessage { t: 4, keys: vec![3, 9], joints: None };
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"t":4,"keys":[3,9]}"#);
        let h = HostMessage { t: 1, cmd: vec![0.5; 13] };
        assert_eq!(parse_host_line(&serde_json::to_string(&h).unwrap()).unwrap(), h);
    }

    #[test]
    fn missed_deadlines_reuse_last_then_abort() {
        let mut lb = Loopback::new(internal());
        lb.drop_replies_at = vec![2, 4, 5, 6];
        let mut bridge = BridgePlant::new(lb);
        let first = bridge.reset().unwrap();
        let targets = [0.0; NUM_JOINTS];
        assert!(!bridge.command(1, &targets).unwrap().stale);
        let r2 = bridge.command(2, &targets).unwrap();
        assert!(r2.stale);
        assert_eq!(r2.pressed, first.pressed);
        assert!(!bridge.command(3, &targets).unwrap().stale);
        assert!(bridge.command(4, &targets).unwrap().stale);
        assert!(bridge.command(5, &targets).unwrap().stale);
        assert_eq!(bridge.command(6, &targets), Err(PlantError::DeadlineExceeded { consecutive: 3 }));
        assert_eq!(bridge.missed, vec![2, 4, 5, 6]);
    }

    #[test]
    fn tcp_round_trip_matches_loopback() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            serve_stream(&mut internal(), stream).unwrap();
        });
        let mut tcp = BridgePlant::new(TcpTransport::connect(addr).unwrap());
        tcp.deadline = Duration::from_secs(5);
        let mut lb = BridgePlant::new(Loopback::new(internal()));
        assert_eq!(tcp.reset().unwrap(), lb.reset().unwrap());
        let mut targets = [0.0; NUM_JOINTS];
        targets[1] = 0.8;
        targets[2] = 0.8;
        for t in 1..=10 {
            assert_eq!(tcp.command(t, &targets).unwrap(), lb.command(t, &targets).unwrap());
        }
        drop(tcp);
        server.join().unwrap();
    }
}
