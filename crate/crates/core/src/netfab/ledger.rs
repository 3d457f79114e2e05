//! Per-device radio traffic counters and the linear energy model.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCounters {
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub tx_msgs: u64,
    pub rx_msgs: u64,
    /// Bytes sent weighted by the number of recipients the frame was
    /// addressed to. Equals the receivers' total `rx_bytes` on a loss-free
    /// network.
    pub tx_fanout_bytes: u64,
}

impl DeviceCounters {
    /// `beta_tx * tx_bytes + beta_rx * rx_bytes`.
    pub fn energy(&self, beta_tx: f64, beta_rx: f64) -> f64 {
        beta_tx * self.tx_bytes as f64 + beta_rx * self.rx_bytes as f64
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &DeviceCounters) -> DeviceCounters {
        DeviceCounters {
            tx_bytes: self.tx_bytes - earlier.tx_bytes,
            rx_bytes: self.rx_bytes - earlier.rx_bytes,
            tx_msgs: self.tx_msgs - earlier.tx_msgs,
            rx_msgs: self.rx_msgs - earlier.rx_msgs,
            tx_fanout_bytes: self.tx_fanout_bytes - earlier.tx_fanout_bytes,
        }
    }
}

/// Counters for every device, indexed by device id. Counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLedger {
    devices: Vec<DeviceCounters>,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, device: usize) -> &mut DeviceCounters {
        if self.devices.len() <= device {
            self.devices.resize(device + 1, DeviceCounters::default());
        }
        &mut self.devices[device]
    }

    pub fn record_tx(&mut self, device: usize, bytes: usize, recipients: usize) {
        let c = self.slot(device);
        c.tx_bytes += bytes as u64;
        c.tx_msgs += 1;
        c.tx_fanout_bytes += (bytes * recipients) as u64;
    }

    pub fn record_rx(&mut self, device: usize, bytes: usize) {
        let c = self.slot(device);
        c.rx_bytes += bytes as u64;
        c.rx_msgs += 1;
    }

    pub fn counters(&self, device: usize) -> DeviceCounters {
        self.devices.get(device).copied().unwrap_or_default()
    }

    pub fn energy(&self, device: usize, beta_tx: f64, beta_rx: f64) -> f64 {
        self.counters(device).energy(beta_tx, beta_rx)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn total(&self) -> DeviceCounters {
        self.devices.iter().fold(DeviceCounters::default(), |mut acc, c| {
            acc.tx_bytes += c.tx_bytes;
            acc.rx_bytes += c.rx_bytes;
            acc.tx_msgs += c.tx_msgs;
            acc.rx_msgs += c.rx_msgs;
            acc.tx_fanout_bytes += c.tx_fanout_bytes;
            acc
        })
    }
}
