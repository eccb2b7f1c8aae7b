use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemBucket {
    /// Registered blocks not yet holding their real weights, compressed or not.
    Placeholders,
    /// Blocks whose weights have been applied.
    FullParams,
    /// Raw shard bytes read from disk and not yet released.
    ShardBuffers,
}

impl MemBucket {
    pub const ALL: [MemBucket; 3] = [MemBucket::Placeholders, MemBucket::FullParams, MemBucket::ShardBuffers];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySample {
    pub ts: u64,
    pub resident_bytes: u64,
    pub breakdown: BTreeMap<MemBucket, u64>,
}

/// Signed change to one bucket; `header` is block bookkeeping, kept apart so
/// payload-only figures can be derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDelta {
    pub ts: u64,
    pub request_id: u64,
    pub layer_index: u32,
    pub bucket: MemBucket,
    pub payload: i64,
    pub header: i64,
}

#[derive(Debug, Clone, Copy)]
struct BlockCharge {
    bucket: MemBucket,
    payload: u64,
    header: u64,
}

#[derive(Debug, Default)]
struct Ledger {
    blocks: HashMap<(u64, u32), BlockCharge>,
    shards: HashMap<(u64, u32), u64>,
    payload: [u64; 3],
    header: [u64; 3],
    peak_payload: [u64; 3],
    peak_resident: u64,
    deltas: Vec<MemoryDelta>,
}

impl Ledger {
    fn apply(&mut self, d: MemoryDelta) {
        let s = d.bucket.slot();
        self.payload[s] = add_signed(self.payload[s], d.payload);
        self.header[s] = add_signed(self.header[s], d.header);
        self.peak_payload[s] = self.peak_payload[s].max(self.payload[s]);
        let resident: u64 = self.payload.iter().sum::<u64>() + self.header.iter().sum::<u64>();
        self.peak_resident = self.peak_resident.max(resident);
        self.deltas.push(d);
    }

    fn drop_block(&mut self, ts: u64, key: (u64, u32)) -> u64 {
        match self.blocks.remove(&key) {
            Some(c) => {
                self.apply(MemoryDelta {
                    ts,
                    request_id: key.0,
                    layer_index: key.1,
                    bucket: c.bucket,
                    payload: -(c.payload as i64),
                    header: -(c.header as i64),
                });
                c.payload + c.header
            }
            None => 0,
        }
    }

    fn drop_shard(&mut self, ts: u64, key: (u64, u32)) -> u64 {
        match self.shards.remove(&key) {
            Some(bytes) => {
                self.apply(MemoryDelta {
                    ts,
                    request_id: key.0,
                    layer_index: key.1,
                    bucket: MemBucket::ShardBuffers,
                    payload: -(bytes as i64),
                    header: 0,
                });
                bytes
            }
            None => 0,
        }
    }
}

fn add_signed(v: u64, d: i64) -> u64 {
    v.checked_add_signed(d).expect("memory accounting went negative")
}

/// Thread-safe byte accountant keyed by (request, layer).
#[derive(Debug, Default)]
pub struct MemoryAccountant {
    ledger: Mutex<Ledger>,
}

impl MemoryAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the block of `(request_id, layer)` in `bucket`, replacing any
    /// earlier charge for the same block.
    pub fn charge_block(&self, ts: u64, request_id: u64, layer: u32, bucket: MemBucket, payload: u64, header: u64) {
        let mut l = self.ledger.lock().unwrap();
        l.drop_block(ts, (request_id, layer));
        l.blocks.insert((request_id, layer), BlockCharge { bucket, payload, header });
        l.apply(MemoryDelta {
            ts,
            request_id,
            layer_index: layer,
            bucket,
            payload: payload as i64,
            header: header as i64,
        });
    }

    pub fn charge_shard(&self, ts: u64, request_id: u64, layer: u32, bytes: u64) {
        let mut l = self.ledger.lock().unwrap();
        *l.shards.entry((request_id, layer)).or_insert(0) += bytes;
        l.apply(MemoryDelta {
            ts,
            request_id,
            layer_index: layer,
            bucket: MemBucket::ShardBuffers,
            payload: bytes as i64,
            header: 0,
        });
    }

    pub fn release_shard(&self, ts: u64, request_id: u64, layer: u32) -> u64 {
        self.ledger.lock().unwrap().drop_shard(ts, (request_id, layer))
    }

    /// Frees the layer's block and shard buffer. Returns the bytes freed;
    /// a second call returns 0.
    pub fn release_layer(&self, ts: u64, request_id: u64, layer: u32) -> u64 {
        let mut l = self.ledger.lock().unwrap();
        l.drop_block(ts, (request_id, layer)) + l.drop_shard(ts, (request_id, layer))
    }

    pub fn release_request(&self, ts: u64, request_id: u64) -> u64 {
        let mut l = self.ledger.lock().unwrap();
        let mut layers: Vec<u32> =
            l.blocks.keys().chain(l.shards.keys()).filter(|k| k.0 == request_id).map(|k| k.1).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
            .into_iter()
            .map(|layer| l.drop_block(ts, (request_id, layer)) + l.drop_shard(ts, (request_id, layer)))
            .sum()
    }

    /// Bytes, headers included, currently attributed to `request_id`.
    pub fn request_bytes(&self, request_id: u64) -> u64 {
        let l = self.ledger.lock().unwrap();
        let blocks: u64 = l.blocks.iter().filter(|(k, _)| k.0 == request_id).map(|(_, c)| c.payload + c.header).sum();
        let shards: u64 = l.shards.iter().filter(|(k, _)| k.0 == request_id).map(|(_, b)| b).sum();
        blocks + shards
    }

    pub fn snapshot(&self, ts: u64) -> MemorySample {
        let l = self.ledger.lock().unwrap();
        sample_of(ts, &l.payload, &l.header)
    }

    /// Highest payload bytes (headers excluded) ever held in `bucket`.
    pub fn peak_payload(&self, bucket: MemBucket) -> u64 {
        self.ledger.lock().unwrap().peak_payload[bucket.slot()]
    }

    pub fn peak_resident(&self) -> u64 {
        self.ledger.lock().unwrap().peak_resident
    }

    pub fn trace(&self) -> MemoryTrace {
        MemoryTrace { deltas: self.ledger.lock().unwrap().deltas.clone() }
    }
}

fn sample_of(ts: u64, payload: &[u64; 3], header: &[u64; 3]) -> MemorySample {
    let breakdown: BTreeMap<MemBucket, u64> =
        MemBucket::ALL.iter().map(|&b| (b, payload[b.slot()] + header[b.slot()])).collect();
    MemorySample { ts, resident_bytes: breakdown.values().sum(), breakdown }
}

/// Ordered delta log, replayable into periodic samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub deltas: Vec<MemoryDelta>,
}

impl MemoryTrace {
    /// Samples at `0, cadence, 2·cadence, …` (each reflecting every delta with
    /// `ts <=` the sample time) up to the last delta, plus a final sample at
    /// the last delta if it falls between ticks.
    pub fn samples(&self, cadence: u64) -> Vec<MemorySample> {
        assert!(cadence > 0, "sampling cadence must be positive");
        let mut deltas = self.deltas.clone();
        deltas.sort_by_key(|d| d.ts);
        let last = deltas.last().map_or(0, |d| d.ts);
        let (mut payload, mut header) = ([0u64; 3], [0u64; 3]);
        let mut out = Vec::new();
        let mut next = 0;
        let mut t = 0;
        loop {
            while next < deltas.len() && deltas[next].ts <= t {
                let d = deltas[next];
                payload[d.bucket.slot()] = add_signed(payload[d.bucket.slot()], d.payload);
                header[d.bucket.slot()] = add_signed(header[d.bucket.slot()], d.header);
                next += 1;
            }
            out.push(sample_of(t, &payload, &header));
            if t >= last {
                break;
            }
            t = (t + cadence).min(last);
        }
        out
    }

    /// Net bytes still attributed to `request_id` after replaying every delta.
    pub fn net_bytes(&self, request_id: u64) -> i64 {
        self.deltas.iter().filter(|d| d.request_id == request_id).map(|d| d.payload + d.header).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_accountant_is_zero() {
        let acc = MemoryAccountant::new();
        let s = acc.snapshot(0);
        assert_eq!(s.resident_bytes, 0);
        assert!(s.breakdown.values().all(|&v| v == 0));
    }

    #[test]
    fn compressed_block_of_8192() {
        let acc = MemoryAccountant::new();
        acc.charge_block(5, 0, 0, MemBucket::Placeholders, 8192u64.div_ceil(8), 32);
        let s = acc.snapshot(6);
        assert_eq!(s.breakdown[&MemBucket::Placeholders], 1024 + 32);
        assert_eq!(acc.peak_payload(MemBucket::Placeholders), 1024);
    }

    #[test]
    fn move_between_buckets_and_release() {
        let acc = MemoryAccountant::new();
        acc.charge_block(0, 1, 0, MemBucket::Placeholders, 10, 32);
        acc.charge_shard(1, 1, 0, 320);
        acc.charge_block(2, 1, 0, MemBucket::FullParams, 320, 32);
        assert_eq!(acc.snapshot(2).breakdown[&MemBucket::Placeholders], 0);
        assert_eq!(acc.request_bytes(1), 320 + 32 + 320);
        assert_eq!(acc.release_layer(3, 1, 0), 672);
        assert_eq!(acc.release_layer(4, 1, 0), 0);
        assert_eq!(acc.snapshot(5).resident_bytes, 0);
        assert_eq!(acc.peak_resident(), 672);
        assert_eq!(acc.trace().net_bytes(1), 0);
    }

    #[test]
    fn samples_replay_deltas() {
        let acc = MemoryAccountant::new();
        acc.charge_block(5, 0, 0, MemBucket::FullParams, 100, 0);
        acc.charge_block(12, 0, 1, MemBucket::FullParams, 50, 0);
        acc.release_request(25, 0);
        let samples = acc.trace().samples(10);
        let ts: Vec<u64> = samples.iter().map(|s| s.ts).collect();
        assert_eq!(ts, vec![0, 10, 20, 25]);
        let resident: Vec<u64> = samples.iter().map(|s| s.resident_bytes).collect();
        assert_eq!(resident, vec![0, 100, 150, 0]);
    }
}
