//! Thread-local floating-point operation counter.
//!
//! Only the heavy kernels record here (matmul, convolutions, scans, dense
//! sequence operators); elementwise work is not counted. The same formulas
//! back the analytic model accounting in `train::accounting`.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn record(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

pub fn current() -> u64 {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns its result with the number of FLOPs it recorded.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = current();
    let r = f();
    (r, current() - start)
}

pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Cross-correlation MACs counted as two FLOPs, plus one add per output for bias.
pub fn conv2d(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize, bias: bool) -> u64 {
    let macs = 2 * (k * k * c_in * c_out * h_out * w_out) as u64;
    macs + if bias { (c_out * h_out * w_out) as u64 } else { 0 }
}

/// Causal depthwise 1-D convolution with bias.
pub fn depthwise_conv1d(seq: usize, channels: usize, width: usize) -> u64 {
    ((2 * width + 1) * seq * channels) as u64
}

/// Selective scan: per (step, channel, state) the decay exponent, decay,
/// input injection and readout cost 8 FLOPs; the skip term costs 2 per
/// (step, channel).
pub fn selective_scan(seq: usize, channels: usize, state: usize) -> u64 {
    ((8 * state + 2) * seq * channels) as u64
}

/// Dense materialized scan operator: every causal (t, s) pair builds its
/// kernel entry from `state` decayed products (3 FLOPs each) and applies it
/// (2 FLOPs).
pub fn dense_scan_operator(seq: usize, channels: usize, state: usize) -> u64 {
    let pairs = seq * (seq + 1) / 2;
    ((3 * state + 2) * pairs * channels) as u64
}

/// Bilinear sampling of `points` locations over `channels` channels.
pub fn grid_sample(points: usize, channels: usize) -> u64 {
    (7 * points * channels) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_isolates_region() {
        record(5);
        let ((), n) = measure(|| record(7));
        assert_eq!(n, 7);
    }

    #[test]
    fn one_by_one_conv_count() {
        // 2*1*2*2*16 MAC-FLOPs + 2*16 bias adds
        assert_eq!(conv2d(1, 2, 2, 4, 4, false), 128);
        assert_eq!(conv2d(1, 2, 2, 4, 4, true), 160);
    }
}
