//! Normalized tile descriptions and loop factorization.

use crate::accelerator::PeArray;
use crate::tilegraph::ComputationTile;
use crate::workload::{Axis, OpClass, OperandKind, WorkloadGraph, ACCUMULATOR_BITS, STATE_BITS};
use crate::{Error, Result};

/// Maximum number of temporal loops (excluding kernel loops) after merging
/// prime factors.
pub const LPF_LIMIT: usize = 6;

/// Operand groups whose top-level copy lives in DRAM instead of the global buffer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placement {
    pub weight: bool,
    pub input: bool,
    pub output: bool,
    pub state: bool,
}

impl Placement {
    pub fn off_chip(&self, kind: OperandKind) -> bool {
        match kind {
            OperandKind::Weight => self.weight,
            OperandKind::InputFeature => self.input,
            OperandKind::OutputFeature => self.output,
            OperandKind::AccumulatorState | OperandKind::AuxState => self.state,
        }
    }

    pub fn set(&mut self, kind: OperandKind) {
        match kind {
            OperandKind::Weight => self.weight = true,
            OperandKind::InputFeature => self.input = true,
            OperandKind::OutputFeature => self.output = true,
            OperandKind::AccumulatorState | OperandKind::AuxState => self.state = true,
        }
    }

    pub fn any(&self) -> bool {
        self.weight || self.input || self.output || self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Loop {
    pub axis: Axis,
    pub bound: u64,
}

/// Everything the cost model needs to know about a tile; equal shapes have
/// equal costs, so this is also the memo key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileShape {
    pub class: OpClass,
    pub k: u64,
    pub c: u64,
    pub fy: u64,
    pub fx: u64,
    pub oy: u64,
    pub ox: u64,
    pub t: u64,
    pub stride_y: u64,
    pub stride_x: u64,
    /// Tile-local input rows `x = oy*stride_y + fy` exist iff `row_clip <= x < row_limit`.
    pub row_clip: u64,
    pub row_limit: u64,
    pub col_clip: u64,
    pub col_limit: u64,
    pub arity: u64,
    pub prec_w: u32,
    pub prec_in: u32,
    pub prec_out: u32,
    pub stateful: bool,
    pub sop: bool,
    pub t_first: bool,
    pub t_last: bool,
    pub placement: Placement,
    pub gb_avail: u64,
    pub core: usize,
}

impl TileShape {
    pub fn from_tile(w: &WorkloadGraph, tile: &ComputationTile, placement: Placement, gb_avail: u64, core: usize) -> Result<Self> {
        let op = &w.nodes[tile.op];
        if op.operand(OperandKind::AuxState).is_some() {
            return Err(Error::Internal(format!("{}: auxiliary state operands are not supported by the mapper", op.id)));
        }
        if op.op_class == OpClass::InputSource {
            return Err(Error::Internal(format!("{}: input sources are not mapped", op.id)));
        }
        let p = &op.projection;
        let oy = tile.n_rows();
        let ox = op.output_shape.width;
        let window = |n: u64, s: u64, k: u64, base: i64, h: u64| {
            let reach = (n - 1) * s + k;
            let clip = (-base).clamp(0, reach as i64) as u64;
            let limit = (h as i64 - base).clamp(clip as i64, reach as i64) as u64;
            (clip, limit)
        };
        let (row_clip, row_limit) = window(
            oy,
            p.stride_y,
            p.kernel_y,
            tile.rows.start as i64 * p.stride_y as i64 - p.pad_y as i64,
            op.input_shape.height,
        );
        let (col_clip, col_limit) = window(ox, p.stride_x, p.kernel_x, -(p.pad_x as i64), op.input_shape.width);
        let weighted = op.op_class.has_weights();
        let stateful = op.stateful;
        Ok(TileShape {
            class: op.op_class,
            k: op.dim(Axis::K),
            c: if weighted { op.dim(Axis::C) } else { 1 },
            fy: op.dim(Axis::FY),
            fx: op.dim(Axis::FX),
            oy,
            ox,
            t: tile.n_t(),
            stride_y: p.stride_y,
            stride_x: p.stride_x,
            row_clip,
            row_limit,
            col_clip,
            col_limit,
            arity: if op.op_class.is_elementwise() { op.inputs.len() as u64 } else { 1 },
            prec_w: op.operand(OperandKind::Weight).map_or(0, |o| o.precision),
            prec_in: op.input_precision(),
            prec_out: op.output_precision(),
            stateful,
            sop: op.uses_sop(),
            t_first: stateful && tile.t.start == 0,
            t_last: stateful && tile.t.end == w.total_timesteps,
            placement,
            gb_avail,
            core,
        })
    }

    pub fn weighted(&self) -> bool {
        self.class.has_weights()
    }

    pub fn dim(&self, axis: Axis) -> u64 {
        match axis {
            Axis::T => self.t,
            Axis::K => self.k,
            Axis::C => self.c,
            Axis::OY => self.oy,
            Axis::OX => self.ox,
            Axis::FY => self.fy,
            Axis::FX => self.fx,
        }
    }

    pub fn ops(&self) -> u64 {
        let out = self.k * self.oy * self.ox * self.t;
        if self.weighted() {
            out * self.c * self.fy * self.fx
        } else {
            out
        }
    }

    /// Operands moved by this tile; the accumulator is the state for stateful
    /// operators and the output otherwise.
    pub fn operands(&self) -> Vec<OperandKind> {
        let mut v = Vec::with_capacity(4);
        if self.weighted() {
            v.push(OperandKind::Weight);
        }
        v.push(OperandKind::InputFeature);
        v.push(OperandKind::OutputFeature);
        if self.stateful {
            v.push(OperandKind::AccumulatorState);
        }
        v
    }

    pub fn accumulator(&self) -> OperandKind {
        if self.stateful {
            OperandKind::AccumulatorState
        } else {
            OperandKind::OutputFeature
        }
    }

    pub fn relevant(&self, kind: OperandKind, axis: Axis) -> bool {
        use Axis::*;
        match kind {
            OperandKind::Weight => matches!(axis, K | C | FY | FX),
            OperandKind::InputFeature => match axis {
                T | OY | OX | FY | FX => true,
                C => self.weighted(),
                K => !self.weighted(),
            },
            OperandKind::OutputFeature => matches!(axis, T | K | OY | OX),
            OperandKind::AccumulatorState | OperandKind::AuxState => matches!(axis, K | OY | OX),
        }
    }

    pub fn precision(&self, kind: OperandKind) -> u64 {
        match kind {
            OperandKind::Weight => self.prec_w as u64,
            OperandKind::InputFeature => self.prec_in as u64,
            OperandKind::OutputFeature => self.prec_out as u64,
            OperandKind::AccumulatorState | OperandKind::AuxState => STATE_BITS as u64,
        }
    }

    pub fn input_channels(&self) -> u64 {
        if self.weighted() {
            self.c
        } else {
            self.k
        }
    }

    pub fn weight_bits(&self) -> u64 {
        if self.weighted() {
            self.k * self.c * self.fy * self.fx * self.prec_w as u64
        } else {
            0
        }
    }

    pub fn output_elements(&self) -> u64 {
        self.k * self.oy * self.ox * self.t
    }

    pub fn state_elements(&self) -> u64 {
        if self.stateful {
            self.k * self.oy * self.ox
        } else {
            0
        }
    }

    /// Input rows x columns actually present for the whole tile.
    pub fn input_plane(&self) -> u64 {
        let rows = window_sums(self.oy, self.oy, self.fy, self.fy, self.stride_y, self.row_clip, self.row_limit).0;
        let cols = window_sums(self.ox, self.ox, self.fx, self.fx, self.stride_x, self.col_clip, self.col_limit).0;
        rows * cols
    }

    pub fn input_bits(&self) -> u64 {
        self.input_plane() * self.input_channels() * self.t * self.arity * self.prec_in as u64
    }

    /// Whole-tile bits of one operand group as held in the global buffer.
    pub fn group_bits(&self, kind: OperandKind) -> u64 {
        match kind {
            OperandKind::Weight => self.weight_bits(),
            OperandKind::InputFeature => self.input_bits(),
            OperandKind::OutputFeature => self.output_elements() * self.prec_out as u64,
            OperandKind::AccumulatorState | OperandKind::AuxState => self.state_elements() * STATE_BITS as u64,
        }
    }

    /// Global-buffer bits needed with every group not in `placement` resident.
    pub fn resident_bits(&self, placement: Placement) -> u64 {
        self.operands().into_iter().filter(|&k| !placement.off_chip(k)).map(|k| self.group_bits(k)).sum()
    }
}

/// Sums and maximum, over all (outer block, kernel block) pairs, of the
/// number of distinct valid input positions `x = o*stride + f`, where the
/// output axis of extent `n` is split into blocks of `eo` and the kernel
/// axis of extent `k` into blocks of `ek`.
pub fn window_sums(n: u64, eo: u64, k: u64, ek: u64, stride: u64, clip: u64, limit: u64) -> (u64, u64) {
    let reach = ((n - 1) * stride + k) as usize;
    let mut mark = vec![u32::MAX; reach];
    let mut stamp = 0u32;
    let (mut sum, mut max) = (0, 0);
    for b in 0..n / eo {
        for g in 0..k / ek {
            let mut count = 0;
            for i in 0..eo {
                for j in 0..ek {
                    let x = (b * eo + i) * stride + g * ek + j;
                    if x >= clip && x < limit && mark[x as usize] != stamp {
                        mark[x as usize] = stamp;
                        count += 1;
                    }
                }
            }
            stamp += 1;
            sum += count;
            max = max.max(count);
        }
    }
    (sum, max)
}

/// Prime factors of `n` in ascending order (empty for 1).
pub fn prime_factorize(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Largest divisor of `n` not exceeding `limit`.
pub fn largest_divisor_at_most(n: u64, limit: u64) -> u64 {
    (1..=limit.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Spatial unrolling of the tile onto the PE array: (axis, used extent).
pub fn spatial_unrolling(shape: &TileShape, pe: &PeArray) -> Vec<(Axis, u64)> {
    [(pe.row_axis, pe.rows), (pe.col_axis, pe.cols)]
        .into_iter()
        .map(|(axis, size)| (axis, largest_divisor_at_most(shape.dim(axis), size)))
        .collect()
}

/// Kernel loops (always innermost, FX first) and the free temporal loops
/// left after spatial unrolling, with prime factors merged down to `LPF_LIMIT`.
pub fn temporal_loops(shape: &TileShape, spatial: &[(Axis, u64)]) -> (Vec<Loop>, Vec<Loop>) {
    let mut inner = Vec::new();
    for axis in [Axis::FX, Axis::FY] {
        if shape.dim(axis) > 1 {
            inner.push(Loop { axis, bound: shape.dim(axis) });
        }
    }
    let mut per_axis: Vec<(Axis, Vec<u64>)> = [Axis::C, Axis::K, Axis::OX, Axis::OY, Axis::T]
        .into_iter()
        .map(|axis| {
            let unrolled: u64 = spatial.iter().filter(|(a, _)| *a == axis).map(|(_, u)| u).product();
            (axis, prime_factorize(shape.dim(axis) / unrolled))
        })
        .collect();
    while per_axis.iter().map(|(_, f)| f.len()).sum::<usize>() > LPF_LIMIT {
        let (_, f) = per_axis.iter_mut().max_by_key(|(a, f)| (f.len(), std::cmp::Reverse(*a))).unwrap();
        f.sort_unstable();
        let merged = f[0] * f[1];
        f.drain(..2);
        f.push(merged);
        f.sort_unstable();
    }
    let free = per_axis
        .into_iter()
        .flat_map(|(axis, f)| f.into_iter().map(move |bound| Loop { axis, bound }))
        .collect();
    (inner, free)
}

/// Bits of partial sums kept by the accumulator.
pub const PSUM_BITS: u64 = ACCUMULATOR_BITS as u64;

#[cfg(test)]
mod tests {
    use super::*;

    fn trial_division_oracle(n: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut m = n;
        for p in 2..=n {
            if (2..p).any(|q| p % q == 0) {
                continue;
            }
            while m % p == 0 {
                out.push(p);
                m /= p;
            }
        }
        out
    }

    #[test]
    fn factorization() {
        assert_eq!(prime_factorize(16), vec![2, 2, 2, 2]);
        assert!(prime_factorize(1).is_empty());
        assert_eq!(prime_factorize(360), vec![2, 2, 2, 3, 3, 5]);
        for n in 1..400 {
            assert_eq!(prime_factorize(n), trial_division_oracle(n), "{n}");
        }
    }

    #[test]
    fn divisors() {
        assert_eq!(largest_divisor_at_most(64, 32), 32);
        assert_eq!(largest_divisor_at_most(90, 16), 15);
        assert_eq!(largest_divisor_at_most(7, 16), 7);
        assert_eq!(largest_divisor_at_most(1, 16), 1);
    }

    #[test]
    fn window_counts() {
        // 3-wide kernel, pad 1, 4 outputs over 4 inputs: x in [1, 5).
        assert_eq!(window_sums(4, 4, 3, 3, 1, 1, 5).0, 4);
        // Per-element blocks: 12 positions minus 2 padded ones.
        assert_eq!(window_sums(4, 1, 3, 1, 1, 1, 5).0, 10);
        // Stride 2, kernel 1: gaps between rows.
        assert_eq!(window_sums(3, 3, 1, 1, 2, 0, 5), (3, 3));
    }
}
