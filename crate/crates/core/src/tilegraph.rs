//! Splits a workload into computation tiles along output rows and timesteps
//! and builds the fine-grain dependency graph between them.

use std::ops::Range;

use serde::Deserialize;

use crate::workload::{OpClass, OperatorNode, WorkloadGraph, STATE_BITS};
use crate::{Error, Result};

/// Per-block cut: number of row bands and timesteps per temporal slice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CutSpec {
    pub spatial: Vec<u64>,
    pub temporal: Vec<u64>,
}

impl CutSpec {
    /// Stack id per block: consecutive spatially cut blocks with equal
    /// temporal cuts share a stack and are interleaved band by band.
    pub fn fusion_stacks(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.spatial.len());
        for b in 0..self.spatial.len() {
            let joins = b > 0 && self.spatial[b] > 1 && self.spatial[b - 1] > 1 && self.temporal[b] == self.temporal[b - 1];
            ids.push(if joins { ids[b - 1] } else { ids.last().map_or(0, |&i| i + 1) });
        }
        ids
    }

    pub fn uniform(n_blocks: usize, spatial: u64, tbatch: u64) -> Self {
        CutSpec { spatial: vec![spatial; n_blocks], temporal: vec![tbatch; n_blocks] }
    }

    /// Single-timestep, layer-by-layer.
    pub fn st_lbl(w: &WorkloadGraph) -> Self {
        Self::uniform(w.n_blocks(), 1, 1)
    }

    /// Full time batching, layer-by-layer.
    pub fn tb_lbl(w: &WorkloadGraph) -> Self {
        Self::uniform(w.n_blocks(), 1, w.total_timesteps)
    }

    /// Largest row-band count valid for every operator of `block`.
    pub fn max_spatial(w: &WorkloadGraph, block: usize) -> u64 {
        w.block_nodes(block).map(|i| w.nodes[i].output_shape.height).min().unwrap_or(1)
    }

    /// Layer fusion with one band per output row of the block's smallest operator.
    pub fn fused(w: &WorkloadGraph, tbatch: u64) -> Self {
        let n = w.n_blocks();
        CutSpec { spatial: (0..n).map(|b| Self::max_spatial(w, b)).collect(), temporal: vec![tbatch; n] }
    }

    pub fn n_blocks(&self) -> usize {
        self.spatial.len()
    }

    /// Cuts document accepted by [`parse_cuts`].
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (b, (s, t)) in self.spatial.iter().zip(&self.temporal).enumerate() {
            out.push_str(&format!("[[cuts]]\nblock = {b}\nfuse = {s}\ntbatch = {t}\n\n"));
        }
        out
    }

    pub fn validate(&self, w: &WorkloadGraph) -> Result<()> {
        let n = w.n_blocks();
        if self.spatial.len() != n || self.temporal.len() != n {
            return Err(Error::InvalidCut {
                block: self.spatial.len().min(self.temporal.len()),
                message: format!("cut spec covers {} blocks, workload has {n}", self.spatial.len()),
            });
        }
        for b in 0..n {
            let (s, t) = (self.spatial[b], self.temporal[b]);
            if s == 0 {
                return Err(Error::InvalidCut { block: b, message: "zero spatial slices".into() });
            }
            if t == 0 || t > w.total_timesteps {
                return Err(Error::InvalidCut {
                    block: b,
                    message: format!("temporal batch {t} outside 1..={}", w.total_timesteps),
                });
            }
            for i in w.block_nodes(b) {
                let oy = w.nodes[i].output_shape.height;
                if s > oy {
                    return Err(Error::InvalidCut {
                        block: b,
                        message: format!("{s} row bands exceed {} rows of {}", oy, w.nodes[i].id),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CutRecord {
    block: usize,
    #[serde(default)]
    fuse: Option<u64>,
    #[serde(default)]
    tbatch: Option<u64>,
}

#[derive(Deserialize)]
struct CutFile {
    #[serde(default)]
    cuts: Vec<CutRecord>,
}

/// Parses a cuts document of `[[cuts]]` records `{block, fuse, tbatch}`
/// (TOML, or JSON when it starts with `{` / `[`). Unlisted blocks default to
/// one band and full time batching.
pub fn parse_cuts(text: &str, w: &WorkloadGraph) -> Result<CutSpec> {
    let trimmed = text.trim_start();
    let records: Vec<CutRecord> = if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
        serde_json::from_str(trimmed).map_err(|e| Error::Parse { location: format!("line {}", e.line()), message: e.to_string() })?
    } else if trimmed.starts_with('{') {
        serde_json::from_str::<CutFile>(trimmed)
            .map_err(|e| Error::Parse { location: format!("line {}", e.line()), message: e.to_string() })?
            .cuts
    } else {
        toml::from_str::<CutFile>(text)
            .map_err(|e| Error::Parse {
                location: e.span().map_or_else(|| "cuts".into(), |s| format!("byte {}", s.start)),
                message: e.message().to_string(),
            })?
            .cuts
    };
    let mut spec = CutSpec::tb_lbl(w);
    for r in records {
        if r.block >= spec.n_blocks() {
            return Err(Error::InvalidCut { block: r.block, message: "no such block".into() });
        }
        if let Some(f) = r.fuse {
            spec.spatial[r.block] = f;
        }
        if let Some(t) = r.tbatch {
            spec.temporal[r.block] = t;
        }
    }
    spec.validate(w)?;
    Ok(spec)
}

/// Bits touched by one tile, per operand kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Footprint {
    pub weight: u64,
    pub input: u64,
    pub output: u64,
    pub state: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputationTile {
    pub op: usize,
    pub s: usize,
    pub tau: usize,
    pub rows: Range<u64>,
    pub t: Range<u64>,
    pub ops: u64,
    pub footprint: Footprint,
}

impl ComputationTile {
    pub fn n_rows(&self) -> u64 {
        self.rows.end - self.rows.start
    }

    pub fn n_t(&self) -> u64 {
        self.t.end - self.t.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataEdge {
    pub src: usize,
    pub dst: usize,
    pub bits: u64,
}

#[derive(Debug, Clone)]
pub struct TileGraph {
    pub tiles: Vec<ComputationTile>,
    pub data_edges: Vec<DataEdge>,
    pub state_edges: Vec<(usize, usize)>,
    pub order_edges: Vec<(usize, usize)>,
    /// Tiles of each operator in (tau, s) order.
    pub op_tiles: Vec<Vec<usize>>,
    /// (spatial, temporal) slice counts per operator.
    pub slices: Vec<(usize, usize)>,
    pub cuts: CutSpec,
}

impl TileGraph {
    pub fn tile_at(&self, op: usize, s: usize, tau: usize) -> usize {
        self.op_tiles[op][tau * self.slices[op].0 + s]
    }

    /// Predecessor tiles of every tile over all edge kinds, deduplicated.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.tiles.len()];
        let all = self
            .data_edges
            .iter()
            .map(|e| (e.src, e.dst))
            .chain(self.state_edges.iter().copied())
            .chain(self.order_edges.iter().copied());
        for (a, b) in all {
            preds[b].push(a);
        }
        for p in &mut preds {
            p.sort_unstable();
            p.dedup();
        }
        preds
    }

    /// Data-edge successors of every tile.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.tiles.len()];
        for e in &self.data_edges {
            out[e.src].push(e.dst);
        }
        out
    }
}

/// Splits `total` into `n` contiguous ranges; the last absorbs the remainder.
pub fn split_range(total: u64, n: u64) -> Vec<Range<u64>> {
    let size = total / n;
    (0..n).map(|i| i * size..if i + 1 == n { total } else { (i + 1) * size }).collect()
}

/// Input rows needed to produce output rows `out_rows` of `op`.
pub fn receptive_field(op: &OperatorNode, out_rows: Range<u64>) -> Range<u64> {
    if out_rows.is_empty() {
        return 0..0;
    }
    let p = &op.projection;
    let h = op.input_shape.height as i64;
    let lo = out_rows.start as i64 * p.stride_y as i64 - p.pad_y as i64;
    let hi = (out_rows.end as i64 - 1) * p.stride_y as i64 - p.pad_y as i64 + p.kernel_y as i64;
    lo.clamp(0, h) as u64..hi.clamp(0, h) as u64
}

fn overlap(a: &Range<u64>, b: &Range<u64>) -> u64 {
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

fn footprint(op: &OperatorNode, rows: &Range<u64>, nt: u64) -> Footprint {
    if op.op_class == OpClass::InputSource {
        return Footprint { output: (rows.end - rows.start) * op.output_shape.width * op.output_shape.channels * nt * op.output_precision() as u64, ..Default::default() };
    }
    let rf = receptive_field(op, rows.clone());
    let arity = op.inputs.len().max(1) as u64;
    let n_rows = rows.end - rows.start;
    let out_elems = n_rows * op.output_shape.width * op.output_shape.channels;
    Footprint {
        weight: op.weight_bits(),
        input: (rf.end - rf.start) * op.input_shape.width * op.input_shape.channels * nt * op.input_precision() as u64 * arity,
        output: out_elems * nt * op.output_precision() as u64,
        state: if op.stateful { out_elems * STATE_BITS as u64 } else { 0 },
    }
}

/// Builds the tile graph of `w` under `cuts`.
pub fn generate_tile_graph(w: &WorkloadGraph, cuts: &CutSpec) -> Result<TileGraph> {
    cuts.validate(w)?;
    let t_total = w.total_timesteps;
    let mut tiles = Vec::new();
    let mut op_tiles = Vec::with_capacity(w.nodes.len());
    let mut slices = Vec::with_capacity(w.nodes.len());
    let mut order_edges = Vec::new();
    let mut state_edges = Vec::new();
    for (i, op) in w.nodes.iter().enumerate() {
        let b = op.block_id;
        let oy = op.output_shape.height;
        let row_bands = split_range(oy, cuts.spatial[b]);
        let t_slices = split_range(t_total, (t_total / cuts.temporal[b]).max(1));
        let per_row = op.ops_per_timestep() / oy.max(1);
        let mut ids = Vec::with_capacity(row_bands.len() * t_slices.len());
        for (tau, t) in t_slices.iter().enumerate() {
            for (s, rows) in row_bands.iter().enumerate() {
                let nt = t.end - t.start;
                let id = tiles.len();
                tiles.push(ComputationTile {
                    op: i,
                    s,
                    tau,
                    rows: rows.clone(),
                    t: t.clone(),
                    ops: per_row * (rows.end - rows.start) * nt,
                    footprint: footprint(op, rows, nt),
                });
                if let Some(&prev) = ids.last() {
                    order_edges.push((prev, id));
                }
                if op.stateful && tau > 0 {
                    state_edges.push((ids[(tau - 1) * row_bands.len() + s], id));
                }
                ids.push(id);
            }
        }
        slices.push((row_bands.len(), t_slices.len()));
        op_tiles.push(ids);
    }
    let mut data_edges = Vec::new();
    for (c, op) in w.nodes.iter().enumerate() {
        for &p in &op.inputs {
            let prod = &w.nodes[p];
            let bits_per_row_t = prod.output_shape.width * prod.output_shape.channels * prod.output_precision() as u64;
            for &ct in &op_tiles[c] {
                let need = receptive_field(op, tiles[ct].rows.clone());
                for &pt in &op_tiles[p] {
                    let rows = overlap(&need, &tiles[pt].rows);
                    let ts = overlap(&tiles[ct].t, &tiles[pt].t);
                    if rows > 0 && ts > 0 {
                        data_edges.push(DataEdge { src: pt, dst: ct, bits: rows * ts * bits_per_row_t });
                    }
                }
            }
        }
    }
    Ok(TileGraph { tiles, data_edges, state_edges, order_edges, op_tiles, slices, cuts: cuts.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{micro_with, parse_workload};

    fn brute_rf(op: &OperatorNode, rows: Range<u64>) -> Range<u64> {
        let p = &op.projection;
        let mut lo = u64::MAX;
        let mut hi = 0;
        for oy in rows {
            for fy in 0..p.kernel_y {
                let iy = (oy * p.stride_y + fy) as i64 - p.pad_y as i64;
                if iy >= 0 && (iy as u64) < op.input_shape.height {
                    lo = lo.min(iy as u64);
                    hi = hi.max(iy as u64 + 1);
                }
            }
        }
        if lo == u64::MAX {
            0..0
        } else {
            lo..hi
        }
    }

    const POOL_NET: &str = r#"
timesteps = 2
[[layers]]
id = "in"
class = "input"
channels = 1
height = 8
width = 8
[[layers]]
id = "pw"
class = "pointwise"
inputs = ["in"]
out_channels = 2
stateful = true
[[layers]]
id = "c3"
class = "conv2d"
inputs = ["pw"]
out_channels = 2
kernel = 3
padding = 1
stateful = true
[[layers]]
id = "pool"
class = "maxpool"
inputs = ["c3"]
"#;

    #[test]
    fn receptive_field_examples() {
        let w = parse_workload(POOL_NET).unwrap();
        assert_eq!(receptive_field(&w.nodes[1], 2..4), 2..4);
        assert_eq!(receptive_field(&w.nodes[2], 0..2), 0..3);
        assert_eq!(receptive_field(&w.nodes[3], 1..3), 2..6);
        for op in &w.nodes[1..] {
            let oy = op.output_shape.height;
            for lo in 0..oy {
                for hi in lo + 1..=oy {
                    assert_eq!(receptive_field(op, lo..hi), brute_rf(op, lo..hi), "{} {lo}..{hi}", op.id);
                }
            }
        }
    }

    #[test]
    fn single_tile_without_edges() {
        let w = micro_with(1, 8, 2, 4).unwrap();
        let mut cuts = CutSpec::tb_lbl(&w);
        cuts.spatial[0] = 1;
        let g = generate_tile_graph(&w, &cuts).unwrap();
        let conv = &g.op_tiles[1];
        assert_eq!(conv.len(), 1);
        assert!(g.state_edges.is_empty());
        assert!(g.order_edges.is_empty());
    }

    #[test]
    fn state_chain_per_slice() {
        let w = micro_with(1, 8, 2, 4).unwrap();
        let g = generate_tile_graph(&w, &CutSpec::uniform(1, 2, 1)).unwrap();
        assert_eq!(g.op_tiles[1].len(), 8);
        let conv_state: Vec<_> = g.state_edges.iter().filter(|(a, _)| g.tiles[*a].op == 1).collect();
        assert_eq!(conv_state.len(), 6);
        for s in 0..2 {
            for tau in 0..3 {
                assert!(g.state_edges.contains(&(g.tile_at(1, s, tau), g.tile_at(1, s, tau + 1))));
            }
        }
    }

    #[test]
    fn data_edges_match_brute_force() {
        let w = micro_with(2, 8, 2, 2).unwrap();
        let g = generate_tile_graph(&w, &CutSpec::uniform(2, 4, 2)).unwrap();
        let (p, c) = (1, 2);
        let mut expected = 0;
        for &ct in &g.op_tiles[c] {
            let tile = &g.tiles[ct];
            let need = brute_rf(&w.nodes[c], tile.rows.clone());
            for &pt in &g.op_tiles[p] {
                if need.clone().any(|r| g.tiles[pt].rows.contains(&r)) {
                    expected += 1;
                    assert!(g.data_edges.iter().any(|e| e.src == pt && e.dst == ct));
                }
            }
        }
        let got = g.data_edges.iter().filter(|e| g.tiles[e.src].op == p && g.tiles[e.dst].op == c).count();
        assert_eq!(got, expected);
        assert_eq!(got, 4 + 2 * 3);
    }

    #[test]
    fn tiles_partition_rows_and_time() {
        let w = parse_workload(POOL_NET).unwrap();
        let g = generate_tile_graph(&w, &CutSpec::uniform(1, 3, 1)).unwrap();
        for (op, ids) in g.op_tiles.iter().enumerate() {
            let node = &w.nodes[op];
            let mut cover = vec![0u32; (node.output_shape.height * w.total_timesteps) as usize];
            let mut ops = 0;
            for &i in ids {
                let t = &g.tiles[i];
                ops += t.ops;
                for r in t.rows.clone() {
                    for ts in t.t.clone() {
                        cover[(r * w.total_timesteps + ts) as usize] += 1;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c == 1));
            assert_eq!(ops, node.ops_per_timestep() * w.total_timesteps);
        }
    }

    #[test]
    fn invalid_cuts() {
        let w = micro_with(1, 8, 2, 4).unwrap();
        assert!(generate_tile_graph(&w, &CutSpec::uniform(1, 9, 1)).is_err());
        assert!(generate_tile_graph(&w, &CutSpec::uniform(1, 0, 1)).is_err());
        assert!(generate_tile_graph(&w, &CutSpec::uniform(1, 1, 0)).is_err());
        assert!(generate_tile_graph(&w, &CutSpec::uniform(1, 1, 5)).is_err());
    }

    #[test]
    fn remainder_goes_to_last_slice() {
        assert_eq!(split_range(10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(split_range(16, 5).last().unwrap().clone(), 12..16);
    }

    #[test]
    fn cuts_file() {
        let w = micro_with(2, 8, 2, 4).unwrap();
        let c = parse_cuts("[[cuts]]\nblock = 1\nfuse = 4\ntbatch = 2\n", &w).unwrap();
        assert_eq!(c.spatial, vec![1, 4]);
        assert_eq!(c.temporal, vec![4, 2]);
        let j = parse_cuts(r#"[{"block": 0, "tbatch": 1}]"#, &w).unwrap();
        assert_eq!(j.temporal, vec![1, 4]);
        assert!(parse_cuts("[[cuts]]\nblock = 5\n", &w).is_err());
        assert_eq!(parse_cuts(&c.to_toml(), &w).unwrap(), c);
    }
}
