//! Built-in benchmark workloads.

use super::{parse::Pair, LayerDef, LifParams, WorkloadFile, WorkloadGraph};
use crate::{Error, Result};

const LIF: LifParams = LifParams { leak_alpha: 0.75, v_threshold: 1.0, i_reset: 1.0 };

/// Incremental layer-list builder used by the benchmark definitions.
struct Net {
    layers: Vec<LayerDef>,
    block: usize,
}

impl Net {
    fn new(channels: u64, height: u64, width: u64, spiking: bool) -> Self {
        let mut input = LayerDef::new("input", "input");
        input.channels = Some(channels);
        input.height = Some(height);
        input.width = Some(width);
        input.spiking = Some(spiking);
        Net { layers: vec![input], block: 0 }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, id: &str, src: &str, k: u64, kernel: (u64, u64), stride: u64, stateful: bool, spiking: bool) -> String {
        let mut l = LayerDef::new(id, if kernel == (1, 1) { "pointwise" } else { "conv2d" });
        l.inputs = vec![src.to_string()];
        l.out_channels = Some(k);
        l.kernel = Some(Pair::YX([kernel.0, kernel.1]));
        l.stride = Some(Pair::YX([if kernel.0 > 1 || stride > 1 { stride } else { 1 }, if kernel.1 > 1 || stride > 1 { stride } else { 1 }]));
        l.padding = Some(Pair::YX([kernel.0 / 2, kernel.1 / 2]));
        l.stateful = stateful;
        l.spiking = Some(spiking);
        if stateful || spiking {
            l.lif = Some(LIF);
        }
        l.block = self.block;
        self.layers.push(l);
        id.to_string()
    }

    fn lif(&mut self, id: &str, src: &str, k: u64, kernel: u64, stride: u64) -> String {
        self.conv(id, src, k, (kernel, kernel), stride, true, true)
    }

    fn binary(&mut self, id: &str, class: &str, a: &str, b: &str) -> String {
        let mut l = LayerDef::new(id, class);
        l.inputs = vec![a.to_string(), b.to_string()];
        l.block = self.block;
        self.layers.push(l);
        id.to_string()
    }

    fn pool(&mut self, id: &str, src: &str, kernel: u64, stride: u64, pad: u64) -> String {
        let mut l = LayerDef::new(id, "maxpool");
        l.inputs = vec![src.to_string()];
        l.kernel = Some(Pair::Same(kernel));
        l.stride = Some(Pair::Same(stride));
        l.padding = Some(Pair::Same(pad));
        l.block = self.block;
        self.layers.push(l);
        id.to_string()
    }

    fn finish(self, name: &str, timesteps: u64) -> Result<WorkloadGraph> {
        WorkloadFile { name: Some(name.to_string()), timesteps, layers: self.layers }.build()
    }
}

/// Channel plan of the SEW-ResNet-18 blocks.
pub const SEW18_CHANNELS: [u64; 7] = [64, 64, 64, 64, 128, 128, 128];

/// SEW-ResNet-18 for 2-channel 128x128 DVS input over 16 timesteps.
///
/// Block 0 holds the stem plus a full-resolution SEW block; every block ends
/// with a SEW OR residual and a 2x2 spike max-pool.
pub fn sew_resnet18() -> Result<WorkloadGraph> {
    sew_resnet18_with(&SEW18_CHANNELS)
}

pub fn sew_resnet18_with(channels: &[u64; 7]) -> Result<WorkloadGraph> {
    let mut net = Net::new(2, 128, 128, false);
    let mut x = net.lif("stem", "input", channels[0], 3, 1);
    for (b, &ch) in channels.iter().enumerate() {
        net.block = b;
        let a = net.lif(&format!("b{b}_conv1"), &x, ch, 3, 1);
        let c = net.lif(&format!("b{b}_conv2"), &a, ch, 3, 1);
        let r = net.binary(&format!("b{b}_or"), "or", &a, &c);
        x = net.pool(&format!("b{b}_pool"), &r, 2, 2, 0);
    }
    net.finish("sew_resnet18", 16)
}

/// Hybrid RED-LIF detector: three feed-forward residual blocks on 4-bit
/// features followed by five convolutional LIF layers, one block each.
pub fn red_lif() -> Result<WorkloadGraph> {
    let mut net = Net::new(6, 360, 640, false);
    let mut x = "input".to_string();
    for (b, (k, stride)) in [(32u64, 1u64), (64, 2), (128, 2)].into_iter().enumerate() {
        net.block = b;
        let a = net.conv(&format!("ff{b}_conv1"), &x, k, (3, 3), stride, false, false);
        let c = net.conv(&format!("ff{b}_conv2"), &a, k, (3, 3), 1, false, false);
        x = net.binary(&format!("ff{b}_add"), "add", &a, &c);
    }
    for (i, (k, stride)) in [(32u64, 2u64), (256, 1), (128, 2), (384, 2), (512, 2)].into_iter().enumerate() {
        net.block = 3 + i;
        x = net.lif(&format!("lif{i}"), &x, k, 3, stride);
    }
    net.finish("red_lif", 12)
}

/// SEW-ResNet-152 on 4x224x224 rate-coded input, coarsened into 7
/// hyperblocks: 3@64, 8@128, 36@256 split four ways, 3@512.
pub fn sew_resnet152() -> Result<WorkloadGraph> {
    let mut net = Net::new(3, 224, 224, true);
    let stem = net.lif("stem", "input", 64, 7, 2);
    let mut x = net.pool("stem_pool", &stem, 2, 2, 0);
    let mut in_ch = 64u64;
    let stages: [(u64, usize, &[usize]); 4] = [(64, 3, &[0]), (128, 8, &[1]), (256, 36, &[2, 3, 4, 5]), (512, 3, &[6])];
    let mut block_idx = 0usize;
    for (si, (width, count, hyper)) in stages.into_iter().enumerate() {
        let per_hyper = count.div_ceil(hyper.len());
        for i in 0..count {
            net.block = hyper[i / per_hyper];
            let stride = if i == 0 && si > 0 { 2 } else { 1 };
            let out_ch = 4 * width;
            let p = format!("r{block_idx}");
            let a = net.lif(&format!("{p}_c1"), &x, width, 1, 1);
            let b = net.lif(&format!("{p}_c2"), &a, width, 3, stride);
            let c = net.lif(&format!("{p}_c3"), &b, out_ch, 1, 1);
            let shortcut = if in_ch != out_ch || stride != 1 {
                net.lif(&format!("{p}_down"), &x, out_ch, 1, stride)
            } else {
                x.clone()
            };
            x = net.binary(&format!("{p}_or"), "or", &c, &shortcut);
            in_ch = out_ch;
            block_idx += 1;
        }
    }
    net.finish("sew_resnet152", 4)
}

/// Synthetic chain of `k` stateful 1D convolutions (kernel 3, pad 1), one
/// block per layer, for exhaustive oracle checks.
pub fn micro(k: usize) -> Result<WorkloadGraph> {
    micro_with(k, 16, 4, 4)
}

pub fn micro_with(k: usize, length: u64, channels: u64, timesteps: u64) -> Result<WorkloadGraph> {
    if k == 0 {
        return Err(Error::UnknownBenchmark("micro_0".into()));
    }
    let mut net = Net::new(2, length, 1, true);
    let mut x = "input".to_string();
    for i in 0..k {
        net.block = i;
        x = net.conv(&format!("l{i}"), &x, channels, (3, 1), 1, true, true);
    }
    net.finish(&format!("micro_{k}"), timesteps)
}

/// Looks up a built-in benchmark by name: `sew_resnet18`, `sew_resnet152`,
/// `red_lif` or `micro_<k>`.
pub fn builtin_benchmark(name: &str) -> Result<WorkloadGraph> {
    match name {
        "sew_resnet18" | "sew7" | "sew-7" => sew_resnet18(),
        "sew5" | "sew-5" => Ok(super::strip_states(&sew_resnet18()?, 2)),
        "sew_resnet152" => sew_resnet152(),
        "red_lif" => red_lif(),
        _ => {
            let k = name
                .strip_prefix("micro_")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::UnknownBenchmark(name.to_string()))?;
            micro(k)
        }
    }
}
