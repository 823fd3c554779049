use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use stems_core::explorer::{hybrid_cuts, BatchDirection};
use stems_core::{builtin_benchmark, builtin_meta_vr, parse_accelerator, parse_cuts, parse_workload, rank_blocks, CutSpec, Mapper, WorkloadGraph};

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Workload description (TOML or JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "builtin", required_unless_present = "builtin")]
    pub workload: Option<PathBuf>,
    /// Built-in benchmark: sew_resnet18, sew5, sew_resnet152, red_lif, micro_<k>.
    #[arg(long, value_name = "NAME")]
    pub builtin: Option<String>,
    /// Accelerator description (TOML). Defaults to the built-in Meta-VR model.
    #[arg(long, value_name = "PATH", conflicts_with = "sram_kb")]
    pub accel: Option<PathBuf>,
    /// Global buffer size of the built-in accelerator, in KB.
    #[arg(long, value_name = "KB")]
    pub sram_kb: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "DIR", default_value = "stems-out")]
    pub out: PathBuf,
    /// Print mapper cache statistics.
    #[arg(long)]
    pub stats: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    StLbl,
    TbLbl,
    StLf,
    TbLf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchFrom {
    #[default]
    Auto,
    Input,
    Output,
}

impl From<BatchFrom> for BatchDirection {
    fn from(b: BatchFrom) -> Self {
        match b {
            BatchFrom::Auto => BatchDirection::Auto,
            BatchFrom::Input => BatchDirection::FromInput,
            BatchFrom::Output => BatchDirection::FromOutput,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CutArgs {
    /// Cuts document with `[[cuts]]` records {block, fuse, tbatch}.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["preset", "fuse", "tbatch"])]
    pub cuts: Option<PathBuf>,
    /// Named schedule applied to every block.
    #[arg(long, value_enum, conflicts_with_all = ["fuse", "tbatch"])]
    pub preset: Option<Preset>,
    /// Layer-fuse the first N blocks of the fusion ranking.
    #[arg(long, value_name = "N")]
    pub fuse: Option<usize>,
    /// Time-batch the first N blocks of the batching ranking.
    #[arg(long, value_name = "N")]
    pub tbatch: Option<usize>,
    /// Side the batching ranking starts from.
    #[arg(long, value_enum, default_value = "auto")]
    pub batch_from: BatchFrom,
}

pub struct Loaded {
    pub workload: WorkloadGraph,
    pub mapper: Mapper,
    pub accel_label: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load(run: &RunArgs) -> Result<Loaded> {
    let workload = match (&run.workload, &run.builtin) {
        (Some(path), None) => parse_workload(&read(path)?).with_context(|| format!("in {}", path.display()))?,
        (None, Some(name)) => builtin_benchmark(name)?,
        _ => bail!("give exactly one of --workload or --builtin"),
    };
    let (accel, accel_label) = match &run.accel {
        Some(path) => {
            let a = parse_accelerator(&read(path)?).with_context(|| format!("in {}", path.display()))?;
            (a, path.display().to_string())
        }
        None => {
            let kb = run.sram_kb.unwrap_or(128);
            (builtin_meta_vr(kb * 1024)?, format!("meta_vr {kb} KB"))
        }
    };
    Ok(Loaded { workload, mapper: Mapper::new(accel), accel_label })
}

pub fn cuts(args: &CutArgs, w: &WorkloadGraph) -> Result<CutSpec> {
    if let Some(path) = &args.cuts {
        return parse_cuts(&read(path)?, w).with_context(|| format!("in {}", path.display()));
    }
    let t = w.total_timesteps;
    let spec = match (args.preset, args.fuse, args.tbatch) {
        (Some(Preset::StLbl), ..) => CutSpec::st_lbl(w),
        (Some(Preset::TbLbl), ..) => CutSpec::tb_lbl(w),
        (Some(Preset::StLf), ..) => CutSpec::fused(w, 1),
        (Some(Preset::TbLf), ..) => CutSpec::fused(w, t),
        (None, None, None) => CutSpec::st_lbl(w),
        (None, f, b) => {
            let n = w.n_blocks();
            let (f, b) = (f.unwrap_or(0), b.unwrap_or(0));
            if f > n || b > n {
                bail!("--fuse and --tbatch take 0..={n} for this workload");
            }
            hybrid_cuts(w, &rank_blocks(w, args.batch_from.into()), f, b, None)
        }
    };
    spec.validate(w)?;
    Ok(spec)
}

pub fn describe_cuts(c: &CutSpec) -> String {
    c.spatial.iter().zip(&c.temporal).map(|(s, t)| format!("{s}x{t}")).collect::<Vec<_>>().join(" ")
}
