//! Command-line front end. `run` returns the process exit code: 0 success,
//! 1 usage/config, 2 data/format, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{cross_study_split, kfold_split, load_manifest, CaseRecord, Manifest};
use crate::metrics::{dice_coefficient, overlap_map, read_dice_column, summarize, wilcoxon_ranksum, write_reports, CaseReport, LesionClass, WilcoxonMethod};
use crate::ninepath::{Aggregation, NinePathModel, META_CONFIG_HASH};
use crate::phantom::{gen_phantom, PhantomSpec};
use crate::tensor::Tensor;
use crate::train::{load_cases, train_full};
use crate::volume::{read_volume, write_volume, write_volume_as, DType, Modality, Volume};

#[derive(Debug, Parser)]
#[command(name = "strokeseg", version, about = "Nine-path 2.5D lesion segmentation")]
pub struct Cli {
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub reference: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantoms and a manifest.
    Phantom(PhantomArgs),
    /// Write train/test manifests for k-fold or cross-study validation.
    Split(SplitArgs),
    /// Train the nine paths and the post-processor.
    Train(TrainArgs),
    /// Segment one volume, or every case of a manifest.
    Predict(PredictArgs),
    /// Score predictions against the truth masks of a manifest.
    Evaluate(EvaluateArgs),
    /// Wilcoxon rank-sum test on the dice columns of two CSV files.
    Compare(CompareArgs),
    /// Voxelwise count over all masks in a directory.
    Overlap(OverlapArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    /// Grid size as XxYxZ, e.g. 48x64x48.
    #[arg(long, value_parser = parse_dims)]
    pub size: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of folds.
    #[arg(long, conflicts_with = "cross_study", required_unless_present = "cross_study")]
    pub kfold: Option<usize>,
    /// One split per split_tag.
    #[arg(long)]
    pub cross_study: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-path and post-processor CSV logs (default: `<out>.logs`).
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub secondary: Option<PathBuf>,
    /// Predict every case; masks go to `<out>/<case_id>.mvol`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_aggregation, default_value = "cnn")]
    pub aggregation: Aggregation,
    /// Output mask file, or directory with `--manifest`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory holding `<case_id>.mvol` predictions.
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub csv_a: PathBuf,
    pub csv_b: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub mask_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected XxYxZ, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad extent {p:?}"))?;
    }
    Ok(out)
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    Aggregation::parse(s).ok_or_else(|| format!("unknown aggregation {s:?} (cnn, majority, union)"))
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, out),
        Command::Split(a) => cmd_split(a, out),
        Command::Train(a) => cmd_train(a, !cli.reference, out),
        Command::Predict(a) => cmd_predict(a, !cli.reference, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Overlap(a) => cmd_overlap(a, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Phantom `i` of a set uses the `i`-th draw of the set seed.
pub fn phantom_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

fn cmd_phantom(a: &PhantomArgs, out: &mut dyn Write) -> Result<()> {
    if a.count == 0 {
        return Err(Error::config("count must be positive"));
    }
    if a.size.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::config(format!("size {:?} must be positive multiples of 16", a.size)));
    }
    create_dir(&a.out)?;
    let mut records = Vec::with_capacity(a.count);
    for (i, seed) in phantom_seeds(a.seed, a.count).into_iter().enumerate() {
        let p = gen_phantom(&PhantomSpec::new(a.size, seed))?;
        let id = format!("case_{i:03}");
        let names = [format!("{id}_t1.mvol"), format!("{id}_flair.mvol"), format!("{id}_truth.mvol")];
        for (name, v) in names.iter().zip([&p.t1, &p.flair, &p.truth]) {
            write_volume_as(v, a.out.join(name), if v.modality() == Modality::Mask { DType::U8 } else { DType::F32 })?;
        }
        let [t1, flair, truth] = names;
        records.push(CaseRecord {
            case_id: id,
            input_volume_path: t1.into(),
            second_input_path: Some(flair.into()),
            truth_mask_path: truth.into(),
            split_tag: if i < a.count.div_ceil(2) { "A".into() } else { "B".into() },
        });
    }
    Manifest::new(records)?.save(a.out.join("manifest.json"))?;
    say(out, format!("wrote {} phantoms to {}", a.count, a.out.display()))
}

fn cmd_split(a: &SplitArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let splits = match a.kfold {
        Some(k) => kfold_split(&m, k, a.seed)?,
        None => cross_study_split(&m)?,
    };
    create_dir(&a.out)?;
    for s in &splits {
        s.train.save(a.out.join(format!("{}_train.json", s.name)))?;
        s.test.save(a.out.join(format!("{}_test.json", s.name)))?;
        say(out, format!("{}: train={} test={}", s.name, s.train.len(), s.test.len()))?;
    }
    Ok(())
}

/// `meta.config_hash`: the 32 hash bytes as exact small-integer floats.
pub fn config_hash_tensor(config: &RunConfig) -> Tensor<f32> {
    let bytes = config.hash();
    Tensor::new(&[bytes.len()], bytes.iter().map(|&b| b as f32).collect()).expect("32 entries")
}

fn cmd_train(a: &TrainArgs, parallel: bool, out: &mut dyn Write) -> Result<()> {
    let config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let m = load_manifest(&a.manifest)?;
    let cases = load_cases(&m, config.mode)?;
    if let Some(c) = cases.iter().find(|c| c.t1.dims() != config.dims) {
        return Err(Error::data(format!(
            "case {}: dims {:?} differ from configured {:?}",
            c.case_id,
            c.t1.dims(),
            config.dims
        )));
    }
    let mut tc = config.train_config(parallel);
    tc.verbose = a.verbose;
    let (model, logs) = train_full(&cases, &tc)?;
    let mut ckpt = model.to_checkpoint()?;
    ckpt.insert(META_CONFIG_HASH, config_hash_tensor(&config))?;
    write_checkpoint(&ckpt, &a.out)?;
    let log_dir = a.log_dir.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".logs");
        PathBuf::from(s)
    });
    create_dir(&log_dir)?;
    for log in &logs {
        log.write_csv(log_dir.join(format!("{}.csv", log.name)))?;
        if let Some(l) = log.final_loss() {
            say(out, format!("{} final_loss={l:.6}", log.name))?;
        }
    }
    say(out, format!("checkpoint={}", a.out.display()))
}

fn load_model(path: &Path) -> Result<NinePathModel> {
    NinePathModel::from_checkpoint(&read_checkpoint(path)?)
}

fn cmd_predict(a: &PredictArgs, parallel: bool, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    if let Some(mp) = &a.manifest {
        let m = load_manifest(mp)?;
        create_dir(&a.out)?;
        for r in &m.records {
            let t1 = read_volume(&r.input_volume_path)?;
            let second = match &r.second_input_path {
                Some(p) if model.mode == crate::unet::InputMode::Bimodal => Some(read_volume(p)?),
                _ => None,
            };
            let pred = model.predict(&t1, second.as_ref(), a.aggregation, parallel)?;
            write_volume_as(&pred.mask, a.out.join(format!("{}.mvol", r.case_id)), DType::U8)?;
        }
        return say(out, format!("wrote {} masks to {}", m.len(), a.out.display()));
    }
    let input = a.input.as_ref().expect("clap requires --input without --manifest");
    let t1 = read_volume(input)?;
    let second = a.secondary.as_ref().map(read_volume).transpose()?;
    let pred = model.predict(&t1, second.as_ref(), a.aggregation, parallel)?;
    write_volume_as(&pred.mask, &a.out, DType::U8)?;
    say(out, format!("{} voxels={} out={}", a.aggregation.name(), pred.mask.count_nonzero(), a.out.display()))
}

fn summary_line(label: &str, reports: &[&CaseReport]) -> Result<Option<String>> {
    if reports.is_empty() {
        return Ok(None);
    }
    let dice: Vec<f64> = reports.iter().map(|r| r.dice).collect();
    Ok(Some(format!("{label} n={} {}", dice.len(), summarize(&dice)?.to_key_values())))
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let reports = evaluate_dir(&a.pred_dir, &m)?;
    write_reports(&a.out, &reports)?;
    let all: Vec<&CaseReport> = reports.iter().collect();
    for (label, class) in [("overall", None), ("small", Some(LesionClass::Small)), ("large", Some(LesionClass::Large))] {
        let subset: Vec<&CaseReport> = all.iter().copied().filter(|r| class.is_none_or(|c| r.class == c)).collect();
        if let Some(line) = summary_line(label, &subset)? {
            say(out, line)?;
        }
    }
    Ok(())
}

/// One report per manifest case from `<pred_dir>/<case_id>.mvol`.
pub fn evaluate_dir(pred_dir: &Path, m: &Manifest) -> Result<Vec<CaseReport>> {
    m.records
        .iter()
        .map(|r| {
            let pred_path = pred_dir.join(format!("{}.mvol", r.case_id));
            if !pred_path.is_file() {
                return Err(Error::data(format!("case {}: no prediction at {}", r.case_id, pred_path.display())));
            }
            let pred = read_volume(&pred_path)?;
            let truth = read_volume(&r.truth_mask_path)?;
            dice_coefficient(&r.case_id, &pred, &truth)
        })
        .collect()
}

fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let x = read_dice_column(&a.csv_a)?;
    let y = read_dice_column(&a.csv_b)?;
    let r = wilcoxon_ranksum(&x, &y)?;
    let method = match r.method {
        WilcoxonMethod::Exact => "exact",
        WilcoxonMethod::Normal => "normal",
    };
    let (sa, sb) = (summarize(&x)?, summarize(&y)?);
    say(out, format!("n_a={} n_b={} mean_a={:.6} mean_b={:.6}", x.len(), y.len(), sa.mean, sb.mean))?;
    say(out, format!("W={} p={:.12} method={method}", r.w, r.p_two_sided))
}

fn cmd_overlap(a: &OverlapArgs, out: &mut dyn Write) -> Result<()> {
    let entries = std::fs::read_dir(&a.mask_dir).map_err(|e| Error::io(&a.mask_dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(&a.mask_dir, e))?.path();
        if p.extension().is_some_and(|x| x == "mvol") {
            files.push(p);
        }
    }
    files.sort();
    let masks: Vec<Volume> = files.iter().map(read_volume).collect::<Result<_>>()?;
    let map = overlap_map(&masks)?;
    write_volume(&map, &a.out)?;
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    say(out, format!("masks={} max_overlap={max} out={}", masks.len(), a.out.display()))
}
