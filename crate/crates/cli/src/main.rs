use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forest_core::io::read_categories;
use forest_core::nms::{ResamplingConfig, Scheme};
use forest_core::pipeline::{
    cmd_analyze, cmd_build_tree, cmd_eval, cmd_nms, cmd_score, load_forest, run_pipeline, thread_pool, write_demo,
    AnalyzeInput, PipelineConfig, TreeInputs,
};
use forest_core::scoring::ScoreMode;
use forest_core::taxonomy::{CategorySet, Group};
use forest_core::tree_builder::DEFAULT_MASK_GRID;
use forest_core::{Error, Result};

/// Classification-forest scoring, class-aware NMS resampling, noisy-logit analysis and
/// COCO-style evaluation for long-tailed detection outputs.
#[derive(Debug, Parser)]
#[command(name = "forest", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML pipeline configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// baseline, preliminary:<tree>, tree:<tree>, forest_score or forest_vote.
    #[arg(long, global = true)]
    mode: Option<ScoreMode>,
    /// NMS threshold scheme: discrete, linear or fixed. Resets the alphas to that scheme's defaults.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    #[arg(long, global = true)]
    alpha_f: Option<f64>,
    #[arg(long, global = true)]
    alpha_c: Option<f64>,
    #[arg(long, global = true)]
    alpha_r: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Threshold for every class under the fixed scheme.
    #[arg(long, global = true)]
    fixed_threshold: Option<f64>,
    /// Linear scheme with the frequent/rare base thresholds swapped as literally printed.
    #[arg(long, global = true)]
    as_printed: bool,
    #[arg(long, global = true)]
    eps_gt: Option<f64>,
    #[arg(long, global = true)]
    eps_neg: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Category file (JSONL).
    #[arg(long, global = true)]
    categories: Option<PathBuf>,
    /// Tree files; repeat for a forest.
    #[arg(long = "tree", global = true)]
    trees: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TreeKind {
    Lexical,
    Visual,
    Geometric,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a classification tree from a hierarchy, features or masks.
    BuildTree {
        #[arg(long)]
        kind: TreeKind,
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Number of parents; defaults to 25 (visual) or 50 (geometric).
        #[arg(long)]
        k: Option<usize>,
        /// Mask resampling grid as HxW.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score logit records with the selected mode.
    Score {
        #[arg(long)]
        records: Option<PathBuf>,
        /// Output file; defaults to <out-dir>/scores.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-aware NMS over per-image proposals.
    Nms {
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Ground-truth boxes; when given, proposals are raw boxes labelled by overlap.
        #[arg(long)]
        gts: Option<PathBuf>,
    },
    /// Noisy-logit statistics and score densities.
    Analyze {
        #[arg(long, conflicts_with = "scores")]
        records: Option<PathBuf>,
        /// A score file written by `score`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Box (and, when masks are present, mask) AP with rare/common/frequent breakdown.
    Eval {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// score, analyze, nms and eval in sequence from a config file.
    Pipeline,
    /// Write the seeded demo dataset and a pipeline.toml into a directory.
    Demo {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(h)?, p(w)?))
}

impl Global {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = &self.mode {
            cfg.mode = m.clone();
        }
        let r = &mut cfg.resampling;
        if let Some(s) = self.scheme {
            let keep = (r.background_threshold, r.as_printed);
            *r = match s {
                Scheme::Discrete => ResamplingConfig::discrete_default(),
                Scheme::Linear => ResamplingConfig::linear_default(),
                Scheme::Fixed => ResamplingConfig::fixed(r.fixed_threshold),
            };
            (r.background_threshold, r.as_printed) = keep;
        }
        for (slot, v) in [
            (&mut r.alpha_f, self.alpha_f),
            (&mut r.alpha_c, self.alpha_c),
            (&mut r.alpha_r, self.alpha_r),
            (&mut r.beta, self.beta),
            (&mut r.fixed_threshold, self.fixed_threshold),
            (&mut cfg.noisy.eps_gt, self.eps_gt),
            (&mut cfg.noisy.eps_neg, self.eps_neg),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        r.as_printed |= self.as_printed;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(c) = &self.categories {
            cfg.categories = Some(c.clone());
        }
        if !self.trees.is_empty() {
            cfg.trees = self.trees.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::invalid(format!("missing --{flag}")))
}

fn categories(cfg: &PipelineConfig) -> Result<CategorySet> {
    read_categories(required(None, &cfg.categories, "categories")?, cfg.strict_groups)
}

fn print_groups(stats: &forest_core::pipeline::NmsStats) {
    for key in Group::ALL.iter().map(|g| g.as_str()).chain(["background"]) {
        let g = stats.group(key);
        let ratio = g.ratio().map_or("-".to_string(), |r| format!("{r:.4}"));
        println!("{key:<10} input {:>7} kept {:>7} ratio {ratio}", g.input, g.kept);
    }
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.config()?;
    match cli.command {
        Command::BuildTree { kind, hierarchy, features, masks, k, grid, out } => {
            let cats = || required(None, &cfg.categories, "categories");
            let inputs = match kind {
                TreeKind::Lexical => TreeInputs::Lexical {
                    hierarchy: required(hierarchy, &None, "hierarchy")?,
                    categories: cats()?,
                },
                TreeKind::Visual => TreeInputs::Visual { features: required(features, &None, "features")? },
                TreeKind::Geometric => TreeInputs::Geometric {
                    masks: required(masks, &None, "masks")?,
                    categories: cats()?,
                    grid: grid.unwrap_or(DEFAULT_MASK_GRID),
                },
            };
            let mut km = cfg.kmeans;
            if k.is_some() {
                km.k = k;
            }
            let tree = cmd_build_tree(&inputs, &km, cfg.seed, &out)?;
            println!("tree {}: M={} cluster sizes {:?}", tree.tree_id, tree.num_parents, tree.parent_sizes());
        }
        Command::Score { records, out } => {
            let cats = categories(&cfg)?;
            let forest = load_forest(&cfg.trees, cats.len())?;
            let records = required(records, &cfg.records, "records")?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("scores.jsonl"));
            let s = cmd_score(&cats, forest.as_ref(), &records, &cfg.mode, &out, &thread_pool(cfg.threads)?)?;
            println!("scored {} records with mode {} -> {}", s.records, s.mode, out.display());
        }
        Command::Nms { proposals, gts } => {
            let cats = categories(&cfg)?;
            let proposals = required(proposals, &cfg.proposals, "proposals")?;
            let gts = gts.or_else(|| cfg.proposal_gts.clone());
            let stats = cmd_nms(&cats, &proposals, gts.as_deref(), &cfg.resampling, cfg.fg_iou, &cfg.out_dir)?;
            println!("{} images", stats.images);
            print_groups(&stats);
        }
        Command::Analyze { records, scores } => {
            let cats = categories(&cfg)?;
            let pool = thread_pool(cfg.threads)?;
            let summary = if let Some(scores) = scores {
                cmd_analyze(&cats, &AnalyzeInput::Scores { path: &scores }, &cfg.noisy, cfg.histogram_bins, &cfg.out_dir, &pool)?
            } else {
                let records = required(records, &cfg.records, "records")?;
                let forest = load_forest(&cfg.trees, cats.len())?;
                let mut modes = vec![ScoreMode::Baseline];
                if cfg.mode != ScoreMode::Baseline && forest.is_some() {
                    modes.push(cfg.mode.clone());
                }
                let input = AnalyzeInput::Records { path: &records, forest: forest.as_ref(), modes };
                cmd_analyze(&cats, &input, &cfg.noisy, cfg.histogram_bins, &cfg.out_dir, &pool)?
            };
            for r in &summary.reports {
                println!("{:<20} mean noisy {:.4} over {} objects", r.source, r.mean_noisy, r.n_objects);
            }
        }
        Command::Eval { detections, ground_truth } => {
            let cats = categories(&cfg)?;
            let dets = required(detections, &cfg.detections, "detections")?;
            let gts = required(ground_truth, &cfg.ground_truth, "ground-truth")?;
            let out = cmd_eval(&cats, &dets, &gts, cfg.max_dets, &cfg.out_dir)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for r in std::iter::once(&out.bbox).chain(out.mask.as_ref()) {
                println!(
                    "{:?}: AP {:.4} AP50 {:.4} AP75 {:.4} APr {} APc {} APf {}",
                    r.iou_type,
                    r.ap,
                    r.ap50,
                    r.ap75,
                    fmt_ap(r.ap_r),
                    fmt_ap(r.ap_c),
                    fmt_ap(r.ap_f)
                );
            }
        }
        Command::Pipeline => {
            if cli.global.config.is_none() {
                return Err(Error::invalid("pipeline needs --config"));
            }
            let s = run_pipeline(&cfg)?;
            println!("scored {} records with mode {}", s.score.records, s.score.mode);
            for r in &s.analysis.reports {
                println!("{:<20} mean noisy {:.4}", r.source, r.mean_noisy);
            }
            if let Some(n) = &s.nms {
                print_groups(n);
            }
            if let Some(e) = &s.eval {
                for w in &e.warnings {
                    eprintln!("warning: {w}");
                }
                println!("box AP {:.4}", e.bbox.ap);
                if let Some(m) = &e.mask {
                    println!("mask AP {:.4}", m.ap);
                }
            }
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Demo { dir } => {
            let path = write_demo(&dir, cfg.seed)?;
            println!("demo dataset written; run: forest pipeline --config {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
