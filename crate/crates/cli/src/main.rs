//! `concept-atlas` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use concept_atlas::edit::{apply_edit, EditRequest};
use concept_atlas::fuzzy::DEFAULT_TOLERANCE;
use concept_atlas::hierarchy::{export_hierarchy, extract_hierarchy, import_hierarchy, ExtractionConfig, DEFAULT_SCHEDULE};
use concept_atlas::knn::{KnnMode, NnDescentParams};
use concept_atlas::louvain::{NodeOrder, DEFAULT_MAX_AGGREGATIONS};
use concept_atlas::metrics::{
    alignment_scores, case_variant_cohesion, parse_numeric_tokens, precision_report, topo_order_scores, LabelSet,
};
use concept_atlas::store::{
    load_embeddings, save_embeddings, save_embeddings_as, shared_vocab, EmbeddingFormat, NormalizationMode,
};
use concept_atlas::{EmbeddingSpace, TokenNormalization};

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "concept-atlas", version, about = "Concept communities in embedding spaces")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CONCEPT_ATLAS_THREADS")]
    threads: Option<usize>,
    /// Print the resolved command line, defaults included, and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
enum Command {
    /// Build the concept hierarchy of a space and write it as JSON.
    Extract(ExtractArgs),
    /// Topological ordering score of integer tokens, one CSV row per k.
    Topo(TopoArgs),
    /// Alignment score between two spaces, one CSV row per k.
    Align(AlignArgs),
    /// Precision of hierarchy communities against a label CSV.
    Precision(PrecisionArgs),
    /// Fraction of case-variant pairs sharing a leaf community.
    Cohesion(CohesionArgs),
    /// Resample or collapse selected rows and write an emb1 file.
    Edit(EditArgs),
    /// Convert between embedding formats.
    Convert(ConvertArgs),
    /// Precompute a kNN graph cache.
    KnnCache(KnnCacheArgs),
}

#[derive(Debug, Clone, PartialEq, Args)]
struct SpaceIn {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "emb1")]
    format: EmbeddingFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KnnChoice {
    Exact,
    NnDescent,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct KnnArgs {
    #[arg(long, value_enum, default_value = "nn-descent")]
    knn: KnnChoice,
    /// Seed for every randomized step.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl KnnArgs {
    fn mode(&self) -> KnnMode {
        match self.knn {
            KnnChoice::Exact => KnnMode::Exact,
            KnnChoice::NnDescent => KnnMode::NnDescent {
                params: NnDescentParams::default(),
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args)]
struct ExtractArgs {
    #[command(flatten)]
    space: SpaceIn,
    /// Descending k schedule.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SCHEDULE.to_vec())]
    k: Vec<usize>,
    #[command(flatten)]
    knn: KnnArgs,
    /// Membership-sum tolerance for the per-node bandwidth search.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Smallest leaf re-clustered at the next level (default 2k).
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_AGGREGATIONS)]
    max_aggregations: usize,
    /// Visit nodes in a seeded random order during local moves.
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct TopoArgs {
    #[command(flatten)]
    space: SpaceIn,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3, 5, 10])]
    k: Vec<usize>,
    #[arg(long, default_value = "strip-markers")]
    norm: NormalizationMode,
    /// Restrict to the members of this community (needs --hierarchy).
    #[arg(long, requires = "hierarchy")]
    community: Option<String>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Smallest integer considered.
    #[arg(long)]
    min_value: Option<i64>,
    /// Largest integer considered.
    #[arg(long)]
    max_value: Option<i64>,
    /// CSV destination (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct AlignArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "emb1")]
    format: EmbeddingFormat,
    #[arg(long, value_delimiter = ',', default_values_t = vec![3usize, 5, 10, 50])]
    k: Vec<usize>,
    #[arg(long, default_value = "strip-markers")]
    norm: NormalizationMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct PrecisionArgs {
    #[command(flatten)]
    space: SpaceIn,
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "strip-markers")]
    norm: NormalizationMode,
    #[arg(long, default_value_t = 2)]
    min_support: usize,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct CohesionArgs {
    #[command(flatten)]
    space: SpaceIn,
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct EditArgs {
    #[command(flatten)]
    space: SpaceIn,
    /// Edit request JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Hierarchy resolving the community names in the request.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Overrides the seed in the request.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    from: EmbeddingFormat,
    #[arg(long)]
    to: EmbeddingFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
struct KnnCacheArgs {
    #[command(flatten)]
    space: SpaceIn,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    knn: KnnArgs,
    #[arg(long)]
    out: PathBuf,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

impl SpaceIn {
    fn argv(&self, out: &mut Vec<String>) {
        out.extend(["--in".into(), path(&self.input), "--format".into(), self.format.to_string()]);
    }

    fn load(&self) -> Result<EmbeddingSpace> {
        load_embeddings(&self.input, self.format).with_context(|| format!("reading {}", self.input.display()))
    }
}

impl KnnArgs {
    fn argv(&self, out: &mut Vec<String>) {
        let knn = match self.knn {
            KnnChoice::Exact => "exact",
            KnnChoice::NnDescent => "nn-descent",
        };
        out.extend(["--knn".into(), knn.into(), "--seed".into(), self.seed.to_string()]);
    }
}

impl Cli {
    /// Command line that parses back to an equal `Cli`, with every default
    /// spelled out.
    fn to_argv(&self) -> Vec<String> {
        let mut v = vec!["concept-atlas".to_string()];
        if let Some(t) = self.threads {
            v.extend(["--threads".into(), t.to_string()]);
        }
        if self.dry_run {
            v.push("--dry-run".into());
        }
        let opt = |v: &mut Vec<String>, flag: &str, value: Option<String>| {
            if let Some(value) = value {
                v.extend([flag.to_string(), value]);
            }
        };
        match &self.command {
            Command::Extract(a) => {
                v.push("extract".into());
                a.space.argv(&mut v);
                v.extend(["--k".into(), join(&a.k)]);
                a.knn.argv(&mut v);
                v.extend(["--tolerance".into(), a.tolerance.to_string()]);
                opt(&mut v, "--min-size", a.min_size.map(|x| x.to_string()));
                v.extend(["--max-aggregations".into(), a.max_aggregations.to_string()]);
                if a.shuffle {
                    v.push("--shuffle".into());
                }
                v.extend(["--out".into(), path(&a.out)]);
            }
            Command::Topo(a) => {
                v.push("topo".into());
                a.space.argv(&mut v);
                v.extend(["--k".into(), join(&a.k), "--norm".into(), a.norm.to_string()]);
                opt(&mut v, "--community", a.community.clone());
                opt(&mut v, "--hierarchy", a.hierarchy.as_deref().map(path));
                opt(&mut v, "--min-value", a.min_value.map(|x| x.to_string()));
                opt(&mut v, "--max-value", a.max_value.map(|x| x.to_string()));
                opt(&mut v, "--out", a.out.as_deref().map(path));
            }
            Command::Align(a) => {
                v.push("align".into());
                v.extend(["--a".into(), path(&a.a), "--b".into(), path(&a.b)]);
                v.extend(["--format".into(), a.format.to_string(), "--k".into(), join(&a.k)]);
                v.extend(["--norm".into(), a.norm.to_string()]);
                opt(&mut v, "--out", a.out.as_deref().map(path));
            }
            Command::Precision(a) => {
                v.push("precision".into());
                a.space.argv(&mut v);
                v.extend(["--hierarchy".into(), path(&a.hierarchy), "--labels".into(), path(&a.labels)]);
                v.extend(["--norm".into(), a.norm.to_string()]);
                v.extend(["--min-support".into(), a.min_support.to_string()]);
                if a.json {
                    v.push("--json".into());
                }
                opt(&mut v, "--out", a.out.as_deref().map(path));
            }
            Command::Cohesion(a) => {
                v.push("cohesion".into());
                a.space.argv(&mut v);
                v.extend(["--hierarchy".into(), path(&a.hierarchy)]);
                opt(&mut v, "--out", a.out.as_deref().map(path));
            }
            Command::Edit(a) => {
                v.push("edit".into());
                a.space.argv(&mut v);
                v.extend(["--spec".into(), path(&a.spec)]);
                opt(&mut v, "--hierarchy", a.hierarchy.as_deref().map(path));
                opt(&mut v, "--seed", a.seed.map(|x| x.to_string()));
                v.extend(["--out".into(), path(&a.out)]);
            }
            Command::Convert(a) => {
                v.push("convert".into());
                v.extend(["--in".into(), path(&a.input)]);
                v.extend(["--from".into(), a.from.to_string(), "--to".into(), a.to.to_string()]);
                v.extend(["--out".into(), path(&a.out)]);
            }
            Command::KnnCache(a) => {
                v.push("knn-cache".into());
                a.space.argv(&mut v);
                v.extend(["--k".into(), a.k.to_string()]);
                a.knn.argv(&mut v);
                v.extend(["--out".into(), path(&a.out)]);
            }
        }
        v
    }
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn model_name(p: &Path) -> String {
    p.file_stem().map_or_else(|| path(p), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    if cli.dry_run {
        let argv: Vec<String> = cli.to_argv().into_iter().filter(|a| a != "--dry-run").collect();
        println!("{}", argv.join(" "));
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Extract(a) => {
            let space = a.space.load()?;
            let config = ExtractionConfig {
                k_schedule: a.k,
                min_community_size: a.min_size,
                knn: a.knn.mode(),
                tolerance: a.tolerance,
                max_aggregations: a.max_aggregations,
                node_order: if a.shuffle {
                    NodeOrder::SeededShuffle(a.knn.seed)
                } else {
                    NodeOrder::AscendingId
                },
            };
            let h = extract_hierarchy(&space, &config)?;
            export_hierarchy(&h, &a.out)?;
        }
        Command::Topo(a) => {
            let space = a.space.load()?;
            let norm = TokenNormalization::new(a.norm);
            let mut cluster = parse_numeric_tokens(&space, &norm);
            if let (Some(name), Some(h)) = (&a.community, &a.hierarchy) {
                let h = import_hierarchy(h)?;
                let mut rows = h.find(name)?.members.clone();
                rows.sort_unstable();
                cluster = cluster.restrict_to_rows(&rows);
            }
            if a.min_value.is_some() || a.max_value.is_some() {
                cluster = cluster.restrict_to_range(a.min_value.unwrap_or(i64::MIN), a.max_value.unwrap_or(i64::MAX));
            }
            let results = topo_order_scores(&space, &cluster, &a.k)?;
            let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
            w.write_record(["model", "k", "score", "evaluated", "support"])?;
            let model = model_name(&a.space.input);
            for r in results {
                w.write_record([
                    model.clone(),
                    r.k.to_string(),
                    format!("{:.6}", r.score),
                    r.evaluated.to_string(),
                    r.support.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Align(a) => {
            let sa = load_embeddings(&a.a, a.format).with_context(|| format!("reading {}", a.a.display()))?;
            let sb = load_embeddings(&a.b, a.format).with_context(|| format!("reading {}", a.b.display()))?;
            let pairs = shared_vocab(&sa, &sb, &TokenNormalization::new(a.norm));
            let results = alignment_scores(&sa, &sb, &pairs, &a.k)?;
            let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
            w.write_record(["model_a", "model_b", "k", "score", "support"])?;
            let (ma, mb) = (model_name(&a.a), model_name(&a.b));
            for r in results {
                w.write_record([
                    ma.clone(),
                    mb.clone(),
                    r.k.to_string(),
                    format!("{:.6}", r.score),
                    r.support.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Precision(a) => {
            let space = a.space.load()?;
            let h = import_hierarchy(&a.hierarchy)?;
            let labels = LabelSet::load(&a.labels, TokenNormalization::new(a.norm))?;
            let report = precision_report(&h, &labels, &space, a.min_support)?;
            let mut out = output(a.out.as_deref())?;
            if a.json {
                report.write_json(&mut out)?;
                writeln!(out)?;
            } else {
                report.write_csv(&mut out)?;
            }
            out.flush()?;
        }
        Command::Cohesion(a) => {
            let space = a.space.load()?;
            let h = import_hierarchy(&a.hierarchy)?;
            let r = case_variant_cohesion(&h, &space)?;
            let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
            w.write_record(["fraction", "pairs", "cohesive", "tokens"])?;
            w.write_record([
                format!("{:.6}", r.fraction),
                r.pairs.to_string(),
                r.cohesive.to_string(),
                r.tokens.to_string(),
            ])?;
            w.flush()?;
        }
        Command::Edit(a) => {
            let space = a.space.load()?;
            let mut request = EditRequest::load(&a.spec)?;
            if let Some(seed) = a.seed {
                request.seed = seed;
            }
            let h = a.hierarchy.as_deref().map(import_hierarchy).transpose()?;
            let spec = request.resolve(h.as_ref())?;
            save_embeddings(&apply_edit(&space, &spec)?, &a.out)?;
        }
        Command::Convert(a) => {
            let space = load_embeddings(&a.input, a.from)?;
            save_embeddings_as(&space, &a.out, a.to)?;
        }
        Command::KnnCache(a) => {
            let space = a.space.load()?;
            a.knn.mode().build(&space, None, a.k)?.save(&a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo(args: &[&str]) {
        let cli = Cli::try_parse_from(args).unwrap();
        let again = Cli::try_parse_from(cli.to_argv()).unwrap();
        assert_eq!(cli, again, "{:?}", cli.to_argv());
    }

    #[test]
    fn run_config_echoes_back() {
        echo(&["concept-atlas", "extract", "--in", "a.emb1", "--out", "h.json"]);
        echo(&[
            "concept-atlas", "--threads", "3", "extract", "--in", "a.txt", "--format", "word2vec", "--k", "25,6",
            "--knn", "exact", "--seed", "9", "--min-size", "40", "--max-aggregations", "1", "--shuffle", "--out", "h.json", "--dry-run",
        ]);
        echo(&["concept-atlas", "topo", "--in", "a.emb1", "--k", "1,3", "--community", "0_1", "--hierarchy", "h.json", "--min-value", "0", "--max-value", "99"]);
        echo(&["concept-atlas", "align", "--a", "t5.emb1", "--b", "llama.emb1", "--k", "3,5,10,50", "--norm", "strip-markers"]);
        echo(&["concept-atlas", "precision", "--in", "a.emb1", "--hierarchy", "h.json", "--labels", "l.csv", "--json", "--out", "p.json"]);
        echo(&["concept-atlas", "cohesion", "--in", "a.emb1", "--hierarchy", "h.json"]);
        echo(&["concept-atlas", "edit", "--in", "a.emb1", "--spec", "s.json", "--seed", "4", "--out", "b.emb1"]);
        echo(&["concept-atlas", "convert", "--in", "a.txt", "--from", "word2vec", "--to", "emb1", "--out", "a.emb1"]);
        echo(&["concept-atlas", "knn-cache", "--in", "a.emb1", "--k", "15", "--out", "a.knn"]);
    }

    #[test]
    fn defaults() {
        let cli = Cli::try_parse_from(["concept-atlas", "extract", "--in", "a.emb1", "--out", "h.json"]).unwrap();
        let Command::Extract(a) = cli.command else { panic!() };
        assert_eq!(a.k, DEFAULT_SCHEDULE.to_vec());
        assert_eq!(a.knn.knn, KnnChoice::NnDescent);
        assert_eq!(a.max_aggregations, DEFAULT_MAX_AGGREGATIONS);
    }

    #[test]
    fn community_requires_hierarchy() {
        assert!(Cli::try_parse_from(["concept-atlas", "topo", "--in", "a.emb1", "--community", "0_1"]).is_err());
    }
}
