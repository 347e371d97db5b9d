use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "spainmob",
    version,
    about = "Download, cache, normalize and analyze the Spanish open mobility datasets",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "data", value_name = "DIR")]
    pub out: PathBuf,
    /// Catalog file; overrides $SPAINMOB_CATALOG and the bundled default.
    #[arg(long, global = true, value_name = "PATH")]
    pub catalog: Option<PathBuf>,
    /// Cache root; overrides $SPAINMOB_CACHE. Defaults to <out>/cache.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Never touch the network; serve only cached files.
    #[arg(long, global = true)]
    pub offline: bool,
    /// More log output on standard error (repeat for debug detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on standard error.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Report errors as one JSON object on standard error.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Simultaneous downloads.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u32).range(1..=64))]
    pub max_concurrent: Option<u32>,
    /// Retries per file after the first attempt.
    #[arg(long, global = true, value_name = "N")]
    pub max_retries: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download raw daily files into the cache and print their paths.
    Fetch(FetchArgs),
    /// Origin-destination matrices.
    Od(OdArgs),
    /// Number of trips per person.
    Trips(TableArgs),
    /// Overnight stays.
    Overnight(TableArgs),
    /// Zone geometry and relation tables.
    #[command(subcommand)]
    Zones(ZonesCommand),
    /// Relation table between zone levels (same as `zones relations`).
    Relations(RelationsArgs),
    /// Aggregate analyses over normalized tables.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Cache maintenance.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Print a shell completion script.
    Completions {
        #[arg(value_enum)]
        shell: clap_complete::Shell,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Od,
    Trips,
    Overnight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Parquet,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct RequestArgs {
    /// Dataset version: 1 (2020-2021) or 2 (2022 onwards).
    #[arg(long = "version", value_name = "N", allow_negative_numbers = true)]
    pub dataset_version: i64,
    /// Zone level: districts, municipalities or gau (aliases accepted).
    #[arg(long, value_name = "LEVEL")]
    pub zones: String,
    /// First day, YYYY-MM-DD.
    #[arg(long, value_name = "DATE")]
    pub start: String,
    /// Last day, YYYY-MM-DD; defaults to the start date.
    #[arg(long, value_name = "DATE")]
    pub end: Option<String>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ParseArgs {
    /// Abort on the first malformed row instead of skipping it.
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,
    /// Skip malformed rows and report them (default).
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long, value_enum, default_value = "od")]
    pub kind: KindArg,
    #[command(flatten)]
    pub request: RequestArgs,
}

#[derive(Debug, Args)]
pub struct OdArgs {
    #[command(flatten)]
    pub request: RequestArgs,
    /// Keep the activity columns at origin and destination.
    #[arg(long)]
    pub keep_activity: bool,
    /// Re-key to a coarser zone level through the relation table.
    #[arg(long, value_name = "LEVEL")]
    pub aggregate_to: Option<String>,
    #[arg(long, value_enum, default_value = "parquet")]
    pub format: FormatArg,
    #[command(flatten)]
    pub parse: ParseArgs,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[command(flatten)]
    pub request: RequestArgs,
    /// Re-key to a coarser zone level through the relation table.
    #[arg(long, value_name = "LEVEL")]
    pub aggregate_to: Option<String>,
    #[arg(long, value_enum, default_value = "parquet")]
    pub format: FormatArg,
    #[command(flatten)]
    pub parse: ParseArgs,
}

#[derive(Debug, Subcommand)]
pub enum ZonesCommand {
    /// Write one tessellation as GeoJSON (WGS84).
    Get(ZonesGetArgs),
    /// Write the relation table.
    Relations(RelationsArgs),
}

#[derive(Debug, Args)]
pub struct ZonesGetArgs {
    #[arg(long, value_name = "LEVEL")]
    pub zones: String,
    #[arg(long = "version", value_name = "N", allow_negative_numbers = true)]
    pub dataset_version: i64,
}

#[derive(Debug, Args)]
pub struct RelationsArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DimensionArg {
    Age,
    Gender,
    Income,
}

#[derive(Debug, Args)]
pub struct AnalysisOutput {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[command(flatten)]
    pub parse: ParseArgs,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Average daily trips and distinct destinations from one origin.
    WeekdayWeekend {
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long, value_name = "ZONE")]
        origin: String,
        #[arg(long, value_enum, value_name = "DIMENSION")]
        group_by: Option<DimensionArg>,
        #[command(flatten)]
        output: AnalysisOutput,
    },
    /// Trips per hour of day.
    Hourly {
        #[command(flatten)]
        request: RequestArgs,
        /// Keep only trips arriving at this zone.
        #[arg(long, value_name = "ZONE")]
        destination: Option<String>,
        #[arg(long, value_enum, value_name = "DIMENSION")]
        group_by: Option<DimensionArg>,
        #[arg(long, value_enum, default_value = "sum")]
        reducer: ReducerArg,
        /// Drop trips whose origin equals their destination.
        #[arg(long)]
        exclude_internal: bool,
        #[command(flatten)]
        output: AnalysisOutput,
    },
    /// Destinations in the top percentile of trips from one origin.
    TopFlows {
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long, value_name = "ZONE")]
        origin: String,
        /// Percentile rank in (0, 100].
        #[arg(long, default_value_t = 3.0)]
        percentile: f64,
        #[arg(long, value_enum, default_value = "destinations")]
        basis: BasisArg,
        #[command(flatten)]
        output: AnalysisOutput,
    },
    /// Quantile classes of overnight stays per zone, as GeoJSON and a table.
    OvernightMap {
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_enum, default_value = "mean")]
        statistic: StatisticArg,
        #[command(flatten)]
        output: AnalysisOutput,
    },
    /// Trips and destinations per demographic group and weekday/weekend.
    Breakdown {
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long, value_name = "ZONE")]
        origin: String,
        /// Comma-separated: age, gender, income.
        #[arg(long, value_delimiter = ',', default_value = "age,gender,income")]
        dimensions: Vec<String>,
        #[command(flatten)]
        output: AnalysisOutput,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReducerArg {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Destinations,
    Mass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatisticArg {
    Mean,
    Total,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Remove cached files and their manifest entries.
    Purge {
        /// Only entries fetched at least this long ago, e.g. 30d, 12h.
        #[arg(long, value_name = "DURATION", value_parser = humantime::parse_duration)]
        older_than: Option<std::time::Duration>,
        /// Only entries of this dataset version.
        #[arg(long = "dataset-version", value_name = "N")]
        dataset_version: Option<i64>,
    },
    /// Print the cached file paths.
    List,
}
