use std::cell::OnceCell;
use std::path::{Path, PathBuf};

use log::{info, warn};
use spainmob::analytics::{
    self, AnalyticsTable, HourlyOptions, HourlyReducer, OvernightStatistic, PercentileBasis,
};
use spainmob::catalog::{self, CatalogConfig, CATALOG_ENV};
use spainmob::fetcher::{Cache, FetchPolicy, Fetcher, CACHE_ENV};
use spainmob::model::{
    parse_zone_level, DatasetKind, DatasetRequest, DatasetVersion, Dimension, ModelError, ZoneId,
};
use spainmob::normalizer::export::{self, Columnar, ExportedTable, OutputFormat};
use spainmob::normalizer::{Mobility, OdTable, ParseMode, ParseReport, Table};
use spainmob::zones::{self, Rezone};

use crate::args::{
    AnalysisOutput, AnalyzeCommand, BasisArg, CacheCommand, Cli, Command, DimensionArg, FormatArg,
    GlobalArgs, KindArg, ParseArgs, ReducerArg, RelationsArgs, RequestArgs, StatisticArg,
    ZonesCommand,
};
use crate::errors::{CliError, EXIT_OTHER};

/// Catalog, cache and fetcher shared by every subcommand.
struct Session {
    out: PathBuf,
    catalog: CatalogConfig,
    cache_root: PathBuf,
    cache: OnceCell<Cache>,
    fetcher: Fetcher,
}

impl Session {
    fn open(global: &GlobalArgs) -> Result<Self, CliError> {
        let env_catalog = std::env::var(CATALOG_ENV).ok();
        let (catalog, origin) =
            catalog::discover_catalog(global.catalog.as_deref(), env_catalog.as_deref())?;
        info!("catalog: {origin}");
        let cache_root = cache_root(global);
        info!("cache: {}", cache_root.display());
        let mut policy = FetchPolicy {
            offline_mode: global.offline,
            ..FetchPolicy::default()
        };
        if let Some(n) = global.max_concurrent {
            policy.max_concurrent = n as usize;
        }
        if let Some(n) = global.max_retries {
            policy.max_retries = n;
        }
        let fetcher = Fetcher::for_catalog(policy, &catalog);
        Ok(Session {
            out: global.out.clone(),
            catalog,
            cache_root,
            cache: OnceCell::new(),
            fetcher,
        })
    }

    /// Opened on first use so that rejected requests leave no files behind.
    fn cache(&self) -> Result<&Cache, CliError> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let cache = Cache::open(&self.cache_root)?;
        Ok(self.cache.get_or_init(|| cache))
    }

    fn request(&self, args: &RequestArgs, kind: DatasetKind) -> Result<DatasetRequest, CliError> {
        Ok(self.catalog.availability.validate_request(
            args.dataset_version,
            kind,
            &args.zones,
            &args.start,
            args.end.as_deref(),
            &self.out,
        )?)
    }

    fn mobility(
        &self,
        request: DatasetRequest,
        parse: ParseArgs,
    ) -> Result<Mobility<'_>, CliError> {
        Ok(
            Mobility::new(request, &self.catalog, &self.fetcher, self.cache()?)
                .with_mode(parse_mode(parse)),
        )
    }
}

/// `--cache-dir`, then `$SPAINMOB_CACHE`, then `<out>/cache`.
fn cache_root(global: &GlobalArgs) -> PathBuf {
    if let Some(dir) = &global.cache_dir {
        return dir.clone();
    }
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => global.out.join("cache"),
    }
}

fn parse_mode(args: ParseArgs) -> ParseMode {
    if args.strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn output_format(f: FormatArg) -> OutputFormat {
    match f {
        FormatArg::Parquet => OutputFormat::Parquet,
        FormatArg::Csv => OutputFormat::Csv,
    }
}

fn dimension(d: DimensionArg) -> Dimension {
    match d {
        DimensionArg::Age => Dimension::Age,
        DimensionArg::Gender => Dimension::Gender,
        DimensionArg::Income => Dimension::Income,
    }
}

fn zone_id(raw: &str) -> Result<ZoneId, CliError> {
    Ok(ZoneId::new(raw.trim())?)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(
        EXIT_OTHER,
        "io",
        format!("i/o error on {}: {e}", path.display()),
    )
}

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))
}

fn report_skipped(report: &ParseReport) {
    if report.rows_skipped > 0 {
        warn!("{} malformed rows skipped in total", report.rows_skipped);
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Completions { shell } = cli.command {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        clap_complete::generate(shell, &mut cmd, "spainmob", &mut std::io::stdout());
        return Ok(());
    }
    let session = Session::open(&cli.global)?;
    match cli.command {
        Command::Fetch(args) => fetch(&session, args.kind, &args.request),
        Command::Od(args) => {
            let request = session.request(&args.request, DatasetKind::OriginDestination)?;
            let mobility = session.mobility(request, args.parse)?;
            let (table, report) = mobility.load_od(args.keep_activity)?;
            report_skipped(&report);
            write_table(
                &session,
                &mobility,
                table,
                args.aggregate_to.as_deref(),
                args.format,
                args.parse,
            )
        }
        Command::Trips(args) => {
            let request = session.request(&args.request, DatasetKind::TripsPerPerson)?;
            let mobility = session.mobility(request, args.parse)?;
            let (table, report) = mobility.load_trips()?;
            report_skipped(&report);
            write_table(
                &session,
                &mobility,
                table,
                args.aggregate_to.as_deref(),
                args.format,
                args.parse,
            )
        }
        Command::Overnight(args) => {
            let request = session.request(&args.request, DatasetKind::OvernightStays)?;
            let mobility = session.mobility(request, args.parse)?;
            let (table, report) = mobility.load_overnight()?;
            report_skipped(&report);
            write_table(
                &session,
                &mobility,
                table,
                args.aggregate_to.as_deref(),
                args.format,
                args.parse,
            )
        }
        Command::Zones(ZonesCommand::Get(args)) => {
            let version = DatasetVersion::from_number(args.dataset_version)?;
            let level = parse_zone_level(&args.zones)?;
            if !version.supports(level) {
                return Err(ModelError::VersionZoneConflict.into());
            }
            let zones = zones::get_zone_geodataframe(
                level,
                version,
                &session.catalog,
                &session.fetcher,
                session.cache()?,
            )?;
            let mean = zones::mean_area_by_level(&zones)?;
            info!("{} zones, mean area {mean:.3} km²", zones.len());
            create_out(&session.out)?;
            let path = zones::export_zones(&zones, level, version, &session.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Zones(ZonesCommand::Relations(args)) | Command::Relations(args) => {
            relations(&session, &args)
        }
        Command::Analyze(cmd) => analyze(&session, cmd),
        Command::Cache(cmd) => cache(&session, cmd),
        Command::Completions { .. } => unreachable!("handled above"),
    }
}

fn fetch(session: &Session, kind: KindArg, args: &RequestArgs) -> Result<(), CliError> {
    let kind = match kind {
        KindArg::Od => DatasetKind::OriginDestination,
        KindArg::Trips => DatasetKind::TripsPerPerson,
        KindArg::Overnight => DatasetKind::OvernightStays,
    };
    let request = session.request(args, kind)?;
    let descriptors = catalog::resolve_resources(&request, &session.catalog)?;
    let entries = session.fetcher.fetch_all(session.cache()?, &descriptors)?;
    for e in entries {
        println!("{}", e.local_path.display());
    }
    Ok(())
}

fn write_table<T: Rezone + Columnar>(
    session: &Session,
    mobility: &Mobility<'_>,
    table: Table<T>,
    aggregate_to: Option<&str>,
    format: FormatArg,
    parse: ParseArgs,
) -> Result<(), CliError> {
    let (table, stem) = match aggregate_to {
        None => (table, mobility.output_stem()),
        Some(alias) => {
            let target = parse_zone_level(alias)?;
            let relations =
                zones::get_zone_relations(&session.catalog, &session.fetcher, session.cache()?)?;
            let aggregated =
                zones::aggregate_to_level(&table, &relations, target, parse_mode(parse))?;
            let r = mobility.request();
            let stem = format!(
                "{}_{}_{}_{}_{}",
                r.kind(),
                r.version(),
                target,
                r.range().start(),
                r.range().end()
            );
            (aggregated, stem)
        }
    };
    let exported: ExportedTable =
        export::export(&table, &session.out, &stem, output_format(format))?;
    info!(
        "{} rows written under {}",
        exported.rows,
        exported.root.display()
    );
    for file in &exported.files {
        println!("{}", file.display());
    }
    Ok(())
}

fn relations(session: &Session, args: &RelationsArgs) -> Result<(), CliError> {
    let relations =
        zones::get_zone_relations(&session.catalog, &session.fetcher, session.cache()?)?;
    create_out(&session.out)?;
    let path = match args.format {
        FormatArg::Csv => {
            let p = session.out.join("zone_relations.csv");
            relations.write_csv(&p)?;
            p
        }
        FormatArg::Parquet => {
            let p = session.out.join("zone_relations.parquet");
            relations.write_parquet(&p)?;
            p
        }
    };
    info!("{} districts", relations.len());
    println!("{}", path.display());
    Ok(())
}

fn load_od(
    session: &Session,
    args: &RequestArgs,
    parse: ParseArgs,
) -> Result<(OdTable, String), CliError> {
    let request = session.request(args, DatasetKind::OriginDestination)?;
    let mobility = session.mobility(request, parse)?;
    let (table, report) = mobility.load_od(false)?;
    report_skipped(&report);
    Ok((table, mobility.output_stem()))
}

fn write_analysis(
    session: &Session,
    table: &AnalyticsTable,
    name: &str,
    stem: &str,
    output: &AnalysisOutput,
) -> Result<(), CliError> {
    create_out(&session.out)?;
    let path = match output.format {
        FormatArg::Csv => {
            let p = session.out.join(format!("{name}_{stem}.csv"));
            table.write_csv(&p)?;
            p
        }
        FormatArg::Parquet => {
            let p = session.out.join(format!("{name}_{stem}.parquet"));
            table.write_parquet(&p)?;
            p
        }
    };
    println!("{}", path.display());
    Ok(())
}

fn analyze(session: &Session, cmd: AnalyzeCommand) -> Result<(), CliError> {
    match cmd {
        AnalyzeCommand::WeekdayWeekend {
            request,
            origin,
            group_by,
            output,
        } => {
            let (table, stem) = load_od(session, &request, output.parse)?;
            let summaries = analytics::weekday_weekend_summary(
                &table,
                &zone_id(&origin)?,
                group_by.map(dimension),
            )?;
            let stem = format!("{origin}_{stem}");
            write_analysis(
                session,
                &analytics::summary_table(&summaries),
                "weekday_weekend",
                &stem,
                &output,
            )
        }
        AnalyzeCommand::Hourly {
            request,
            destination,
            group_by,
            reducer,
            exclude_internal,
            output,
        } => {
            let (table, stem) = load_od(session, &request, output.parse)?;
            let options = HourlyOptions {
                destination: destination.as_deref().map(zone_id).transpose()?,
                group_by: group_by.map(dimension),
                reducer: match reducer {
                    ReducerArg::Sum => HourlyReducer::SumOverRange,
                    ReducerArg::Mean => HourlyReducer::MeanPerDay,
                },
                exclude_internal,
            };
            let profiles = analytics::hourly_profile(&table, &options)?;
            write_analysis(
                session,
                &analytics::hourly_table(&profiles),
                "hourly",
                &stem,
                &output,
            )
        }
        AnalyzeCommand::TopFlows {
            request,
            origin,
            percentile,
            basis,
            output,
        } => {
            let (table, stem) = load_od(session, &request, output.parse)?;
            let basis = match basis {
                BasisArg::Destinations => PercentileBasis::Destinations,
                BasisArg::Mass => PercentileBasis::TripMass,
            };
            let flows =
                analytics::top_percentile_flows(&table, &zone_id(&origin)?, percentile, basis)?;
            info!("{} destinations in the top {percentile}%", flows.len());
            let stem = format!("{origin}_{stem}");
            write_analysis(
                session,
                &analytics::flows_table(&flows),
                "top_flows",
                &stem,
                &output,
            )
        }
        AnalyzeCommand::OvernightMap {
            request,
            classes,
            statistic,
            output,
        } => {
            let request = session.request(&request, DatasetKind::OvernightStays)?;
            let level = request.level();
            let version = request.version();
            let mobility = session.mobility(request, output.parse)?;
            let (table, report) = mobility.load_overnight()?;
            report_skipped(&report);
            let zones = zones::get_zone_geodataframe(
                level,
                version,
                &session.catalog,
                &session.fetcher,
                session.cache()?,
            )?;
            let statistic = match statistic {
                StatisticArg::Mean => OvernightStatistic::MeanPerDay,
                StatisticArg::Total => OvernightStatistic::Total,
            };
            let map = analytics::overnight_quantile_map(&table, &zones, classes, statistic)?;
            if !map.no_data.is_empty() {
                warn!("{} zones have no overnight data", map.no_data.len());
            }
            let stem = mobility.output_stem();
            create_out(&session.out)?;
            let geojson = session.out.join(format!("overnight_map_{stem}.geojson"));
            let tmp = geojson.with_extension("geojson.tmp");
            let text =
                serde_json::to_string(&map.to_geojson(&zones)).expect("json value serializes");
            std::fs::write(&tmp, text).map_err(|e| io_error(&tmp, e))?;
            std::fs::rename(&tmp, &geojson).map_err(|e| io_error(&geojson, e))?;
            println!("{}", geojson.display());
            write_analysis(session, &map.to_table(), "overnight_map", &stem, &output)
        }
        AnalyzeCommand::Breakdown {
            request,
            origin,
            dimensions,
            output,
        } => {
            let dims = analytics::parse_dimensions(&dimensions)?;
            let (table, stem) = load_od(session, &request, output.parse)?;
            let breakdown = analytics::demographic_breakdown(&table, &zone_id(&origin)?, &dims)?;
            let stem = format!("{origin}_{stem}");
            write_analysis(session, &breakdown, "breakdown", &stem, &output)
        }
    }
}

fn cache(session: &Session, cmd: CacheCommand) -> Result<(), CliError> {
    match cmd {
        CacheCommand::Purge {
            older_than,
            dataset_version,
        } => {
            let older_than = older_than
                .map(|d| {
                    chrono::Duration::from_std(d)
                        .map_err(|_| CliError::validation(format!("duration {d:?} is too large")))
                })
                .transpose()?;
            let version = dataset_version
                .map(DatasetVersion::from_number)
                .transpose()?;
            let removed = session
                .cache()?
                .purge(chrono::Utc::now(), older_than, version)?;
            info!("removed {removed} cache entries");
            println!("{removed}");
            Ok(())
        }
        CacheCommand::List => {
            for e in session.cache()?.entries() {
                println!(
                    "{}\t{}\t{}",
                    e.local_path.display(),
                    e.size_bytes,
                    e.fetched_at.to_rfc3339()
                );
            }
            Ok(())
        }
    }
}
