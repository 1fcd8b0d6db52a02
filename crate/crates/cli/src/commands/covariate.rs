use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;

use scr_core::covariates::centrality::{weighted_betweenness, weighted_closeness, weighted_degree, WeightedGraph};
use scr_core::covariates::table::write_covariate_csv;
use scr_core::covariates::tweetogram::{parse_utc_offset, read_post_csv, tweetogram, TweetogramOptions};
use scr_core::covariates::{CovariateSurface, Dims, Scope};
use scr_core::geometry::{haversine_distance, idw_interpolate, GeoPoint, PlanePoint};

use super::Geometry;
use crate::config::RunConfig;
use crate::output::{ensure_dir, opt, write_csv_with, Provenance};

#[derive(Debug, Subcommand)]
pub enum CovariateCommand {
    /// Per-user-normalized hourly posting profile (occasion scope).
    Tweetogram(TweetogramArgs),
    /// Weighted degree, closeness and betweenness of graph nodes.
    Centrality(CentralityArgs),
    /// Distance from a reference location to every trap and state-space point.
    Proximity(ProximityArgs),
    /// Interpolates point samples onto traps and state-space points.
    Idw(IdwArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TweetogramArgs {
    /// Posts CSV `user_id,timestamp_iso8601`; defaults to `posts` in the config.
    #[arg(long)]
    pub posts: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// First local day of the window, `YYYY-MM-DD`.
    #[arg(long)]
    pub start: String,
    #[arg(long, default_value_t = 1)]
    pub days: usize,
    /// UTC offset of local time, e.g. `-06:00`; defaults to the config, then UTC.
    #[arg(long, allow_hyphen_values = true)]
    pub timezone: Option<String>,
    /// One profile per day (session × occasion scope) instead of the average.
    #[arg(long)]
    pub per_day: bool,
    #[arg(long, default_value = "tweetogram")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CentralityArgs {
    /// Edge list `u,v,weight_metres`; defaults to `graph` in the config.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tuning parameter; repeat for several. Defaults to the config, then 0, 0.5 and 1.
    #[arg(long)]
    pub alpha: Vec<f64>,
    /// Treat weights as tie strengths and use 1/w as the path cost.
    #[arg(long)]
    pub invert_weights: bool,
    /// Node coordinates `node_id,lon,lat` or `node_id,x,y`, copied into the output for `idw`.
    #[arg(long)]
    pub nodes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProximityArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Reference longitude (great-circle distance; needs lon/lat traps).
    #[arg(long, requires = "lat", allow_hyphen_values = true)]
    pub lon: Option<f64>,
    #[arg(long, requires = "lon", allow_hyphen_values = true)]
    pub lat: Option<f64>,
    /// Reference easting in the planar frame (Euclidean distance).
    #[arg(long, requires = "y", conflicts_with = "lon", allow_hyphen_values = true)]
    pub x: Option<f64>,
    #[arg(long, requires = "x", allow_hyphen_values = true)]
    pub y: Option<f64>,
    #[arg(long, default_value = "proximity")]
    pub name: String,
    /// Directory for `<name>_trap.csv` and `<name>_statespace.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IdwArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Samples with `lon,lat` or `x,y` columns and one or more value columns.
    #[arg(long)]
    pub samples: PathBuf,
    /// Value columns to interpolate; all non-coordinate columns by default.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    /// Overrides the config's IDW power.
    #[arg(long)]
    pub power: Option<f64>,
    /// Overrides the config's neighbour count.
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    #[arg(long, default_value = "idw")]
    pub name: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(cmd: &CovariateCommand) -> Result<()> {
    match cmd {
        CovariateCommand::Tweetogram(a) => run_tweetogram(a),
        CovariateCommand::Centrality(a) => run_centrality(a),
        CovariateCommand::Proximity(a) => run_proximity(a),
        CovariateCommand::Idw(a) => run_idw(a),
    }
}

fn optional_config(path: &Option<PathBuf>) -> Result<Option<RunConfig>> {
    path.as_deref().map(RunConfig::load).transpose()
}

fn existing(path: &Path) -> Result<&Path> {
    if !path.exists() {
        bail!("file not found: {}", path.display());
    }
    Ok(path)
}

/// Epoch seconds of local midnight on `date` for a UTC offset in seconds.
pub fn local_midnight(date: &str, offset: i64) -> Result<i64> {
    let d = chrono::NaiveDate::parse_from_str(date, "%Y-%m-%d")
        .with_context(|| format!("bad date `{date}`, expected YYYY-MM-DD"))?;
    Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp() - offset)
}

fn run_tweetogram(a: &TweetogramArgs) -> Result<()> {
    let cfg = optional_config(&a.config)?;
    let posts = match (&a.posts, cfg.as_ref().and_then(|c| c.posts.as_ref())) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => bail!("no posts file: pass --posts or set `posts` in the config"),
    };
    let tz = a
        .timezone
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.timezone.clone()))
        .unwrap_or_else(|| "Z".into());
    let offset = parse_utc_offset(&tz)?;
    let file = std::fs::File::open(existing(&posts)?)?;
    let events = read_post_csv(file).with_context(|| format!("reading posts {}", posts.display()))?;
    let opts = TweetogramOptions::hourly(local_midnight(&a.start, offset)?, a.days);
    let t = tweetogram(&events, &opts)?;
    if !t.excluded_users.is_empty() {
        log::warn!("{} users have no posts inside the window", t.excluded_users.len());
    }
    let surface = t.to_surface(&a.name, a.per_day)?;
    let dims = Dims {
        n_points: 0,
        n_traps: 0,
        n_occasions: opts.bins_per_day(),
        n_sessions: a.days,
    };
    let prov = Provenance::new(
        "covariate tweetogram",
        None,
        &serde_json::json!({ "args": a, "timezone": tz, "posts": posts }),
    )?;
    write_csv_with(&a.out, &prov, |buf| {
        Ok(write_covariate_csv(buf, &[&surface], &dims, &[])?)
    })?;
    println!("{} users, {} bins", t.n_users, surface.values.len());
    Ok(())
}

/// Reads `node_id` plus `lon,lat` or `x,y`; returns the coordinate header names.
type NodeTable = ([String; 2], BTreeMap<String, (f64, f64)>);

fn read_nodes(path: &Path) -> Result<NodeTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(existing(path)?)?;
    let h = rdr.headers()?.clone();
    let names = match (h.get(0), h.get(1), h.get(2)) {
        (Some("node_id"), Some(a @ "lon"), Some(b @ "lat")) | (Some("node_id"), Some(a @ "x"), Some(b @ "y")) => {
            [a.to_string(), b.to_string()]
        }
        _ => bail!(
            "node file {} must start with `node_id,lon,lat` or `node_id,x,y`",
            path.display()
        ),
    };
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .with_context(|| format!("bad coordinate `{}` in {}", &rec[i], path.display()))
        };
        out.insert(rec[0].to_string(), (num(1)?, num(2)?));
    }
    Ok((names, out))
}

fn alpha_label(alpha: f64) -> String {
    format!("a{alpha}")
}

fn run_centrality(a: &CentralityArgs) -> Result<()> {
    let cfg = optional_config(&a.config)?;
    let graph_path = match (&a.graph, cfg.as_ref().and_then(|c| c.graph.as_ref())) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => bail!("no graph file: pass --graph or set `graph` in the config"),
    };
    let alphas = if !a.alpha.is_empty() {
        a.alpha.clone()
    } else {
        cfg.as_ref().map_or_else(|| vec![0.0, 0.5, 1.0], |c| c.alpha.clone())
    };
    if let Some(bad) = alphas.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        bail!("alpha must be finite and non-negative, got {bad}");
    }
    let file = std::fs::File::open(existing(&graph_path)?)?;
    let mut graph = WeightedGraph::read_csv(file).with_context(|| format!("reading graph {}", graph_path.display()))?;
    if a.invert_weights {
        graph = graph.inverted();
    }
    let nodes = a.nodes.as_deref().map(read_nodes).transpose()?;

    let mut header = vec!["node_id".to_string()];
    if let Some((names, coords)) = &nodes {
        header.extend(names.iter().cloned());
        if let Some(missing) = graph.node_ids().iter().find(|id| !coords.contains_key(*id)) {
            bail!("node `{missing}` of the graph has no coordinates in the node file");
        }
    }
    let mut columns: Vec<Vec<String>> = Vec::new();
    for &alpha in &alphas {
        let label = alpha_label(alpha);
        header.extend([
            format!("degree_{label}"),
            format!("closeness_{label}"),
            format!("betweenness_{label}"),
        ]);
        columns.push(weighted_degree(&graph, alpha).iter().map(f64::to_string).collect());
        columns.push(weighted_closeness(&graph, alpha).into_iter().map(opt).collect());
        columns.push(weighted_betweenness(&graph, alpha).iter().map(f64::to_string).collect());
    }
    let prov = Provenance::new(
        "covariate centrality",
        None,
        &serde_json::json!({ "args": a, "graph": graph_path, "alpha": alphas }),
    )?;
    write_csv_with(&a.out, &prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(&header)?;
        for (v, id) in graph.node_ids().iter().enumerate() {
            let mut row = vec![id.clone()];
            if let Some((_, coords)) = &nodes {
                let (c0, c1) = coords[id];
                row.extend([c0.to_string(), c1.to_string()]);
            }
            row.extend(columns.iter().map(|c| c[v].clone()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    println!("{} nodes, {} edges", graph.n_nodes(), graph.n_edges());
    Ok(())
}

/// Writes trap- and state-space-scope tables `<name>_trap.csv` and `<name>_statespace.csv`.
fn write_spatial(
    geometry: &Geometry,
    out_dir: &Path,
    name: &str,
    prov: &Provenance,
    columns: &[(String, Vec<f64>, Vec<f64>)],
) -> Result<()> {
    ensure_dir(out_dir)?;
    let dims = Dims {
        n_points: geometry.space.len(),
        n_traps: geometry.traps.len(),
        n_occasions: 0,
        n_sessions: 0,
    };
    let ids = geometry.trap_ids();
    for (scope, suffix) in [(Scope::Trap, "trap"), (Scope::StateSpace, "statespace")] {
        let surfaces = columns
            .iter()
            .map(|(col, on_traps, on_points)| {
                let values = if scope == Scope::Trap { on_traps } else { on_points };
                CovariateSurface::new(col, scope, values.clone())
            })
            .collect::<scr_core::Result<Vec<_>>>()?;
        let refs: Vec<&CovariateSurface> = surfaces.iter().collect();
        let path = out_dir.join(format!("{name}_{suffix}.csv"));
        write_csv_with(&path, prov, |buf| Ok(write_covariate_csv(buf, &refs, &dims, &ids)?))?;
    }
    Ok(())
}

fn run_proximity(a: &ProximityArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let geometry = Geometry::load(&cfg)?;
    let (on_traps, on_points) = match (a.lon, a.lat, a.x, a.y) {
        (Some(lon), Some(lat), _, _) => {
            let reference = GeoPoint::new(lon, lat)?;
            let traps = geometry
                .traps
                .geo_points()
                .context("--lon/--lat needs traps given in lon/lat; use --x/--y")?;
            let points = geometry.space.geo_points().context("state space has no projection")?;
            let dist = |p: &[GeoPoint]| p.iter().map(|&g| haversine_distance(reference, g)).collect::<Vec<_>>();
            (dist(&traps), dist(&points))
        }
        (_, _, Some(x), Some(y)) => {
            let reference = PlanePoint::new(x, y);
            let dist = |p: &[PlanePoint]| p.iter().map(|q| q.dist(&reference)).collect::<Vec<_>>();
            (dist(&geometry.traps.points()), dist(geometry.space.points()))
        }
        _ => bail!("give a reference location with --lon/--lat or --x/--y"),
    };
    let prov = Provenance::new(
        "covariate proximity",
        None,
        &serde_json::json!({ "args": a, "config": cfg }),
    )?;
    write_spatial(
        &geometry,
        &a.out_dir,
        &a.name,
        &prov,
        &[(a.name.clone(), on_traps, on_points)],
    )?;
    Ok(())
}

const ID_COLUMNS: [&str; 4] = ["node_id", "id", "trap_id", "point_id"];

fn run_idw(a: &IdwArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let geometry = Geometry::load(&cfg)?;
    let power = a.power.unwrap_or(cfg.idw.power);
    let k = a.k_neighbors.unwrap_or(cfg.idw.k_neighbors);

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(existing(&a.samples)?)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let pos = |n: &str| header.iter().position(|h| h == n);
    let (c0, c1, geographic) = match (pos("lon"), pos("lat"), pos("x"), pos("y")) {
        (Some(i), Some(j), _, _) => (i, j, true),
        (_, _, Some(i), Some(j)) => (i, j, false),
        _ => bail!("sample file {} needs `lon,lat` or `x,y` columns", a.samples.display()),
    };
    let projection = if geographic {
        Some(
            geometry
                .traps
                .projection
                .context("lon/lat samples need traps given in lon/lat")?,
        )
    } else {
        None
    };
    let value_cols: Vec<usize> = if a.columns.is_empty() {
        (0..header.len())
            .filter(|&i| i != c0 && i != c1 && !ID_COLUMNS.contains(&header[i].as_str()))
            .collect()
    } else {
        a.columns
            .iter()
            .map(|c| pos(c).with_context(|| format!("sample file has no column `{c}`")))
            .collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        bail!("sample file has no value columns");
    }
    let mut samples: Vec<Vec<(PlanePoint, f64)>> = vec![Vec::new(); value_cols.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .with_context(|| format!("sample file row {}: bad number `{}`", line + 2, &rec[i]))
        };
        let (u, v) = (num(c0)?, num(c1)?);
        let p = match projection {
            Some(proj) => proj.project(GeoPoint::new(u, v)?),
            None => PlanePoint::new(u, v),
        };
        for (s, &c) in samples.iter_mut().zip(&value_cols) {
            // NA marks a missing value, e.g. undefined closeness
            if rec[c].eq_ignore_ascii_case("na") || rec[c].is_empty() {
                continue;
            }
            s.push((p, num(c)?));
        }
    }
    let trap_points = geometry.traps.points();
    let columns = value_cols
        .iter()
        .zip(&samples)
        .map(|(&c, s)| {
            let on_traps = idw_interpolate(s, &trap_points, power, k)?;
            let on_points = idw_interpolate(s, geometry.space.points(), power, k)?;
            Ok((header[c].clone(), on_traps, on_points))
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new(
        "covariate idw",
        None,
        &serde_json::json!({ "args": a, "config": cfg, "power": power, "k_neighbors": k }),
    )?;
    write_spatial(&geometry, &a.out_dir, &a.name, &prov, &columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_midnight_applies_offset() {
        // 2018-06-22T00:00:00-06:00
        assert_eq!(local_midnight("2018-06-22", -6 * 3600).unwrap(), 1_529_647_200);
        assert!(local_midnight("22/06/2018", 0).is_err());
    }

    #[test]
    fn alpha_labels() {
        assert_eq!(alpha_label(0.0), "a0");
        assert_eq!(alpha_label(0.5), "a0.5");
        assert_eq!(alpha_label(1.0), "a1");
    }
}
