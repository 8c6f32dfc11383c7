//! Tables rebuilt from a stored run directory. Nothing is refitted.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hftnet_core::eval::roc_auc;
use hftnet_core::network::{degrees, density, subnetwork, Direction, Network, PairPredictions};
use hftnet_core::Error;
use log::info;
use serde::Deserialize;

use crate::inputs::create_dir;

#[derive(Deserialize)]
struct StoredPredictions {
    pairs: Vec<PairPredictions>,
}

fn sorted_dirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn report(run: &Path, out: &Path, subset: &[String], top: usize) -> anyhow::Result<()> {
    let windows_dir = run.join("windows");
    if !windows_dir.is_dir() {
        return Err(Error::Data(format!("{} holds no windows/ directory", run.display())).into());
    }
    create_dir(out)?;
    let keep: Vec<&str> = subset.iter().map(String::as_str).collect();
    // measure -> rows of (window_start, window_end, density, n_firms, n_edges)
    let mut density_rows: BTreeMap<String, Vec<[String; 5]>> = BTreeMap::new();
    let mut top_rows: BTreeMap<String, Vec<[String; 7]>> = BTreeMap::new();
    let mut found = 0;

    for window in sorted_dirs(&windows_dir)? {
        let name = file_name(&window);
        let (start, end) = name.split_once('_').unwrap_or((&name, ""));
        for measure_dir in sorted_dirs(&window)? {
            let measure = file_name(&measure_dir);
            let target = out.join("windows").join(&name).join(&measure);
            create_dir(&target)?;

            let network_path = measure_dir.join("network.json");
            if network_path.is_file() {
                found += 1;
                let text = std::fs::read_to_string(&network_path)?;
                let mut network = Network::from_json(&text)?;
                if !keep.is_empty() {
                    network = subnetwork(&network, &keep);
                    std::fs::write(target.join("subnetwork.json"), network.to_json()? + "\n")?;
                }
                let report = degrees(&network);
                let path = target.join("degrees.csv");
                report.write_csv(BufWriter::new(File::create(&path)?))?;
                density_rows.entry(measure.clone()).or_default().push([
                    start.to_owned(),
                    end.to_owned(),
                    density(&network).to_string(),
                    network.nodes.len().to_string(),
                    network.edges.len().to_string(),
                ]);
                for (direction, label) in [(Direction::In, "in"), (Direction::Out, "out")] {
                    for (rank, d) in report.top(direction, top).into_iter().enumerate() {
                        let (deg, z) = match direction {
                            Direction::In => (d.in_degree, d.std_in),
                            Direction::Out => (d.out_degree, d.std_out),
                        };
                        top_rows.entry(measure.clone()).or_default().push([
                            start.to_owned(),
                            end.to_owned(),
                            label.to_owned(),
                            (rank + 1).to_string(),
                            d.id.clone(),
                            deg.to_string(),
                            z.to_string(),
                        ]);
                    }
                }
            }

            let predictions_path = measure_dir.join("predictions.json");
            if predictions_path.is_file() {
                found += 1;
                let text = std::fs::read_to_string(&predictions_path)?;
                let stored: StoredPredictions = serde_json::from_str(&text)?;
                let roc_dir = target.join("roc");
                create_dir(&roc_dir)?;
                for pair in &stored.pairs {
                    if !keep.is_empty() && !(keep.contains(&pair.source.as_str()) && keep.contains(&pair.target.as_str())) {
                        continue;
                    }
                    for (model, scores) in [("model1", &pair.p1), ("model2", &pair.p2)] {
                        let roc = roc_auc(scores, &pair.labels)?;
                        let path = roc_dir.join(format!("{}__{}_{model}.csv", pair.source, pair.target));
                        roc.write_csv(BufWriter::new(File::create(&path)?))?;
                    }
                }
            }
        }
    }
    if found == 0 {
        return Err(Error::Data(format!("no stored results under {}", windows_dir.display())).into());
    }

    for (measure, rows) in &density_rows {
        let mut wtr = csv_writer(&out.join(format!("density_{measure}.csv")))?;
        wtr.write_record(["window_start", "window_end", "density", "n_firms", "n_edges"])?;
        for row in rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
    }
    for (measure, rows) in &top_rows {
        let mut wtr = csv_writer(&out.join(format!("top_degrees_{measure}.csv")))?;
        wtr.write_record(["window_start", "window_end", "direction", "rank", "id", "degree", "std_degree"])?;
        for row in rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
    }
    info!("report written to {}", out.display());
    Ok(())
}
