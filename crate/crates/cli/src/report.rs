use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use desk_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::pipeline::read_metrics;

pub const RUN_FILES: [&str; 6] = [
    "config.json",
    "kernel_validation.csv",
    "kernel_generalization.csv",
    "svm_metrics.csv",
    "knn_metrics.csv",
    "spectrum_summary.csv",
];

struct Row {
    name: String,
    scheme: String,
    images: usize,
    pairs: String,
    post: String,
    val_auc: String,
    gen_auc: String,
    svm: String,
    c: String,
    knn: String,
    k: String,
    negative_fraction: String,
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("config.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join("config.json").exists()).collect();
    runs.sort();
    Ok(runs)
}

fn get(m: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<String> {
    m.get(key).cloned().ok_or_else(|| Error::format(path, format!("missing metric `{key}`")))
}

fn load_row(dir: &Path) -> Result<Row> {
    let text = fs::read_to_string(dir.join("config.json")).map_err(|e| Error::io(dir.join("config.json"), e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let metrics = |name: &str| {
        let p = dir.join(name);
        read_metrics(&p).map(|m| (m, p))
    };
    let (val, vp) = metrics("kernel_validation.csv")?;
    let (gen, gp) = metrics("kernel_generalization.csv")?;
    let (svm, sp) = metrics("svm_metrics.csv")?;
    let (knn, kp) = metrics("knn_metrics.csv")?;
    let (spec, pp) = metrics("spectrum_summary.csv")?;
    Ok(Row {
        name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        scheme: get(&val, "scheme", &vp)?,
        images: cfg.train_images,
        pairs: get(&val, "train_pairs", &vp)?,
        post: cfg.post.to_string(),
        val_auc: get(&val, "auc", &vp)?,
        gen_auc: get(&gen, "auc", &gp)?,
        svm: get(&svm, "accuracy", &sp)?,
        c: get(&svm, "c", &sp)?,
        knn: get(&knn, "accuracy", &kp)?,
        k: get(&knn, "k", &kp)?,
        negative_fraction: get(&spec, "negative_fraction", &pp)?,
    })
}

fn table(out: &mut String, title: &str, rows: &[&Row], cell: impl Fn(&Row) -> String) {
    let _ = writeln!(out, "## {title}\n\n| scheme | post | training images | pairs | value |\n|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(out, "| {} | {} | {} | {} | {} |", r.scheme, r.post, r.images, r.pairs, cell(r));
    }
    out.push('\n');
}

/// Markdown and CSV tables from the stored metrics of one run directory or
/// of every run directory under `dir`. Nothing is recomputed.
pub fn build(dir: &Path) -> Result<(String, String)> {
    let runs = run_dirs(dir)?;
    if runs.is_empty() {
        return Err(Error::Data(format!(
            "no run found in {}; each run directory needs: {}",
            dir.display(),
            RUN_FILES.join(", ")
        )));
    }
    let missing: Vec<String> = runs
        .iter()
        .flat_map(|r| RUN_FILES.iter().map(move |f| r.join(f)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("incomplete run directory, missing: {}", missing.join(", "))));
    }
    let mut rows = runs.iter().map(|r| load_row(r)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (&a.scheme, a.images, &a.post, &a.name).cmp(&(&b.scheme, b.images, &b.post, &b.name)));

    let mut csv = String::from(
        "run,scheme,post,train_images,pairs,kernel_validation_auc,kernel_generalization_auc,svm_accuracy,c,knn_accuracy,k,negative_eigen_fraction\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name, r.scheme, r.post, r.images, r.pairs, r.val_auc, r.gen_auc, r.svm, r.c, r.knn, r.k, r.negative_fraction
        );
    }

    let all: Vec<&Row> = rows.iter().collect();
    let tuned: Vec<&Row> = rows.iter().filter(|r| r.scheme != "NConv_NFC").collect();
    let full: Vec<&Row> = rows.iter().filter(|r| r.scheme == "NConv_NFC").collect();
    let mut md = String::from("# Desk-scale results\n\n");
    table(&mut md, "Kernel validation AUC-ROC", &all, |r| r.val_auc.clone());
    table(&mut md, "Kernel generalization AUC-ROC on target test pairs", &all, |r| r.gen_auc.clone());
    if !tuned.is_empty() {
        table(&mut md, "SVM test accuracy", &tuned, |r| format!("{} (C={})", r.svm, r.c));
    }
    table(&mut md, "k-NN test accuracy", &all, |r| format!("{} (k={})", r.knn, r.k));
    if !full.is_empty() {
        table(&mut md, "SVM test accuracy, fully transferred kernel", &full, |r| format!("{} (C={})", r.svm, r.c));
    }
    table(&mut md, "Negative eigenvalue mass fraction", &all, |r| r.negative_fraction.clone());
    Ok((md, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_lists_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = build(dir.path()).unwrap_err().to_string();
        for f in RUN_FILES {
            assert!(err.contains(f), "{err}");
        }
    }
}
