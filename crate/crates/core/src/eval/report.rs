use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ComparisonRow, EvalError, RecordScore, SplitMetrics, HIST_EDGES};

/// Run context written next to the metrics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Brevity suffix the predictions were generated with, if any.
    pub brevity: Option<String>,
    pub tokenizer: String,
    pub records: usize,
    pub skipped_lines: usize,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    splits: &'a [SplitMetrics],
    comparisons: &'a [ComparisonRow],
}

/// Split names may contain anything; file names may not.
fn file_stem(split: &str) -> String {
    split
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e.into() })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Comparison table with factors and deltas as printed in reports.
pub fn write_comparison(path: &Path, comparisons: &[ComparisonRow]) -> Result<(), EvalError> {
    let rows = comparisons
        .iter()
        .map(|c| {
            vec![
                c.split.clone(),
                c.baseline_tokens.to_string(),
                c.candidate_tokens.to_string(),
                c.factor_text(),
                ComparisonRow::delta_text(c.delta_ciou),
                ComparisonRow::delta_text(c.delta_giou),
                c.baseline_ciou.to_string(),
                c.candidate_ciou.to_string(),
                c.baseline_giou.to_string(),
                c.candidate_giou.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "split",
            "baseline_tokens",
            "candidate_tokens",
            "token_reduction",
            "delta_ciou_pts",
            "delta_giou_pts",
            "baseline_ciou",
            "candidate_ciou",
            "baseline_giou",
            "candidate_giou",
        ],
        rows,
    )
}

/// Writes per-split tables, token histograms, the comparison table,
/// `metrics.json`, `report_meta.json` and `scores.jsonl` into `dir`.
///
/// The comparison table is always written, header-only when there is
/// nothing to compare. Output depends only on the inputs.
pub fn emit_report(
    dir: &Path,
    metrics: &[SplitMetrics],
    comparisons: &[ComparisonRow],
    scores: &[RecordScore],
    meta: &ReportMeta,
) -> Result<(), EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptySplit("<none>".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    for m in metrics {
        let stem = file_stem(&m.split);
        let mut rows = vec![vec![
            "all".to_string(),
            m.n.to_string(),
            m.ciou.to_string(),
            m.giou.to_string(),
            m.mean_tokens.to_string(),
            m.median_tokens.to_string(),
            m.intersection.to_string(),
            m.union.to_string(),
        ]];
        for (order, g) in &m.per_order {
            rows.push(vec![
                order.clone(),
                g.n.to_string(),
                g.ciou.to_string(),
                g.giou.to_string(),
                g.mean_tokens.to_string(),
                g.median_tokens.to_string(),
                String::new(),
                String::new(),
            ]);
        }
        write_csv(
            &dir.join(format!("split_{stem}.csv")),
            &["group", "n", "ciou", "giou", "mean_tokens", "median_tokens", "intersection", "union"],
            rows,
        )?;

        let hist = m
            .token_histogram
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let right = HIST_EDGES.get(i + 1).map_or_else(|| "inf".to_string(), u64::to_string);
                vec![HIST_EDGES[i].to_string(), right, c.to_string()]
            })
            .collect();
        write_csv(&dir.join(format!("hist_{stem}.csv")), &["bin_left", "bin_right", "count"], hist)?;
    }

    write_comparison(&dir.join("comparison.csv"), comparisons)?;

    write_json(&dir.join("metrics.json"), &MetricsFile { splits: metrics, comparisons })?;
    write_json(&dir.join("report_meta.json"), meta)?;

    let path = dir.join("scores.jsonl");
    let mut buf = Vec::new();
    for s in scores {
        serde_json::to_writer(&mut buf, s)
            .map_err(|e| EvalError::Io { path: path.clone(), source: e.into() })?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&buf).map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{aggregate, compare, tests::score};
    use super::*;

    #[test]
    fn two_splits_produce_expected_files() {
        let scores = vec![score("val", 50, 150, 20), score("val", 0, 100, 30), score("test/a", 10, 10, 400)];
        let metrics = vec![aggregate(&scores, "val").unwrap(), aggregate(&scores, "test/a").unwrap()];
        let cmp = vec![compare(&metrics[0], &metrics[0]).unwrap()];
        let meta = ReportMeta { brevity: Some("one sentence".into()), ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(a.path(), &metrics, &cmp, &scores, &meta).unwrap();
        emit_report(b.path(), &metrics, &cmp, &scores, &meta).unwrap();

        let mut names: Vec<String> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(
            names,
            [
                "comparison.csv",
                "hist_test_a.csv",
                "hist_val.csv",
                "metrics.json",
                "report_meta.json",
                "scores.jsonl",
                "split_test_a.csv",
                "split_val.csv"
            ]
        );
        for n in &names {
            assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n}");
        }

        let hist = fs::read_to_string(a.path().join("hist_val.csv")).unwrap();
        let lines: Vec<&str> = hist.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,count");
        assert_eq!(lines.len(), 32);
        assert_eq!(lines[31], "300,inf,0");
        let total: u64 = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, 2);
        let meta_text = fs::read_to_string(a.path().join("report_meta.json")).unwrap();
        assert!(meta_text.contains("one sentence"));
    }
}
