use std::path::{Path, PathBuf};

use clap::Args;
use neuroflow_core::agreement::{
    align, mean_agreement_report, pass_rate_table, read_ratings, report_rows, AgreementError, Label, RatingMatrix,
    REPORT_HEADER,
};

use crate::error::{emit, require_path, CliError, CliResult, Emitted};

#[derive(Debug, Args)]
pub struct AgreeArgs {
    /// System ratings as `path` or `name=path`; repeat to compare several QC variants.
    #[arg(long = "system", required = true)]
    pub systems: Vec<String>,
    /// Expert rating files (`item_id,label` CSV).
    #[arg(long, num_args = 3, required = true)]
    pub raters: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            (stem(&p), p)
        }
    }
}

fn agree_err(flag: &str, e: AgreementError) -> CliError {
    CliError::usage(format!("{flag}: {e}"))
}

pub fn cmd_agree(args: &AgreeArgs) -> CliResult<Emitted> {
    let mut raters: Vec<(String, Vec<String>, Vec<Label>)> = Vec::new();
    for p in &args.raters {
        require_path("--raters", p)?;
        let (items, labels) = read_ratings(p).map_err(|e| agree_err("--raters", e))?;
        raters.push((stem(p), items, labels));
    }
    let reference = raters[0].1.clone();
    let rater_labels: Vec<(String, Vec<Label>)> = raters
        .into_iter()
        .map(|(name, items, labels)| {
            align(&reference, &items, labels)
                .map(|l| (name.clone(), l))
                .map_err(|e| CliError::usage(format!("--raters: {name}: {e}")))
        })
        .collect::<CliResult<_>>()?;

    let mut agreement = format!("{REPORT_HEADER}\tsystem\n");
    let mut columns: Vec<(String, Vec<Label>)> = Vec::new();
    for spec in &args.systems {
        let (name, path) = named(spec);
        require_path("--system", &path)?;
        let (items, labels) = read_ratings(&path).map_err(|e| agree_err("--system", e))?;
        let labels = align(&reference, &items, labels).map_err(|e| CliError::usage(format!("--system: {name}: {e}")))?;
        let pairs: Vec<(&str, &[Label])> = rater_labels.iter().map(|(n, l)| (n.as_str(), l.as_slice())).collect();
        let report = mean_agreement_report((&name, &labels), &pairs).map_err(|e| agree_err("--system", e))?;
        for row in report_rows(&args.checkpoint, &report) {
            agreement.push_str(&format!("{row}\t{name}\n"));
        }
        columns.push((name, labels));
    }
    columns.extend(rater_labels);
    let matrix = RatingMatrix::from_columns(reference, columns).map_err(|e| agree_err("--raters", e))?;
    let mut rates = String::from("checkpoint\trater\tpass_rate\n");
    for r in pass_rate_table(&matrix) {
        rates.push_str(&format!("{}\t{}\t{r}\n", args.checkpoint, r.rater));
    }
    let mut emitted = Emitted::default();
    emit(&mut emitted, args.out.join("agreement.tsv"), agreement)?;
    emit(&mut emitted, args.out.join("pass_rates.tsv"), rates)?;
    Ok(emitted)
}
