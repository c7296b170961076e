//! Evaluation output: a flat JSON object per run and stable CSV rows.

use gpoe_core::data::NoiseSpec;
use gpoe_core::metrics::{MetricReport, StratumMetrics};
use gpoe_core::model::{LossBreakdown, Mechanism};
use gpoe_core::train::EpochLog;
use serde::Serialize;

/// Column order of the row `eval` appends to its CSV.
pub const EVAL_HEADER: &str = "mechanism,seed,train_pixel_fraction,train_sigma,train_data_fraction,\
test_pixel_fraction,test_sigma,test_data_fraction,mean_epe,auc,iou,f1";

pub const LOG_HEADER: &str = "epoch,target_recon,aux_recon,kl,total";

/// Identifies one evaluation: which run produced the model and how the
/// test set was corrupted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub train_noise: NoiseSpec,
    pub test_noise: NoiseSpec,
}

pub fn triple(n: &NoiseSpec) -> [f64; 3] {
    [n.pixel_fraction, n.gaussian_sigma, n.data_fraction]
}

impl RunKey {
    /// The leading eight CSV fields.
    pub fn csv_fields(&self) -> Vec<String> {
        let mut f = vec![self.mechanism.as_str().to_string(), self.seed.to_string()];
        f.extend(triple(&self.train_noise).iter().map(f64::to_string));
        f.extend(triple(&self.test_noise).iter().map(f64::to_string));
        f
    }
}

pub fn metric_fields(m: &StratumMetrics) -> [String; 4] {
    [m.mean_epe, m.auc, m.iou, m.f1].map(|v| v.to_string())
}

pub fn eval_row(key: &RunKey, report: &MetricReport) -> String {
    let mut f = key.csv_fields();
    f.extend(metric_fields(&report.all));
    f.join(",")
}

#[derive(Serialize)]
struct Flat<'a> {
    mechanism: &'a str,
    seed: u64,
    eval_seed: u64,
    train_pixel_fraction: f64,
    train_sigma: f64,
    train_data_fraction: f64,
    test_pixel_fraction: f64,
    test_sigma: f64,
    test_data_fraction: f64,
    samples: usize,
    mean_epe: f64,
    auc: f64,
    iou: f64,
    f1: f64,
    clean_samples: Option<usize>,
    clean_mean_epe: Option<f64>,
    clean_auc: Option<f64>,
    clean_iou: Option<f64>,
    clean_f1: Option<f64>,
    corrupted_samples: Option<usize>,
    corrupted_mean_epe: Option<f64>,
    corrupted_auc: Option<f64>,
    corrupted_iou: Option<f64>,
    corrupted_f1: Option<f64>,
    final_target_recon: Option<f64>,
    final_aux_recon: Option<f64>,
    final_kl: Option<f64>,
    final_total: Option<f64>,
}

/// Pretty-printed flat JSON. Missing strata and an absent training loss
/// serialize as `null`.
pub fn report_json(
    key: &RunKey,
    eval_seed: u64,
    report: &MetricReport,
    final_loss: Option<&LossBreakdown>,
) -> String {
    let [tp, ts, td] = triple(&key.train_noise);
    let [ep, es, ed] = triple(&key.test_noise);
    let (c, x) = (report.clean.as_ref(), report.corrupted.as_ref());
    let flat = Flat {
        mechanism: key.mechanism.as_str(),
        seed: key.seed,
        eval_seed,
        train_pixel_fraction: tp,
        train_sigma: ts,
        train_data_fraction: td,
        test_pixel_fraction: ep,
        test_sigma: es,
        test_data_fraction: ed,
        samples: report.all.samples,
        mean_epe: report.all.mean_epe,
        auc: report.all.auc,
        iou: report.all.iou,
        f1: report.all.f1,
        clean_samples: c.map(|s| s.samples),
        clean_mean_epe: c.map(|s| s.mean_epe),
        clean_auc: c.map(|s| s.auc),
        clean_iou: c.map(|s| s.iou),
        clean_f1: c.map(|s| s.f1),
        corrupted_samples: x.map(|s| s.samples),
        corrupted_mean_epe: x.map(|s| s.mean_epe),
        corrupted_auc: x.map(|s| s.auc),
        corrupted_iou: x.map(|s| s.iou),
        corrupted_f1: x.map(|s| s.f1),
        final_target_recon: final_loss.map(|l| l.target_recon),
        final_aux_recon: final_loss.map(|l| l.aux_recon),
        final_kl: final_loss.map(|l| l.kl),
        final_total: final_loss.map(|l| l.total),
    };
    let mut s = serde_json::to_string_pretty(&flat).expect("flat report serializes");
    s.push('\n');
    s
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        let l = &e.loss;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, l.target_recon, l.aux_recon, l.kl, l.total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stratum(n: usize) -> StratumMetrics {
        StratumMetrics { samples: n, mean_epe: 0.25, auc: 0.5, iou: 0.75, f1: 0.125 }
    }

    fn key() -> RunKey {
        RunKey {
            mechanism: Mechanism::Gpoe,
            seed: 4,
            train_noise: NoiseSpec::new(0.3, 0.1, 0.3).unwrap(),
            test_noise: NoiseSpec::CLEAN,
        }
    }

    #[test]
    fn csv_row_matches_header() {
        let r = MetricReport { all: stratum(3), clean: Some(stratum(3)), corrupted: None };
        let row = eval_row(&key(), &r);
        assert_eq!(row, "gpoe,4,0.3,0.1,0.3,0,0,0,0.25,0.5,0.75,0.125");
        assert_eq!(row.split(',').count(), EVAL_HEADER.split(',').count());
    }

    #[test]
    fn json_is_flat_with_nulls() {
        let r = MetricReport { all: stratum(3), clean: Some(stratum(3)), corrupted: None };
        let v: serde_json::Value = serde_json::from_str(&report_json(&key(), 0, &r, None)).unwrap();
        let obj = v.as_object().unwrap();
        assert!(obj.values().all(|v| !v.is_object() && !v.is_array()));
        assert!(obj["corrupted_auc"].is_null());
        assert_eq!(obj["clean_samples"], 3);
        assert_eq!(obj["mechanism"], "gpoe");
    }
}
