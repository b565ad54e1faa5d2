use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "epoch,bce,ctl_v2n,ctl_v2b,lambda_v2n,lambda_v2b,acc,momentum,lr";

/// One epoch of training metrics. `ctl_*` are the ramp-weighted contrastive terms
/// averaged over the epoch's batches; `acc` is training video accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub bce: f64,
    pub ctl_v2n: f64,
    pub ctl_v2b: f64,
    pub lambda_v2n: f64,
    pub lambda_v2b: f64,
    pub acc: f64,
    pub momentum: f64,
    pub lr: f64,
}

pub(crate) fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.bce, r.ctl_v2n, r.ctl_v2b, r.lambda_v2n, r.lambda_v2b, r.acc, r.momentum, r.lr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_for_no_rows() {
        assert_eq!(to_csv(&[]), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let row = MetricsRow {
            epoch: 3,
            bce: 0.123456789012,
            ctl_v2n: 0.3,
            ctl_v2b: 1e-9,
            lambda_v2n: 0.30000000000000004,
            lambda_v2b: 0.3,
            acc: 0.875,
            momentum: 0.955,
            lr: 4e-4,
        };
        let csv = to_csv(std::slice::from_ref(&row));
        let line = csv.lines().nth(1).unwrap();
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals[1], row.bce);
        assert_eq!(vals[4], row.lambda_v2n);
        assert_eq!(vals[8], row.lr);
    }
}
