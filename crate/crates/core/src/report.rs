//! CSV report rows shared by the ablation, sweep and pipeline experiments.

use std::fmt::Write as _;

pub const CSV_HEADER: &str =
    "mode,bits,group_size,heads_per_group,key_mse,attn_mse,flops_per_layer,avg_bits,sink_count";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    /// 16 marks an unquantized run.
    pub bits: u8,
    pub group_size: usize,
    pub heads_per_group: usize,
    pub key_mse: f64,
    pub attn_mse: f64,
    pub flops_per_layer: u64,
    pub avg_bits: f64,
    pub sink_count: usize,
}

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.9e},{:.9e},{},{:.6},{}",
            self.mode,
            self.bits,
            self.group_size,
            self.heads_per_group,
            self.key_mse,
            self.attn_mse,
            self.flops_per_layer,
            self.avg_bits,
            self.sink_count
        )
    }
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(s, "{}", r.to_csv_line()).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let row = ReportRow {
            mode: "rotate+reorder".into(),
            bits: 2,
            group_size: 128,
            heads_per_group: 4,
            key_mse: 0.25,
            attn_mse: 0.5,
            flops_per_layer: 36864,
            avg_bits: 2.125,
            sink_count: 1,
        };
        let csv = to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0], "rotate+reorder");
        assert_eq!(fields[4].parse::<f64>().unwrap(), 0.25);
        assert_eq!(fields[6], "36864");
        assert_eq!(fields[7], "2.125000");
    }
}
