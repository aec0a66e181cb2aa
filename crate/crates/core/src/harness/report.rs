//! Per-replica reports, their mergeable aggregates and CSV emission.

use std::time::Duration;

use super::stats::{Moments, ZTest};

/// Scalars observed by one replica at one record time.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordRow {
    pub time: f64,
    /// Particle count `N_t` (skeleton particles or ε-atoms, by experiment).
    pub count: f64,
    /// The additive martingale of the experiment at `t`.
    pub martingale: f64,
    /// `⟨f, ·⟩` for each registered test function.
    pub functionals: Vec<f64>,
    pub lln: Option<f64>,
    pub extinct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaReport {
    pub replica: u64,
    pub rows: Vec<RecordRow>,
    /// Wall-clock time; never written to CSV output.
    pub runtime: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordAggregate {
    pub time: f64,
    pub count: Moments,
    pub martingale: Moments,
    pub functionals: Vec<Moments>,
    pub lln: Moments,
    pub extinct: u64,
    pub replicas: u64,
}

/// Exact moments per record time. `merge` is associative and commutative.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub labels: Vec<String>,
    pub records: Vec<RecordAggregate>,
}

impl Aggregate {
    pub fn new(times: &[f64], labels: Vec<String>) -> Self {
        let records = times
            .iter()
            .map(|&time| RecordAggregate {
                time,
                functionals: vec![Moments::default(); labels.len()],
                ..Default::default()
            })
            .collect();
        Self { labels, records }
    }

    pub fn push(&mut self, report: &ReplicaReport) {
        for (agg, row) in self.records.iter_mut().zip(&report.rows) {
            agg.replicas += 1;
            agg.count.push(row.count);
            agg.martingale.push(row.martingale);
            for (m, v) in agg.functionals.iter_mut().zip(&row.functionals) {
                m.push(*v);
            }
            if let Some(l) = row.lln {
                agg.lln.push(l);
            }
            agg.extinct += u64::from(row.extinct);
        }
    }

    pub fn merge(&mut self, other: &Aggregate) {
        for (a, b) in self.records.iter_mut().zip(&other.records) {
            a.replicas += b.replicas;
            a.count.merge(&b.count);
            a.martingale.merge(&b.martingale);
            for (x, y) in a.functionals.iter_mut().zip(&b.functionals) {
                x.merge(y);
            }
            a.lln.merge(&b.lln);
            a.extinct += b.extinct;
        }
    }

    pub fn from_reports(times: &[f64], labels: Vec<String>, reports: &[ReplicaReport]) -> Self {
        let mut agg = Self::new(times, labels);
        for r in reports {
            agg.push(r);
        }
        agg
    }

    /// Aggregate CSV. `targets[record][k]` is the analytic mean of
    /// functional `k`, if known; `martingale_target` likewise.
    pub fn to_csv(&self, targets: &[Vec<Option<f64>>], martingale_target: Option<f64>) -> String {
        let mut header = vec![
            "t".to_string(),
            "replicas".into(),
            "count_mean".into(),
            "count_se".into(),
            "W_mean".into(),
            "W_se".into(),
            "W_z".into(),
        ];
        for l in &self.labels {
            for s in ["mean", "se", "target", "z"] {
                header.push(format!("{l}_{s}"));
            }
        }
        header.extend(["lln_n", "lln_mean", "lln_se", "lln_var", "extinct_fraction"].map(String::from));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory write");
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![num(r.time), r.replicas.to_string()];
            row.extend([num(r.count.mean()), num(r.count.se())]);
            let wz = martingale_target.map(|t| ZTest::from_moments(&r.martingale, t).z);
            row.extend([num(r.martingale.mean()), num(r.martingale.se()), opt(wz)]);
            for (k, m) in r.functionals.iter().enumerate() {
                let target = targets.get(i).and_then(|t| t.get(k)).copied().flatten();
                let z = target.map(|t| ZTest::from_moments(m, t).z);
                row.extend([num(m.mean()), num(m.se()), opt(target), opt(z)]);
            }
            row.extend([
                r.lln.n.to_string(),
                num(r.lln.mean()),
                num(r.lln.se()),
                num(r.lln.variance()),
                num(r.extinct as f64 / r.replicas.max(1) as f64),
            ]);
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Per-replica CSV: one row per (replica, record time).
pub fn replicas_csv(labels: &[String], reports: &[ReplicaReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replica".to_string(), "t".into(), "count".into(), "W".into()];
    header.extend(labels.iter().cloned());
    header.extend(["lln".to_string(), "extinct".into()]);
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        for row in &r.rows {
            let mut rec = vec![r.replica.to_string(), num(row.time), num(row.count), num(row.martingale)];
            rec.extend(row.functionals.iter().map(|&v| num(v)));
            rec.push(opt(row.lln));
            rec.push(u8::from(row.extinct).to_string());
            w.write_record(&rec).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Fixed scientific formatting used in every CSV.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == 0.0 {
        "0.000000000000e0".into()
    } else {
        format!("{v:.12e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn report(replica: u64, rng: &mut impl Rng) -> ReplicaReport {
        ReplicaReport {
            replica,
            rows: (1..=2)
                .map(|t| RecordRow {
                    time: t as f64,
                    count: rng.random_range(0..50) as f64,
                    martingale: rng.random::<f64>() * 1e3,
                    functionals: vec![rng.random::<f64>(), rng.random::<f64>() * 1e-9],
                    lln: rng.random::<bool>().then(|| rng.random::<f64>()),
                    extinct: rng.random::<bool>(),
                })
                .collect(),
            runtime: Duration::from_millis(rng.random_range(0..100)),
        }
    }

    fn labels() -> Vec<String> {
        vec!["one".into(), "gauss_1".into()]
    }

    #[test]
    fn single_replica_aggregate_is_the_report() {
        let mut rng = stream(1, 0, StreamTag::Custom(1));
        let r = report(0, &mut rng);
        let agg = Aggregate::from_reports(&[1.0, 2.0], labels(), std::slice::from_ref(&r));
        assert_eq!(agg.records[0].count.mean(), r.rows[0].count);
        assert_eq!(agg.records[1].functionals[1].mean(), r.rows[1].functionals[1]);
        assert_eq!(agg.records[0].replicas, 1);
    }

    #[test]
    fn runtime_is_not_in_csv() {
        let mut rng = stream(1, 1, StreamTag::Custom(1));
        let mut r = report(0, &mut rng);
        let a = replicas_csv(&labels(), std::slice::from_ref(&r));
        r.runtime = Duration::from_secs(99);
        assert_eq!(a, replicas_csv(&labels(), &[r]));
    }

    #[test]
    fn signed_zero_formats_once() {
        assert_eq!(num(-0.0), num(0.0));
        assert_eq!(num(1.5), "1.500000000000e0");
        assert_eq!(num(f64::NAN), "nan");
    }

    proptest! {
        #[test]
        fn merge_order_does_not_matter(seed in any::<u64>(), split in 1usize..19) {
            let mut rng = stream(seed, 0, StreamTag::Custom(2));
            let reports: Vec<ReplicaReport> = (0..20).map(|i| report(i, &mut rng)).collect();
            let times = [1.0, 2.0];
            let whole = Aggregate::from_reports(&times, labels(), &reports);
            let mut shuffled = reports.clone();
            shuffled.shuffle(&mut rng);
            let mut left = Aggregate::from_reports(&times, labels(), &shuffled[..split]);
            let right = Aggregate::from_reports(&times, labels(), &shuffled[split..]);
            left.merge(&right);
            prop_assert_eq!(whole.to_csv(&[], Some(1.0)), left.to_csv(&[], Some(1.0)));
        }
    }
}
