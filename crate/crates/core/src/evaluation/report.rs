use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Best-1")]
    Best1,
    #[serde(rename = "Reg-1")]
    Reg1,
    #[serde(rename = "Best-10")]
    Best10,
    #[serde(rename = "Reg-10")]
    Reg10,
    #[serde(rename = "Best-50")]
    Best50,
    #[serde(rename = "kinematic")]
    Kinematic,
    #[serde(rename = "random")]
    Random,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Best1, Method::Reg1, Method::Best10, Method::Reg10, Method::Best50, Method::Kinematic, Method::Random];

    pub fn name(self) -> &'static str {
        match self {
            Method::Best1 => "Best-1",
            Method::Reg1 => "Reg-1",
            Method::Best10 => "Best-10",
            Method::Reg10 => "Reg-10",
            Method::Best50 => "Best-50",
            Method::Kinematic => "kinematic",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }

    /// Number of top candidates and whether they are refined first.
    pub fn candidates(self) -> Option<(usize, bool)> {
        match self {
            Method::Best1 => Some((1, false)),
            Method::Reg1 => Some((1, true)),
            Method::Best10 => Some((10, false)),
            Method::Reg10 => Some((10, true)),
            Method::Best50 => Some((50, false)),
            Method::Kinematic | Method::Random => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    /// Number of sensors in contact (1 for single-contact runs).
    pub n_contacts: usize,
    pub method: Method,
    pub true_pose: Pose,
    /// `None` for failed trials.
    pub estimate: Option<Pose>,
    pub add_mm: f64,
    pub normalized: f64,
    pub failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_contacts: usize,
    pub count: usize,
    pub failures: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub normalized_median: f64,
    pub normalized_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Mean error of random grid guesses; normalizes every error.
    pub random_mean: f64,
    pub grid_mean_nn: f64,
    pub records: Vec<TrialRecord>,
}

/// Median; the mean of the two middle values for even counts. NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn pose_fields(p: &Pose) -> String {
    let t = p.translation();
    let q = p.quaternion();
    format!("{},{},{},{},{},{},{}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    random_mean: f64,
    grid_mean_nn: f64,
    trials: usize,
    methods: &'a [MethodSummary],
}

impl ExperimentReport {
    fn groups(&self) -> BTreeMap<(usize, Method), Vec<&TrialRecord>> {
        let mut g: BTreeMap<(usize, Method), Vec<&TrialRecord>> = BTreeMap::new();
        for r in &self.records {
            g.entry((r.n_contacts, r.method)).or_default().push(r);
        }
        g
    }

    pub fn summary(&self) -> Vec<MethodSummary> {
        self.groups()
            .into_iter()
            .map(|((n_contacts, method), recs)| {
                let add: Vec<f64> = recs.iter().map(|r| r.add_mm).collect();
                let norm: Vec<f64> = recs.iter().map(|r| r.normalized).collect();
                let (mean, std) = mean_std(&add);
                MethodSummary {
                    method,
                    n_contacts,
                    count: recs.len(),
                    failures: recs.iter().filter(|r| r.failure).count(),
                    median: median(&add),
                    mean,
                    std,
                    normalized_median: median(&norm),
                    normalized_mean: mean_std(&norm).0,
                }
            })
            .collect()
    }

    pub fn find(&self, method: Method, n_contacts: usize) -> Option<MethodSummary> {
        self.summary().into_iter().find(|s| s.method == method && s.n_contacts == n_contacts)
    }

    pub fn errors(&self, method: Method, n_contacts: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.n_contacts == n_contacts)
            .map(|r| r.add_mm)
            .collect()
    }

    /// Raw records, one row per trial and method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "trial,n_contacts,method,true_x,true_y,true_z,true_qw,true_qx,true_qy,true_qz,\
             est_x,est_y,est_z,est_qw,est_qx,est_qy,est_qz,add_mm,normalized,failure\n",
        );
        for r in &self.records {
            let est = r.estimate.as_ref().map_or_else(|| ",,,,,,".to_string(), pose_fields);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.trial,
                r.n_contacts,
                r.method.name(),
                pose_fields(&r.true_pose),
                est,
                r.add_mm,
                r.normalized,
                r.failure as u8
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let methods = self.summary();
        let trials = self.records.iter().map(|r| r.trial).max().map_or(0, |m| m + 1);
        let doc = SummaryDoc { random_mean: self.random_mean, grid_mean_nn: self.grid_mean_nn, trials, methods: &methods };
        serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n"
    }

    /// Gnuplot-friendly histogram of normalized errors: `bin_center count`
    /// blocks separated by blank lines, one per method and contact count.
    pub fn histograms(&self, bins: usize, max_normalized: f64) -> String {
        let bins = bins.max(1);
        let width = max_normalized / bins as f64;
        let mut out = String::new();
        for ((n, method), recs) in self.groups() {
            let _ = writeln!(out, "# {} n_contacts={n}", method.name());
            let mut counts = vec![0usize; bins];
            for r in recs {
                let b = ((r.normalized / width).floor().max(0.0) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let _ = writeln!(out, "{} {c}", (b as f64 + 0.5) * width);
            }
            out.push_str("\n\n");
        }
        out
    }
}
