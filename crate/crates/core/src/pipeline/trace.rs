use crate::error::{GrainError, Result};

/// One row per training step, plus the initial state as step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub stage: u8,
    pub target_density: f64,
    pub actual_density: f64,
    pub loss_ce: f64,
    pub loss_hidden: f64,
    pub lr: f64,
    pub live_heads: usize,
    pub live_query: usize,
    pub live_value: usize,
    pub live_ffn: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

const HEADER: [&str; 12] = [
    "step",
    "t",
    "stage",
    "target_density",
    "actual_density",
    "loss_ce",
    "loss_hidden",
    "lr",
    "live_heads",
    "live_query",
    "live_value",
    "live_ffn",
];

impl RunTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.t.to_string(),
                r.stage.to_string(),
                r.target_density.to_string(),
                r.actual_density.to_string(),
                r.loss_ce.to_string(),
                r.loss_hidden.to_string(),
                r.lr.to_string(),
                r.live_heads.to_string(),
                r.live_query.to_string(),
                r.live_value.to_string(),
                r.live_ffn.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| GrainError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(GrainError::Parse {
                line: 1,
                msg: format!("unexpected trace header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let f = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| GrainError::Parse {
                    line,
                    msg: format!("bad number {:?} in column {}", &rec[k], HEADER[k]),
                })
            };
            let u = |k: usize| -> Result<usize> {
                rec[k].parse().map_err(|_| GrainError::Parse {
                    line,
                    msg: format!("bad integer {:?} in column {}", &rec[k], HEADER[k]),
                })
            };
            rows.push(TraceRow {
                step: u(0)?,
                t: f(1)?,
                stage: u(2)? as u8,
                target_density: f(3)?,
                actual_density: f(4)?,
                loss_ce: f(5)?,
                loss_hidden: f(6)?,
                lr: f(7)?,
                live_heads: u(8)?,
                live_query: u(9)?,
                live_value: u(10)?,
                live_ffn: u(11)?,
            });
        }
        Ok(Self { rows })
    }
}
