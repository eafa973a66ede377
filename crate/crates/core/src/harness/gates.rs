//! Gate-map dumps: PGM images per gate column and per expert, CSV scores.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mmoe::GateRecord;
use crate::model::Model;
use crate::numerics::{Mode, ParamStore, Tensor};
use crate::synthdata::SceneSample;
use crate::Graph;

/// Min-max scaled 8-bit PGM; the scale goes into a header comment.
fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<(f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n# min {lo:e} max {hi:e}\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, out)?;
    Ok((lo, hi))
}

#[derive(Clone, Debug, Default)]
pub struct GateDump {
    pub records: Vec<GateRecord>,
    pub gate_maps: Vec<PathBuf>,
    pub expert_maps: Vec<PathBuf>,
    pub score_tables: Vec<PathBuf>,
}

pub fn gate_csv_name(layer: usize, task: usize) -> String {
    format!("gates_l{layer}_t{task}.csv")
}

/// Runs one sample through a gated model and writes its gate fields.
pub fn dump_gates(model: &Model, store: &ParamStore, sample: &SceneSample, out: &Path) -> Result<GateDump> {
    if !model.config.variant.is_gated() {
        return Err(Error::Config(format!(
            "variant {} has no gates to dump",
            model.config.variant
        )));
    }
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    let mut g = Graph::new();
    let images = sample.image.clone().reshape({
        let mut s = vec![1];
        s.extend_from_slice(sample.image.shape());
        s
    })?;
    let mut observe = |r: &GateRecord| records.push(r.clone());
    model.forward(&mut g, store, &images, Mode::Eval, Some(&mut observe))?;
    let (h, w) = (sample.grid, sample.grid);
    let mut dump = GateDump::default();
    for r in &records {
        let cols = r.gates.cols();
        for j in 0..cols {
            let column: Vec<f64> = (0..r.gates.rows()).map(|k| r.gates.at(k, j)).collect();
            let label = if j < r.representatives.len() {
                format!("e{j}")
            } else {
                "mem".to_string()
            };
            let path = out.join(format!("gate_l{}_t{}_{label}.pgm", r.layer, r.task));
            write_pgm(&path, &column, h, w)?;
            dump.gate_maps.push(path);
        }
        let mut csv = String::from("token,row,col");
        for j in 0..cols {
            let _ = write!(csv, ",g{j}");
        }
        csv.push('\n');
        for k in 0..r.gates.rows() {
            let _ = write!(csv, "{k},{},{}", k / w, k % w);
            for &v in r.gates.row(k) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        let path = out.join(gate_csv_name(r.layer, r.task));
        fs::write(&path, csv)?;
        dump.score_tables.push(path);
        if r.task == 0 {
            for (i, rep) in r.representatives.iter().enumerate() {
                let mean: Vec<f64> = (0..rep.rows()).map(|k| rep.row(k).iter().sum::<f64>() / rep.cols() as f64).collect();
                let path = out.join(format!("expert_l{}_e{i}.pgm", r.layer));
                write_pgm(&path, &mean, h, w)?;
                dump.expert_maps.push(path);
            }
        }
    }
    dump.records = records;
    Ok(dump)
}

/// Reads the score matrix back from a gate CSV.
pub fn read_gate_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let bad = |why: &str| Error::format(path, why);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let cols = header.split(',').count().checked_sub(3).filter(|&c| c > 0).ok_or_else(|| bad("no score columns"))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 3 {
            return Err(bad("ragged row"));
        }
        for f in &fields[3..] {
            data.push(f.parse::<f64>().map_err(|_| bad("bad number"))?);
        }
        rows += 1;
    }
    Tensor::new([rows, cols], data).map_err(|e| bad(&e.to_string()))
}
