//! CSV rendering for run outputs. Floats use the shortest round-trip
//! representation so identical runs give identical bytes.

use std::fmt::Write;

use crate::model::genotype_string;
use crate::nas_diff::TrajectoryRow;
use crate::nas_evo::HistoryRow;
use crate::train::StepRecord;

pub const STEP_HEADER: &str = "step,split,loss,accuracy";
pub const HISTORY_HEADER: &str = "generation,lineage_id,parent_id,genotype,params,val_acc,selected,birth_residual";
pub const TRAJECTORY_HEADER: &str = "epoch,layer,group,z";
pub const RESULT_HEADER: &str = "model,seed,params,split,loss,accuracy,error";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub seed: u64,
    pub params: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

fn finish(header: &str, body: String) -> String {
    format!("{header}\n{body}")
}

pub fn steps_csv(split: &str, trace: &[StepRecord]) -> String {
    let mut s = String::new();
    for r in trace {
        writeln!(s, "{},{split},{},{}", r.step, r.loss, r.accuracy).unwrap();
    }
    finish(STEP_HEADER, s)
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let parent = r.parent.map_or(String::new(), |p| p.to_string());
        writeln!(
            s,
            "{},{},{parent},{},{},{},{},{}",
            r.generation,
            r.lineage,
            genotype_string(&r.genotype),
            r.params,
            r.val_acc,
            u8::from(r.selected),
            r.birth_residual
        )
        .unwrap();
    }
    finish(HISTORY_HEADER, s)
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::new();
    for r in rows {
        writeln!(s, "{},{},{},{}", r.epoch, r.layer, r.group, r.z).unwrap();
    }
    finish(TRAJECTORY_HEADER, s)
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::new();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.model,
            r.seed,
            r.params,
            r.split,
            r.loss,
            r.accuracy,
            1.0 - r.accuracy
        )
        .unwrap();
    }
    finish(RESULT_HEADER, s)
}
