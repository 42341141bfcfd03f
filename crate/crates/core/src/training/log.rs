use std::io::Write;

use super::{LossReport, TrainConfig};
use crate::metric::AlignmentMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Iteration,
    Lr,
    Cls,
    Reg,
    Img,
    Obj,
    TripletImg,
    TripletObj,
    LambdaImg,
    LambdaObj,
    Total,
}

impl Column {
    fn name(self) -> &'static str {
        match self {
            Column::Iteration => "iteration",
            Column::Lr => "lr",
            Column::Cls => "l_cls",
            Column::Reg => "l_reg",
            Column::Img => "l_img",
            Column::Obj => "l_obj",
            Column::TripletImg => "l_triplet_img",
            Column::TripletObj => "l_triplet_obj",
            Column::LambdaImg => "lambda_img",
            Column::LambdaObj => "lambda_obj",
            Column::Total => "total",
        }
    }

    fn value(self, r: &LossReport) -> Option<String> {
        let f = |v: f64| v.to_string();
        let c = &r.components;
        match self {
            Column::Iteration => Some(r.iteration.to_string()),
            Column::Lr => Some(f(r.lr)),
            Column::Cls => Some(f(c.cls)),
            Column::Reg => Some(f(c.reg)),
            Column::Img => c.img.map(f),
            Column::Obj => c.obj.map(f),
            Column::TripletImg => c.triplet_img.map(f),
            Column::TripletObj => c.triplet_obj.map(f),
            Column::LambdaImg => r.lambda_img.map(f),
            Column::LambdaObj => r.lambda_obj.map(f),
            Column::Total => Some(f(r.total)),
        }
    }
}

/// Tab-separated per-iteration log. Columns for terms the configuration never
/// computes are left out of the header. Floats use Rust's shortest
/// round-trip formatting, so parsing a line gives back the exact values.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    columns: Vec<Column>,
}

impl TrainingLog {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut columns = vec![Column::Iteration, Column::Lr, Column::Cls, Column::Reg];
        if cfg.adapts() {
            columns.extend([Column::Img, Column::Obj, Column::TripletImg]);
            if cfg.mode == AlignmentMode::Aligned {
                columns.push(Column::TripletObj);
            }
            columns.extend([Column::LambdaImg, Column::LambdaObj]);
        }
        columns.push(Column::Total);
        Self { columns }
    }

    pub fn header(&self) -> String {
        self.columns.iter().map(|c| c.name()).collect::<Vec<_>>().join("\t")
    }

    pub fn line(&self, report: &LossReport) -> String {
        self.columns
            .iter()
            .map(|c| c.value(report).unwrap_or_else(|| "NA".into()))
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub fn write_header(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.header())
    }

    pub fn write(&self, out: &mut dyn Write, report: &LossReport) -> std::io::Result<()> {
        writeln!(out, "{}", self.line(report))
    }
}
