//! Structure of a (pruned) model: heads, units per head and FFN widths.

use std::fmt::Write as _;

use crate::error::{GrainError, Result};
use crate::model::EncoderModel;
use crate::tensor::Scalar;

/// Live units of one attention head that still has value units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    pub head: usize,
    pub query_units: usize,
    pub value_units: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub layer: usize,
    pub heads: Vec<HeadShape>,
    pub ffn_units: usize,
    pub prunable_params: usize,
}

impl BlockReport {
    pub fn live_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn query_units(&self) -> usize {
        self.heads.iter().map(|h| h.query_units).sum()
    }

    pub fn value_units(&self) -> usize {
        self.heads.iter().map(|h| h.value_units).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub blocks: Vec<BlockReport>,
    pub density: f64,
    pub prunable_params: usize,
    pub total_params: usize,
    pub embedding_params: usize,
}

fn mean(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

impl StructureReport {
    pub fn of<S: Scalar>(model: &EncoderModel<S>) -> Self {
        let d = model.config.hidden;
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(layer, b)| {
                let heads: Vec<HeadShape> = b
                    .heads
                    .iter()
                    .enumerate()
                    .filter(|(_, h)| h.is_live())
                    .map(|(head, h)| HeadShape {
                        head,
                        query_units: h.live_queries(),
                        value_units: h.live_values(),
                    })
                    .collect();
                let attn: usize = b
                    .heads
                    .iter()
                    .map(|h| h.live_queries() + h.live_values())
                    .sum();
                BlockReport {
                    layer,
                    heads,
                    ffn_units: b.live_ffn(),
                    prunable_params: 2 * d * (attn + b.live_ffn()),
                }
            })
            .collect();
        Self {
            blocks,
            density: model.model_density(),
            prunable_params: model.count_prunable_params(),
            total_params: model.total_params(),
            embedding_params: model.embedding_params(),
        }
    }

    /// Blocks whose attention still has at least one head.
    pub fn mha_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.live_heads() > 0).count()
    }

    pub fn total_heads(&self) -> usize {
        self.blocks.iter().map(BlockReport::live_heads).sum()
    }

    pub fn mean_query_units(&self) -> f64 {
        mean(
            self.blocks.iter().map(BlockReport::query_units).sum(),
            self.total_heads(),
        )
    }

    pub fn mean_value_units(&self) -> f64 {
        mean(
            self.blocks.iter().map(BlockReport::value_units).sum(),
            self.total_heads(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let shapes: Vec<String> = b
                .heads
                .iter()
                .map(|h| format!("h{}:{}q/{}v", h.head, h.query_units, h.value_units))
                .collect();
            let _ = writeln!(
                out,
                "layer {}: heads={} ffn={} [{}]",
                b.layer,
                b.live_heads(),
                b.ffn_units,
                shapes.join(" ")
            );
        }
        let _ = writeln!(out, "mha layers: {}", self.mha_layers());
        let _ = writeln!(out, "heads: {}", self.total_heads());
        let _ = writeln!(out, "query units per head: {:.1}", self.mean_query_units());
        let _ = writeln!(out, "value units per head: {:.1}", self.mean_value_units());
        let _ = writeln!(out, "density: {:.4}", self.density);
        let _ = writeln!(out, "prunable params: {}", self.prunable_params);
        let _ = writeln!(out, "total params: {}", self.total_params);
        out
    }

    /// One row per block and a closing `total` row, in fixed column order.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "live_heads",
            "query_units",
            "value_units",
            "query_per_head",
            "value_per_head",
            "ffn_units",
            "prunable_params",
            "total_params",
            "density",
        ])?;
        for b in &self.blocks {
            w.write_record([
                b.layer.to_string(),
                b.live_heads().to_string(),
                b.query_units().to_string(),
                b.value_units().to_string(),
                format!("{:.4}", mean(b.query_units(), b.live_heads())),
                format!("{:.4}", mean(b.value_units(), b.live_heads())),
                b.ffn_units.to_string(),
                b.prunable_params.to_string(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            self.total_heads().to_string(),
            self.blocks
                .iter()
                .map(BlockReport::query_units)
                .sum::<usize>()
                .to_string(),
            self.blocks
                .iter()
                .map(BlockReport::value_units)
                .sum::<usize>()
                .to_string(),
            format!("{:.4}", self.mean_query_units()),
            format!("{:.4}", self.mean_value_units()),
            self.blocks
                .iter()
                .map(|b| b.ffn_units)
                .sum::<usize>()
                .to_string(),
            self.prunable_params.to_string(),
            self.total_params.to_string(),
            format!("{:.6}", self.density),
        ])?;
        let bytes = w.into_inner().map_err(|e| GrainError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
