//! `complexity`: parameter and FLOP table.

use acrnn_core::model::{
    ablation_grid, count_flops, count_params, Acrnn, AcrnnConfig, AttentionSite, PUBLISHED_FLOPS_M, PUBLISHED_PARAMS_M,
};
use anyhow::{bail, Result};

use crate::{Common, ComplexityArgs};

/// One printed row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub layer: String,
    pub params: usize,
    pub flops: u64,
}

/// Per-layer rows (conv layers, l9, l10, attention when present, head).
/// Parameters come from the allocated model, grouped by name prefix.
pub fn rows(cfg: &AcrnnConfig) -> Result<Vec<Row>> {
    let model = Acrnn::<f32>::new(cfg.clone())?;
    let params_of = |prefix: &str| -> usize {
        model
            .params
            .iter()
            .filter(|p| p.name.split('.').next() == Some(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    };
    let report = count_flops(cfg);
    let mut out: Vec<Row> = report
        .layers
        .iter()
        .map(|l| Row {
            layer: l.name.clone(),
            params: params_of(&l.name),
            flops: l.flops,
        })
        .collect();
    if cfg.attention_site != AttentionSite::None {
        let at = out.len() - 1;
        out.insert(
            at,
            Row {
                layer: "attention".into(),
                params: params_of("att"),
                flops: report.attention,
            },
        );
    }
    let listed: usize = out.iter().map(|r| r.params).sum();
    let allocated: usize = model.params.iter().map(|p| p.tensor.numel()).sum();
    if listed != allocated || allocated != count_params(cfg) {
        bail!(
            "parameter bookkeeping disagrees: rows {listed}, allocated {allocated}, analytic {}",
            count_params(cfg)
        );
    }
    Ok(out)
}

fn millions(v: f64) -> String {
    format!("{:.2} M", v / 1e6)
}

fn describe(cfg: &AcrnnConfig) -> String {
    let att = match cfg.attention_site {
        AttentionSite::None => "none".to_string(),
        AttentionSite::L10 => format!("l10 ({:?})", cfg.rnn_score).to_lowercase(),
        s => format!("{} ({:?})", s.label(), cfg.cnn_attention_scaling).to_lowercase(),
    };
    format!(
        "attention {att}, widths {:?}, gru {}, classes {}",
        cfg.conv_widths, cfg.gru_hidden, cfg.num_classes
    )
}

pub(crate) fn run(common: &Common, args: &ComplexityArgs) -> Result<()> {
    let cfg = &common.cfg.model;
    cfg.validate()?;
    let rows = rows(cfg)?;
    println!("{}", describe(cfg));
    println!("{:<10} {:>12} {:>14}", "layer", "params", "flops");
    for r in &rows {
        println!("{:<10} {:>12} {:>14}", r.layer, r.params, r.flops);
    }
    let params: usize = rows.iter().map(|r| r.params).sum();
    let flops: u64 = rows.iter().map(|r| r.flops).sum();
    println!("{:<10} {:>12} {:>14}", "total", params, flops);
    println!(
        "{:<10} {:>12} {:>14}",
        "",
        millions(params as f64),
        millions(flops as f64)
    );
    println!(
        "{:<10} {:>12} {:>14}",
        "published",
        format!("{PUBLISHED_PARAMS_M:.2} M"),
        format!("{PUBLISHED_FLOPS_M:.2} M")
    );
    if args.grid {
        println!();
        println!("{:<14} {:>12} {:>14} {:>12}", "config", "params", "flops", "att flops");
        for (name, c) in ablation_grid(cfg) {
            let f = count_flops(&c);
            println!(
                "{name:<14} {:>12} {:>14} {:>12}",
                count_params(&c),
                f.total,
                f.attention
            );
        }
    }
    Ok(())
}
