//! Text renderings of score reports and rankings.

use std::fmt::Write;

use apc_core::scoring::RankedStatement;
use apc_core::{Aggregates, ApcReport, Persona};

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

fn aggregate_row(out: &mut String, label: &str, a: &Aggregates) {
    writeln!(
        out,
        "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
        cell(label),
        a.interaction_count,
        a.mean_v_apc,
        a.mean_delta_v_apc,
        a.mean_active_reward,
        a.mean_passive_penalty
    )
    .unwrap();
}

pub fn markdown(report: &ApcReport, persona: &Persona) -> String {
    let mut out = String::new();
    let t = report.thresholds;
    writeln!(out, "# APC report: {}\n", report.character).unwrap();
    writeln!(
        out,
        "{} statements, {} interactions. Violation thresholds: relevance {}, entailment {}, contradiction {}.\n",
        report.statement_count,
        report.per_interaction.len(),
        t.tau_rel,
        t.tau_ent,
        t.tau_con
    )
    .unwrap();

    out.push_str("## By method\n\n");
    out.push_str("| method | interactions | mean V_APC | mean ΔAPC | mean active reward | mean passive penalty |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for (method, a) in &report.by_method {
        aggregate_row(&mut out, method, a);
    }
    aggregate_row(&mut out, "**all**", &report.aggregates);

    out.push_str("\n## Interactions\n\n");
    out.push_str(
        "| # | method | query | V_APC | ΔAPC | active reward | passive penalty | violations |\n",
    );
    out.push_str("|---:|---|---|---:|---:|---:|---:|---:|\n");
    for row in &report.per_interaction {
        writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            row.interaction_index,
            cell(row.method.as_deref().unwrap_or("")),
            cell(&row.query),
            row.v_apc,
            row.delta_v_apc,
            row.active_reward,
            row.passive_penalty,
            row.violations.len()
        )
        .unwrap();
    }

    let any = report
        .per_interaction
        .iter()
        .any(|r| !r.violations.is_empty());
    if any {
        out.push_str("\n## Violations\n\n");
        for row in &report.per_interaction {
            for v in &row.violations {
                let text = persona.statement(v.statement_id).map_or("", |s| s.text());
                let what = match v.kind {
                    apc_core::ViolationKind::ActiveMiss => "p_entailed",
                    apc_core::ViolationKind::PassiveContradiction => "p_contradicted",
                };
                writeln!(
                    out,
                    "- interaction {}, statement {} ({}): {} (p_relevant {:.4}, {what} {:.4})",
                    row.interaction_index,
                    v.statement_id,
                    serde_json::to_value(v.kind).unwrap().as_str().unwrap(),
                    text,
                    v.relevance,
                    v.offending_probability
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn csv(report: &ApcReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "interaction_index",
        "method",
        "query",
        "v_apc",
        "delta_v_apc",
        "active_reward",
        "passive_penalty",
        "violations",
    ])?;
    for row in &report.per_interaction {
        w.write_record([
            row.interaction_index.to_string(),
            row.method.clone().unwrap_or_default(),
            row.query.clone(),
            row.v_apc.to_string(),
            row.delta_v_apc.to_string(),
            row.active_reward.to_string(),
            row.passive_penalty.to_string(),
            row.violations.len().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn ranking_text(ranked: &[RankedStatement]) -> String {
    let mut out = String::new();
    for r in ranked {
        writeln!(
            out,
            "{:.4}\t{}\t{}",
            r.p_relevant,
            r.statement.id(),
            r.statement.text()
        )
        .unwrap();
    }
    out
}

pub fn ranking_markdown(ranked: &[RankedStatement]) -> String {
    let mut out = String::from("| rank | id | p_relevant | statement |\n|---:|---:|---:|---|\n");
    for (i, r) in ranked.iter().enumerate() {
        writeln!(
            out,
            "| {} | {} | {:.4} | {} |",
            i + 1,
            r.statement.id(),
            r.p_relevant,
            cell(r.statement.text())
        )
        .unwrap();
    }
    out
}

pub fn ranking_csv(ranked: &[RankedStatement]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "id", "p_relevant", "statement"])?;
    for (i, r) in ranked.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.statement.id().to_string(),
            r.p_relevant.to_string(),
            r.statement.text().to_owned(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
