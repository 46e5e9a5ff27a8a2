use std::collections::BTreeMap;
use std::fs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_matrix, FusionConfig, FusionMethod};
use crate::io::{write_json, write_rankings};
use crate::knowledge::AsrStages;
use crate::metrics::{render_tsv, MetricReport};
use crate::model::{ComponentKind, RankedList};
use crate::scoring::{AggregationPolicy, ScoringConfig};

use super::stages::{evaluate_rankings, Pipeline, UpstreamSettings};

/// Axes of an ablation. Each non-empty axis is swept; an empty axis takes the
/// run config's value. At least one axis must be non-empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default)]
    pub fusion: Vec<FusionMethod>,
    /// Component groups to remove before fusion, by name or alias
    /// (`video`, `query`, `event`, `prequel`, ...). `[]` keeps everything.
    #[serde(default)]
    pub drop_components: Vec<Vec<String>>,
    #[serde(default)]
    pub aggregation: Vec<AggregationPolicy>,
    #[serde(default)]
    pub frame_counts: Vec<usize>,
    #[serde(default)]
    pub use_asr: Vec<bool>,
    #[serde(default)]
    pub asr_stages: Vec<AsrStages>,
    #[serde(default)]
    pub refined: Vec<bool>,
}

impl AblationGrid {
    pub fn is_empty(&self) -> bool {
        self.fusion.is_empty()
            && self.drop_components.is_empty()
            && self.aggregation.is_empty()
            && self.frame_counts.is_empty()
            && self.use_asr.is_empty()
            && self.asr_stages.is_empty()
            && self.refined.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub id: String,
    pub fusion: FusionMethod,
    /// `full`, or `-` followed by the dropped group names.
    pub drop_label: String,
    pub dropped: Vec<ComponentKind>,
    pub aggregation: AggregationPolicy,
    pub frame_count: usize,
    pub use_asr: bool,
    pub asr_stages: AsrStages,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Queries left with no components after the drop.
    pub skipped_queries: usize,
    pub report: MetricReport,
    #[serde(skip)]
    pub rankings: Vec<RankedList>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn stages_label(s: AsrStages) -> String {
    let parts: Vec<&str> = [(s.asr_translation, "asr"), (s.translator, "mt"), (s.refiner, "refine")]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let rows: Vec<(String, Vec<(String, String)>)> = self
            .rows
            .iter()
            .map(|r| {
                let c = &r.cell;
                let mut cols = vec![
                    ("fusion".to_string(), c.fusion.to_string()),
                    ("components".to_string(), c.drop_label.clone()),
                    ("aggregation".to_string(), c.aggregation.to_string()),
                    ("frames".to_string(), c.frame_count.to_string()),
                    ("asr".to_string(), if c.use_asr { stages_label(c.asr_stages) } else { "off".into() }),
                    ("events".to_string(), if c.refined { "refined" } else { "raw" }.into()),
                ];
                cols.extend(r.report.columns());
                (c.id.clone(), cols)
            })
            .collect();
        render_tsv("cell", &rows)
    }
}

fn or_default<T: Clone>(axis: &[T], fallback: T) -> Vec<T> {
    if axis.is_empty() {
        vec![fallback]
    } else {
        axis.to_vec()
    }
}

/// Sweeps the grid. Upstream stages run once per distinct upstream setting
/// (and are cached across runs); fusion and component drops are applied to
/// the shared matrices. Dropping a component removes its distribution with
/// no renormalization of the rest.
pub fn run_ablation(pipeline: &Pipeline, grid: &AblationGrid) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid has no axes"));
    }
    let config = &pipeline.config;
    let drops: Vec<(String, Vec<ComponentKind>)> = if grid.drop_components.is_empty() {
        vec![("full".into(), Vec::new())]
    } else {
        grid.drop_components
            .iter()
            .map(|names| {
                let mut kinds = Vec::new();
                for n in names {
                    kinds.extend(ComponentKind::parse_group(n)?);
                }
                kinds.sort();
                kinds.dedup();
                if kinds.len() == ComponentKind::ALL.len() {
                    return Err(Error::invalid(format!(
                        "dropping {names:?} removes every component, nothing left to fuse"
                    )));
                }
                let label = if names.is_empty() { "full".into() } else { format!("-{}", names.join("+")) };
                Ok((label, kinds))
            })
            .collect::<Result<_>>()?
    };
    let fusions = or_default(&grid.fusion, config.fusion.method);
    let mut rows = Vec::new();
    for &frame_count in &or_default(&grid.frame_counts, config.frame_count) {
        if frame_count == 0 {
            return Err(Error::invalid("frame count must be at least 1"));
        }
        for &use_asr in &or_default(&grid.use_asr, config.use_asr) {
            for &asr_stages in &or_default(&grid.asr_stages, config.asr_stages) {
                for &aggregation in &or_default(&grid.aggregation, config.aggregation) {
                    for &refined in &or_default(&grid.refined, config.use_refined_events) {
                        let settings = UpstreamSettings {
                            frame_count,
                            use_asr,
                            asr_stages,
                            scoring: ScoringConfig {
                                policy: aggregation,
                                use_refined_events: refined,
                            },
                        };
                        let (_, _, scored) = pipeline.upstream(&settings)?;
                        for &fusion in &fusions {
                            for (label, dropped) in &drops {
                                let fusion_cfg = FusionConfig {
                                    method: fusion,
                                    rrf_k: config.fusion.rrf_k,
                                };
                                let mut rankings = Vec::new();
                                let mut skipped = 0;
                                for m in &scored.matrices {
                                    let kept = m.without(dropped);
                                    if kept.components.is_empty() {
                                        skipped += 1;
                                        continue;
                                    }
                                    rankings.push(fuse_matrix(&kept, &fusion_cfg)?.ranked_list(&kept.video_order));
                                }
                                let report = evaluate_rankings(&rankings, pipeline.corpus(), &config.eval)?;
                                rows.push(AblationRow {
                                    cell: AblationCell {
                                        id: format!("c{:03}", rows.len()),
                                        fusion,
                                        drop_label: label.clone(),
                                        dropped: dropped.clone(),
                                        aggregation,
                                        frame_count,
                                        use_asr,
                                        asr_stages,
                                        refined,
                                    },
                                    skipped_queries: skipped,
                                    report,
                                    rankings,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(AblationTable { rows })
}

/// Writes `ablation.json`, `ablation.tsv` and per-cell rankings under
/// `<output_dir>/ablation/`.
pub fn write_ablation(pipeline: &Pipeline, table: &AblationTable) -> Result<()> {
    let dir = pipeline.config.output_dir.join("ablation");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("ablation.json"), table)?;
    crate::cache::write_atomic(&dir.join("ablation.tsv"), table.to_tsv().as_bytes())?;
    let mut index = BTreeMap::new();
    for row in &table.rows {
        write_rankings(&dir.join(format!("{}.rankings.jsonl", row.cell.id)), &row.rankings)?;
        index.insert(row.cell.id.clone(), &row.cell);
    }
    write_json(&dir.join("cells.json"), &index)
}
