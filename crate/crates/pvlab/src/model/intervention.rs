//! Declarative interventions on forward-pass streams.
//!
//! A spec names a target stream (per-head values, queries+keys, attention
//! logits, or layer outputs), the component to act on (whole vector,
//! positional vector, positional basis, semantic vector), an action and a
//! 1-based position/layer range. Specs are resolved eagerly into flat
//! per-layer edit lists before the forward pass runs; component edits pull the
//! needed rows out of a [`DecompositionSet`].

use super::{ModelConfig, ModelError, Result};
use crate::decompose::{DecompositionSet, StreamId};
use crate::numerics::Matrix;
use std::ops::Range;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionTarget {
    AttentionValue,
    KeyAndQuery,
    AttentionLogits,
    LayerOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Whole,
    PositionalVector,
    PositionalBasis,
    SemanticVector,
}

#[derive(Debug, Clone)]
pub enum InterventionAction {
    Remove,
    Scale(f32),
    Replace(Matrix),
}

/// One intervention. Position and layer ranges are 1-based half-open
/// `[start, end)`; an empty range is a no-op.
#[derive(Debug, Clone)]
pub struct InterventionSpec {
    pub target: InterventionTarget,
    pub component: Component,
    pub action: InterventionAction,
    pub positions: Range<usize>,
    pub layers: Range<usize>,
    pub decomposition: Option<Arc<DecompositionSet>>,
}

impl InterventionSpec {
    /// Remove a component of the attention values at `positions` in all layers.
    pub fn remove_value_component(
        component: Component,
        positions: Range<usize>,
        n_layers: usize,
        decomposition: Arc<DecompositionSet>,
    ) -> Self {
        InterventionSpec {
            target: InterventionTarget::AttentionValue,
            component,
            action: InterventionAction::Remove,
            positions,
            layers: 1..n_layers + 1,
            decomposition: Some(decomposition),
        }
    }
}

/// Primitive edits the forward pass applies in order.
#[derive(Debug, Clone)]
pub(crate) enum EditKind {
    RemoveWhole,
    ScaleWhole(f32),
    SetRows(Matrix),
    AddScaledRows { rows: Matrix, scale: f32 },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum LogitOp {
    Scale(f32),
    Mask,
}

/// Edits of one layer, 0-based positions, per-head streams keyed by head index.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerEdits {
    pub value: Vec<(usize, Range<usize>, EditKind)>,
    pub query: Vec<(usize, Range<usize>, EditKind)>,
    pub key: Vec<(usize, Range<usize>, EditKind)>,
    pub logits: Vec<(Range<usize>, LogitOp)>,
    pub output: Vec<(Range<usize>, EditKind)>,
}

#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    pub(crate) layers: Vec<LayerEdits>,
}

impl ResolvedPlan {
    pub fn empty(n_layers: usize) -> Self {
        ResolvedPlan { layers: vec![LayerEdits::default(); n_layers] }
    }
}

fn intervention_err(msg: impl Into<String>) -> ModelError {
    ModelError::Intervention(msg.into())
}

/// Expand component/action into primitive edits given the decomposition rows
/// for the position range.
fn component_edits(
    component: Component,
    action: &InterventionAction,
    p_rows: Option<&Matrix>,
    m_rows: Option<&Matrix>,
    range_len: usize,
    dim: usize,
) -> Result<Vec<EditKind>> {
    let payload = match action {
        InterventionAction::Replace(m) => {
            if m.rows() != range_len || m.cols() != dim {
                return Err(intervention_err(format!(
                    "replace payload is {}x{}, expected {range_len}x{dim}",
                    m.rows(),
                    m.cols()
                )));
            }
            Some(m.clone())
        }
        _ => None,
    };
    let comp_rows = |rows: Option<&Matrix>| -> Result<Matrix> {
        rows.cloned().ok_or_else(|| {
            intervention_err("component intervention needs a decomposition for the target stream")
        })
    };
    Ok(match (component, action) {
        (Component::Whole, InterventionAction::Remove) => vec![EditKind::RemoveWhole],
        (Component::Whole, InterventionAction::Scale(f)) => vec![EditKind::ScaleWhole(*f)],
        (Component::Whole, InterventionAction::Replace(_)) => {
            vec![EditKind::SetRows(payload.unwrap())]
        }
        (Component::PositionalVector, InterventionAction::Remove) => {
            vec![EditKind::AddScaledRows { rows: comp_rows(p_rows)?, scale: -1.0 }]
        }
        (Component::PositionalVector, InterventionAction::Scale(f)) => {
            vec![EditKind::AddScaledRows { rows: comp_rows(p_rows)?, scale: f - 1.0 }]
        }
        (Component::PositionalVector, InterventionAction::Replace(_)) => vec![
            EditKind::AddScaledRows { rows: comp_rows(p_rows)?, scale: -1.0 },
            EditKind::AddScaledRows { rows: payload.unwrap(), scale: 1.0 },
        ],
        (Component::PositionalBasis, InterventionAction::Remove) => {
            vec![EditKind::AddScaledRows { rows: comp_rows(m_rows)?, scale: -1.0 }]
        }
        (Component::PositionalBasis, InterventionAction::Scale(f)) => {
            vec![EditKind::AddScaledRows { rows: comp_rows(m_rows)?, scale: f - 1.0 }]
        }
        (Component::PositionalBasis, InterventionAction::Replace(_)) => vec![
            EditKind::AddScaledRows { rows: comp_rows(m_rows)?, scale: -1.0 },
            EditKind::AddScaledRows { rows: payload.unwrap(), scale: 1.0 },
        ],
        (Component::SemanticVector, InterventionAction::Remove) => {
            vec![EditKind::SetRows(comp_rows(p_rows)?)]
        }
        (Component::SemanticVector, InterventionAction::Scale(f)) => vec![
            EditKind::ScaleWhole(*f),
            EditKind::AddScaledRows { rows: comp_rows(p_rows)?, scale: 1.0 - f },
        ],
        (Component::SemanticVector, InterventionAction::Replace(_)) => vec![
            EditKind::SetRows(comp_rows(p_rows)?),
            EditKind::AddScaledRows { rows: payload.unwrap(), scale: 1.0 },
        ],
    })
}

/// Fetch p/m rows of `stream` for `range` (0-based positions), checking that
/// the decomposition exists, spans the range and matches the stream dim.
fn decomposition_rows(
    set: Option<&Arc<DecompositionSet>>,
    stream: StreamId,
    range: &Range<usize>,
    dim: usize,
    needed: bool,
) -> Result<(Option<Matrix>, Option<Matrix>)> {
    if !needed {
        return Ok((None, None));
    }
    let set = set.ok_or_else(|| {
        intervention_err("component intervention needs a decomposition reference")
    })?;
    let dec = set.get(&stream).ok_or_else(|| {
        intervention_err(format!("decomposition set has no entry for {stream}"))
    })?;
    if dec.dim() != dim {
        return Err(intervention_err(format!(
            "decomposition for {stream} has dim {}, stream needs {dim}",
            dec.dim()
        )));
    }
    if dec.t_len() < range.end {
        return Err(intervention_err(format!(
            "decomposition for {stream} spans {} positions, intervention needs {}",
            dec.t_len(),
            range.end
        )));
    }
    Ok((
        Some(dec.p().slice_rows(range.clone())),
        Some(dec.m().slice_rows(range.clone())),
    ))
}

/// Resolve specs against a config and sequence length into per-layer edits.
pub fn resolve_interventions(
    config: &ModelConfig,
    t_len: usize,
    specs: &[InterventionSpec],
) -> Result<ResolvedPlan> {
    let mut plan = ResolvedPlan::empty(config.layers);
    for spec in specs {
        if spec.positions.start == spec.positions.end {
            continue; // explicit no-op
        }
        if spec.positions.start < 1 {
            return Err(intervention_err("positions are 1-based; start must be >= 1"));
        }
        if spec.positions.end < spec.positions.start {
            return Err(intervention_err("position range end before start"));
        }
        if spec.positions.end - 1 > t_len {
            return Err(intervention_err(format!(
                "position range {:?} beyond sequence length {t_len}",
                spec.positions
            )));
        }
        if spec.layers.start < 1 || spec.layers.end > config.layers + 1 {
            return Err(intervention_err(format!(
                "layer range {:?} outside 1..={}",
                spec.layers, config.layers
            )));
        }
        // 0-based position range
        let range = spec.positions.start - 1..spec.positions.end - 1;
        let needs_dec = spec.component != Component::Whole;

        for l in spec.layers.clone() {
            let edits = &mut plan.layers[l - 1];
            match spec.target {
                InterventionTarget::AttentionLogits => {
                    if spec.component != Component::Whole {
                        return Err(intervention_err(
                            "attention-logit interventions act on whole logits only",
                        ));
                    }
                    let op = match &spec.action {
                        InterventionAction::Scale(f) => LogitOp::Scale(*f),
                        InterventionAction::Remove => LogitOp::Mask,
                        InterventionAction::Replace(_) => {
                            return Err(intervention_err(
                                "attention logits cannot be replaced, only scaled or masked",
                            ))
                        }
                    };
                    edits.logits.push((range.clone(), op));
                }
                InterventionTarget::LayerOutput => {
                    let (p, m) = decomposition_rows(
                        spec.decomposition.as_ref(),
                        StreamId::LayerOutput { layer: l },
                        &range,
                        config.model_dim,
                        needs_dec,
                    )?;
                    for kind in component_edits(
                        spec.component,
                        &spec.action,
                        p.as_ref(),
                        m.as_ref(),
                        range.len(),
                        config.model_dim,
                    )? {
                        edits.output.push((range.clone(), kind));
                    }
                }
                InterventionTarget::AttentionValue => {
                    for h in 1..=config.heads {
                        let (p, m) = decomposition_rows(
                            spec.decomposition.as_ref(),
                            StreamId::Value { layer: l, head: h },
                            &range,
                            config.head_dim(),
                            needs_dec,
                        )?;
                        for kind in component_edits(
                            spec.component,
                            &spec.action,
                            p.as_ref(),
                            m.as_ref(),
                            range.len(),
                            config.head_dim(),
                        )? {
                            edits.value.push((h - 1, range.clone(), kind));
                        }
                    }
                }
                InterventionTarget::KeyAndQuery => {
                    for h in 1..=config.heads {
                        let (pq, mq) = decomposition_rows(
                            spec.decomposition.as_ref(),
                            StreamId::Query { layer: l, head: h },
                            &range,
                            config.head_dim(),
                            needs_dec,
                        )?;
                        for kind in component_edits(
                            spec.component,
                            &spec.action,
                            pq.as_ref(),
                            mq.as_ref(),
                            range.len(),
                            config.head_dim(),
                        )? {
                            edits.query.push((h - 1, range.clone(), kind));
                        }
                        let (pk, mk) = decomposition_rows(
                            spec.decomposition.as_ref(),
                            StreamId::Key { layer: l, head: h },
                            &range,
                            config.head_dim(),
                            needs_dec,
                        )?;
                        for kind in component_edits(
                            spec.component,
                            &spec.action,
                            pk.as_ref(),
                            mk.as_ref(),
                            range.len(),
                            config.head_dim(),
                        )? {
                            edits.key.push((h - 1, range.clone(), kind));
                        }
                    }
                }
            }
        }
    }
    Ok(plan)
}
