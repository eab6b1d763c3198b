use crate::data::Example;
use crate::gcn::GcnModel;
use crate::numerics::{Bindings, Graph, NodeId, Scalar};
use crate::scn::ScnModel;
use crate::Result;

/// Records the summed candidate cross-entropy of `examples` (positive at
/// index 0). With a correction network its MLPs run once over the stacked
/// hidden states of all examples.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    scn: &ScnModel,
    scn_bindings: &Bindings,
    gcn: Option<(&GcnModel, &Bindings)>,
    examples: &[&Example],
) -> Result<NodeId> {
    let nodes = scn.nodes(scn_bindings);
    let hidden = examples
        .iter()
        .map(|ex| scn.hidden_graph(g, &nodes, &ex.input))
        .collect::<Result<Vec<_>>>()?;
    let corrections = match gcn {
        Some((model, bindings)) => {
            let width = model.config.input_len();
            let rows = hidden
                .iter()
                .map(|&h| g.reshape(h, &[1, width]))
                .collect::<crate::numerics::Result<Vec<_>>>()?;
            let stacked = g.concat_rows(&rows)?;
            Some(model.graph(g, bindings, stacked)?)
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let corr = corrections.as_ref().map(|c| &c[i]);
        let logits = scn.logits_graph(g, &nodes, hidden[i], &ex.candidates, corr)?;
        losses.push(g.softmax_cross_entropy(logits, 0)?);
    }
    let row = g.concat_cols(&losses)?;
    Ok(g.sum(row)?)
}
