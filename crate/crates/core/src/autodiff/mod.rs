//! Dense arrays and reverse-mode automatic differentiation.

mod array;
mod gradcheck;
mod optim;
mod params;
mod real;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_difference_check, relative_error, Evaluation, GradCheckReport};
pub use optim::{adam_step, AdamState};
pub use params::{Parameter, ParameterStore};
pub use real::{gemm, MatRef, Real};
pub use tape::{topk_keep_mask, Graph, Var};

/// Runs `build` on a fresh graph, back-propagates from the returned scalar and
/// collects gradients for every parameter in `params`.
pub fn evaluate_with_grads<B>(params: &ParameterStore<f64>, build: B) -> crate::Result<Evaluation>
where
    B: FnOnce(&mut Graph<f64>, &ParameterStore<f64>) -> crate::Result<Var>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, params)?;
    graph.backward(loss)?;
    let mut store = params.clone();
    store.clear_grads();
    graph.accumulate_into(&mut store)?;
    let grads = store
        .iter()
        .map(|(name, p)| {
            let g = p
                .grad
                .clone()
                .unwrap_or_else(|| Array::zeros(p.value.shape()));
            (name.to_owned(), g)
        })
        .collect();
    Ok(Evaluation {
        loss: graph.value(loss).data()[0],
        grads,
    })
}

#[cfg(test)]
mod tests;
