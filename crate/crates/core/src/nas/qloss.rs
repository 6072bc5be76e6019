use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::supernet::CostTables;

fn check(costs: &CostTables, a_lens: &[usize], q_lens: &[usize]) -> Result<()> {
    let aligned = |table: &[Vec<f64>], lens: &[usize]| table.len() == lens.len() && table.iter().zip(lens).all(|(t, &n)| t.len() == n);
    if !aligned(&costs.arch, a_lens) || !aligned(&costs.quant, q_lens) {
        return Err(Error::Contract("cost tables not aligned with controller sites".into()));
    }
    for t in &costs.terms {
        let ok = match t.arch_site {
            Some(i) => i < costs.arch.len() && t.params.len() == costs.arch[i].len(),
            None => t.params.len() == 1,
        };
        if !ok || t.quant_site >= costs.quant.len() {
            return Err(Error::Contract("cost term refers to a missing site".into()));
        }
    }
    Ok(())
}

/// Expected weight bits: for each cost term, expected parameter count under
/// `P_a` times expected weight bits under `P_q`, summed.
pub fn qloss(tape: &mut Tape, p_a: &[Var], p_q: &[Var], costs: &CostTables) -> Result<Var> {
    let a_lens: Vec<usize> = p_a.iter().map(|&v| tape.value(v).len()).collect();
    let q_lens: Vec<usize> = p_q.iter().map(|&v| tape.value(v).len()).collect();
    check(costs, &a_lens, &q_lens)?;
    let mut parts = Vec::with_capacity(costs.terms.len());
    for t in &costs.terms {
        let bits = tape.weighted_sum(p_q[t.quant_site], costs.quant[t.quant_site].clone())?;
        let term = match t.arch_site {
            Some(i) => {
                let params = tape.weighted_sum(p_a[i], t.params.clone())?;
                tape.mul(params, bits)?
            }
            None => tape.scale(bits, t.params[0]),
        };
        parts.push(term);
    }
    if parts.is_empty() {
        return Err(Error::Contract("cost tables have no terms".into()));
    }
    tape.add_all(&parts)
}

/// Plain-valued [`qloss`].
pub fn expected_bits(p_a: &[Vec<f64>], p_q: &[Vec<f64>], costs: &CostTables) -> Result<f64> {
    let a_lens: Vec<usize> = p_a.iter().map(Vec::len).collect();
    let q_lens: Vec<usize> = p_q.iter().map(Vec::len).collect();
    check(costs, &a_lens, &q_lens)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(costs
        .terms
        .iter()
        .map(|t| {
            let bits = dot(&p_q[t.quant_site], &costs.quant[t.quant_site]);
            let params = match t.arch_site {
                Some(i) => dot(&p_a[i], &t.params),
                None => t.params[0],
            };
            params * bits
        })
        .sum())
}
