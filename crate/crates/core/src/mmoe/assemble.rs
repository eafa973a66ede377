//! Gated assembly of task features from representative features and,
//! past the first placement, the task's memory.

use super::gating::GateField;
use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, Tensor, Var};

/// Keeps the `k` largest entries of each row; ties go to the lower column.
pub fn top_k_mask(gates: &Tensor, k: usize) -> Result<Vec<bool>> {
    let cols = gates.cols();
    if k == 0 || k > cols {
        return Err(Error::Contract(format!("top-k count {k} outside 1..={cols}")));
    }
    let mut mask = vec![false; gates.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (r, row) in gates.data().chunks(cols).enumerate() {
        order.clear();
        order.extend(0..cols);
        // stable: equal scores keep ascending column order
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in &order[..k] {
            mask[r * cols + j] = true;
        }
    }
    Ok(mask)
}

fn operand_list<'a>(reps: &'a [Tensor], memory: Option<&'a Tensor>, gate_cols: usize) -> Result<Vec<&'a Tensor>> {
    let mut ops: Vec<&Tensor> = reps.iter().collect();
    ops.extend(memory);
    if ops.len() != gate_cols {
        return Err(Error::Contract(format!(
            "gate has {gate_cols} columns but {} experts{} were supplied",
            reps.len(),
            if memory.is_some() { " + memory" } else { "" }
        )));
    }
    Ok(ops)
}

/// `F[n] = Σ_i G[n,i] R_i[n]` (+ `G[n,K+1] M_prev[n]` when a memory is supplied).
pub fn assemble_dense(reps: &[Tensor], gates: &GateField, memory: Option<&Tensor>) -> Result<Tensor> {
    let ops = operand_list(reps, memory, gates.columns())?;
    kernels::gate_combine(&gates.scores, &ops, None)
}

/// Like [`assemble_dense`] but each token only uses its `k_sel` largest
/// gates; the kept weights are not renormalized. The memory column competes
/// as an ordinary column.
pub fn assemble_sparse(reps: &[Tensor], gates: &GateField, memory: Option<&Tensor>, k_sel: usize) -> Result<Tensor> {
    let ops = operand_list(reps, memory, gates.columns())?;
    let mask = top_k_mask(&gates.scores, k_sel)?;
    kernels::gate_combine(&gates.scores, &ops, Some(&mask))
}

/// Graph version of the dense (`k_sel = None`) and sparse assembly.
pub fn assemble(g: &mut Graph, gates: Var, reps: &[Var], memory: Option<Var>, k_sel: Option<usize>) -> Result<Var> {
    let mut ops = reps.to_vec();
    ops.extend(memory);
    let cols = g.value(gates).cols();
    if ops.len() != cols {
        return Err(Error::Contract(format!(
            "gate has {cols} columns but {} operands were supplied",
            ops.len()
        )));
    }
    let mask = match k_sel {
        Some(k) => Some(top_k_mask(g.value(gates), k)?),
        None => None,
    };
    g.gate_combine(gates, &ops, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(rows: &[Vec<f64>]) -> GateField {
        GateField::new(Tensor::from_rows(rows).unwrap(), 0, 1).unwrap()
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let r1 = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let r2 = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let f = assemble_dense(&[r1.clone(), r2.clone()], &field(&[vec![1.0, 0.0]]), None).unwrap();
        assert!(f.bit_eq(&r1));
        let f = assemble_dense(&[r1, r2], &field(&[vec![0.25, 0.75]]), None).unwrap();
        assert_eq!(f.data(), &[2.5, 3.5]);
    }

    #[test]
    fn memory_gate_reads_memory() {
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![-5.0, 7.0]]).unwrap();
        let f = assemble_dense(&[r.clone(), r], &field(&[vec![0.0, 0.0, 1.0]]), Some(&m)).unwrap();
        assert!(f.bit_eq(&m));
    }

    #[test]
    fn operand_count_must_match_columns() {
        let r = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let g = field(&[vec![0.5, 0.5]]);
        assert!(matches!(assemble_dense(std::slice::from_ref(&r), &g, None), Err(Error::Contract(_))));
        assert!(matches!(
            assemble_dense(&[r.clone(), r.clone()], &g, Some(&r)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sparse_top1_example() {
        let reps: Vec<Tensor> = (1..=3)
            .map(|i| Tensor::from_rows(&[vec![f64::from(i), -f64::from(i)]]).unwrap())
            .collect();
        let g = field(&[vec![0.1, 0.7, 0.2]]);
        let f = assemble_sparse(&reps, &g, None, 1).unwrap();
        assert_eq!(f.data(), &[0.7 * 2.0, 0.7 * -2.0]);
        assert!(assemble_sparse(&reps, &g, None, 0).is_err());
        assert!(assemble_sparse(&reps, &g, None, 4).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = Tensor::from_rows(&[vec![0.3, 0.3, 0.4], vec![0.25, 0.25, 0.5]]).unwrap();
        let m = top_k_mask(&g, 2).unwrap();
        assert_eq!(m, vec![true, false, true, true, false, true]);
    }
}
