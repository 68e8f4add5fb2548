use super::{check_qkv, engine, spatial, Lattice, Plan, PositionalMode, Span};
use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// What to attend over, and how.
#[derive(Clone, Copy, Debug)]
pub struct AttendSpec<'a> {
    /// Name reported in span-overflow errors.
    pub layer: &'a str,
    pub lattice: Lattice,
    pub span: Span,
    pub mode: PositionalMode,
    pub heads: usize,
}

struct AttendOp<T> {
    plan: Plan,
    /// Which of r^q, r^k, r^v follow q, k, v in the input list.
    tables: [bool; 3],
    table_shapes: [Shape; 3],
    weights: Vec<T>,
    cap: usize,
}

impl<T: Scalar> Backward<T> for AttendOp<T> {
    fn name(&self) -> &'static str {
        "attend"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let p = &self.plan;
        let mut rest = inputs[3..].iter();
        let mut next = |used: bool| used.then(|| rest.next().expect("table input").data());
        let tables = engine::Tables {
            r_q: next(self.tables[0]),
            r_k: next(self.tables[1]),
            r_v: next(self.tables[2]),
        };
        let g = engine::backward(
            &p.arrange(inputs[0]),
            &p.arrange(inputs[1]),
            &p.arrange(inputs[2]),
            tables,
            p.geom,
            p.dims,
            &self.weights,
            self.cap,
            &p.arrange(grad),
        );
        let dims = spatial(inputs[0].shape());
        let mut out = vec![
            needs[0].then(|| p.restore(g.dq, dims)),
            needs[1].then(|| p.restore(g.dk, dims)),
            needs[2].then(|| p.restore(g.dv, dims)),
        ];
        for (i, dr) in [g.dr_q, g.dr_k, g.dr_v].into_iter().enumerate() {
            if let Some(dr) = dr {
                out.push(Some(Tensor::from_vec(self.table_shapes[i], dr)?));
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`attend`](super::attend). `tables` holds r^q, r^k,
    /// r^v; the positional mode decides which of them are used.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, tables: Option<[Var; 3]>, spec: AttendSpec) -> Result<Var> {
        let dims = check_qkv(self.value(q), self.value(k), self.value(v), spec.heads)?;
        let extent = match tables {
            Some([r_q, r_k, r_v]) => {
                let s = self.shape(r_q);
                let uses = spec.mode.uses();
                if (uses[1] && self.shape(r_k) != s)
                    || (uses[2] && self.shape(r_v) != s.with_channels(dims.2))
                    || s.channels() != dims.1
                    || s.batch() != 1
                    || s.height().is_multiple_of(2)
                    || s.width().is_multiple_of(2)
                {
                    return Err(Error::config(format!(
                        "{}: positional tables {}, {}, {} do not fit d_q={}, d_out={}",
                        spec.layer,
                        s,
                        self.shape(r_k),
                        self.shape(r_v),
                        dims.1,
                        dims.2
                    )));
                }
                Some((s.height().div_ceil(2), s.width().div_ceil(2)))
            }
            None => None,
        };
        let plan = Plan::new(
            spec.layer,
            self.shape(q),
            spec.lattice,
            spec.span,
            spec.mode,
            dims,
            extent,
        )?;
        let used = plan.uses.map(|u| u && tables.is_some());
        let all = tables.unwrap_or([q, q, q]);
        let table_vars: Vec<Var> = (0..3).filter(|&i| used[i]).map(|i| all[i]).collect();
        let output_dims = spatial(self.shape(q));
        let (fwd, table_shapes) = {
            let data = |i: usize| used[i].then(|| self.value(all[i]).data());
            let fwd = engine::forward(
                &plan.arrange(self.value(q)),
                &plan.arrange(self.value(k)),
                &plan.arrange(self.value(v)),
                engine::Tables {
                    r_q: data(0),
                    r_k: data(1),
                    r_v: data(2),
                },
                plan.geom,
                plan.dims,
            );
            (fwd, all.map(|t| self.shape(t)))
        };
        let y = plan.restore(fwd.y, output_dims);
        let mut inputs = vec![q, k, v];
        inputs.extend(table_vars);
        self.record(
            AttendOp {
                plan,
                tables: used,
                table_shapes,
                weights: fwd.weights,
                cap: fwd.cap,
            },
            &inputs,
            y,
        )
    }
}
