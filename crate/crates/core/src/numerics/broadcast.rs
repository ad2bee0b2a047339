use crate::{Error, Result};

/// How an operand's flat index relates to the broadcast output's flat index.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Identity,
    /// Operand shape is a suffix of the output shape.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    pub(crate) fn index(&self, out: usize) -> usize {
        match self {
            Bcast::Identity => out,
            Bcast::Cycle(n) => out % n,
            Bcast::Map(m) => m[out],
        }
    }
}

pub(crate) fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Identity, Bcast::Identity));
    }
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (d, slot) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank, d);
        let db = dim_from_right(b, rank, d);
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    let (pa, pb) = (plan(a, &out), plan(b, &out));
    Ok((out, pa, pb))
}

fn dim_from_right(shape: &[usize], rank: usize, d: usize) -> usize {
    let offset = rank - shape.len();
    if d < offset {
        1
    } else {
        shape[d - offset]
    }
}

fn plan(input: &[usize], out: &[usize]) -> Bcast {
    if input == out {
        return Bcast::Identity;
    }
    let n: usize = input.iter().product();
    if out.ends_with(input) || n == 1 {
        return Bcast::Cycle(n.max(1));
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        if d >= offset {
            let dim = input[d - offset];
            if dim != 1 {
                strides[d] = s;
            }
            s *= dim;
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Bcast::Map(map)
}
