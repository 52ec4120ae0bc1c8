//! Scaled dot-product attention kernel shared by every attention block.

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place, Tensor};

/// What to do with a query row whose every score is masked to `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskedRows {
    Error,
    /// Recompute the row without the mask.
    Unmasked,
}

#[derive(Debug, Clone)]
pub struct Attended {
    /// `[queries, value_dim]`
    pub output: Tensor,
    /// `[queries, keys]`, rows sum to 1.
    pub weights: Tensor,
    /// Rows that hit the unmasked fallback.
    pub fallback_rows: usize,
}

/// `softmax(q kᵀ / √d + mask) v` with `d` the query width.
///
/// Keys whose weight is exactly zero are skipped in the weighted sum, so
/// values at masked positions cannot influence the output at all.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
    masked_rows: MaskedRows,
) -> Result<Attended> {
    let [nq, d] = q.dims2("attention query")?;
    let [nk, dk] = k.dims2("attention key")?;
    let [nv, dv] = v.dims2("attention value")?;
    if d != dk {
        return Err(Error::dim("attention q/k", q.shape(), k.shape()));
    }
    if nk != nv {
        return Err(Error::dim("attention k/v", k.shape(), v.shape()));
    }
    if let Some(m) = mask {
        if m.shape() != [nq, nk] {
            return Err(Error::dim("attention mask", m.shape(), &[nq, nk]));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; nq * nk];
    let mut output = vec![0.0; nq * dv];
    let mut fallback_rows = 0;
    for i in 0..nq {
        let qi = q.row(i);
        let row = &mut weights[i * nk..(i + 1) * nk];
        let fill = |row: &mut [f64], masked: bool| {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = dot(qi, k.row(j)) * scale;
                if masked {
                    if let Some(m) = mask {
                        *slot += m.data()[i * nk + j];
                    }
                }
            }
        };
        fill(row, true);
        if !softmax_in_place(row) {
            match masked_rows {
                MaskedRows::Error => return Err(Error::MaskedRow { row: i }),
                MaskedRows::Unmasked => {
                    fallback_rows += 1;
                    fill(row, false);
                    softmax_in_place(row);
                }
            }
        }
        let out = &mut output[i * dv..(i + 1) * dv];
        for (j, &wj) in row.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            for (o, &vv) in out.iter_mut().zip(v.row(j)) {
                *o += wj * vv;
            }
        }
    }
    Ok(Attended {
        output: Tensor::new(vec![nq, dv], output)?,
        weights: Tensor::new(vec![nq, nk], weights)?,
        fallback_rows,
    })
}
