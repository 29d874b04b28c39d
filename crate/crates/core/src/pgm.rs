//! Prototype generation: masked average pooling of the fusion feature under
//! every superpixel mask.

use crate::error::{shape_err, Result};
use crate::superpixel::MaskGroup;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Coverage below this is treated as an empty mask.
pub const MIN_COVERAGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Depth,
}

/// Prototypes of a whole batch stacked as `[batch * n_slots, C]`.
///
/// Rows `b * n_slots .. (b + 1) * n_slots` belong to sample `b`. Invalid rows
/// are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBlock {
    pub rows: Var,
    pub valid: Vec<bool>,
    pub n_slots: usize,
    pub modality: Modality,
}

impl PrototypeBlock {
    pub fn batch(&self) -> usize {
        self.valid.len() / self.n_slots
    }

    pub fn with_rows(&self, rows: Var) -> Self {
        Self {
            rows,
            ..self.clone()
        }
    }

    /// Validity as `1.0 / 0.0` per row.
    pub fn valid_mask<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.valid.len()], |i| if self.valid[i] { T::one() } else { T::zero() })
    }

    /// Indices of the valid rows of sample `b`, in global row numbering.
    pub fn valid_rows(&self, b: usize) -> Vec<usize> {
        (b * self.n_slots..(b + 1) * self.n_slots)
            .filter(|&i| self.valid[i])
            .collect()
    }
}

/// `sum(f * mask) / sum(mask)` per channel for `f: [C, h, w]`, `mask: [h, w]`.
/// Returns the zero vector and `false` for an empty mask.
pub fn masked_average_pool<T: Real>(f: &Tensor<T>, mask: &Tensor<T>) -> Result<(Vec<T>, bool)> {
    let s = f.shape();
    if s.len() != 3 || mask.shape() != &s[1..] {
        return Err(shape_err(
            "masked_average_pool",
            format!("feature {s:?} vs mask {:?}", mask.shape()),
        ));
    }
    let plane = s[1] * s[2];
    let m = mask.data();
    let cover = m.iter().fold(T::zero(), |a, &v| a + v);
    if cover.as_f64() < MIN_COVERAGE {
        return Ok((vec![T::zero(); s[0]], false));
    }
    let out = f
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().zip(m).fold(T::zero(), |a, (&x, &w)| a + x * w) / cover)
        .collect();
    Ok((out, true))
}

/// Builds the prototype block of a batch.
///
/// `f` is `[B, C, h, w]` and `groups[b]` must carry soft masks at `h x w`.
pub fn build_prototype_block<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    groups: &[&MaskGroup],
    modality: Modality,
) -> Result<PrototypeBlock> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 || s[0] != groups.len() || groups.is_empty() {
        return Err(shape_err(
            "build_prototype_block",
            format!("{} mask groups for feature {s:?}", groups.len()),
        ));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let n_slots = groups[0].n_slots();
    let mut rows = Vec::with_capacity(groups.len());
    let mut valid = Vec::with_capacity(groups.len() * n_slots);
    for (b, mg) in groups.iter().enumerate() {
        let soft = mg.soft().ok_or_else(|| {
            shape_err("build_prototype_block", "mask group has no soft masks")
        })?;
        if soft.shape() != [n_slots, h, w] {
            return Err(shape_err(
                "build_prototype_block",
                format!("soft masks {:?} for feature {h}x{w} with {n_slots} slots", soft.shape()),
            ));
        }
        let masks: Tensor<T> = soft.cast::<T>().reshape(&[n_slots, h * w])?;
        let mut inv = Vec::with_capacity(n_slots);
        for m in masks.data().chunks(h * w) {
            let cover = m.iter().fold(T::zero(), |a, &v| a + v);
            let ok = cover.as_f64() >= MIN_COVERAGE;
            valid.push(ok);
            inv.push(if ok { T::one() / cover } else { T::zero() });
        }
        let fb = tape.narrow(f, 0, b, 1)?;
        let fb = tape.reshape(fb, &[c, h * w])?;
        let fb = tape.transpose(fb)?;
        let m = tape.constant(masks);
        let sums = tape.matmul(m, fb)?;
        let inv = tape.constant(Tensor::new(&[n_slots], inv)?);
        rows.push(tape.mul_prefix(sums, inv)?);
    }
    let rows = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    Ok(PrototypeBlock {
        rows,
        valid,
        n_slots,
        modality,
    })
}
