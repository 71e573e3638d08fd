use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Smoothing added to numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Hard Dice `2|P∩T| / (|P|+|T|)` for one class; 1.0 when the class is absent
/// from both masks.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), truth.len(), "masks must have equal length");
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        both += usize::from(ia && ib);
        p += usize::from(ia);
        t += usize::from(ib);
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    }
}

/// Soft Dice loss over foreground classes with [`DICE_SMOOTH`].
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, one_hot: Tensor<T>) -> Result<Var> {
    g.dice_loss(probs, one_hot, T::from_f64_lossy(DICE_SMOOTH))
}

/// One-hot encoding `[..., K]` of a label grid with the given leading shape.
pub fn one_hot<T: Scalar>(labels: &[u8], shape: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    if labels.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("one_hot", format!("{} labels for shape {shape:?}", labels.len())));
    }
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (px, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Data(format!("label {l} is not below num_classes = {num_classes}")));
        }
        data[px * num_classes + l] = T::one();
    }
    let mut full = shape.to_vec();
    full.push(num_classes);
    Tensor::new(&full, data)
}

/// Per-pixel argmax over the last axis; ties go to the lower class.
pub fn argmax_classes<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let k = *probs.shape().last().expect("non-empty shape");
    probs
        .data()
        .chunks(k)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if px[c] > px[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
