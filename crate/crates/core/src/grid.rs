//! Integer code sets, the clipped-rounding projection and dequantization.
//!
//! Every solver step ends in [`project_to_codes`]: for a convex quadratic in a
//! single integer variable, the constrained minimizer is the unconstrained
//! minimizer rounded to the nearest integer and clipped to the code range.

use ndarray::{Array2, ArrayView2};

use crate::error::{ComqError, Result};

/// Largest supported bit-width. Affine code ranges `z..z + 2^b - 1` must fit
/// in `i32` together with their zero-point.
pub const MAX_BITS: u32 = 24;

/// A contiguous range of integer codes `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodeSet {
    lo: i32,
    hi: i32,
}

impl CodeSet {
    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.hi
    }

    /// Number of codes in the set.
    pub fn len(&self) -> u64 {
        (self.hi as i64 - self.lo as i64 + 1) as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, q: i32) -> bool {
        (self.lo..=self.hi).contains(&q)
    }

    /// Whether a real-valued code is one of the integers in the set.
    pub fn contains_real(&self, q: f64) -> bool {
        q.fract() == 0.0 && q >= self.lo as f64 && q <= self.hi as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = i32> {
        self.lo..=self.hi
    }

    /// Projection without the finiteness check; `p` must be finite.
    #[inline]
    pub(crate) fn project(&self, p: f64) -> i32 {
        p.round_ties_even().clamp(self.lo as f64, self.hi as f64) as i32
    }
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(ComqError::InvalidConfig(format!(
            "bit-width must be in 1..={MAX_BITS}, got {bits}"
        )));
    }
    Ok(())
}

/// The symmetric set `{-2^(b-1), ..., 2^(b-1) - 1}` used for per-layer grids.
pub fn symmetric_codes(bits: u32) -> Result<CodeSet> {
    check_bits(bits)?;
    let half = 1i32 << (bits - 1);
    Ok(CodeSet {
        lo: -half,
        hi: half - 1,
    })
}

/// The affine set `{z, ..., z + 2^b - 1}` used for per-channel grids.
pub fn affine_codes(zero_point: i32, bits: u32) -> Result<CodeSet> {
    check_bits(bits)?;
    let hi = zero_point as i64 + (1i64 << bits) - 1;
    let hi = i32::try_from(hi).map_err(|_| {
        ComqError::NumericDomain(format!(
            "affine code range starting at {zero_point} overflows i32 at {bits} bits"
        ))
    })?;
    Ok(CodeSet { lo: zero_point, hi })
}

/// Nearest code to `p` (ties to even), clipped to the set.
pub fn project_to_codes(p: f64, set: CodeSet) -> Result<i32> {
    if !p.is_finite() {
        return Err(ComqError::NumericDomain(format!(
            "cannot project non-finite value {p}"
        )));
    }
    Ok(set.project(p))
}

/// Round half-to-even to an integer zero-point, rejecting values outside `i32`.
pub(crate) fn round_zero_point(value: f64) -> Result<i32> {
    let r = value.round_ties_even();
    if !r.is_finite() || r < i32::MIN as f64 || r > i32::MAX as f64 {
        return Err(ComqError::NumericDomain(format!(
            "zero-point {value} is not representable"
        )));
    }
    Ok(r as i32)
}

/// A nonzero, finite scale factor.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value == 0.0 {
            return Err(ComqError::NumericDomain(format!(
                "scale factor must be finite and nonzero, got {value}"
            )));
        }
        Ok(ScaleFactor(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Dequantize codes with either one shared scale or one scale per column.
///
/// Entry `(j, i)` is `scale_i * codes[(j, i)]` evaluated in binary32.
pub fn dequantize(codes: ArrayView2<'_, i32>, scales: &[f32]) -> Result<Array2<f32>> {
    let n = codes.ncols();
    match scales.len() {
        1 => {
            let s = scales[0];
            Ok(codes.mapv(|q| s * q as f32))
        }
        len if len == n => {
            let mut out = codes.mapv(|q| q as f32);
            for (mut col, &s) in out.columns_mut().into_iter().zip(scales) {
                col.mapv_inplace(|v| s * v);
            }
            Ok(out)
        }
        len => Err(ComqError::Shape(format!(
            "expected 1 or {n} scales for a {}x{n} code matrix, got {len}",
            codes.nrows()
        ))),
    }
}

/// Dequantize into `f64`. Since an `f32` scale has a 24-bit mantissa, the
/// product with any `i32` code is exact here.
pub fn dequantize_f64(codes: ArrayView2<'_, i32>, scales: &[f32]) -> Result<Array2<f64>> {
    let n = codes.ncols();
    if scales.len() != 1 && scales.len() != n {
        return Err(ComqError::Shape(format!(
            "expected 1 or {n} scales, got {}",
            scales.len()
        )));
    }
    let shared = scales.len() == 1;
    Ok(Array2::from_shape_fn(codes.raw_dim(), |(j, i)| {
        let s = if shared { scales[0] } else { scales[i] };
        s as f64 * codes[(j, i)] as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn symmetric_sets() {
        let s = symmetric_codes(4).unwrap();
        assert_eq!((s.lo(), s.hi()), (-8, 7));
        let s = symmetric_codes(1).unwrap();
        assert_eq!((s.lo(), s.hi()), (-1, 0));
        let s = symmetric_codes(2).unwrap();
        assert_eq!((s.lo(), s.hi()), (-2, 1));
        assert!(matches!(symmetric_codes(0), Err(ComqError::InvalidConfig(_))));
    }

    #[test]
    fn affine_sets() {
        let s = affine_codes(-1, 2).unwrap();
        assert_eq!((s.lo(), s.hi()), (-1, 2));
        let s = affine_codes(0, 1).unwrap();
        assert_eq!((s.lo(), s.hi()), (0, 1));
        assert_eq!(affine_codes(-8, 4).unwrap(), symmetric_codes(4).unwrap());
        assert!(matches!(affine_codes(3, 0), Err(ComqError::InvalidConfig(_))));
        assert!(affine_codes(i32::MAX - 2, 4).is_err());
    }

    #[test]
    fn set_sizes_are_powers_of_two() {
        for b in 1..=MAX_BITS {
            assert_eq!(symmetric_codes(b).unwrap().len(), 1u64 << b);
            assert_eq!(affine_codes(-3, b).unwrap().len(), 1u64 << b);
        }
    }

    #[test]
    fn projection_examples() {
        let s4 = symmetric_codes(4).unwrap();
        assert_eq!(project_to_codes(2.6, s4).unwrap(), 3);
        assert_eq!(project_to_codes(12.3, s4).unwrap(), 7);
        assert_eq!(project_to_codes(-100.0, s4).unwrap(), -8);
        let s2 = symmetric_codes(2).unwrap();
        assert_eq!(project_to_codes(-0.5, s2).unwrap(), 0);
        assert_eq!(project_to_codes(0.5, s2).unwrap(), 0);
        assert_eq!(project_to_codes(-1.5, s2).unwrap(), -2);
        assert!(matches!(
            project_to_codes(f64::NAN, s2),
            Err(ComqError::NumericDomain(_))
        ));
        assert!(project_to_codes(f64::INFINITY, s2).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = array![[1, -2], [3, 4]];
        assert_eq!(
            dequantize(q.view(), &[0.5]).unwrap(),
            array![[0.5f32, -1.0], [1.5, 2.0]]
        );
        assert_eq!(
            dequantize(q.view(), &[1.0]).unwrap(),
            q.mapv(|v| v as f32)
        );
        let q = array![[2], [0]];
        assert_eq!(
            dequantize(q.view(), &[0.25]).unwrap(),
            array![[0.5f32], [0.0]]
        );
        let q = array![[1, 2, 3]];
        assert_eq!(
            dequantize(q.view(), &[1.0, 2.0, -1.0]).unwrap(),
            array![[1.0f32, 4.0, -3.0]]
        );
        assert!(matches!(
            dequantize(q.view(), &[1.0, 2.0]),
            Err(ComqError::Shape(_))
        ));
    }

    #[test]
    fn dense_grid_matches_exhaustive_argmin() {
        let sets = [
            symmetric_codes(1).unwrap(),
            symmetric_codes(2).unwrap(),
            symmetric_codes(3).unwrap(),
            affine_codes(-5, 2).unwrap(),
            affine_codes(3, 3).unwrap(),
        ];
        for set in sets {
            for step in -4000..=4000 {
                let p = step as f64 / 250.0;
                let mut best = set.lo();
                for q in set.iter() {
                    let (e, eb) = ((q as f64 - p).powi(2), (best as f64 - p).powi(2));
                    // Equal distance: prefer the even code.
                    if e < eb || (e == eb && q % 2 == 0) {
                        best = q;
                    }
                }
                assert_eq!(project_to_codes(p, set).unwrap(), best, "p={p} set={set:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn projection_within_half_of_clamp(p in -1.0e4f64..1.0e4, z in -200i32..200, b in 1u32..10) {
            let set = affine_codes(z, b).unwrap();
            let q = project_to_codes(p, set).unwrap();
            prop_assert!(set.contains(q));
            let clamped = p.clamp(set.lo() as f64, set.hi() as f64);
            prop_assert!((q as f64 - clamped).abs() <= 0.5);
        }

        #[test]
        fn dequantize_is_linear_in_scale(
            codes in proptest::collection::vec(-128i32..128, 12),
            scale in -10.0f32..10.0,
        ) {
            let q = Array2::from_shape_vec((3, 4), codes).unwrap();
            let once = dequantize(q.view(), &[scale]).unwrap();
            let twice = dequantize(q.view(), &[2.0 * scale]).unwrap();
            // Doubling is exact in binary floating point.
            prop_assert_eq!(twice, once.mapv(|v| 2.0 * v));
        }
    }
}
