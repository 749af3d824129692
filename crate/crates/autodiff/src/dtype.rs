use ndarray::ArrayD;

/// Nominal precision of a tensor. Storage is always `f64`; `F32` tensors are
/// rounded onto the `f32` grid after every producing operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Mixed-precision ops compute in the wider of the operand dtypes.
    pub fn promote(a: DType, b: DType) -> DType {
        if a == DType::F64 || b == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub(crate) fn quantize(self, data: &mut ArrayD<f64>) {
        if self == DType::F32 {
            data.mapv_inplace(|x| x as f32 as f64);
        }
    }
}
