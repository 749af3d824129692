use crate::tensor::Tensor;
use ndarray::ArrayD;

/// A primitive with a hand-derived backward rule.
///
/// The forward value is computed by the caller and attached via
/// [`Tensor::from_custom`]; only the vector-Jacobian product lives here. This
/// is how linear solves (transposed-system adjoints), assembled physics
/// operators and the SDE integrator enter the graph without their internals
/// being recorded.
pub trait CustomOp {
    /// Name used in error messages and graph dumps.
    fn name(&self) -> &str;

    /// Cotangents for each input given the cotangent of the output.
    ///
    /// Entries may be `None` for inputs the op does not differentiate
    /// through; their upstream gradient is then zero.
    fn vjp(
        &self,
        inputs: &[Tensor],
        output_value: &ArrayD<f64>,
        cotangent: &ArrayD<f64>,
    ) -> crate::Result<Vec<Option<ArrayD<f64>>>>;
}
