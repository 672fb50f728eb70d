//! Thin layer wrappers over the tensor ops.

use crate::rng::Rng;
use crate::tensor::{conv2d, kaiming_uniform, relu, Parameter, Shape, Tensor};

/// A convolution layer owning its weight and bias parameters.
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias. `name` prefixes both parameters.
    pub fn new(
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Conv2d {
        let wshape = Shape::new(out_channels, in_channels, kernel, kernel);
        let fan_in = in_channels * kernel * kernel;
        let weight = Parameter::new(
            format!("{name}.weight"),
            wshape,
            kaiming_uniform(rng, wshape.count(), fan_in),
        );
        let bias = Parameter::new(
            format!("{name}.bias"),
            Shape::new(1, out_channels, 1, 1),
            vec![0.0; out_channels],
        );
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            dilation,
        }
    }

    /// 3x3 same-padding convolution, stride 1.
    pub fn same3x3(rng: &mut Rng, name: &str, cin: usize, cout: usize, dilation: usize) -> Conv2d {
        Conv2d::new(rng, name, cin, cout, 3, 1, dilation, dilation)
    }

    /// 1x1 projection.
    pub fn proj1x1(rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Conv2d {
        Conv2d::new(rng, name, cin, cout, 1, 1, 0, 1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(
            x,
            self.weight.tensor(),
            self.bias.tensor(),
            self.stride,
            self.padding,
            self.dilation,
        )
    }

    pub fn forward_relu(&self, x: &Tensor) -> Tensor {
        relu(&self.forward(x))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
}

/// Assert that parameter names in a collection are unique.
pub fn check_unique_names(params: &[&Parameter]) {
    let mut seen = std::collections::BTreeSet::new();
    for p in params {
        assert!(
            seen.insert(p.name().to_string()),
            "duplicate parameter name '{}'",
            p.name()
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_layer_shapes_and_names() {
        let mut rng = Rng::stream(1, "init");
        let conv = Conv2d::same3x3(&mut rng, "block.conv1", 3, 8, 1);
        assert_eq!(conv.weight.name(), "block.conv1.weight");
        assert_eq!(conv.bias.shape(), Shape::new(1, 8, 1, 1));
        let x = Tensor::zeros(Shape::new(2, 3, 16, 16));
        let y = conv.forward(&x);
        assert_eq!(y.shape(), Shape::new(2, 8, 16, 16));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_fatal() {
        let a = Parameter::new("p", Shape::scalar(), vec![0.0]);
        let b = Parameter::new("p", Shape::scalar(), vec![1.0]);
        check_unique_names(&[&a, &b]);
    }
}
