#pragma once

#include <vector>

#include "slamformer/tensor.hpp"

namespace slamformer {

// Secondary differentiable ops used by the backbone, heads and loss stack.

Tensor transpose(const Tensor& a);                       // 2-D
Tensor reshape(const Tensor& a, Shape shape);            // same numel, shared data
Tensor concat_rows(const std::vector<Tensor>& parts);    // 2-D, equal cols
Tensor slice_rows(const Tensor& a, int row0, int count); // 2-D
Tensor sum(const Tensor& a);                             // -> [1]
Tensor add_rows(const Tensor& a, const Tensor& row);     // [n x d] + [1 x d] per row

Tensor gelu(const Tensor& a);  // exact erf form
Tensor exp(const Tensor& a);   // errors on overflow
Tensor log(const Tensor& a);   // requires positive input
Tensor sqrt(const Tensor& a);  // requires nonnegative input; d/dx at 0 treated as 0
Tensor abs(const Tensor& a);   // subgradient 0 at 0

// Per-component Huber: quadratic below epsilon, linear above.
Tensor huber(const Tensor& a, double epsilon);

// Forward differences over a [H x W x C] (or [H x W]) map; last column /
// row is zero. Linear ops with exact adjoints.
Tensor spatial_grad_x(const Tensor& map);
Tensor spatial_grad_y(const Tensor& map);

// out[i] = a.flat[indices[i]]; backward scatter-adds. Indices may repeat.
Tensor gather(const Tensor& a, Shape out_shape, std::vector<int64_t> indices);

}  // namespace slamformer
