#pragma once

// Conversions between torch tensors, Eigen matrices and archives.

#include <torch/torch.h>

#include "hvm/archive.hpp"
#include "hvm/motion.hpp"

namespace hvm {

// Parameters and buffers under their dotted module names, as float32.
void store_module(Archive& archive, const torch::nn::Module& module);
// Copies every stored array into the matching parameter or buffer. Missing
// names and shape mismatches throw FormatError.
void restore_module(const Archive& archive, torch::nn::Module& module);

torch::Tensor to_tensor(const RowMatrixXf& m);
RowMatrixXf to_matrix(const torch::Tensor& t);

}  // namespace hvm
