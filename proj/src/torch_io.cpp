#include "hvm/torch_io.hpp"

namespace hvm {

namespace {

void store(Archive& archive, const std::string& name, const torch::Tensor& t) {
    const torch::Tensor c = t.detach().to(torch::kFloat32).contiguous();
    std::vector<std::int64_t> shape(c.sizes().begin(), c.sizes().end());
    std::vector<float> values(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
    archive.add(name, std::move(shape), std::move(values));
}

void restore(const Archive& archive, const std::string& name, torch::Tensor& t) {
    if (!archive.contains(name)) throw FormatError("checkpoint lacks tensor '" + name + "'");
    const auto& arr = archive.at(name);
    if (arr.dtype != DType::f32 || arr.shape != std::vector<std::int64_t>(t.sizes().begin(), t.sizes().end()))
        throw FormatError("checkpoint tensor '" + name + "' has the wrong shape or dtype");
    const torch::Tensor src = torch::from_blob(const_cast<float*>(arr.f32.data()), t.sizes(), torch::kFloat32);
    torch::NoGradGuard guard;
    t.copy_(src.to(t.dtype()));
}

}  // namespace

void store_module(Archive& archive, const torch::nn::Module& module) {
    for (const auto& p : module.named_parameters()) store(archive, p.key(), p.value());
    for (const auto& b : module.named_buffers()) store(archive, b.key(), b.value());
}

void restore_module(const Archive& archive, torch::nn::Module& module) {
    for (auto& p : module.named_parameters()) restore(archive, p.key(), p.value());
    for (auto& b : module.named_buffers()) restore(archive, b.key(), b.value());
}

torch::Tensor to_tensor(const RowMatrixXf& m) {
    return torch::from_blob(const_cast<float*>(m.data()), {m.rows(), m.cols()}, torch::kFloat32).clone();
}

RowMatrixXf to_matrix(const torch::Tensor& t) {
    const torch::Tensor c = t.detach().to(torch::kFloat32).contiguous();
    if (c.dim() != 2) throw std::invalid_argument("to_matrix: expected a 2-D tensor");
    RowMatrixXf m(c.size(0), c.size(1));
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), m.data());
    return m;
}

}  // namespace hvm
