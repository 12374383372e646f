#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "apbface/tensor_file.hpp"

namespace apb {

// A checkpoint is an APBT bundle:
//   "__meta__"             JSON string: kind, pipeline_version, epoch, arch, ...
//   "<module>/<param>"     parameters and buffers at their training dtype
//   "optim/<name>/<i>/..." Adam step and moments of parameter i

void put_module(ArrayBundle& b, const std::string& prefix, const torch::nn::Module& m);
// Shapes and dtypes must match exactly; every parameter and buffer must be present.
void take_module(const ArrayBundle& b, const std::string& prefix, torch::nn::Module& m);

void put_optimizer(ArrayBundle& b, const std::string& name, torch::optim::Adam& opt);
void take_optimizer(const ArrayBundle& b, const std::string& name, torch::optim::Adam& opt);

void put_meta(ArrayBundle& b, const nlohmann::json& meta);
nlohmann::json take_meta(const ArrayBundle& b);
// Loads a bundle and checks the kind tag and pipeline version.
ArrayBundle open_checkpoint(const std::filesystem::path& path, const std::string& kind);

ArrayRecord tensor_record(const torch::Tensor& t);
torch::Tensor record_tensor(const ArrayRecord& r);

}  // namespace apb
