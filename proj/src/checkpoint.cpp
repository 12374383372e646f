#include "apbface/checkpoint.hpp"

#include "apbface/error.hpp"

namespace apb {

ArrayRecord tensor_record(const torch::Tensor& t) {
  auto c = t.detach().contiguous().cpu();
  std::vector<std::uint64_t> shape;
  for (auto s : c.sizes()) shape.push_back(static_cast<std::uint64_t>(s));
  const auto n = static_cast<std::size_t>(c.numel());
  switch (c.scalar_type()) {
    case torch::kFloat32:
      return ArrayRecord::from_f32({c.data_ptr<float>(), n}, shape);
    case torch::kFloat64:
      return ArrayRecord::from_f64({c.data_ptr<double>(), n}, shape);
    case torch::kInt64:
      return ArrayRecord::from_i64({c.data_ptr<std::int64_t>(), n}, shape);
    default:
      throw ConfigError("checkpoint: unsupported tensor dtype");
  }
}

torch::Tensor record_tensor(const ArrayRecord& r) {
  std::vector<std::int64_t> shape(r.shape.begin(), r.shape.end());
  switch (r.dtype) {
    case DType::F32: {
      auto v = r.to_f32();
      return torch::from_blob(v.data(), shape, torch::kFloat32).clone();
    }
    case DType::F64: {
      auto v = r.to_f64();
      return torch::from_blob(v.data(), shape, torch::kFloat64).clone();
    }
    case DType::I64: {
      auto v = r.to_i64();
      return torch::from_blob(v.data(), shape, torch::kInt64).clone();
    }
    default:
      throw IoError("checkpoint: unsupported record dtype");
  }
}

void put_module(ArrayBundle& b, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters()) b[prefix + "/" + p.key()] = tensor_record(p.value());
  for (const auto& p : m.named_buffers()) b[prefix + "/" + p.key()] = tensor_record(p.value());
}

void take_module(const ArrayBundle& b, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard ng;
  auto assign = [&](const std::string& key, torch::Tensor& dst) {
    auto it = b.find(prefix + "/" + key);
    if (it == b.end()) throw ConfigError("checkpoint: missing tensor " + prefix + "/" + key);
    auto src = record_tensor(it->second);
    if (src.sizes() != dst.sizes() || src.scalar_type() != dst.scalar_type()) {
      throw ConfigError("checkpoint: tensor " + prefix + "/" + key + " does not match the model");
    }
    dst.copy_(src);
  };
  for (auto& p : m.named_parameters()) assign(p.key(), p.value());
  for (auto& p : m.named_buffers()) assign(p.key(), p.value());
}

void put_optimizer(ArrayBundle& b, const std::string& name, torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  auto& state = opt.state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const auto key = "optim/" + name + "/" + std::to_string(i) + "/";
    const std::int64_t step = st.step();
    b[key + "step"] = ArrayRecord::from_i64(std::span<const std::int64_t>(&step, 1), {1});
    b[key + "exp_avg"] = tensor_record(st.exp_avg());
    b[key + "exp_avg_sq"] = tensor_record(st.exp_avg_sq());
  }
}

void take_optimizer(const ArrayBundle& b, const std::string& name, torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  auto& state = opt.state();
  state.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto key = "optim/" + name + "/" + std::to_string(i) + "/";
    if (!b.count(key + "step")) continue;
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(require(b, key + "step").to_i64().at(0));
    auto m = record_tensor(require(b, key + "exp_avg"));
    auto v = record_tensor(require(b, key + "exp_avg_sq"));
    if (m.sizes() != params[i].sizes() || v.sizes() != params[i].sizes()) {
      throw ConfigError("checkpoint: optimizer state " + key + " does not match the model");
    }
    st->exp_avg(m.to(params[i].dtype()));
    st->exp_avg_sq(v.to(params[i].dtype()));
    state[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

void put_meta(ArrayBundle& b, const nlohmann::json& meta) { b["__meta__"] = ArrayRecord::from_string(meta.dump()); }

nlohmann::json take_meta(const ArrayBundle& b) {
  try {
    return nlohmann::json::parse(require(b, "__meta__").to_string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed metadata: ") + e.what());
  }
}

ArrayBundle open_checkpoint(const std::filesystem::path& path, const std::string& kind) {
  auto b = load_bundle(path);
  const auto meta = take_meta(b);
  if (meta.value("kind", "") != kind) {
    throw ConfigError("checkpoint " + path.string() + " is a '" + meta.value("kind", "?") + "', expected '" + kind + "'");
  }
  if (meta.value("pipeline_version", "") != kPipelineVersion) {
    throw ConfigError("checkpoint " + path.string() + " was written by pipeline " + meta.value("pipeline_version", "?"));
  }
  return b;
}

}  // namespace apb
