#include "msgcl/checkpoint.hpp"

#include "msgcl/binary_io.hpp"

#include <sstream>

namespace msgcl {

namespace {

constexpr std::string_view kCheckpointMagic = "MSGCL-CK";
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void put_tensors(ByteWriter& w, const std::string& prefix, const ModelParameters<Scalar>& p) {
  p.for_each([&](const std::string& name, const Matrix<Scalar>& m) {
    w.put_string(prefix + name);
    w.put(static_cast<std::uint32_t>(m.rows()));
    w.put(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.put(m(i, j));
  });
}

template <typename Scalar>
std::vector<Matrix<Scalar>*> tensor_slots(const std::string& prefix, ModelParameters<Scalar>& p,
                                          std::vector<std::string>& names) {
  std::vector<Matrix<Scalar>*> out;
  p.for_each([&](const std::string& name, Matrix<Scalar>& m) {
    names.push_back(prefix + name);
    out.push_back(&m);
  });
  return out;
}

CheckpointHeader read_header(ByteReader& r) {
  if (r.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw ContractError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw ContractError("unsupported checkpoint version " + std::to_string(version));
  CheckpointHeader h;
  h.config_hash = r.get<std::uint64_t>();
  h.scalar_bytes = r.get<std::uint8_t>();
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8) throw ContractError("checkpoint: bad scalar width");
  h.meta = nlohmann::json::parse(r.get_string());
  h.model = h.meta.at("model").get<ModelConfig>();
  h.train = h.meta.at("train").get<TrainConfig>();
  if (config_hash(h.model) != h.config_hash) throw ContractError("checkpoint: config hash mismatch");
  return h;
}

}  // namespace

template <typename Scalar>
std::string serialize_checkpoint(const ModelConfig& mc, const TrainConfig& tc, const TrainState<Scalar>& state) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put(config_hash(mc));
  w.put(static_cast<std::uint8_t>(sizeof(Scalar)));
  std::ostringstream rng;
  rng << state.shuffle_rng;
  const nlohmann::json meta = {{"model", mc},
                               {"train", tc},
                               {"epoch", state.epoch},
                               {"step", state.step},
                               {"best_ndcg", state.best_ndcg},
                               {"best_epoch", state.best_epoch},
                               {"bad_epochs", state.bad_epochs},
                               {"finished", state.finished},
                               {"adam_step_main", state.adam.step_main},
                               {"adam_step_sigma_prime", state.adam.step_sigma_prime},
                               {"shuffle_rng", rng.str()}};
  w.put_string(meta.dump());
  const std::size_t per_set = [&] {
    std::size_t n = 0;
    state.params.for_each([&](const std::string&, const Matrix<Scalar>&) { ++n; });
    return n;
  }();
  w.put(static_cast<std::uint32_t>(4 * per_set));
  put_tensors(w, "params.", state.params);
  put_tensors(w, "best.", state.best_params);
  put_tensors(w, "adam.m.", state.adam.m);
  put_tensors(w, "adam.v.", state.adam.v);
  return w.bytes();
}

template <typename Scalar>
TrainState<Scalar> deserialize_checkpoint(const std::string& bytes, CheckpointHeader* header) {
  ByteReader r(bytes);
  CheckpointHeader h = read_header(r);
  TrainState<Scalar> state;
  state.params = ModelParameters<Scalar>::zeros(h.model);
  state.best_params = state.params;
  state.adam = AdamState<Scalar>::zeros(h.model);
  std::vector<std::string> names;
  std::vector<Matrix<Scalar>*> slots;
  for (auto [prefix, set] : {std::pair<const char*, ModelParameters<Scalar>*>{"params.", &state.params},
                             {"best.", &state.best_params},
                             {"adam.m.", &state.adam.m},
                             {"adam.v.", &state.adam.v}}) {
    auto s = tensor_slots(prefix, *set, names);
    slots.insert(slots.end(), s.begin(), s.end());
  }
  const auto count = r.get<std::uint32_t>();
  if (count != slots.size()) throw ContractError("checkpoint: tensor count does not match config");
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto name = r.get_string();
    if (name != names[k]) throw ContractError("checkpoint: expected tensor " + names[k] + ", found " + name);
    const auto rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
    auto& m = *slots[k];
    if (rows != m.rows() || cols != m.cols()) throw ContractError("checkpoint: shape mismatch for " + name);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = h.scalar_bytes == 8 ? static_cast<Scalar>(r.get<double>()) : static_cast<Scalar>(r.get<float>());
  }
  if (!r.at_end()) throw ContractError("checkpoint: trailing bytes");
  state.epoch = h.meta.at("epoch");
  state.step = h.meta.at("step");
  state.best_ndcg = h.meta.at("best_ndcg");
  state.best_epoch = h.meta.at("best_epoch");
  state.bad_epochs = h.meta.at("bad_epochs");
  state.finished = h.meta.at("finished");
  state.adam.step_main = h.meta.at("adam_step_main");
  state.adam.step_sigma_prime = h.meta.at("adam_step_sigma_prime");
  std::istringstream rng(h.meta.at("shuffle_rng").get<std::string>());
  rng >> state.shuffle_rng;
  if (header) *header = std::move(h);
  return state;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& mc, const TrainConfig& tc,
                     const TrainState<Scalar>& state) {
  write_file(path, serialize_checkpoint(mc, tc, state));
}

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  return deserialize_checkpoint<Scalar>(read_file(path), header);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  return read_header(r);
}

template std::string serialize_checkpoint<double>(const ModelConfig&, const TrainConfig&, const TrainState<double>&);
template std::string serialize_checkpoint<float>(const ModelConfig&, const TrainConfig&, const TrainState<float>&);
template TrainState<double> deserialize_checkpoint<double>(const std::string&, CheckpointHeader*);
template TrainState<float> deserialize_checkpoint<float>(const std::string&, CheckpointHeader*);
template void save_checkpoint<double>(const std::filesystem::path&, const ModelConfig&, const TrainConfig&,
                                      const TrainState<double>&);
template void save_checkpoint<float>(const std::filesystem::path&, const ModelConfig&, const TrainConfig&,
                                     const TrainState<float>&);
template TrainState<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointHeader*);
template TrainState<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointHeader*);

}  // namespace msgcl
