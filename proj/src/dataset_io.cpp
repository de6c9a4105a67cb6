#include "msgcl/binary_io.hpp"
#include "msgcl/data.hpp"

#include <fstream>
#include <sstream>

namespace msgcl {

namespace {
constexpr std::string_view kDatasetMagic = "MSGCL-DS";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContractError("write failed for " + path.string());
}

// Layout (little endian):
//   "MSGCL-DS" u32 version u32 M u32 N u32 max_len
//   N x string   item ids for indices 1..N
//   M x string   user ids
//   M x max_len x u32   sequence rows
//   M x u32      lengths
//   M x (u32 validation, u32 test)
//   u8 has_chain [u32 G, G x N x N f64 row-major, M x u32 group]
// where string = u32 byte length + bytes.
std::string serialize_dataset(const SequenceDataset& ds) {
  ds.validate();
  ByteWriter w;
  w.put_bytes(kDatasetMagic);
  w.put(kDatasetVersion);
  w.put(static_cast<std::uint32_t>(ds.num_users));
  w.put(static_cast<std::uint32_t>(ds.num_items));
  w.put(static_cast<std::uint32_t>(ds.max_len));
  for (int v = 1; v <= ds.num_items; ++v) w.put_string(ds.vocab.id_of(v));
  for (const auto& u : ds.user_ids) w.put_string(u);
  for (const auto& row : ds.sequences)
    for (auto v : row) w.put(static_cast<std::uint32_t>(v));
  for (auto len : ds.lengths) w.put(static_cast<std::uint32_t>(len));
  for (const auto& s : ds.split) {
    w.put(static_cast<std::uint32_t>(s.validation_target));
    w.put(static_cast<std::uint32_t>(s.test_target));
  }
  w.put(static_cast<std::uint8_t>(ds.chain ? 1 : 0));
  if (ds.chain) {
    w.put(static_cast<std::uint32_t>(ds.chain->transitions.size()));
    for (const auto& t : ds.chain->transitions)
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) w.put(t(i, j));
    for (auto g : ds.chain->user_group) w.put(static_cast<std::uint32_t>(g));
  }
  return w.bytes();
}

SequenceDataset deserialize_dataset(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(kDatasetMagic.size()) != kDatasetMagic) throw ContractError("not a dataset file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) throw ContractError("unsupported dataset version " + std::to_string(version));
  SequenceDataset ds;
  ds.num_users = static_cast<int>(r.get<std::uint32_t>());
  ds.num_items = static_cast<int>(r.get<std::uint32_t>());
  ds.max_len = static_cast<int>(r.get<std::uint32_t>());
  for (int v = 1; v <= ds.num_items; ++v) ds.vocab.add(r.get_string());
  require(ds.vocab.size() == ds.num_items, "dataset: duplicate item ids");
  for (int u = 0; u < ds.num_users; ++u) ds.user_ids.push_back(r.get_string());
  ds.sequences.assign(static_cast<std::size_t>(ds.num_users), std::vector<ItemIndex>(static_cast<std::size_t>(ds.max_len)));
  for (auto& row : ds.sequences)
    for (auto& v : row) v = static_cast<ItemIndex>(r.get<std::uint32_t>());
  for (int u = 0; u < ds.num_users; ++u) ds.lengths.push_back(static_cast<int>(r.get<std::uint32_t>()));
  for (int u = 0; u < ds.num_users; ++u) {
    UserSplit s;
    s.validation_target = static_cast<ItemIndex>(r.get<std::uint32_t>());
    s.test_target = static_cast<ItemIndex>(r.get<std::uint32_t>());
    ds.split.push_back(s);
  }
  if (r.get<std::uint8_t>()) {
    MarkovChain chain;
    const auto groups = r.get<std::uint32_t>();
    for (std::uint32_t g = 0; g < groups; ++g) {
      Matrix<double> t(ds.num_items, ds.num_items);
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = r.get<double>();
      chain.transitions.push_back(std::move(t));
    }
    for (int u = 0; u < ds.num_users; ++u) chain.user_group.push_back(static_cast<int>(r.get<std::uint32_t>()));
    ds.chain = std::move(chain);
  }
  require(r.at_end(), "dataset: trailing bytes");
  ds.validate();
  return ds;
}

void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path) { write_file(path, serialize_dataset(ds)); }

SequenceDataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

}  // namespace msgcl
