#include "msgcl/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace msgcl {

namespace {

std::vector<std::string_view> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

InteractionRecord parse_line(std::string_view line, std::size_t line_no, LogFormat format) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  const auto fields = split_on(line, format == LogFormat::kTsv ? "\t" : "::");
  InteractionRecord r;
  std::string_view ts, rating;
  if (format == LogFormat::kTsv) {
    if (fields.size() != 3 && fields.size() != 4)
      throw ParseError(line_no, "expected 3 or 4 tab-separated fields, got " + std::to_string(fields.size()));
    r.user_id = fields[0];
    r.item_id = fields[1];
    ts = fields[2];
    if (fields.size() == 4) rating = fields[3];
  } else {
    if (fields.size() != 4) throw ParseError(line_no, "expected user::item::rating::timestamp");
    r.user_id = fields[0];
    r.item_id = fields[1];
    rating = fields[2];
    ts = fields[3];
  }
  if (r.user_id.empty()) throw ParseError(line_no, "empty user id");
  if (r.item_id.empty()) throw ParseError(line_no, "empty item id");
  if (!parse_number(ts, r.timestamp) || r.timestamp < 0)
    throw ParseError(line_no, "timestamp must be a non-negative integer");
  if (!rating.empty()) {
    double v = 0;
    if (!parse_number(rating, v)) throw ParseError(line_no, "rating is not a number");
    r.rating = v;
  }
  return r;
}

std::string read_maybe_gzip(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ContractError("input file not found: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw ContractError("cannot open " + path.string());
  std::string out;
  char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw ContractError("read error in " + path.string());
  return out;
}

}  // namespace

std::vector<InteractionRecord> parse_interactions(const std::string& text, LogFormat format) {
  std::vector<InteractionRecord> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + start, end - start);
    start = end + 1;
    if (line.empty() || line == "\r") continue;
    out.push_back(parse_line(line, line_no, format));
  }
  return out;
}

std::vector<InteractionRecord> filter_interactions(std::vector<InteractionRecord> records,
                                                   const IngestOptions& options, IngestReport* report) {
  IngestReport rep;
  rep.raw_records = records.size();
  {
    std::unordered_set<std::string> users, items;
    for (const auto& r : records) {
      users.insert(r.user_id);
      items.insert(r.item_id);
    }
    rep.raw_users = users.size();
    rep.raw_items = items.size();
  }
  if (options.min_rating) {
    std::erase_if(records, [&](const InteractionRecord& r) { return r.rating && *r.rating < *options.min_rating; });
  }
  rep.after_rating_filter = records.size();
  if (options.min_item_len > 0) {
    std::unordered_map<std::string, int> count;
    for (const auto& r : records) ++count[r.item_id];
    std::erase_if(records, [&](const InteractionRecord& r) { return count[r.item_id] < options.min_item_len; });
  }
  {
    std::unordered_map<std::string, int> count;
    for (const auto& r : records) ++count[r.user_id];
    std::erase_if(records, [&](const InteractionRecord& r) { return count[r.user_id] < options.min_user_len; });
  }
  std::stable_sort(records.begin(), records.end(), [](const InteractionRecord& a, const InteractionRecord& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.timestamp < b.timestamp;
  });
  const auto stats = compute_stats(records);
  rep.kept_records = stats.interactions;
  rep.kept_users = stats.users;
  rep.kept_items = stats.items;
  if (report) *report = rep;
  if (records.empty()) throw EmptyDatasetError("no interactions left after filtering");
  return records;
}

std::vector<InteractionRecord> ingest_interactions(const std::filesystem::path& path, const IngestOptions& options,
                                                   IngestReport* report) {
  return filter_interactions(parse_interactions(read_maybe_gzip(path), options.format), options, report);
}

std::vector<InteractionRecord> ingest_interactions(const std::filesystem::path& path,
                                                   std::optional<double> min_rating, int min_user_len) {
  IngestOptions o;
  o.min_rating = min_rating;
  o.min_user_len = min_user_len;
  return ingest_interactions(path, o);
}

DatasetStats compute_stats(const std::vector<InteractionRecord>& records) {
  std::unordered_set<std::string> users, items;
  for (const auto& r : records) {
    users.insert(r.user_id);
    items.insert(r.item_id);
  }
  DatasetStats s;
  s.users = users.size();
  s.items = items.size();
  s.interactions = records.size();
  if (s.users > 0) s.avg_length = static_cast<double>(s.interactions) / static_cast<double>(s.users);
  if (s.users > 0 && s.items > 0)
    s.sparsity = 1.0 - static_cast<double>(s.interactions) / (static_cast<double>(s.users) * static_cast<double>(s.items));
  return s;
}

// ---------------------------------------------------------------------------

ItemIndex ItemVocab::add(const std::string& id) {
  if (auto it = index_.find(id); it != index_.end()) return it->second;
  const auto idx = static_cast<ItemIndex>(ids_.size());
  ids_.push_back(id);
  index_.emplace(id, idx);
  return idx;
}

ItemIndex ItemVocab::index_of(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? kPadding : it->second;
}

std::vector<ItemIndex> left_pad(const std::vector<ItemIndex>& items, int max_len) {
  std::vector<ItemIndex> row(static_cast<std::size_t>(max_len), kPadding);
  const std::size_t keep = std::min(items.size(), row.size());
  std::copy(items.end() - static_cast<std::ptrdiff_t>(keep), items.end(), row.end() - static_cast<std::ptrdiff_t>(keep));
  return row;
}

std::vector<ItemIndex> SequenceDataset::train_items(int user) const {
  const auto& row = sequences.at(static_cast<std::size_t>(user));
  const int len = lengths.at(static_cast<std::size_t>(user));
  return {row.end() - len, row.end()};
}

std::vector<ItemIndex> SequenceDataset::validation_input(int user) const { return sequences.at(static_cast<std::size_t>(user)); }

std::vector<ItemIndex> SequenceDataset::test_input(int user) const {
  auto items = train_items(user);
  items.push_back(split.at(static_cast<std::size_t>(user)).validation_target);
  return left_pad(items, max_len);
}

void SequenceDataset::validate() const {
  require(num_users >= 1 && num_items >= 1 && max_len >= 3, "dataset: bad header");
  require(sequences.size() == static_cast<std::size_t>(num_users) && lengths.size() == sequences.size() &&
              split.size() == sequences.size() && user_ids.size() == sequences.size(),
          "dataset: per-user tables disagree in size");
  require(vocab.size() == num_items, "dataset: vocabulary size mismatch");
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    const auto& row = sequences[u];
    require(row.size() == static_cast<std::size_t>(max_len), "dataset: row length != max_len");
    require(lengths[u] >= 1 && lengths[u] <= max_len, "dataset: bad length");
    for (int t = 0; t < max_len; ++t) {
      const bool pad = t < max_len - lengths[u];
      const auto v = row[static_cast<std::size_t>(t)];
      require(pad ? v == kPadding : (v >= 1 && v <= num_items), "dataset: bad index in row");
    }
    for (auto v : {split[u].validation_target, split[u].test_target})
      require(v >= 1 && v <= num_items, "dataset: bad split target");
  }
}

SequenceDataset build_sequences(const std::vector<InteractionRecord>& records, int max_len, BuildReport* report) {
  require(max_len >= 3, "build_sequences: max_len must be at least 3");
  SequenceDataset ds;
  ds.max_len = max_len;
  BuildReport rep;

  // Group consecutive records per user (input is sorted by user).
  std::size_t i = 0;
  std::vector<std::pair<std::string, std::vector<const InteractionRecord*>>> users;
  while (i < records.size()) {
    std::size_t j = i;
    std::vector<const InteractionRecord*> hist;
    while (j < records.size() && records[j].user_id == records[i].user_id) hist.push_back(&records[j++]);
    users.emplace_back(records[i].user_id, std::move(hist));
    i = j;
  }
  for (const auto& [uid, hist] : users) {
    if (hist.size() < 3) {
      ++rep.excluded_users;
      continue;
    }
    const std::size_t keep = std::min<std::size_t>(hist.size(), static_cast<std::size_t>(max_len) + 2);
    std::vector<ItemIndex> items;
    for (std::size_t k = hist.size() - keep; k < hist.size(); ++k) items.push_back(ds.vocab.add(hist[k]->item_id));
    UserSplit s;
    s.test_target = items.back();
    items.pop_back();
    s.validation_target = items.back();
    items.pop_back();
    ds.user_ids.push_back(uid);
    ds.lengths.push_back(static_cast<int>(items.size()));
    ds.sequences.push_back(left_pad(items, max_len));
    ds.split.push_back(s);
  }
  ds.num_users = static_cast<int>(ds.sequences.size());
  ds.num_items = ds.vocab.size();
  if (report) *report = rep;
  if (ds.num_users == 0) throw EmptyDatasetError("build_sequences: no user has at least 3 interactions");
  return ds;
}

// ---------------------------------------------------------------------------

SequenceDataset inject_noise(const SequenceDataset& ds, const NoiseSpec& spec, std::vector<std::string>* warnings) {
  require(spec.ratio >= 0.0 && spec.ratio <= 0.5, "inject_noise: ratio must be in [0, 0.5]");
  SequenceDataset out = ds;
  if (spec.ratio == 0.0) return out;
  std::mt19937_64 engine(derive_seed(spec.seed, SeedStream::kData));
  for (int u = 0; u < ds.num_users; ++u) {
    auto items = ds.train_items(u);
    const auto len = static_cast<int>(items.size());
    const int count = static_cast<int>(std::floor(spec.ratio * len + 1e-9));
    if (count == 0) continue;
    std::set<ItemIndex> history(items.begin(), items.end());
    history.insert(ds.split[static_cast<std::size_t>(u)].validation_target);
    history.insert(ds.split[static_cast<std::size_t>(u)].test_target);
    std::vector<ItemIndex> candidates;
    for (ItemIndex v = 1; v <= ds.num_items; ++v)
      if (!history.contains(v)) candidates.push_back(v);
    if (candidates.empty()) {
      if (warnings) warnings->push_back("inject_noise: user " + ds.user_ids[static_cast<std::size_t>(u)] +
                                        " has interacted with every item; skipped");
      continue;
    }
    for (int k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      std::uniform_int_distribution<std::size_t> where(0, items.size());
      const auto v = candidates[pick(engine)];
      items.insert(items.begin() + static_cast<std::ptrdiff_t>(where(engine)), v);
    }
    if (static_cast<int>(items.size()) > ds.max_len) items.erase(items.begin(), items.end() - ds.max_len);
    out.sequences[static_cast<std::size_t>(u)] = left_pad(items, ds.max_len);
    out.lengths[static_cast<std::size_t>(u)] = static_cast<int>(items.size());
  }
  return out;
}

// ---------------------------------------------------------------------------

SequenceDataset synth_markov_dataset(int num_users, int num_items, int seq_len, double transition_sharpness,
                                     std::uint64_t seed, const MarkovOptions& options) {
  require(num_items >= 5, "synth_markov_dataset: num_items must be at least 5");
  require(num_users >= 1, "synth_markov_dataset: num_users must be positive");
  require(seq_len >= 3, "synth_markov_dataset: seq_len must be at least 3");
  require(transition_sharpness >= 0.0, "synth_markov_dataset: sharpness must be non-negative");
  require(options.num_groups >= 1, "synth_markov_dataset: num_groups must be positive");
  std::mt19937_64 engine(derive_seed(seed, SeedStream::kData));

  const double n = num_items;
  double p_succ = 1.0, p_other = 0.0;
  if (std::isfinite(transition_sharpness)) {
    const double e = std::exp(transition_sharpness);
    p_succ = e / (e + n - 1.0);
    p_other = 1.0 / (e + n - 1.0);
  }
  MarkovChain chain;
  for (int g = 0; g < options.num_groups; ++g) {
    std::vector<int> order(static_cast<std::size_t>(num_items));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), engine);
    Matrix<double> t = Matrix<double>::Constant(num_items, num_items, p_other);
    for (int k = 0; k < num_items; ++k) t(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>((k + 1) % num_items)]) = p_succ;
    chain.transitions.push_back(std::move(t));
  }

  SequenceDataset ds;
  ds.max_len = seq_len;
  ds.num_items = num_items;
  for (int v = 1; v <= num_items; ++v) ds.vocab.add("item" + std::to_string(v));
  std::uniform_int_distribution<int> start(0, num_items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int u = 0; u < num_users; ++u) {
    const int group = u % options.num_groups;
    chain.user_group.push_back(group);
    const auto& t = chain.transitions[static_cast<std::size_t>(group)];
    std::vector<ItemIndex> items;
    int cur = start(engine);
    items.push_back(cur + 1);
    while (static_cast<int>(items.size()) < seq_len) {
      double r = unit(engine), acc = 0.0;
      int next = num_items - 1;
      for (int j = 0; j < num_items; ++j) {
        acc += t(cur, j);
        if (r < acc) {
          next = j;
          break;
        }
      }
      cur = next;
      items.push_back(cur + 1);
    }
    UserSplit s;
    s.test_target = items.back();
    items.pop_back();
    s.validation_target = items.back();
    items.pop_back();
    ds.user_ids.push_back("user" + std::to_string(u));
    ds.lengths.push_back(static_cast<int>(items.size()));
    ds.sequences.push_back(left_pad(items, seq_len));
    ds.split.push_back(s);
  }
  ds.num_users = num_users;
  ds.chain = std::move(chain);
  return ds;
}

double bayes_optimal_hr1(const SequenceDataset& ds, bool test_split) {
  require(ds.chain.has_value(), "bayes_optimal_hr1: dataset carries no chain");
  double total = 0.0;
  for (int u = 0; u < ds.num_users; ++u) {
    const auto input = test_split ? ds.test_input(u) : ds.validation_input(u);
    const auto& t = ds.chain->transitions[static_cast<std::size_t>(ds.chain->user_group[static_cast<std::size_t>(u)])];
    total += t.row(input.back() - 1).maxCoeff();
  }
  return total / ds.num_users;
}

std::vector<std::int64_t> item_frequencies(const SequenceDataset& ds) {
  std::vector<std::int64_t> freq(static_cast<std::size_t>(ds.num_items) + 1, 0);
  for (int u = 0; u < ds.num_users; ++u)
    for (auto v : ds.train_items(u)) ++freq[static_cast<std::size_t>(v)];
  return freq;
}

}  // namespace msgcl
