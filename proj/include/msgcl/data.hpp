#pragma once

// Interaction logs, fixed-length user sequences with leave-one-out splits,
// evaluation noise injection, and a synthetic Markov-chain generator with a
// known Bayes-optimal next-item predictor.

#include "msgcl/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace msgcl {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp{0};
  std::optional<double> rating;
};

class ParseError : public ContractError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ContractError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class LogFormat {
  kTsv,        // user<TAB>item<TAB>timestamp[<TAB>rating]
  kMovieLens,  // user::item::rating::timestamp (ratings.dat)
};

struct IngestOptions {
  std::optional<double> min_rating;
  int min_user_len{5};
  /// Items with fewer interactions are dropped before the user filter (0 = off).
  int min_item_len{0};
  LogFormat format{LogFormat::kTsv};
};

/// Row counts at each filtering stage.
struct IngestReport {
  std::size_t raw_records{0};
  std::size_t raw_users{0};
  std::size_t raw_items{0};
  std::size_t after_rating_filter{0};
  std::size_t kept_records{0};
  std::size_t kept_users{0};
  std::size_t kept_items{0};
};

/// Reads a plain or gzip-compressed log. Output is sorted by user, then
/// timestamp, ties kept in input order.
std::vector<InteractionRecord> ingest_interactions(const std::filesystem::path& path, const IngestOptions& options,
                                                   IngestReport* report = nullptr);

std::vector<InteractionRecord> ingest_interactions(const std::filesystem::path& path,
                                                   std::optional<double> min_rating, int min_user_len);

/// Parses records from an in-memory buffer (same rules as the file reader).
std::vector<InteractionRecord> parse_interactions(const std::string& text, LogFormat format = LogFormat::kTsv);

std::vector<InteractionRecord> filter_interactions(std::vector<InteractionRecord> records,
                                                   const IngestOptions& options, IngestReport* report = nullptr);

// ---------------------------------------------------------------------------

/// item id <-> index 1..N; index 0 is padding.
class ItemVocab {
 public:
  ItemIndex add(const std::string& id);
  ItemIndex index_of(const std::string& id) const;  // 0 when absent
  const std::string& id_of(ItemIndex index) const { return ids_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(ids_.size()) - 1; }
  const std::vector<std::string>& ids() const { return ids_; }

  friend bool operator==(const ItemVocab& a, const ItemVocab& b) { return a.ids_ == b.ids_; }

 private:
  std::vector<std::string> ids_{std::string()};
  std::unordered_map<std::string, ItemIndex> index_;
};

struct UserSplit {
  ItemIndex validation_target{kPadding};
  ItemIndex test_target{kPadding};
  friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

/// First-order item transition structure a synthetic dataset was drawn from.
/// Users are assigned to groups; each group has its own transition matrix.
struct MarkovChain {
  std::vector<Matrix<double>> transitions;  // per group, N x N over items 1..N (offset by one)
  std::vector<int> user_group;              // per user

  friend bool operator==(const MarkovChain& a, const MarkovChain& b) {
    if (a.user_group != b.user_group || a.transitions.size() != b.transitions.size()) return false;
    for (std::size_t g = 0; g < a.transitions.size(); ++g)
      if (a.transitions[g] != b.transitions[g]) return false;
    return true;
  }
};

struct SequenceDataset {
  int num_users{0};
  int num_items{0};
  int max_len{0};
  std::vector<std::string> user_ids;
  /// num_users rows of max_len indices: the training prefix, left padded.
  std::vector<std::vector<ItemIndex>> sequences;
  std::vector<int> lengths;
  ItemVocab vocab;
  std::vector<UserSplit> split;
  std::optional<MarkovChain> chain;

  /// Training prefix without padding.
  std::vector<ItemIndex> train_items(int user) const;
  /// Left-padded input whose next item is the validation target.
  std::vector<ItemIndex> validation_input(int user) const;
  /// Left-padded input whose next item is the test target.
  std::vector<ItemIndex> test_input(int user) const;

  void validate() const;
  friend bool operator==(const SequenceDataset&, const SequenceDataset&) = default;
};

std::vector<ItemIndex> left_pad(const std::vector<ItemIndex>& items, int max_len);

struct BuildReport {
  std::size_t excluded_users{0};  // fewer than 3 interactions
};

/// Requires records sorted per ingest_interactions.
SequenceDataset build_sequences(const std::vector<InteractionRecord>& records, int max_len,
                                BuildReport* report = nullptr);

// ---------------------------------------------------------------------------

struct NoiseSpec {
  double ratio{0.1};
  std::uint64_t seed{0};
};

/// Inserts floor(ratio * L) never-interacted items into each training
/// sequence at uniform positions, then keeps the most recent max_len.
/// Users whose history covers the catalog are skipped (reported in `warnings`).
SequenceDataset inject_noise(const SequenceDataset& ds, const NoiseSpec& spec,
                             std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------

struct MarkovOptions {
  int num_groups{1};
};

/// Each item has one preferred successor (a random cycle over the catalog,
/// one cycle per user group) with probability e^s / (e^s + N - 1); every
/// other item has 1 / (e^s + N - 1). Sharpness 0 is uniform, +inf is a
/// deterministic cycle.
SequenceDataset synth_markov_dataset(int num_users, int num_items, int seq_len, double transition_sharpness,
                                     std::uint64_t seed, const MarkovOptions& options = {});

/// Expected HR@1 of the Bayes-optimal predictor on a split, from the stored chain.
double bayes_optimal_hr1(const SequenceDataset& ds, bool test_split);

/// Training-prefix item frequencies, indexed 0..N (0 unused).
std::vector<std::int64_t> item_frequencies(const SequenceDataset& ds);

// ---------------------------------------------------------------------------

struct DatasetStats {
  std::size_t users{0};
  std::size_t items{0};
  std::size_t interactions{0};
  double avg_length{0};
  double sparsity{0};
};

DatasetStats compute_stats(const std::vector<InteractionRecord>& records);

// Versioned binary dataset file ("MSGCL-DS").
void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path);
SequenceDataset load_dataset(const std::filesystem::path& path);
std::string serialize_dataset(const SequenceDataset& ds);
SequenceDataset deserialize_dataset(const std::string& bytes);

}  // namespace msgcl
