#include "msgcl/cli.hpp"

#include "msgcl/binary_io.hpp"
#include "msgcl/checkpoint.hpp"
#include "msgcl/experiments.hpp"
#include "msgcl/projection.hpp"
#include "msgcl/trainer.hpp"
#include "msgcl/verification.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace msgcl::cli {

namespace fs = std::filesystem;

nlohmann::json to_json(const RunConfig& rc) {
  return {{"model", rc.model}, {"train", rc.train}, {"data", rc.data}, {"run_dir", rc.run_dir}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  if (j.contains("model")) rc.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
  rc.data = j.value("data", std::string());
  rc.run_dir = j.value("run_dir", std::string());
  return rc;
}

SequenceDataset load_any_dataset(const fs::path& path, int max_len, LogFormat format) {
  if (!fs::exists(path)) throw ContractError("no such file: " + path.string());
  {
    std::ifstream in(path, std::ios::binary);
    char magic[8] = {};
    in.read(magic, 8);
    if (in.gcount() == 8 && std::string_view(magic, 8) == "MSGCL-DS") return load_dataset(path);
  }
  IngestOptions opt;
  opt.format = format;
  return build_sequences(ingest_interactions(path, opt), max_len);
}

namespace {

/// Thrown by the epoch hook to emulate an interrupted run.
struct Interrupted {};

/// Command-line overrides on top of a config file.
struct Overrides {
  std::optional<int> max_len, hidden, heads, layers, batch_size, epochs, patience, precision;
  std::optional<double> dropout, alpha, beta, tau, lr;
  std::optional<Similarity> similarity;
  std::optional<NormPlacement> norm;
  std::optional<Pooling> pooling;
  std::optional<ScoreFrom> score_from;
  std::optional<TrainMode> mode;
  std::optional<Stage2Granularity> stage2;
  std::optional<std::uint64_t> seed;
  std::string config_file;
  LogFormat format{LogFormat::kTsv};

  void add_to(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config with \"model\" and \"train\" sections");
    app->add_option("--max-len", max_len, "maximum sequence length (raw logs only)");
    app->add_option("--hidden", hidden, "embedding / hidden size d");
    app->add_option("--heads", heads, "attention heads h");
    app->add_option("--layers", layers, "self-attention blocks per stack");
    app->add_option("--dropout", dropout, "dropout rate");
    app->add_option("--alpha", alpha, "contrastive weight");
    app->add_option("--beta", beta, "KL weight");
    app->add_option("--tau", tau, "InfoNCE temperature");
    app->add_option("--similarity", similarity, "dot|cosine")
        ->transform(CLI::CheckedTransformer(std::map<std::string, Similarity>{{"dot", Similarity::kDot},
                                                                              {"cosine", Similarity::kCosine}}));
    app->add_option("--norm", norm, "pre|post")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, NormPlacement>{{"pre", NormPlacement::kPre}, {"post", NormPlacement::kPost}}));
    app->add_option("--pooling", pooling, "anchor|mean")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Pooling>{{"anchor", Pooling::kAnchor}, {"mean", Pooling::kMean}}));
    app->add_option("--score-from", score_from, "decoder|latent")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, ScoreFrom>{{"decoder", ScoreFrom::kDecoder}, {"latent", ScoreFrom::kLatent}}));
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--batch-size", batch_size, "batch size");
    app->add_option("--epochs", epochs, "maximum epochs");
    app->add_option("--patience", patience, "early-stopping patience in epochs");
    app->add_option("--mode", mode, "meta|joint")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, TrainMode>{{"meta", TrainMode::kMetaTwoStep}, {"joint", TrainMode::kJoint}}));
    app->add_option("--stage2", stage2, "batch|epoch")
        ->transform(CLI::CheckedTransformer(std::map<std::string, Stage2Granularity>{
            {"batch", Stage2Granularity::kBatch}, {"epoch", Stage2Granularity::kEpoch}}));
    app->add_option("--precision", precision, "32|64");
    app->add_option("--seed", seed, "root seed");
    app->add_option("--format", format, "tsv|ml1m (raw logs)")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, LogFormat>{{"tsv", LogFormat::kTsv}, {"ml1m", LogFormat::kMovieLens}}));
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ContractError("cannot open config " + config_file);
      rc = run_config_from_json(nlohmann::json::parse(in));
    }
    auto& m = rc.model;
    auto& t = rc.train;
    if (max_len) m.max_len = *max_len;
    if (hidden) m.hidden = *hidden;
    if (heads) m.num_heads = *heads;
    if (layers) m.num_layers = *layers;
    if (dropout) m.dropout = *dropout;
    if (alpha) m.alpha = *alpha;
    if (beta) m.beta = *beta;
    if (tau) m.tau = *tau;
    if (similarity) m.similarity = *similarity;
    if (norm) m.norm = *norm;
    if (pooling) m.pooling = *pooling;
    if (score_from) m.score_from = *score_from;
    if (lr) t.lr = *lr;
    if (batch_size) t.batch_size = *batch_size;
    if (epochs) t.max_epochs = *epochs;
    if (patience) t.patience = *patience;
    if (mode) t.mode = *mode;
    if (stage2) t.stage2 = *stage2;
    if (precision) t.precision = *precision;
    if (seed) {
      m.seed = *seed;
      t.seed = *seed;
    }
    return rc;
  }
};

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ContractError("cannot write " + p.string());
  out << s;
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// Takes vocabulary size and max_len from the dataset.
void bind_to_dataset(RunConfig& rc, const SequenceDataset& ds) {
  rc.model.num_items = ds.num_items;
  rc.model.max_len = ds.max_len;
}

// --- prepare ----------------------------------------------------------------

struct PrepareArgs {
  std::string input, out, synthetic;
  int max_len{50};
  std::optional<double> min_rating;
  int min_user_len{5};
  int min_item_len{0};
  LogFormat format{LogFormat::kTsv};
  int users{100}, items{20}, seq_len{30}, groups{1};
  double sharpness{5.0};
  std::uint64_t seed{42};
};

void print_stats_row(std::ostream& out, const char* label, const DatasetStats& s) {
  out << label << '\t' << s.users << '\t' << s.items << '\t' << s.interactions << '\t' << std::fixed
      << std::setprecision(1) << s.avg_length << '\t' << std::setprecision(2) << 100.0 * s.sparsity << "%\n";
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  if (a.out.empty()) throw ContractError("prepare: --out is required");
  SequenceDataset ds;
  if (a.synthetic == "markov") {
    ds = synth_markov_dataset(a.users, a.items, a.seq_len, a.sharpness, a.seed, MarkovOptions{a.groups});
    out << "synthetic markov: users " << ds.num_users << " items " << ds.num_items << " max_len " << ds.max_len
        << " bayes_hr1(test) " << bayes_optimal_hr1(ds, true) << "\n";
  } else if (!a.synthetic.empty()) {
    throw ContractError("prepare: unknown synthetic generator " + a.synthetic);
  } else {
    if (a.input.empty()) throw ContractError("prepare: --input or --synthetic is required");
    IngestOptions opt;
    opt.min_rating = a.min_rating;
    opt.min_user_len = a.min_user_len;
    opt.min_item_len = a.min_item_len;
    opt.format = a.format;
    IngestReport report;
    const auto records = ingest_interactions(a.input, opt, &report);
    BuildReport build;
    ds = build_sequences(records, a.max_len, &build);
    out << "stage\tusers\titems\tinteractions\n";
    out << "raw\t" << report.raw_users << '\t' << report.raw_items << '\t' << report.raw_records << "\n";
    out << "after_rating\t-\t-\t" << report.after_rating_filter << "\n";
    out << "kept\t" << report.kept_users << '\t' << report.kept_items << '\t' << report.kept_records << "\n";
    out << "\ndataset\t#users\t#items\t#actions\tavg.length\tsparsity\n";
    print_stats_row(out, fs::path(a.input).filename().string().c_str(), compute_stats(records));
    if (build.excluded_users) out << "excluded users (< 3 interactions): " << build.excluded_users << "\n";
  }
  save_dataset(ds, a.out);
  out << "wrote " << a.out << "\n";
  return kOk;
}

// --- train --------------------------------------------------------------------

/// Keeps log lines whose epoch does not exceed `epoch`.
void truncate_log(const fs::path& log_path, int epoch) {
  std::ifstream in(log_path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).value("epoch", 0) <= epoch) kept += line + "\n";
  }
  in.close();
  write_text(log_path, kept);
}

template <typename Scalar>
int train_run(RunConfig rc, const SequenceDataset& ds, bool resume, int stop_after, std::ostream& out) {
  const fs::path dir = rc.run_dir;
  const fs::path ckpt = dir / "checkpoints" / "last.ckpt";
  const fs::path log_path = dir / "train.jsonl";
  TrainState<Scalar> state;
  if (resume) {
    CheckpointHeader h;
    state = load_checkpoint<Scalar>(ckpt, &h);
    rc.model = h.model;
    rc.train = h.train;
    truncate_log(log_path, state.epoch);
    out << "resuming " << dir.string() << " at epoch " << state.epoch << "\n";
  } else {
    fs::create_directories(dir / "checkpoints");
    write_text(log_path, "");
    state = TrainState<Scalar>::fresh(rc.model, rc.train);
  }
  write_text(dir / "config.json", dump(to_json(rc)));

  std::ofstream log(log_path, std::ios::app | std::ios::binary);
  const LogSink sink = [&](const nlohmann::json& j) { log << j.dump() << "\n"; };
  int epochs_this_run = 0;
  const EpochHook<Scalar> hook = [&](const TrainState<Scalar>& s) {
    log.flush();
    save_checkpoint(ckpt, rc.model, rc.train, s);
    if (stop_after > 0 && ++epochs_this_run >= stop_after && !s.finished) throw Interrupted{};
  };
  try {
    state = fit<Scalar>(ds, rc.model, rc.train, std::move(state), sink, hook);
  } catch (const Interrupted&) {
    out << "stopped after " << epochs_this_run << " epochs; resume with --resume\n";
    return kOk;
  }
  log.close();
  save_checkpoint(ckpt, rc.model, rc.train, state);
  auto report = evaluate(state.best_params, rc.model, ds, Split::kTest);
  report.config_hash = config_hash(rc.model);
  auto j = report_to_json(report);
  j["split"] = "test";
  j["best_epoch"] = state.best_epoch;
  j["best_validation_ndcg10"] = state.best_ndcg;
  write_text(dir / "eval.json", dump(j));
  out << "best epoch " << state.best_epoch << " test HR@10 " << report.hr.at(10) << " NDCG@10 " << report.ndcg.at(10)
      << "\n";
  return kOk;
}

int train_dispatch(RunConfig rc, const SequenceDataset& ds, bool resume, int stop_after, std::ostream& out) {
  if (resume) rc.train.precision = read_checkpoint_header(fs::path(rc.run_dir) / "checkpoints" / "last.ckpt").scalar_bytes * 8;
  if (rc.train.precision == 32) return train_run<float>(rc, ds, resume, stop_after, out);
  return train_run<double>(rc, ds, resume, stop_after, out);
}

/// "alpha=0.01,0.03" -> (alpha, {0.01, 0.03}).
std::pair<std::string, std::vector<std::string>> parse_grid_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ContractError("--grid expects name=v1,v2,...: " + spec);
  std::vector<std::string> values;
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!v.empty()) values.push_back(v);
  if (values.empty()) throw ContractError("--grid axis has no values: " + spec);
  return {spec.substr(0, eq), values};
}

void apply_grid_value(RunConfig& rc, const std::string& name, const std::string& value) {
  nlohmann::json j = to_json(rc);
  const nlohmann::json v = nlohmann::json::parse(value);
  if (j["model"].contains(name)) {
    j["model"][name] = v;
  } else if (j["train"].contains(name)) {
    j["train"][name] = v;
  } else {
    throw ContractError("--grid: unknown parameter " + name);
  }
  rc = run_config_from_json(j);
}

// --- verify ---------------------------------------------------------------------

nlohmann::json verify_kl(std::uint64_t seed, bool& ok) {
  std::mt19937_64 engine(seed);
  std::uniform_real_distribution<double> mu(-2.0, 2.0), log_sigma(std::log(0.2), std::log(3.0));
  int mc_fail = 0;
  double worst_quad = 0;
  for (int i = 0; i < 100; ++i) {
    const double m = mu(engine), s = std::exp(log_sigma(engine));
    const double closed = gaussian_kl(m, s);
    const auto est = verify::kl_monte_carlo(m, s, 20000, engine);
    if (std::abs(est.mean - closed) > 3.0 * est.se) ++mc_fail;
    worst_quad = std::max(worst_quad, std::abs(verify::kl_numerical_integration(m, s) - closed));
  }
  // Expect about 0.3 of 100 cases outside 3 SE by chance; allow a few.
  const bool passed = mc_fail <= 3 && worst_quad < 1e-6;
  ok = ok && passed;
  return {{"cases", 100}, {"monte_carlo_outside_3se", mc_fail}, {"max_quadrature_error", worst_quad}, {"passed", passed}};
}

nlohmann::json verify_elbo(std::uint64_t seed, bool& ok) {
  std::mt19937_64 engine(seed);
  nlohmann::json cases = nlohmann::json::array();
  int failures = 0;
  for (int i = 0; i < 20; ++i) {
    const auto toy = verify::random_toy(2, engine);
    const auto r = verify::check_elbo_decomposition(toy, 20000, derive_seed(seed, static_cast<std::uint64_t>(i)));
    failures += !r.passed;
    cases.push_back({{"lhs", verify::to_json(r.lhs)}, {"rhs", verify::to_json(r.rhs)}, {"difference", r.difference},
                     {"tolerance", r.tolerance}, {"passed", r.passed}});
  }
  const bool passed = failures == 0;
  ok = ok && passed;
  return {{"cases", cases}, {"failures", failures}, {"passed", passed}};
}

nlohmann::json verify_mi(std::uint64_t seed, bool& ok) {
  nlohmann::json rows = nlohmann::json::array();
  bool passed = true;
  for (double rho : {0.0, 0.5, 0.9})
    for (int b : {8, 64, 256}) {
      const auto r = verify::check_mi_bound(rho, b, 1.0, 200, derive_seed(seed, static_cast<std::uint64_t>(b * 10 + rho * 10)));
      passed = passed && r.passed;
      rows.push_back({{"rho", rho}, {"batch", b}, {"true_mi", r.true_mi}, {"bound", verify::to_json(r.bound)},
                      {"passed", r.passed}});
    }
  ok = ok && passed;
  return {{"rows", rows}, {"passed", passed}};
}

nlohmann::json verify_gradcheck(std::uint64_t seed, bool& ok) {
  const auto r = verify::gradcheck_model(verify::tiny_config(), seed);
  ok = ok && r.passed;
  return {{"max_relative_error", r.max_relative_error}, {"worst_parameter", r.worst_parameter},
          {"num_checked", r.num_checked}, {"tensors", r.families.size()}, {"passed", r.passed}};
}

int cmd_verify(const std::string& suite, std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  bool ok = true;
  nlohmann::json j;
  const bool all = suite == "all";
  if (!all && suite != "kl" && suite != "elbo" && suite != "mi" && suite != "gradcheck")
    throw ContractError("verify: unknown suite " + suite);
  if (all || suite == "gradcheck") j["gradcheck"] = verify_gradcheck(seed, ok);
  if (all || suite == "kl") j["kl"] = verify_kl(seed, ok);
  if (all || suite == "elbo") j["elbo"] = verify_elbo(seed, ok);
  if (all || suite == "mi") j["mi_bound"] = verify_mi(seed, ok);
  j["passed"] = ok;
  if (!out_path.empty()) write_text(out_path, dump(j));
  for (const auto& [name, v] : j.items())
    if (v.is_object()) out << name << ": " << (v.value("passed", false) ? "pass" : "FAIL") << "\n";
  out << (ok ? "all checks passed" : "some checks failed") << "\n";
  return ok ? kOk : kCheckFailed;
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("at least one --seeds value is required");
  return seeds;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"msgcl: variational sequence recommender with contrastive twin views"};
  app.require_subcommand(1);

  // prepare
  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "ingest a log (or synthesize one) and write a dataset file");
  p->add_option("--input", prep.input, "interaction log (TSV or ratings.dat, plain or .gz)");
  p->add_option("--out", prep.out, "dataset file to write")->required();
  p->add_option("--max-len", prep.max_len, "maximum sequence length");
  p->add_option("--min-rating", prep.min_rating, "drop interactions rated below this");
  p->add_option("--min-user-len", prep.min_user_len, "drop users with fewer interactions");
  p->add_option("--min-item-len", prep.min_item_len, "drop items with fewer interactions (0 = off)");
  p->add_option("--format", prep.format, "tsv|ml1m")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, LogFormat>{{"tsv", LogFormat::kTsv}, {"ml1m", LogFormat::kMovieLens}}));
  p->add_option("--synthetic", prep.synthetic, "generator name (markov)");
  p->add_option("--users", prep.users, "synthetic: users");
  p->add_option("--items", prep.items, "synthetic: items");
  p->add_option("--seq-len", prep.seq_len, "synthetic: interactions per user");
  p->add_option("--sharpness", prep.sharpness, "synthetic: transition sharpness");
  p->add_option("--groups", prep.groups, "synthetic: user groups with distinct chains");
  p->add_option("--seed", prep.seed, "synthetic: seed");

  // train
  Overrides tr_over;
  std::string tr_data, tr_run;
  std::vector<std::string> tr_grid;
  bool tr_resume = false;
  int tr_stop_after = 0;
  auto* t = app.add_subcommand("train", "train a model; writes config.json, train.jsonl, eval.json, checkpoints/");
  t->add_option("--data", tr_data, "dataset file or raw log");
  t->add_option("--run-dir", tr_run, "output directory")->required();
  t->add_option("--grid", tr_grid, "sweep name=v1,v2,... (repeatable); one sub-run per combination");
  t->add_flag("--resume", tr_resume, "continue from run-dir/checkpoints/last.ckpt");
  t->add_option("--stop-after", tr_stop_after, "stop after this many epochs of this invocation")->group("");
  tr_over.add_to(t);

  // eval
  std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
  bool ev_pop = false, ev_last = false;
  int ev_max_len = 50;
  LogFormat ev_format = LogFormat::kTsv;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint or the popularity ranker");
  e->add_option("--data", ev_data, "dataset file or raw log")->required();
  e->add_option("--checkpoint", ev_ckpt, "checkpoint file");
  e->add_flag("--popularity", ev_pop, "evaluate the popularity ranker instead of a model");
  e->add_flag("--last", ev_last, "use the last parameters instead of the best-validation ones");
  e->add_option("--split", ev_split, "validation|test")->check(CLI::IsMember({"validation", "test"}));
  e->add_option("--max-len", ev_max_len, "maximum sequence length (raw logs only)");
  e->add_option("--format", ev_format, "tsv|ml1m")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, LogFormat>{{"tsv", LogFormat::kTsv}, {"ml1m", LogFormat::kMovieLens}}));
  e->add_option("--out", ev_out, "write the report JSON here");

  // ablate / noise
  Overrides ab_over;
  std::string ab_data, ab_run;
  std::vector<std::uint64_t> ab_seeds{1, 2, 3};
  auto* ab = app.add_subcommand("ablate", "train -clkl, -cl, -kl and full; writes ablation.tsv");
  ab->add_option("--data", ab_data, "dataset file or raw log")->required();
  ab->add_option("--run-dir", ab_run, "output directory")->required();
  ab->add_option("--seeds", ab_seeds, "seeds (each variant uses every seed)");
  ab_over.add_to(ab);

  Overrides nz_over;
  std::string nz_data, nz_run;
  std::vector<std::uint64_t> nz_seeds{1, 2, 3};
  std::vector<double> nz_ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  auto* nz = app.add_subcommand("noise", "train on noise-injected data, test on clean; writes noise.tsv");
  nz->add_option("--data", nz_data, "dataset file or raw log")->required();
  nz->add_option("--run-dir", nz_run, "output directory")->required();
  nz->add_option("--ratios", nz_ratios, "noise ratios from {0, 0.1, ..., 0.5}");
  nz->add_option("--seeds", nz_seeds, "seeds");
  nz_over.add_to(nz);

  // project
  std::string pj_data, pj_ckpt, pj_out;
  auto* pj = app.add_subcommand("project", "2-D PCA of the item embeddings with training frequencies (TSV)");
  pj->add_option("--data", pj_data, "dataset file the model was trained on")->required();
  pj->add_option("--checkpoint", pj_ckpt, "checkpoint file")->required();
  pj->add_option("--out", pj_out, "TSV to write")->required();

  // verify
  std::string vf_suite = "all", vf_out;
  std::uint64_t vf_seed = 42;
  auto* vf = app.add_subcommand("verify", "numerical oracle checks; exit 1 on any failure");
  vf->add_option("--suite", vf_suite, "all|gradcheck|kl|elbo|mi");
  vf->add_option("--seed", vf_seed, "seed");
  vf->add_option("--out", vf_out, "write the JSON report here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    if (ex.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << ex.what() << "\n";
    return kUsage;
  }

  try {
    if (*p) return cmd_prepare(prep, out);

    if (*t) {
      RunConfig rc = tr_over.resolve();
      rc.run_dir = tr_run;
      if (tr_resume) {
        const auto saved = nlohmann::json::parse(read_file(fs::path(tr_run) / "config.json"));
        rc = run_config_from_json(saved);
      } else {
        if (tr_data.empty()) throw ContractError("train: --data is required");
        rc.data = tr_data;
      }
      const auto ds = load_any_dataset(rc.data, rc.model.max_len, tr_over.format);
      bind_to_dataset(rc, ds);
      if (tr_grid.empty() || tr_resume) return train_dispatch(rc, ds, tr_resume, tr_stop_after, out);

      std::vector<std::pair<std::string, std::vector<std::string>>> axes;
      for (const auto& g : tr_grid) axes.push_back(parse_grid_axis(g));
      std::vector<std::size_t> idx(axes.size(), 0);
      nlohmann::json index = nlohmann::json::array();
      while (true) {
        RunConfig sub = rc;
        std::string name;
        for (std::size_t a = 0; a < axes.size(); ++a) {
          apply_grid_value(sub, axes[a].first, axes[a].second[idx[a]]);
          name += (a ? "_" : "") + axes[a].first + "=" + axes[a].second[idx[a]];
        }
        sub.run_dir = (fs::path(tr_run) / name).string();
        out << "grid run " << name << "\n";
        train_dispatch(sub, ds, false, 0, out);
        index.push_back({{"run", name}, {"eval", nlohmann::json::parse(read_file(fs::path(sub.run_dir) / "eval.json"))}});
        std::size_t a = 0;
        while (a < axes.size() && ++idx[a] == axes[a].second.size()) idx[a++] = 0;
        if (a == axes.size()) break;
      }
      write_text(fs::path(tr_run) / "grid.json", dump(index));
      return kOk;
    }

    if (*e) {
      const auto ds = load_any_dataset(ev_data, ev_max_len, ev_format);
      const Split split = ev_split == "test" ? Split::kTest : Split::kValidation;
      EvalReport report;
      if (ev_pop) {
        report = evaluate_popularity(ds, split);
      } else {
        if (ev_ckpt.empty()) throw ContractError("eval: --checkpoint or --popularity is required");
        CheckpointHeader h;
        const auto state = load_checkpoint<double>(ev_ckpt, &h);
        report = evaluate(ev_last ? state.params : state.best_params, h.model, ds, split);
        report.config_hash = config_hash(h.model);
      }
      auto j = report_to_json(report);
      j["split"] = ev_split;
      if (!ev_out.empty()) write_text(ev_out, dump(j));
      out << dump(j);
      return kOk;
    }

    if (*ab || *nz) {
      auto& over = *ab ? ab_over : nz_over;
      RunConfig rc = over.resolve();
      rc.data = *ab ? ab_data : nz_data;
      rc.run_dir = *ab ? ab_run : nz_run;
      const auto ds = load_any_dataset(rc.data, rc.model.max_len, over.format);
      bind_to_dataset(rc, ds);
      rc.model.validate();
      rc.train.validate();
      fs::create_directories(rc.run_dir);
      write_text(fs::path(rc.run_dir) / "config.json", dump(to_json(rc)));
      const RunHook hook = [&](const RunResult& r) {
        out << r.label << " seed " << r.seed << " NDCG@10 " << r.test.ndcg.at(10) << "\n";
      };
      if (*ab) {
        const auto table = run_ablation<double>(ds, rc.model, rc.train, parse_seeds(ab_seeds), hook);
        write_text(fs::path(rc.run_dir) / "ablation.tsv", summary_tsv(table, "variant"));
        write_text(fs::path(rc.run_dir) / "ablation_runs.tsv", runs_tsv(table, "variant"));
        out << summary_tsv(table, "variant");
      } else {
        const auto table = run_noise_robustness<double>(ds, nz_ratios, rc.model, rc.train, parse_seeds(nz_seeds), hook);
        write_text(fs::path(rc.run_dir) / "noise.tsv", summary_tsv(table, "ratio"));
        write_text(fs::path(rc.run_dir) / "noise_runs.tsv", runs_tsv(table, "ratio"));
        out << summary_tsv(table, "ratio");
      }
      return kOk;
    }

    if (*pj) {
      const auto ds = load_any_dataset(pj_data, 50, LogFormat::kTsv);
      CheckpointHeader h;
      const auto state = load_checkpoint<double>(pj_ckpt, &h);
      require(h.model.num_items == ds.num_items, "project: model and dataset vocabularies differ");
      const auto proj = emit_embedding_projection(state.best_params.encoder.item_embedding, item_frequencies(ds));
      write_text(pj_out, projection_tsv(proj));
      out << "explained variance (top 2): " << proj.explained_variance_ratio(0) << " "
          << proj.explained_variance_ratio(1) << "\n";
      return kOk;
    }

    if (*vf) return cmd_verify(vf_suite, vf_seed, vf_out, out);
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace msgcl::cli
