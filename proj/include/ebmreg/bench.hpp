// Benchmark runner: expands an experiment description into a grid of
// (method, sample-count, beta) cells, trains each cell `runs_per_cell` times
// with paired seeds, scores every run by grid KL against the exact data
// density, and writes deterministic result tables.
//
// Every run is persisted as a JSON file under <out_dir>/runs/<cell>/ as soon
// as it finishes, so an interrupted benchmark resumes where it stopped.
// results.csv contains no wall-clock numbers and is byte-identical across
// repeated or resumed executions; timings live in timing.csv.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ebmreg/datasets.hpp"
#include "ebmreg/errors.hpp"
#include "ebmreg/grid.hpp"
#include "ebmreg/io.hpp"
#include "ebmreg/losses.hpp"
#include "ebmreg/model.hpp"
#include "ebmreg/protocol.hpp"
#include "ebmreg/rng.hpp"
#include "ebmreg/trainer.hpp"

namespace ebmreg {

// ---- experiment description ----

struct ExperimentSpec {
  DatasetSpec dataset;
  std::size_t n_train = 2000;
  std::uint64_t data_seed = 0;   // one fixed training set per experiment
  std::size_t runs_per_cell = 20;
  std::size_t best_k = 5;        // score = mean KL of the best k runs
  std::uint64_t base_seed = 0;   // run i of every cell uses the same derived seed
  TrainConfig train;             // train.seed is ignored; seeds come from base_seed
  std::vector<MethodConfig> methods;
  std::vector<std::size_t> m_sweep;   // overrides each method's sample count
  std::vector<double> beta_sweep;     // applies to the perturbed ranking objective only
  std::string out_dir;
};

inline void validate(const ExperimentSpec& spec) {
  if (spec.n_train == 0) throw ConfigError("n_train must be >= 1");
  if (spec.runs_per_cell == 0) throw ConfigError("runs_per_cell must be >= 1");
  if (spec.best_k == 0) throw ConfigError("best_k must be >= 1");
  if (spec.best_k > spec.runs_per_cell)
    throw ConfigError("best_k must not exceed runs_per_cell");
  validate(spec.train);
  if (spec.methods.empty()) throw ConfigError("methods must be a nonempty list");
  for (const auto& m : spec.methods) validate(m);
  for (const auto m : spec.m_sweep)
    if (m == 0) throw ConfigError("m_sweep entries must be >= 1");
  for (const auto b : spec.beta_sweep)
    if (!(b >= 0.0) || !std::isfinite(b))
      throw ConfigError("beta_sweep entries must be finite and >= 0");
  if (spec.out_dir.empty()) throw ConfigError("out_dir must be set");
  if (spec.dataset.kind == DatasetKind::kDs1) spec.dataset.neg_mixture();  // validates
}

inline nlohmann::json experiment_to_json(const ExperimentSpec& spec) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["dataset"] = to_string(spec.dataset.kind);
  j["ds1_weights"] = spec.dataset.ds1_weights;
  j["ds1_means"] = spec.dataset.ds1_means;
  j["ds1_stds"] = spec.dataset.ds1_stds;
  j["n_train"] = spec.n_train;
  j["data_seed"] = spec.data_seed;
  j["runs_per_cell"] = spec.runs_per_cell;
  j["best_k"] = spec.best_k;
  j["base_seed"] = spec.base_seed;
  j["epochs"] = spec.train.epochs;
  j["batch_size"] = spec.train.batch_size;
  j["lr"] = spec.train.lr;
  j["shuffle"] = spec.train.shuffle;
  j["out_dir"] = spec.out_dir;
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : spec.methods) methods.push_back(method_to_json(m));
  j["methods"] = methods;
  j["m_sweep"] = spec.m_sweep;
  j["beta_sweep"] = spec.beta_sweep;
  return j;
}

inline ExperimentSpec experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  static constexpr const char* kAllowed[] = {
      "schema_version", "dataset",    "ds1_weights",   "ds1_means", "ds1_stds",
      "n_train",        "data_seed",  "runs_per_cell", "best_k",    "base_seed",
      "epochs",         "batch_size", "lr",            "shuffle",   "out_dir",
      "methods",        "m_sweep",    "beta_sweep"};
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : kAllowed) known = known || item.key() == a;
    if (!known) throw ConfigError("unknown experiment key: " + item.key());
  }
  const auto require = [&j](const char* key) -> const nlohmann::json& {
    const auto it = j.find(key);
    if (it == j.end()) throw ConfigError(std::string("missing experiment key: ") + key);
    return *it;
  };
  ExperimentSpec spec;
  try {
    if (!require("schema_version").is_number_integer() ||
        require("schema_version").get<int>() != 1)
      throw ConfigError("unsupported schema_version (expected 1)");
    spec.dataset.kind = dataset_from_string(require("dataset").get<std::string>());
    if (j.contains("ds1_weights"))
      spec.dataset.ds1_weights = j.at("ds1_weights").get<std::vector<double>>();
    if (j.contains("ds1_means"))
      spec.dataset.ds1_means = j.at("ds1_means").get<std::vector<double>>();
    if (j.contains("ds1_stds"))
      spec.dataset.ds1_stds = j.at("ds1_stds").get<std::vector<double>>();
    if (j.contains("n_train")) spec.n_train = j.at("n_train").get<std::size_t>();
    if (j.contains("data_seed")) spec.data_seed = j.at("data_seed").get<std::uint64_t>();
    if (j.contains("runs_per_cell"))
      spec.runs_per_cell = j.at("runs_per_cell").get<std::size_t>();
    if (j.contains("best_k")) spec.best_k = j.at("best_k").get<std::size_t>();
    if (j.contains("base_seed")) spec.base_seed = j.at("base_seed").get<std::uint64_t>();
    if (j.contains("epochs")) spec.train.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size"))
      spec.train.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("lr")) spec.train.lr = j.at("lr").get<double>();
    if (j.contains("shuffle")) spec.train.shuffle = j.at("shuffle").get<bool>();
    spec.out_dir = require("out_dir").get<std::string>();
    if (j.contains("m_sweep"))
      spec.m_sweep = j.at("m_sweep").get<std::vector<std::size_t>>();
    if (j.contains("beta_sweep"))
      spec.beta_sweep = j.at("beta_sweep").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment spec: ") + e.what());
  }
  const nlohmann::json& methods = require("methods");
  if (!methods.is_array()) throw ConfigError("methods must be a JSON array");
  for (const auto& mj : methods) spec.methods.push_back(method_from_json(mj));
  validate(spec);
  return spec;
}

// ---- cell expansion ----

struct BenchCell {
  MethodConfig method = NceConfig{};  // the objective actually trained
  std::string key;                    // directory / lookup key, unique per cell
  std::string method_label;           // reported name (beta = 0 keeps "nce+")
  std::optional<std::size_t> m_label;
  std::optional<std::size_t> steps_label;
  std::optional<double> beta_label;
};

namespace detail {

inline MethodConfig with_m_samples(MethodConfig cfg, std::size_t m) {
  std::visit(
      [m](auto& c) {
        if constexpr (!std::is_same_v<std::decay_t<decltype(c)>, SmConfig>) c.m_samples = m;
      },
      cfg);
  return cfg;
}

inline std::size_t m_samples_of(const MethodConfig& cfg) {
  return std::visit(
      [](const auto& c) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(c)>, SmConfig>)
          return 0;
        else
          return c.m_samples;
      },
      cfg);
}

}  // namespace detail

inline std::vector<BenchCell> expand_cells(const ExperimentSpec& spec) {
  validate(spec);
  const std::string ds = to_string(spec.dataset.kind);
  std::vector<BenchCell> cells;
  for (const MethodConfig& base : spec.methods) {
    const std::string label = method_name(base);
    if (std::holds_alternative<SmConfig>(base)) {
      // No sample count and no noise: exactly one cell, sweeps do not apply.
      BenchCell cell;
      cell.method = base;
      cell.method_label = label;
      cell.key = ds + "__" + label;
      cells.push_back(std::move(cell));
      continue;
    }
    std::vector<std::size_t> ms = spec.m_sweep;
    if (ms.empty()) ms.push_back(detail::m_samples_of(base));
    for (const std::size_t m : ms) {
      MethodConfig with_m = detail::with_m_samples(base, m);
      if (const auto* ncep = std::get_if<NcePlusConfig>(&with_m)) {
        std::vector<double> betas = spec.beta_sweep;
        if (betas.empty()) betas.push_back(ncep->beta);
        for (const double beta : betas) {
          BenchCell cell;
          cell.method_label = label;
          cell.m_label = m;
          cell.beta_label = beta;
          if (beta == 0.0) {
            // The beta -> 0 limit is the plain ranking objective; train it as
            // such (the perturbed config rejects beta = 0) but keep the label.
            NceConfig plain;
            plain.m_samples = m;
            plain.noise = ncep->noise;
            cell.method = plain;
          } else {
            NcePlusConfig swept = *ncep;
            swept.beta = beta;
            cell.method = swept;
          }
          cell.key =
              ds + "__" + label + "__M" + std::to_string(m) + "__beta" + format_g(beta);
          cells.push_back(std::move(cell));
        }
      } else {
        BenchCell cell;
        cell.method = with_m;
        cell.method_label = label;
        cell.m_label = m;
        std::string key = ds + "__" + label + "__M" + std::to_string(m);
        if (const auto* mcmc = std::get_if<MlMcmcConfig>(&with_m)) {
          cell.steps_label = mcmc->steps;
          key += "__L" + std::to_string(mcmc->steps);
        }
        cell.key = std::move(key);
        cells.push_back(std::move(cell));
      }
    }
  }
  std::vector<std::string> keys;
  keys.reserve(cells.size());
  for (const auto& c : cells) keys.push_back(c.key);
  std::sort(keys.begin(), keys.end());
  const auto dup = std::adjacent_find(keys.begin(), keys.end());
  if (dup != keys.end()) throw ConfigError("duplicate cell key: " + *dup);
  return cells;
}

// ---- per-run execution ----

struct RunOutcome {
  std::uint64_t seed = 0;
  bool failed = false;          // training aborted (non-finite loss or gradient)
  std::string failure_reason;   // empty for clean runs
  double kl = std::numeric_limits<double>::infinity();
  double median_seconds_per_epoch = std::numeric_limits<double>::quiet_NaN();
  std::size_t completed_epochs = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

struct CellResult {
  BenchCell cell;
  std::vector<RunOutcome> runs;  // in run-index order
  double best_k_mean = std::numeric_limits<double>::infinity();
  std::size_t failures = 0;      // runs without a finite KL
  double mean_seconds_per_epoch = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return (v.size() % 2 == 1) ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// Metric fields are rendered as strings: JSON numbers cannot represent the
// inf/nan a failed run legitimately produces.
inline nlohmann::json outcome_to_json(const RunOutcome& o) {
  nlohmann::json j;
  j["seed"] = o.seed;
  j["failed"] = o.failed;
  j["failure_reason"] = o.failure_reason;
  j["kl"] = format_g17(o.kl);
  j["median_seconds_per_epoch"] = format_g17(o.median_seconds_per_epoch);
  j["completed_epochs"] = o.completed_epochs;
  j["final_loss"] = format_g17(o.final_loss);
  return j;
}

inline RunOutcome outcome_from_json(const nlohmann::json& j) {
  RunOutcome o;
  try {
    o.seed = j.at("seed").get<std::uint64_t>();
    o.failed = j.at("failed").get<bool>();
    o.failure_reason = j.at("failure_reason").get<std::string>();
    o.kl = parse_double_string(j.at("kl").get<std::string>());
    o.median_seconds_per_epoch =
        parse_double_string(j.at("median_seconds_per_epoch").get<std::string>());
    o.completed_epochs = j.at("completed_epochs").get<std::size_t>();
    o.final_loss = parse_double_string(j.at("final_loss").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run outcome: ") + e.what());
  }
  return o;
}

}  // namespace detail

// Trains one cell once and scores it. A failed run (non-finite loss) is a
// legitimate outcome carrying kl = inf, not an exception.
inline RunOutcome execute_bench_run(const BenchCell& cell, const ExperimentSpec& spec,
                                    const RegressionSet& data, const GridDensity& truth,
                                    std::uint64_t seed, RunRecord* record_out = nullptr) {
  TrainConfig tc = spec.train;
  tc.seed = seed;
  EbmModel model;
  model.init(stream_key(kRoleInit, seed));
  RunRecord rec = train(model, data, cell.method, tc);

  RunOutcome o;
  o.seed = seed;
  o.failed = rec.failed;
  o.failure_reason = rec.failure_reason;
  o.completed_epochs = rec.loss_curve.size();
  if (!rec.loss_curve.empty()) o.final_loss = rec.loss_curve.back();
  o.median_seconds_per_epoch = detail::median_of(rec.wall_seconds_per_epoch);
  if (!rec.failed) {
    try {
      o.kl = kl_grid(truth, grid_density_model(model)).value;
    } catch (const std::exception& e) {
      o.kl = std::numeric_limits<double>::infinity();
      if (o.failure_reason.empty()) o.failure_reason = std::string("metric: ") + e.what();
    }
  }
  if (record_out != nullptr) *record_out = std::move(rec);
  return o;
}

// ---- the runner ----

namespace detail {

inline std::size_t bench_worker_count(std::size_t total_jobs) {
  std::size_t workers = 0;
  if (const char* env = std::getenv("EBM_BENCH_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != nullptr && *end == '\0' && v >= 1) workers = static_cast<std::size_t>(v);
  }
  if (workers == 0)
    workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  return std::min(workers, std::max<std::size_t>(1, total_jobs));
}

}  // namespace detail

// Runs (or resumes) the whole experiment. Returns one CellResult per cell in
// expansion order and writes results.csv, timing.csv, summary.md, and
// experiment.json under spec.out_dir. `log` (may be null) receives one
// progress line per run.
inline std::vector<CellResult> run_bench(const ExperimentSpec& spec,
                                         std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const std::vector<BenchCell> cells = expand_cells(spec);  // also validates

  const fs::path out(spec.out_dir);
  fs::create_directories(out / "runs");
  for (const auto& cell : cells) fs::create_directories(out / "runs" / cell.key);

  // One directory holds one experiment; refuse to mix two silently.
  const fs::path prov_path = out / "experiment.json";
  nlohmann::json provenance = experiment_to_json(spec);
  provenance.erase("out_dir");  // a moved directory is still the same experiment
  if (fs::exists(prov_path)) {
    nlohmann::json stored;
    try {
      stored = nlohmann::json::parse(read_text_file(prov_path.string()));
    } catch (const std::exception& e) {
      throw ConfigError("unreadable experiment.json in " + spec.out_dir + ": " + e.what());
    }
    stored.erase("out_dir");
    if (stored != provenance)
      throw ConfigError("out_dir already holds a different experiment: " + spec.out_dir);
  }
  write_text_file_atomic(prov_path.string(), experiment_to_json(spec).dump(2) + "\n");

  // Identical training data for every cell and run.
  const RegressionSet data = generate(spec.dataset, spec.n_train, spec.data_seed);

  // The exact-density grid is only needed when at least one run is actually
  // trained; a fully resumed invocation skips the cost.
  std::optional<GridDensity> truth;
  std::once_flag truth_once;
  const auto truth_grid = [&]() -> const GridDensity& {
    std::call_once(truth_once, [&] { truth = grid_density_truth(spec.dataset); });
    return *truth;
  };

  const std::size_t n_cells = cells.size();
  const std::size_t n_runs = spec.runs_per_cell;
  std::vector<std::vector<RunOutcome>> outcomes(n_cells, std::vector<RunOutcome>(n_runs));
  std::mutex log_mu;

  const auto process = [&](std::size_t c, std::size_t i) {
    const BenchCell& cell = cells[c];
    const std::uint64_t seed = protocol_run_seed(spec.base_seed, i);
    const fs::path run_path = out / "runs" / cell.key / ("run" + std::to_string(i) + ".json");

    RunOutcome o;
    bool resumed = false;
    if (fs::exists(run_path)) {
      try {
        const nlohmann::json j = nlohmann::json::parse(read_text_file(run_path.string()));
        if (!j.contains("schema") || j.at("schema").get<int>() != 1)
          throw ConfigError("unknown run file schema");
        o = detail::outcome_from_json(j.at("outcome"));
        if (o.seed != seed) throw ConfigError("stored seed does not match this experiment");
        resumed = true;
      } catch (const std::exception&) {
        resumed = false;  // corrupt or stale: recompute and rewrite below
      }
    }
    double wall = 0.0;
    if (!resumed) {
      const auto tick = std::chrono::steady_clock::now();
      RunRecord rec;
      o = execute_bench_run(cell, spec, data, truth_grid(), seed, &rec);
      wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
      nlohmann::json j;
      j["schema"] = 1;
      j["outcome"] = detail::outcome_to_json(o);
      j["record"] = run_record_to_json(rec);
      write_text_file_atomic(run_path.string(), j.dump(2) + "\n");
    }
    outcomes[c][i] = o;
    if (log != nullptr) {
      const std::scoped_lock lk(log_mu);
      *log << cell.key << " run " << (i + 1) << "/" << n_runs << ": ";
      if (resumed) *log << "resumed ";
      if (o.failed)
        *log << "FAILED (" << o.failure_reason << ")";
      else
        *log << "kl=" << format_g(o.kl);
      if (!resumed) *log << " [" << format_g(wall) << " s]";
      *log << '\n' << std::flush;
    }
  };

  const std::size_t total = n_cells * n_runs;
  const std::size_t workers = detail::bench_worker_count(total);
  if (workers <= 1) {
    for (std::size_t c = 0; c < n_cells; ++c)
      for (std::size_t i = 0; i < n_runs; ++i) process(c, i);
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    std::exception_ptr error;
    std::mutex error_mu;
    const auto drain = [&] {
      for (;;) {
        const std::size_t job = next.fetch_add(1);
        if (job >= total || abort.load()) return;
        try {
          process(job / n_runs, job % n_runs);
        } catch (...) {
          const std::scoped_lock lk(error_mu);
          if (!error) error = std::current_exception();
          abort.store(true);
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(drain);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  // Aggregate in fixed cell/run order so the tables are deterministic.
  std::vector<CellResult> results;
  results.reserve(n_cells);
  for (std::size_t c = 0; c < n_cells; ++c) {
    CellResult r;
    r.cell = cells[c];
    r.runs = outcomes[c];
    for (const auto& o : r.runs)
      if (!std::isfinite(o.kl)) ++r.failures;
    try {
      r.best_k_mean =
          best_k_of([&r](std::size_t i) { return r.runs[i].kl; }, n_runs, spec.best_k)
              .best_k_mean;
    } catch (const ProtocolError&) {
      r.best_k_mean = std::numeric_limits<double>::infinity();  // too few finite runs
    }
    double acc = 0.0;
    std::size_t cnt = 0;
    for (const auto& o : r.runs) {
      if (o.completed_epochs >= 1 && std::isfinite(o.median_seconds_per_epoch)) {
        acc += o.median_seconds_per_epoch;
        ++cnt;
      }
    }
    r.mean_seconds_per_epoch =
        (cnt > 0) ? acc / static_cast<double>(cnt) : std::numeric_limits<double>::quiet_NaN();
    results.push_back(std::move(r));
  }

  const std::string ds = to_string(spec.dataset.kind);
  const auto label_columns = [&ds](std::ostream& os, const BenchCell& cell) {
    os << ds << ',' << cell.method_label << ',';
    if (cell.m_label) os << *cell.m_label;
    os << ',';
    if (cell.steps_label) os << *cell.steps_label;
    os << ',';
    if (cell.beta_label) os << format_g(*cell.beta_label);
  };

  std::ostringstream rcsv;
  rcsv << "dataset,method,m_samples,steps,beta,runs,best_k,failures,best_k_mean_kl,all_kls\n";
  for (const auto& r : results) {
    label_columns(rcsv, r.cell);
    rcsv << ',' << r.runs.size() << ',' << spec.best_k << ',' << r.failures << ','
         << format_g17(r.best_k_mean) << ',';
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      if (i > 0) rcsv << ';';
      rcsv << format_g17(r.runs[i].kl);
    }
    rcsv << '\n';
  }
  write_text_file_atomic((out / "results.csv").string(), rcsv.str());

  std::ostringstream tcsv;
  tcsv << "dataset,method,m_samples,steps,beta,run_index,seed,failed,completed_epochs,"
          "median_seconds_per_epoch,final_loss\n";
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      const RunOutcome& o = r.runs[i];
      label_columns(tcsv, r.cell);
      tcsv << ',' << i << ',' << o.seed << ',' << (o.failed ? 1 : 0) << ','
           << o.completed_epochs << ',' << format_g17(o.median_seconds_per_epoch) << ','
           << format_g17(o.final_loss) << '\n';
    }
  }
  write_text_file_atomic((out / "timing.csv").string(), tcsv.str());

  std::vector<std::size_t> order(results.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&results](std::size_t a, std::size_t b) {
    const double x = results[a].best_k_mean;
    const double y = results[b].best_k_mean;
    const bool fx = std::isfinite(x);
    const bool fy = std::isfinite(y);
    if (fx != fy) return fx;  // finite scores rank ahead of failures
    return fx && x < y;
  });
  std::ostringstream md;
  md << "# Benchmark results\n\n";
  md << "Dataset " << ds << ", " << spec.n_train << " training points, " << n_runs
     << " runs per cell; score is the mean KL of the best " << spec.best_k
     << " runs (lower is better).\n\n";
  md << "| rank | cell | best-" << spec.best_k << " mean KL | failures | mean s/epoch |\n";
  md << "|---:|:---|---:|---:|---:|\n";
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const CellResult& r = results[order[rank]];
    md << "| " << (rank + 1) << " | " << r.cell.key << " | " << format_g(r.best_k_mean)
       << " | " << r.failures << " | " << format_g(r.mean_seconds_per_epoch) << " |\n";
  }
  write_text_file_atomic((out / "summary.md").string(), md.str());

  return results;
}

}  // namespace ebmreg
