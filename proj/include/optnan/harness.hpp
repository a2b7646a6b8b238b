#pragma once

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include "optnan/attack.hpp"
#include "optnan/io.hpp"
#include "optnan/network.hpp"
#include "optnan/rng.hpp"

namespace optnan {

// ---- synthetic bin-assignment data ----

struct SyntheticDataset {
  std::size_t dim = 0;
  std::size_t bins = 0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::uint64_t seed = 0;
  std::vector<Vec> features;             // train rows then test rows
  std::vector<std::size_t> labels;

  std::size_t total() const { return train_count + test_count; }
};

// Standard-Gaussian features, uniform bin labels, all from one seed.
inline SyntheticDataset gen_dataset(std::size_t dim, std::size_t bins,
                                    std::size_t train_count,
                                    std::size_t test_count,
                                    std::uint64_t seed) {
  if (dim == 0 || bins == 0 || train_count == 0)
    throw InvalidInput("gen_dataset: dimensions must be positive");
  SyntheticDataset ds;
  ds.dim = dim;
  ds.bins = bins;
  ds.train_count = train_count;
  ds.test_count = test_count;
  ds.seed = seed;
  Rng root(seed);
  Rng feat = root.split(0);
  Rng lab = root.split(1);
  for (std::size_t s = 0; s < train_count + test_count; ++s) {
    Vec x(dim);
    for (double& v : x) v = feat.normal();
    ds.features.push_back(std::move(x));
    ds.labels.push_back(lab.below(bins));
  }
  return ds;
}

// ---- training ----

struct TrainConfig {
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::relu;
  std::size_t m = 8;  // equality count; bins give n
  double q_scale = 0.1;
  double learning_rate = 1e-3;  // Adam
  int epochs = 300;
  DefenseConfig defense = DefenseConfig::off();
  std::uint64_t seed = 0;
};

struct TrainRecord {
  Vec epoch_train_loss;      // mean CE over non-skipped samples
  double final_train_loss = 0.0;
  double final_test_ce = 0.0;
  int nonfinite_events = 0;  // forward failures seen during training/eval
  int skipped_samples = 0;
};

struct TrainedModel {
  Network net;
  TrainRecord record;
};

namespace detail {

struct AdamState {
  std::vector<Matrix> mw, vw;
  std::vector<Vec> mb, vb;
  int t = 0;

  explicit AdamState(const Network& net) {
    for (const auto& l : net.layers) {
      mw.emplace_back(l.w.rows(), l.w.cols());
      vw.emplace_back(l.w.rows(), l.w.cols());
      mb.emplace_back(l.b.size(), 0.0);
      vb.emplace_back(l.b.size(), 0.0);
    }
  }

  void step(Network& net, const Grads& g, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& w = net.layers[l].w;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = g.w[l].entries()[i];
        double& m = mw[l].entries()[i];
        double& v = vw[l].entries()[i];
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        w.entries()[i] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
      auto& b = net.layers[l].b;
      for (std::size_t i = 0; i < b.size(); ++i) {
        const double grad = g.b[l][i];
        double& m = mb[l][i];
        double& v = vb[l][i];
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        b[i] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
    }
  }
};

inline void accumulate(Grads& acc, const Grads& g) {
  if (acc.w.empty()) {
    acc = g;
    return;
  }
  for (std::size_t l = 0; l < g.w.size(); ++l) {
    for (std::size_t i = 0; i < g.w[l].size(); ++i)
      acc.w[l].entries()[i] += g.w[l].entries()[i];
    for (std::size_t i = 0; i < g.b[l].size(); ++i) acc.b[l][i] += g.b[l][i];
  }
}

inline void scale(Grads& g, double c) {
  for (auto& w : g.w)
    for (double& v : w.entries()) v *= c;
  for (auto& b : g.b)
    for (double& v : b) v *= c;
}

}  // namespace detail

// Mean test cross-entropy; forward failures are skipped and counted.
inline double evaluate_test_ce(const Network& net, const SyntheticDataset& ds,
                               int* nonfinite_events = nullptr) {
  double sum = 0.0;
  int used = 0;
  for (std::size_t s = ds.train_count; s < ds.total(); ++s) {
    const Tape t = forward(net, ds.features[s]);
    if (detect_failure(t)) {
      if (nonfinite_events) ++*nonfinite_events;
      continue;
    }
    sum += softmax_cross_entropy(t, ds.labels[s]).loss;
    ++used;
  }
  return used > 0 ? sum / used : std::numeric_limits<double>::quiet_NaN();
}

// Full-batch Adam over the train split. With the defense enabled no
// non-finite loss is ever observed; without it, failing samples are skipped
// for the epoch and recorded.
inline TrainedModel train(const SyntheticDataset& ds, const TrainConfig& cfg) {
  TrainedModel out;
  out.net = make_mlp(ds.dim, cfg.hidden, cfg.activation, cfg.m, ds.bins,
                     /*learned_b=*/true, cfg.q_scale, cfg.seed);
  out.net.defense = cfg.defense;

  detail::AdamState adam(out.net);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Grads acc;
    double loss_sum = 0.0;
    int used = 0;
    for (std::size_t s = 0; s < ds.train_count; ++s) {
      const Tape t = forward(out.net, ds.features[s]);
      if (detect_failure(t)) {
        ++out.record.nonfinite_events;
        ++out.record.skipped_samples;
        continue;
      }
      const CrossEntropy ce = softmax_cross_entropy(t, ds.labels[s]);
      loss_sum += ce.loss;
      detail::accumulate(acc, backward_from_qp(out.net, t, ce.grad_qp_out));
      ++used;
    }
    if (used == 0) {
      out.record.epoch_train_loss.push_back(
          std::numeric_limits<double>::quiet_NaN());
      continue;  // nothing usable this epoch
    }
    detail::scale(acc, 1.0 / used);
    adam.step(out.net, acc, cfg.learning_rate);
    out.record.epoch_train_loss.push_back(loss_sum / used);
  }
  out.record.final_train_loss = out.record.epoch_train_loss.empty()
                                    ? 0.0
                                    : out.record.epoch_train_loss.back();
  out.record.final_test_ce =
      evaluate_test_ce(out.net, ds, &out.record.nonfinite_events);
  return out;
}

// ---- attack campaign ----

struct CampaignCell {
  AttackMethod method;
  double defense_bound = 0.0;  // 0 = defense off
  int successes = 0;
  int runs = 0;
  double mean_epochs_to_success = 0.0;
  double max_kappa_seen = 0.0;

  double success_rate() const {
    return runs > 0 ? static_cast<double>(successes) / runs : 0.0;
  }
};

struct CampaignConfig {
  std::vector<AttackMethod> methods = {AttackMethod::all_zero_row_col};
  std::vector<double> defense_bounds = {0.0};  // 0 = off
  int starts_per_model = 2;
  double learning_rate = 1e-2;
  int max_epochs = 5000;
  int defended_max_epochs = 0;  // 0: same as max_epochs
  std::uint64_t seed = 0;
  int threads = 1;
};

inline const char* method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::all_zero_row_col: return "all_zero_row_col";
    case AttackMethod::zero_singular_value: return "zero_singular_value";
    case AttackMethod::condition_grad: return "condition_grad";
    case AttackMethod::max_output: return "max_output";
    case AttackMethod::target_zero_matrix: return "target_zero_matrix";
  }
  return "?";
}

inline AttackMethod method_from_name(const std::string& s) {
  for (AttackMethod m :
       {AttackMethod::all_zero_row_col, AttackMethod::zero_singular_value,
        AttackMethod::condition_grad, AttackMethod::max_output,
        AttackMethod::target_zero_matrix}) {
    if (s == method_name(m)) return m;
  }
  throw InvalidInput("unknown attack method: " + s);
}

// One attack run against a model as deployed (optionally re-armored with a
// defense bound before the attack).
inline AttackResult campaign_run(const Network& model, double defense_bound,
                                 AttackMethod method,
                                 const CampaignConfig& cfg,
                                 std::uint64_t run_seed) {
  Network deployed = model;
  if (defense_bound > 0.0)
    deployed.defense = DefenseConfig::with_bound(defense_bound);

  AttackConfig acfg;
  acfg.method = method;
  acfg.learning_rate = cfg.learning_rate;
  acfg.max_epochs = (defense_bound > 0.0 && cfg.defended_max_epochs > 0)
                        ? cfg.defended_max_epochs
                        : cfg.max_epochs;
  acfg.seed = run_seed;

  Rng rng(run_seed);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Vec u0(deployed.input_dim());
    for (double& v : u0) v = rng.normal();
    try {
      return run_attack(deployed, u0, acfg);
    } catch (const InvalidInput&) {
      // model already failing at this start; redraw
    } catch (const AlreadySingular&) {
      // zero-sv target needs a non-singular start; redraw
    }
  }
  throw Error("campaign_run: no usable attack start found");
}

struct CampaignOutcome {
  std::vector<CampaignCell> cells;
  // one trace per (cell, run), indexed as cells[i].runs entries
  std::vector<std::vector<AttackResult>> per_cell_results;
};

inline CampaignOutcome attack_campaign(std::span<const Network> models,
                                       const CampaignConfig& cfg) {
  CampaignOutcome out;
  struct Job {
    std::size_t cell;
    const Network* model;
    double bound;
    AttackMethod method;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  Rng root(cfg.seed);
  std::size_t cell_index = 0;
  for (double bound : cfg.defense_bounds) {
    for (AttackMethod method : cfg.methods) {
      CampaignCell cell;
      cell.method = method;
      cell.defense_bound = bound;
      out.cells.push_back(cell);
      out.per_cell_results.emplace_back();
      for (std::size_t mi = 0; mi < models.size(); ++mi) {
        for (int s = 0; s < cfg.starts_per_model; ++s) {
          // Seed by (model, start) only: every method and defense bound in
          // the campaign attacks the same inputs.
          jobs.push_back(Job{cell_index, &models[mi], bound, method,
                             root.split(mi).split(s).next_u64()});
        }
      }
      ++cell_index;
    }
  }

  std::vector<AttackResult> results(jobs.size());
  const int workers =
      std::max(1, std::min<int>(cfg.threads,
                                std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j)
      results[j] = campaign_run(*jobs[j].model, jobs[j].bound, jobs[j].method,
                                cfg, jobs[j].seed);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++)
          results[j] = campaign_run(*jobs[j].model, jobs[j].bound,
                                    jobs[j].method, cfg, jobs[j].seed);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    CampaignCell& cell = out.cells[jobs[j].cell];
    const AttackResult& r = results[j];
    ++cell.runs;
    if (r.success) {
      ++cell.successes;
      cell.mean_epochs_to_success += r.epochs_used;
    }
    for (const auto& [e, k] : r.kappa_trajectory)
      if (std::isfinite(k)) cell.max_kappa_seen = std::max(cell.max_kappa_seen, k);
    out.per_cell_results[jobs[j].cell].push_back(r);
  }
  for (auto& cell : out.cells)
    if (cell.successes > 0) cell.mean_epochs_to_success /= cell.successes;
  return out;
}

// ---- report emission ----

inline io::json attack_result_to_json(const AttackResult& r) {
  io::json j{{"success", r.success},
             {"epochs_used", r.epochs_used},
             {"final_output_nonfinite", r.final_output_nonfinite},
             {"distortion_l2", r.distortion_l2}};
  const double fk = r.kappa_trajectory.empty()
                        ? 0.0
                        : r.kappa_trajectory.back().second;
  j["final_kappa2"] = std::isfinite(fk) ? io::json(fk) : io::json("inf");
  return j;
}

struct ReportInputs {
  io::json config;
  std::vector<CampaignCell> cells;
  std::vector<std::vector<AttackResult>> per_cell_results;
  // (bound, record) pairs; bound 0 = undefended
  std::vector<std::pair<double, TrainRecord>> training;
};

// Writes results.json, table1.csv, table2.csv and kappa_traces/*.csv.
// Returns false when an embedded invariant was violated (a defended cell
// with successes, or non-finite events under an enabled defense).
inline bool write_report(const std::filesystem::path& dir,
                         const ReportInputs& in) {
  bool ok = true;

  io::json results;
  results["config"] = in.config;
  results["cells"] = io::json::array();
  for (std::size_t c = 0; c < in.cells.size(); ++c) {
    const CampaignCell& cell = in.cells[c];
    io::json jc{{"method", method_name(cell.method)},
                {"defense_bound", cell.defense_bound},
                {"successes", cell.successes},
                {"runs", cell.runs},
                {"success_rate", cell.success_rate()}};
    jc["results"] = io::json::array();
    if (c < in.per_cell_results.size())
      for (const AttackResult& r : in.per_cell_results[c])
        jc["results"].push_back(attack_result_to_json(r));
    results["cells"].push_back(jc);
    if (cell.defense_bound > 0.0 && cell.successes > 0) ok = false;
  }
  results["training"] = io::json::array();
  for (const auto& [bound, rec] : in.training) {
    results["training"].push_back(
        io::json{{"defense_bound", bound},
                 {"final_train_loss", rec.final_train_loss},
                 {"final_test_ce", rec.final_test_ce},
                 {"nonfinite_events", rec.nonfinite_events},
                 {"epoch_train_loss", rec.epoch_train_loss}});
    if (bound > 0.0 && rec.nonfinite_events > 0) ok = false;
  }
  io::write_file(dir / "results.json", results.dump(2) + "\n");

  std::ostringstream t1;
  t1 << "method,defense,success_rate,successes,runs\n";
  for (const CampaignCell& cell : in.cells) {
    t1 << method_name(cell.method) << ','
       << (cell.defense_bound > 0.0 ? io::format_double(cell.defense_bound)
                                    : std::string("off"))
       << ',' << io::format_double(cell.success_rate()) << ','
       << cell.successes << ',' << cell.runs << '\n';
  }
  io::write_file(dir / "table1.csv", t1.str());

  std::ostringstream t2;
  t2 << "defense,final_train_loss,final_test_ce,nonfinite_events\n";
  for (const auto& [bound, rec] : in.training) {
    t2 << (bound > 0.0 ? io::format_double(bound) : std::string("off")) << ','
       << io::format_double(rec.final_train_loss) << ','
       << io::format_double(rec.final_test_ce) << ',' << rec.nonfinite_events
       << '\n';
  }
  io::write_file(dir / "table2.csv", t2.str());

  for (std::size_t c = 0; c < in.per_cell_results.size(); ++c) {
    for (std::size_t r = 0; r < in.per_cell_results[c].size(); ++r) {
      const auto& res = in.per_cell_results[c][r];
      std::ostringstream name;
      name << method_name(in.cells[c].method) << "_"
           << (in.cells[c].defense_bound > 0.0
                   ? "B" + std::to_string(static_cast<int>(
                         in.cells[c].defense_bound))
                   : std::string("off"))
           << "_run" << r << ".csv";
      io::write_file(dir / "kappa_traces" / name.str(),
                     io::kappa_trace_csv(res.kappa_trajectory));
    }
  }
  return ok;
}

// ---- dataset (de)serialization ----

inline void save_dataset(const std::filesystem::path& dir,
                         const SyntheticDataset& ds) {
  Matrix feats(ds.total(), ds.dim);
  for (std::size_t s = 0; s < ds.total(); ++s)
    for (std::size_t j = 0; j < ds.dim; ++j) feats(s, j) = ds.features[s][j];
  io::write_file(dir / "features.csv", io::matrix_to_csv(feats));

  std::ostringstream labels;
  for (std::size_t lab : ds.labels) labels << lab << '\n';
  io::write_file(dir / "labels.csv", labels.str());

  io::write_file(dir / "meta.json",
                 io::json{{"dim", ds.dim},
                          {"bins", ds.bins},
                          {"train_count", ds.train_count},
                          {"test_count", ds.test_count},
                          {"seed", ds.seed}}
                         .dump(2) +
                     "\n");
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  SyntheticDataset ds;
  const io::json meta = io::json::parse(io::read_file(dir / "meta.json"));
  ds.dim = meta.at("dim").get<std::size_t>();
  ds.bins = meta.at("bins").get<std::size_t>();
  ds.train_count = meta.at("train_count").get<std::size_t>();
  ds.test_count = meta.at("test_count").get<std::size_t>();
  ds.seed = meta.at("seed").get<std::uint64_t>();

  const Matrix feats = io::matrix_from_csv(io::read_file(dir / "features.csv"));
  if (feats.rows() != ds.total() || feats.cols() != ds.dim)
    throw InvalidInput("load_dataset: features shape mismatch");
  for (std::size_t s = 0; s < feats.rows(); ++s) ds.features.push_back(feats.row(s));

  std::istringstream labs(io::read_file(dir / "labels.csv"));
  std::string line;
  while (std::getline(labs, line))
    if (!line.empty()) ds.labels.push_back(std::stoul(line));
  if (ds.labels.size() != ds.total())
    throw InvalidInput("load_dataset: label count mismatch");
  return ds;
}

}  // namespace optnan
