// Command-line driver: synthetic data generation, training with an optional
// condition-number defense, attack campaigns, the inequality-infeasibility
// attack, and report aggregation.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "optnan/farkas.hpp"
#include "optnan/harness.hpp"

using namespace optnan;
namespace fs = std::filesystem;

namespace {

Activation parse_activation(const std::string& s) {
  return io::activation_from_name(s);
}

int cmd_gen(const std::string& out, std::size_t dim, std::size_t bins,
            std::size_t train_count, std::size_t test_count,
            std::uint64_t seed) {
  const SyntheticDataset ds =
      gen_dataset(dim, bins, train_count, test_count, seed);
  save_dataset(out, ds);
  std::printf("wrote dataset (%zu train / %zu test, dim %zu, %zu bins) to %s\n",
              ds.train_count, ds.test_count, ds.dim, ds.bins, out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& out,
              const std::string& bound, int epochs, double lr,
              const std::string& activation, std::vector<std::size_t> hidden,
              std::size_t m, std::uint64_t seed) {
  const SyntheticDataset ds = load_dataset(data);
  TrainConfig tc;
  tc.hidden = hidden;
  tc.activation = parse_activation(activation);
  tc.m = m;
  tc.learning_rate = lr;
  tc.epochs = epochs;
  tc.seed = seed;
  if (bound != "off") tc.defense = DefenseConfig::with_bound(std::stod(bound));

  const TrainedModel model = train(ds, tc);
  io::write_file(fs::path(out) / "model.json",
                 io::network_to_json(model.net, seed).dump(2) + "\n");
  io::json rec{{"defense_bound", tc.defense.enabled ? tc.defense.bound_b : 0.0},
               {"final_train_loss", model.record.final_train_loss},
               {"final_test_ce", model.record.final_test_ce},
               {"nonfinite_events", model.record.nonfinite_events},
               {"epoch_train_loss", model.record.epoch_train_loss}};
  io::write_file(fs::path(out) / "train_record.json", rec.dump(2) + "\n");
  std::printf("trained %d epochs: train loss %.4f -> %.4f, test CE %.4f, "
              "nonfinite events %d\n",
              epochs, model.record.epoch_train_loss.front(),
              model.record.final_train_loss, model.record.final_test_ce,
              model.record.nonfinite_events);
  return 0;
}

int cmd_attack(const std::string& model_path, const std::string& out,
               const std::string& method, const std::string& lr_spec,
               int epochs, double linf_eps, int starts, std::uint64_t seed) {
  const Network net =
      io::network_from_json(io::json::parse(io::read_file(model_path)));
  const double bound = net.defense.enabled ? net.defense.bound_b : 0.0;

  // --lr auto sweeps a small rate grid per start and keeps the first hit.
  std::vector<double> rates;
  if (lr_spec == "auto") {
    rates = {1e-1, 1e-2, 1e-3};
  } else {
    rates = {std::stod(lr_spec)};
  }

  std::vector<AttackResult> results;
  Rng root(seed);
  for (int s = 0; s < starts; ++s) {
    AttackResult r;
    bool have_result = false;
    for (double lr : rates) {
      AttackConfig acfg;
      acfg.method = method_from_name(method);
      acfg.learning_rate = lr;
      acfg.max_epochs = epochs;
      if (linf_eps > 0.0) acfg.linf_eps = linf_eps;
      acfg.seed = root.split(s).next_u64();

      Rng rng(acfg.seed);
      for (int attempt = 0; attempt < 8; ++attempt) {
        Vec u0(net.input_dim());
        for (double& v : u0) v = rng.normal();
        try {
          r = run_attack(net, u0, acfg);
          have_result = true;
          break;
        } catch (const InvalidInput&) {
        } catch (const AlreadySingular&) {
        }
      }
      if (have_result && r.success) break;
    }
    if (!have_result)
      throw Error("attack: no usable start for run " + std::to_string(s));
    results.push_back(std::move(r));
  }

  int successes = 0;
  io::json jr = io::json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    successes += results[i].success;
    jr.push_back(attack_result_to_json(results[i]));
    io::write_file(fs::path(out) / "kappa_traces" /
                       ("run" + std::to_string(i) + ".csv"),
                   io::kappa_trace_csv(results[i].kappa_trajectory));
  }
  io::json rec{{"method", method},
               {"defense_bound", bound},
               {"successes", successes},
               {"runs", starts},
               {"results", jr}};
  io::write_file(fs::path(out) / "attack_record.json", rec.dump(2) + "\n");
  std::printf("attack %s: %d/%d successes\n", method.c_str(), successes,
              starts);
  return 0;
}

int cmd_farkas(const std::string& out, std::size_t size, double gamma,
               double nu, double eta, double lr, int epochs,
               std::uint64_t seed) {
  const Network net = make_mlp(2 * size, {16 * size}, Activation::tanh_fn,
                               size, size, false, 0.1, seed);
  Rng rng(seed);
  Rng input = rng.split(1);
  Vec u0(net.input_dim());
  for (double& v : u0) v = input.normal();
  Vec b(size);
  for (std::size_t i = 0; i < size; ++i) b[i] = (i % 2 == 0) ? 1.0 : -2.0;

  const FarkasAttackOutcome outcome =
      run_farkas_attack(net, u0, b, lr, epochs, nu, gamma, eta);

  const Tape t = forward_to_matrix(net, outcome.attack.u_star);
  io::json j{{"success", outcome.attack.success},
             {"epochs_used", outcome.attack.epochs_used},
             {"A", io::to_json(t.a_raw)},
             {"b", b},
             {"certificate",
              {{"y", outcome.certificate.y},
               {"residual_eq", outcome.certificate.residual_eq},
               {"value_bty", outcome.certificate.value_bty},
               {"min_y", outcome.certificate.min_y},
               {"valid", outcome.certificate.valid}}}};
  io::write_file(fs::path(out) / "farkas_result.json", j.dump(2) + "\n");
  std::printf("farkas attack: %s after %d epochs\n",
              outcome.attack.success ? "certificate found" : "no certificate",
              outcome.attack.epochs_used);
  return outcome.attack.success ? 0 : 1;
}

int cmd_report(const std::string& in, const std::string& out) {
  ReportInputs inputs;
  inputs.config = io::json{{"source", in}};

  std::vector<fs::path> attack_records, train_records;
  if (fs::exists(in)) {
    for (const auto& entry : fs::recursive_directory_iterator(in)) {
      if (!entry.is_regular_file()) continue;
      if (entry.path().filename() == "attack_record.json")
        attack_records.push_back(entry.path());
      if (entry.path().filename() == "train_record.json")
        train_records.push_back(entry.path());
    }
  }
  std::sort(attack_records.begin(), attack_records.end());
  std::sort(train_records.begin(), train_records.end());

  for (const fs::path& p : attack_records) {
    const io::json j = io::json::parse(io::read_file(p));
    CampaignCell cell;
    cell.method = method_from_name(j.at("method").get<std::string>());
    cell.defense_bound = j.at("defense_bound").get<double>();
    cell.successes = j.at("successes").get<int>();
    cell.runs = j.at("runs").get<int>();
    inputs.cells.push_back(cell);
    std::vector<AttackResult> results;
    for (const io::json& rj : j.at("results")) {
      AttackResult r;
      r.success = rj.at("success").get<bool>();
      r.epochs_used = rj.at("epochs_used").get<int>();
      r.final_output_nonfinite = rj.at("final_output_nonfinite").get<bool>();
      r.distortion_l2 = rj.at("distortion_l2").get<double>();
      results.push_back(std::move(r));
    }
    inputs.per_cell_results.push_back(std::move(results));
  }
  for (const fs::path& p : train_records) {
    const io::json j = io::json::parse(io::read_file(p));
    TrainRecord rec;
    rec.final_train_loss = j.at("final_train_loss").get<double>();
    rec.final_test_ce = j.at("final_test_ce").get<double>();
    rec.nonfinite_events = j.at("nonfinite_events").get<int>();
    rec.epoch_train_loss = j.at("epoch_train_loss").get<Vec>();
    inputs.training.push_back({j.at("defense_bound").get<double>(), rec});
  }

  const bool ok = write_report(out, inputs);
  std::printf("report: %zu attack cells, %zu training records -> %s (%s)\n",
              inputs.cells.size(), inputs.training.size(), out.c_str(),
              ok ? "ok" : "INVARIANT VIOLATED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attack and defense toolkit for equality-constrained QP "
               "layers in small networks"};
  app.require_subcommand(1);
  // key/value config file with one [section] per subcommand; command-line
  // flags take precedence over file values
  app.set_config("--config", "", "read options from a config file");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::size_t dim = 50, bins = 10, train_count = 30, test_count = 10;
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--dim", dim, "feature dimension");
  gen->add_option("--bins", bins, "number of bins (labels)");
  gen->add_option("--train-count", train_count, "training samples");
  gen->add_option("--test-count", test_count, "test samples");
  gen->add_option("--seed", gen_seed, "root seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  std::string tr_data, tr_out, tr_bound = "off", tr_act = "relu";
  int tr_epochs = 300;
  double tr_lr = 1e-3;
  std::vector<std::size_t> tr_hidden = {64, 64};
  std::size_t tr_m = 8;
  std::uint64_t tr_seed = 1;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--bound", tr_bound, "defense bound B, or 'off'");
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--activation", tr_act, "relu|celu|tanh");
  tr->add_option("--hidden", tr_hidden, "hidden layer widths");
  tr->add_option("--m", tr_m, "equality constraint count");
  tr->add_option("--seed", tr_seed, "root seed");
  tr->add_option("--out", tr_out, "output directory")->required();

  // attack
  auto* at = app.add_subcommand("attack", "attack a trained model");
  std::string at_model, at_out, at_method = "all_zero_row_col";
  std::string at_lr = "1e-2";
  double at_linf = 0.0;
  int at_epochs = 5000, at_starts = 1;
  std::uint64_t at_seed = 1;
  at->add_option("--model", at_model, "model.json checkpoint")->required();
  at->add_option("--method", at_method,
                 "all_zero_row_col|zero_singular_value|condition_grad|"
                 "max_output|target_zero_matrix");
  at->add_option("--lr", at_lr,
                 "attack learning rate, or 'auto' to sweep 1e-1/1e-2/1e-3");
  at->add_option("--epochs", at_epochs, "attack budget");
  at->add_option("--linf-eps", at_linf, "L-inf ball radius (0 = off)");
  at->add_option("--starts", at_starts, "number of attack starts");
  at->add_option("--seed", at_seed, "root seed");
  at->add_option("--out", at_out, "output directory")->required();

  // farkas-attack
  auto* fk = app.add_subcommand("farkas-attack",
                                "inequality-infeasibility attack");
  std::size_t fk_size = 2;
  double fk_gamma = 0.9, fk_nu = 1e-3, fk_eta = 1e-6, fk_lr = 0.1;
  int fk_epochs = 2000;
  std::uint64_t fk_seed = 1;
  std::string fk_out;
  fk->add_option("--size", fk_size, "inequality system size (m = n)");
  fk->add_option("--gamma", fk_gamma, "prerequisite loss weight");
  fk->add_option("--nu", fk_nu, "orthant tightening margin");
  fk->add_option("--eta", fk_eta, "B^T B regularization");
  fk->add_option("--lr", fk_lr, "attack learning rate");
  fk->add_option("--epochs", fk_epochs, "attack budget");
  fk->add_option("--seed", fk_seed, "root seed");
  fk->add_option("--out", fk_out, "output directory")->required();

  // report
  auto* rp = app.add_subcommand("report", "aggregate run records");
  std::string rp_in, rp_out;
  rp->add_option("--in", rp_in, "directory of run records")->required();
  rp->add_option("--out", rp_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen(gen_out, dim, bins, train_count, test_count, gen_seed);
    if (tr->parsed())
      return cmd_train(tr_data, tr_out, tr_bound, tr_epochs, tr_lr, tr_act,
                       tr_hidden, tr_m, tr_seed);
    if (at->parsed())
      return cmd_attack(at_model, at_out, at_method, at_lr, at_epochs, at_linf,
                        at_starts, at_seed);
    if (fk->parsed())
      return cmd_farkas(fk_out, fk_size, fk_gamma, fk_nu, fk_eta, fk_lr,
                        fk_epochs, fk_seed);
    if (rp->parsed()) return cmd_report(rp_in, rp_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
