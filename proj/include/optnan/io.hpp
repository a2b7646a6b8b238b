#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "optnan/defense.hpp"
#include "optnan/matrix.hpp"
#include "optnan/network.hpp"
#include "optnan/qp.hpp"

namespace optnan::io {

using nlohmann::json;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---- CSV: one row per line, '.' decimal separator, no header ----

inline std::string matrix_to_csv(const Matrix& a) {
  std::ostringstream out;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (j) out << ',';
      out << format_double(a(i, j));
    }
    out << '\n';
  }
  return out.str();
}

inline Matrix matrix_from_csv(const std::string& text) {
  std::vector<Vec> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Vec row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidInput("matrix_from_csv: empty input");
  Matrix a(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != a.cols())
      throw InvalidInput("matrix_from_csv: ragged rows");
    for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) = rows[i][j];
  }
  return a;
}

// ---- JSON encodings ----

inline json to_json(const Matrix& a) {
  return json{{"rows", a.rows()},
              {"cols", a.cols()},
              {"entries", std::vector<double>(a.entries().begin(),
                                              a.entries().end())}};
}

inline Matrix matrix_from_json(const json& j) {
  return Matrix(j.at("rows").get<std::size_t>(),
                j.at("cols").get<std::size_t>(), j.at("entries").get<Vec>());
}

inline json to_json(const QpProblem& p) {
  return json{{"Q", to_json(p.q_mat)},
              {"q", p.q_vec},
              {"A", to_json(p.a)},
              {"b", p.b}};
}

inline QpProblem qp_problem_from_json(const json& j) {
  return QpProblem::make(matrix_from_json(j.at("Q")), j.at("q").get<Vec>(),
                         matrix_from_json(j.at("A")), j.at("b").get<Vec>());
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::celu: return "celu";
    case Activation::tanh_fn: return "tanh";
    case Activation::linear: return "linear";
  }
  return "linear";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "celu") return Activation::celu;
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "linear") return Activation::linear;
  throw InvalidInput("unknown activation: " + s);
}

// Checkpoint: {arch, seed, weights (nested arrays), defense {enabled, bound}}.
inline json network_to_json(const Network& net, std::uint64_t seed = 0) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    json weights = json::array();
    for (std::size_t i = 0; i < l.w.rows(); ++i) weights.push_back(l.w.row(i));
    layers.push_back(json{{"weights", weights},
                          {"bias", l.b},
                          {"activation", activation_name(l.act)}});
  }
  json arch{{"input_dim", net.input_dim()},
            {"m", net.out_m},
            {"n", net.out_n},
            {"q_scale", net.qp.q_scale},
            {"learned_b", net.qp.learned_b}};
  if (!net.qp.learned_b) arch["fixed_b"] = net.qp.fixed_b;
  return json{{"arch", arch},
              {"seed", seed},
              {"weights", layers},
              {"defense",
               {{"enabled", net.defense.enabled},
                {"bound", net.defense.bound_b}}}};
}

inline Network network_from_json(const json& j) {
  Network net;
  const json& arch = j.at("arch");
  net.out_m = arch.at("m").get<std::size_t>();
  net.out_n = arch.at("n").get<std::size_t>();
  net.qp.q_scale = arch.at("q_scale").get<double>();
  net.qp.learned_b = arch.at("learned_b").get<bool>();
  if (!net.qp.learned_b) net.qp.fixed_b = arch.at("fixed_b").get<Vec>();
  for (const json& lj : j.at("weights")) {
    DenseLayer l;
    const json& w = lj.at("weights");
    const std::size_t rows = w.size();
    const std::size_t cols = w.at(0).size();
    l.w = Matrix(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
      const Vec row = w.at(i).get<Vec>();
      for (std::size_t c = 0; c < cols; ++c) l.w(i, c) = row[c];
    }
    l.b = lj.at("bias").get<Vec>();
    l.act = activation_from_name(lj.at("activation").get<std::string>());
    net.layers.push_back(std::move(l));
  }
  const json& d = j.at("defense");
  net.defense.enabled = d.at("enabled").get<bool>();
  net.defense.bound_b = d.at("bound").get<double>();
  net.validate();
  return net;
}

// ---- small file helpers ----

inline void write_file(const std::filesystem::path& path,
                       const std::string& content) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Attack kappa trace: "epoch,kappa2" rows; non-finite values print as inf.
inline std::string kappa_trace_csv(
    const std::vector<std::pair<int, double>>& trace) {
  std::ostringstream out;
  for (const auto& [epoch, kappa] : trace) {
    out << epoch << ',';
    if (std::isfinite(kappa)) {
      out << format_double(kappa);
    } else {
      out << "inf";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace optnan::io
