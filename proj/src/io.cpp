// SPDX-License-Identifier: Apache-2.0
#include "moecache/io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace moecache {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json mat_to_json(const Mat& m) {
  json arr = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) arr.push_back(m(i, j));
  }
  return arr;
}

Mat mat_from_json(const json& arr, int rows, int cols) {
  if (static_cast<int>(arr.size()) != rows * cols) {
    throw std::runtime_error("checkpoint: array size mismatch");
  }
  Mat m(rows, cols);
  int k = 0;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = arr[k++].get<Real>();
  }
  return m;
}

json vec_to_json(const Vec& v) {
  json arr = json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Vec vec_from_json(const json& arr) {
  Vec v(static_cast<int>(arr.size()));
  for (int i = 0; i < v.size(); ++i) v[i] = arr[i].get<Real>();
  return v;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return json::parse(in);
}

}  // namespace

std::string format_real(Real v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

void save_checkpoint(const MoEModel& model, const std::string& path) {
  json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "moe-model";
  j["config"] = {
      {"layers", model.config.layers},
      {"experts", model.config.experts},
      {"top_k", model.config.top_k},
      {"hidden_dim", model.config.hidden_dim},
      {"ff_dim", model.config.ff_dim},
      {"vocab", model.config.vocab},
      {"max_seq_len", model.config.max_seq_len},
      {"activation", model.config.activation == Activation::kSiLU ? "silu" : "relu"},
      {"routing", model.config.routing == RoutingMode::kHard ? "hard" : "soft"},
  };
  json params;
  params["embed"] = mat_to_json(model.embed);
  params["head"] = mat_to_json(model.head);
  json layers = json::array();
  for (const MoELayer& layer : model.layers) {
    json jl;
    jl["router"] = mat_to_json(layer.w_router);
    json experts = json::array();
    for (const ExpertWeights& ew : layer.experts) {
      experts.push_back({{"gate", mat_to_json(ew.w_gate)},
                         {"up", mat_to_json(ew.w_up)},
                         {"down", mat_to_json(ew.w_down)}});
    }
    jl["experts"] = experts;
    layers.push_back(jl);
  }
  params["layers"] = layers;
  j["params"] = params;
  write_text(path, j.dump(2) + "\n");
}

MoEModel load_checkpoint(const std::string& path) {
  const json j = read_json(path);
  if (j.at("format_version").get<int>() != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version");
  }
  if (j.at("kind").get<std::string>() != "moe-model") {
    throw std::runtime_error("checkpoint: not a model checkpoint");
  }
  const json& c = j.at("config");
  MoEModel m;
  m.config.layers = c.at("layers").get<int>();
  m.config.experts = c.at("experts").get<int>();
  m.config.top_k = c.at("top_k").get<int>();
  m.config.hidden_dim = c.at("hidden_dim").get<int>();
  m.config.ff_dim = c.at("ff_dim").get<int>();
  m.config.vocab = c.at("vocab").get<int>();
  m.config.max_seq_len = c.at("max_seq_len").get<int>();
  m.config.activation =
      c.at("activation").get<std::string>() == "relu" ? Activation::kReLU : Activation::kSiLU;
  m.config.routing =
      c.at("routing").get<std::string>() == "soft" ? RoutingMode::kSoft : RoutingMode::kHard;
  m.config.validate();
  const json& p = j.at("params");
  m.embed = mat_from_json(p.at("embed"), m.config.vocab, m.config.hidden_dim);
  m.head = mat_from_json(p.at("head"), m.config.vocab, m.config.hidden_dim);
  for (const json& jl : p.at("layers")) {
    MoELayer layer;
    layer.w_router = mat_from_json(jl.at("router"), m.config.experts, m.config.hidden_dim);
    for (const json& je : jl.at("experts")) {
      ExpertWeights ew;
      ew.w_gate = mat_from_json(je.at("gate"), m.config.ff_dim, m.config.hidden_dim);
      ew.w_up = mat_from_json(je.at("up"), m.config.ff_dim, m.config.hidden_dim);
      ew.w_down = mat_from_json(je.at("down"), m.config.hidden_dim, m.config.ff_dim);
      layer.experts.push_back(std::move(ew));
    }
    m.layers.push_back(std::move(layer));
  }
  if (static_cast<int>(m.layers.size()) != m.config.layers) {
    throw std::runtime_error("checkpoint: layer count mismatch");
  }
  return m;
}

void save_predictor(const PredictorMLP& mlp, int input_dim, const std::string& path) {
  json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "predictor-mlp";
  j["config"] = {{"input_dim", input_dim},
                 {"hidden_dim", static_cast<int>(mlp.w1.rows())},
                 {"layers", mlp.layers},
                 {"experts", mlp.experts}};
  j["params"] = {{"w1", mat_to_json(mlp.w1)},
                 {"b1", vec_to_json(mlp.b1)},
                 {"w2", mat_to_json(mlp.w2)},
                 {"b2", vec_to_json(mlp.b2)}};
  write_text(path, j.dump(2) + "\n");
}

PredictorMLP load_predictor(const std::string& path) {
  const json j = read_json(path);
  if (j.at("kind").get<std::string>() != "predictor-mlp") {
    throw std::runtime_error("checkpoint: not a predictor checkpoint");
  }
  const json& c = j.at("config");
  PredictorMLP mlp;
  mlp.layers = c.at("layers").get<int>();
  mlp.experts = c.at("experts").get<int>();
  const int input_dim = c.at("input_dim").get<int>();
  const int hidden = c.at("hidden_dim").get<int>();
  const json& p = j.at("params");
  mlp.w1 = mat_from_json(p.at("w1"), hidden, input_dim);
  mlp.b1 = vec_from_json(p.at("b1"));
  mlp.w2 = mat_from_json(p.at("w2"), mlp.layers * mlp.experts, hidden);
  mlp.b2 = vec_from_json(p.at("b2"));
  return mlp;
}

void append_trace_jsonl(const RoutingTrace& trace, const std::string& path) {
  json j;
  j["layers"] = trace.layers;
  j["tokens"] = trace.tokens;
  j["experts"] = trace.experts;
  j["top_k"] = trace.top_k;
  json probs = json::array();
  json requests = json::array();
  for (int l = 0; l < trace.layers; ++l) {
    json pl = json::array();
    json rl = json::array();
    for (int t = 0; t < trace.tokens; ++t) {
      json row = json::array();
      for (int e = 0; e < trace.experts; ++e) row.push_back(trace.probs[l](t, e));
      pl.push_back(row);
      rl.push_back(trace.requests[l][t]);
    }
    probs.push_back(pl);
    requests.push_back(rl);
  }
  j["p"] = probs;
  j["requests"] = requests;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open for appending: " + path);
  out << j.dump() << "\n";
}

std::vector<RoutingTrace> load_traces_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<RoutingTrace> traces;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    RoutingTrace tr;
    tr.layers = j.at("layers").get<int>();
    tr.tokens = j.at("tokens").get<int>();
    tr.experts = j.at("experts").get<int>();
    tr.top_k = j.at("top_k").get<int>();
    for (int l = 0; l < tr.layers; ++l) {
      Mat p(tr.tokens, tr.experts);
      std::vector<std::vector<int>> reqs;
      for (int t = 0; t < tr.tokens; ++t) {
        const json& row = j.at("p")[l][t];
        for (int e = 0; e < tr.experts; ++e) p(t, e) = row[e].get<Real>();
        reqs.push_back(j.at("requests")[l][t].get<std::vector<int>>());
      }
      tr.probs.push_back(std::move(p));
      tr.requests.push_back(std::move(reqs));
    }
    tr.validate();
    traces.push_back(std::move(tr));
  }
  return traces;
}

void save_dataset_jsonl(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  auto dump_split = [&](const std::vector<Sequence>& seqs, const char* split) {
    for (const Sequence& s : seqs) {
      json j;
      j["split"] = split;
      j["topic"] = s.topic;
      j["tokens"] = s.tokens;
      j["targets"] = s.targets;
      out << j.dump() << "\n";
    }
  };
  dump_split(data.train, "train");
  dump_split(data.val, "val");
}

void save_metrics_csv(const MetricsHistory& history, const std::string& path) {
  std::ostringstream os;
  os << "epoch,l_nll,l_cs,l_rm,transfers_per_layer,wall_time_s\n";
  for (const EpochMetrics& em : history.epochs) {
    os << em.epoch << "," << format_real(em.l_nll) << "," << format_real(em.l_cs) << ","
       << format_real(em.l_rm) << "," << format_real(em.transfers_per_layer) << ","
       << format_real(em.wall_time_s) << "\n";
  }
  write_text(path, os.str());
}

namespace {
void sweep_row_tail(std::ostringstream& os, const SweepRow& r) {
  os << r.policy << "," << format_real(r.gamma) << "," << r.capacity << ","
     << (r.prefetch ? 1 : 0) << "," << format_real(r.transfers_per_layer) << ","
     << format_real(r.tokens_per_s_est) << "\n";
}
}  // namespace

void save_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ostringstream os;
  os << "policy,gamma,C,prefetch,transfers_per_layer,tokens_per_s_est\n";
  for (const SweepRow& r : rows) sweep_row_tail(os, r);
  write_text(path, os.str());
}

void save_grid_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ostringstream os;
  os << "lambda_cs,lambda_rm,policy,gamma,C,prefetch,transfers_per_layer,tokens_per_s_est\n";
  for (const SweepRow& r : rows) {
    os << format_real(r.lambda_cs) << "," << format_real(r.lambda_rm) << ",";
    sweep_row_tail(os, r);
  }
  write_text(path, os.str());
}

}  // namespace moecache
