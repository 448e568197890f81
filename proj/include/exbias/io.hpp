#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "exbias/design.hpp"
#include "exbias/oracle.hpp"
#include "exbias/train.hpp"

namespace exbias {

using json = nlohmann::json;

// I/O failure with the offending path in the message.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline json to_json(const ChoiceEvent& e) {
  return json{{"user", e.user}, {"slate", e.slate.items}, {"chosen", e.chosen_index}, {"policy", to_string(e.slate.policy)}};
}

inline ChoiceEvent event_from_json(const json& j) {
  ChoiceEvent e;
  e.user = j.at("user").get<UserId>();
  e.slate.items = j.at("slate").get<std::vector<ItemId>>();
  e.slate.policy = policy_from_string(j.at("policy").get<std::string>());
  e.chosen_index = j.at("chosen").get<int>();
  return e;
}

// One JSON object per line: {"user", "slate", "chosen" (slate position), "policy"}.
inline std::string to_jsonl(std::span<const ChoiceEvent> events) {
  std::string out;
  for (const auto& e : events) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ChoiceEvent> events_from_jsonl(std::istream& in) {
  std::vector<ChoiceEvent> events;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    events.push_back(event_from_json(json::parse(line)));
  }
  return events;
}

inline json design_to_json(const ItemCatalog& c, const UserSplit& s) {
  return json{{"n_items", c.n_items},           {"set_a", c.set_a},           {"set_b", c.set_b},
              {"bias_set", c.bias_set},         {"n_users", s.n_users},       {"train_users", s.train_users},
              {"eval_users", s.eval_users}};
}

inline std::pair<ItemCatalog, UserSplit> design_from_json(const json& j) {
  return {ItemCatalog::from_sets(j.at("n_items").get<int>(), j.at("set_a").get<std::vector<ItemId>>(),
                                 j.at("set_b").get<std::vector<ItemId>>(), j.at("bias_set").get<std::vector<ItemId>>()),
          UserSplit::from_sets(j.at("n_users").get<int>(), j.at("train_users").get<std::vector<UserId>>(),
                               j.at("eval_users").get<std::vector<UserId>>())};
}

namespace detail {
inline json rows(const std::vector<double>& flat, int n, int d) {
  json out = json::array();
  for (int r = 0; r < n; ++r) {
    out.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(r) * d,
                                      flat.begin() + static_cast<std::ptrdiff_t>(r + 1) * d));
  }
  return out;
}
}  // namespace detail

inline json to_json(const LatentPopulation& p) {
  return json{{"n_users", p.n_users},
              {"n_items", p.n_items},
              {"dim", p.dim},
              {"user_factors", detail::rows(p.user_factors, p.n_users, p.dim)},
              {"item_factors", detail::rows(p.item_factors, p.n_items, p.dim)},
              {"item_intercepts", p.item_intercepts}};
}

inline json to_json(const TrainedModel& m) {
  const ModelParams& p = m.params;
  std::vector<double> users(p.values.begin(), p.values.begin() + static_cast<std::ptrdiff_t>(p.item_factor_offset()));
  std::vector<double> items(p.values.begin() + static_cast<std::ptrdiff_t>(p.item_factor_offset()),
                            p.values.begin() + static_cast<std::ptrdiff_t>(p.intercept_offset()));
  std::vector<double> intercepts(p.values.begin() + static_cast<std::ptrdiff_t>(p.intercept_offset()),
                                 p.values.begin() + static_cast<std::ptrdiff_t>(p.nest_offset()));
  std::vector<double> nests(p.values.begin() + static_cast<std::ptrdiff_t>(p.nest_offset()),
                            p.values.begin() + static_cast<std::ptrdiff_t>(p.offset_index()));
  return json{{"kind", to_string(m.kind)},
              {"shape", {{"n_users", p.n_users}, {"n_items", p.n_items}, {"dim", p.dim}, {"n_nests", p.n_nests}}},
              {"user_factors", detail::rows(users, p.n_users, p.dim)},
              {"item_factors", detail::rows(items, p.n_items, p.dim)},
              {"item_intercepts", intercepts},
              {"nest_logits", nests},
              {"bl_offset", p.bl_offset()},
              {"final_loss", m.final_loss},
              {"loss_trace", m.loss_trace}};
}

inline TrainedModel trained_model_from_json(const json& j) {
  TrainedModel m;
  m.kind = model_kind_from_string(j.at("kind").get<std::string>());
  const auto& s = j.at("shape");
  m.params = ModelParams(s.at("n_users").get<int>(), s.at("n_items").get<int>(), s.at("dim").get<int>(),
                         s.at("n_nests").get<int>());
  std::vector<double> flat;
  for (const auto& row : j.at("user_factors")) {
    for (double x : row) flat.push_back(x);
  }
  for (const auto& row : j.at("item_factors")) {
    for (double x : row) flat.push_back(x);
  }
  for (double x : j.at("item_intercepts")) flat.push_back(x);
  for (double x : j.at("nest_logits")) flat.push_back(x);
  flat.push_back(j.at("bl_offset").get<double>());
  if (flat.size() != m.params.values.size()) throw ConfigError("trained model JSON does not match its shape");
  m.params.values = std::move(flat);
  m.final_loss = j.at("final_loss").get<double>();
  m.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return m;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// treated.jsonl, control.jsonl, design.json and pair.json under `dir`.
inline void write_pair(const DatasetPair& pair, const std::filesystem::path& dir, std::uint64_t seed, double rho,
                       int quartile_size) {
  std::filesystem::create_directories(dir);
  write_text(dir / "treated.jsonl", to_jsonl(pair.treated.events));
  write_text(dir / "control.jsonl", to_jsonl(pair.control.events));
  write_text(dir / "design.json", design_to_json(*pair.treated.catalog, *pair.treated.split).dump(2) + "\n");
  const json manifest{{"label", to_string(pair.label)}, {"seed", seed}, {"rho", rho}, {"quartile_size", quartile_size}};
  write_text(dir / "pair.json", manifest.dump(2) + "\n");
}

}  // namespace exbias
