// SPDX-License-Identifier: Apache-2.0
//
// Ablation matrix: a grid file names axes whose values are patches over a
// base pipeline configuration. The runner trains the cross product over a
// list of seeds, writes one report per (cell, seed) plus a per-cell mean,
// and rolls everything up into a CSV. A failing cell is recorded and the
// matrix moves on.
#pragma once

#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/error.hpp"
#include "ear/io.hpp"
#include "ear/pipeline.hpp"

namespace ear::ablation {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct AxisValue {
  std::string label;
  json patch;  // merged into the base pipeline config
};

struct Axis {
  std::string name;
  std::vector<AxisValue> values;
};

struct Grid {
  json base = json::object();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<Axis> axes;
};

/// Builds {"a": {"b": v}} from the dotted path "a.b".
inline json patch_at(const std::string& path, const json& value) {
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) {
    if (k.empty()) throw ConfigError("ablation: empty key in path '" + path + "'");
    keys.push_back(k);
  }
  if (keys.empty()) throw ConfigError("ablation: empty axis path");
  json out = value;
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) out = json{{*it, out}};
  return out;
}

inline std::string value_label(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

/// Axis forms: {"name", "path", "values": [scalars]} sets one field;
/// {"name", "values": [{"label", "set": {...}}]} applies arbitrary patches.
inline Grid parse_grid(const json& j) {
  if (!j.is_object()) throw ConfigError("ablation grid must be a JSON object");
  Grid g;
  if (j.contains("base")) g.base = j.at("base");
  if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (g.seeds.empty()) throw ConfigError("ablation grid: no seeds");
  for (const auto& a : j.value("axes", json::array())) {
    Axis axis;
    axis.name = a.at("name").get<std::string>();
    const auto& values = a.at("values");
    if (!values.is_array() || values.empty()) throw ConfigError("ablation axis " + axis.name + ": no values");
    for (const auto& v : values) {
      if (a.contains("path")) {
        axis.values.push_back({value_label(v), patch_at(a.at("path").get<std::string>(), v)});
      } else {
        if (!v.is_object() || !v.contains("label") || !v.contains("set"))
          throw ConfigError("ablation axis " + axis.name + ": values need 'label' and 'set' when no 'path' is given");
        axis.values.push_back({v.at("label").get<std::string>(), v.at("set")});
      }
    }
    g.axes.push_back(std::move(axis));
  }
  // fail before training anything if the base itself is malformed
  pipeline::PipelineConfig probe;
  json merged = probe;
  pipeline::merge_json(merged, g.base);
  (void)merged.get<pipeline::PipelineConfig>();
  return g;
}

struct Cell {
  std::string name;                                   // "axis=label,axis=label"
  std::vector<std::pair<std::string, std::string>> labels;
  json config;                                        // merged pipeline config
};

inline std::vector<Cell> expand(const Grid& g) {
  json base = pipeline::PipelineConfig{};
  pipeline::merge_json(base, g.base);
  std::vector<Cell> cells{{"", {}, base}};
  for (const auto& axis : g.axes) {
    std::vector<Cell> next;
    for (const auto& c : cells)
      for (const auto& v : axis.values) {
        Cell n = c;
        n.labels.emplace_back(axis.name, v.label);
        n.name += (n.name.empty() ? "" : ",") + axis.name + "=" + v.label;
        pipeline::merge_json(n.config, v.patch);
        next.push_back(std::move(n));
      }
    cells = std::move(next);
  }
  if (cells.size() == 1 && cells[0].name.empty()) cells[0].name = "base";
  return cells;
}

using CellRunner = std::function<pipeline::PipelineResult(const pipeline::PipelineConfig&, std::uint64_t seed)>;

/// Default runner. Cells that share synthetic, generator and pre-training
/// settings reuse the same pre-trained generator labels per seed.
class SyntheticRunner {
 public:
  pipeline::PipelineResult operator()(const pipeline::PipelineConfig& base, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = pipeline::seeded(base, seed);
    auto corpus = io::synthesize_corpus(cfg.synthetic);
    const std::string key = json{{"s", cfg.synthetic}, {"g", cfg.generator}, {"p", cfg.pretrain}}.dump();
    auto it = cache_->find(key);
    if (it == cache_->end()) it = cache_->emplace(key, pipeline::pseudo_stage(corpus, cfg)).first;
    auto r = pipeline::parser_stage(corpus, it->second, cfg);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

 private:
  // shared so copies made by std::function keep one cache
  std::shared_ptr<std::map<std::string, io::LabelSet>> cache_ = std::make_shared<std::map<std::string, io::LabelSet>>();
};

struct CellOutcome {
  Cell cell;
  std::vector<pipeline::PipelineResult> runs;
  std::vector<std::pair<std::uint64_t, std::string>> failures;
  std::optional<pipeline::PipelineResult> mean;  // over successful seeds
};

inline metrics::LevelScores mean_level(const std::vector<const metrics::LevelScores*>& xs) {
  metrics::LevelScores m;
  for (const auto* x : xs) {
    m.audio += x->audio;
    m.visual += x->visual;
    m.audio_visual += x->audio_visual;
    m.type += x->type;
    m.event += x->event;
  }
  const double n = static_cast<double>(xs.size());
  m.audio /= n;
  m.visual /= n;
  m.audio_visual /= n;
  m.type /= n;
  m.event /= n;
  return m;
}

inline metrics::MetricsReport mean_report(const std::vector<const metrics::MetricsReport*>& rs) {
  std::vector<const metrics::LevelScores*> seg, evt;
  metrics::MetricsReport m;
  for (const auto* r : rs) {
    seg.push_back(&r->segment);
    evt.push_back(&r->event);
    m.average += r->average / static_cast<double>(rs.size());
  }
  m.segment = mean_level(seg);
  m.event = mean_level(evt);
  m.videos = rs.front()->videos;
  return m;
}

inline pipeline::PipelineResult mean_result(const std::vector<pipeline::PipelineResult>& runs) {
  std::vector<const metrics::MetricsReport*> p, q;
  pipeline::PipelineResult m;
  for (const auto& r : runs) {
    p.push_back(&r.pseudo);
    q.push_back(&r.parser);
    m.seconds += r.seconds;
  }
  m.pseudo = mean_report(p);
  m.parser = mean_report(q);
  return m;
}

inline std::string cell_dir_name(std::size_t index, const std::string& name) {
  std::ostringstream os;
  os << std::setw(3) << std::setfill('0') << index << "_";
  for (char c : name) os << (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_');
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline void write_rollup(const Grid& g, const std::vector<CellOutcome>& outcomes, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IngestionError("cannot write " + path.string());
  os << "cell";
  for (const auto& a : g.axes) os << "," << csv_field(a.name);
  os << ",seeds_ok,seeds_failed,pseudo_seg_type,seg_a,seg_v,seg_av,seg_type,seg_event,"
        "evt_a,evt_v,evt_av,evt_type,evt_event,average,status\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& o : outcomes) {
    os << csv_field(o.cell.name);
    for (const auto& [_, label] : o.cell.labels) os << "," << csv_field(label);
    os << "," << o.runs.size() << "," << o.failures.size();
    if (o.mean) {
      const auto& s = o.mean->parser.segment;
      const auto& e = o.mean->parser.event;
      os << "," << o.mean->pseudo.segment.type << "," << s.audio << "," << s.visual << "," << s.audio_visual << ","
         << s.type << "," << s.event << "," << e.audio << "," << e.visual << "," << e.audio_visual << "," << e.type
         << "," << e.event << "," << o.mean->parser.average;
    } else {
      os << std::string(12, ',');
    }
    os << "," << (o.failures.empty() ? "ok" : o.runs.empty() ? "failed" : "partial") << "\n";
  }
}

/// Runs the whole matrix under `out`: cells/<NNN_name>/{config,seed<k>,summary}.json,
/// rollup.csv and index.json.
inline std::vector<CellOutcome> run_ablation(const Grid& g, const fs::path& out, CellRunner runner = {},
                                             std::ostream* log = nullptr) {
  if (!runner) runner = SyntheticRunner{};
  const auto cells = expand(g);
  fs::create_directories(out / "cells");
  std::vector<CellOutcome> outcomes;
  json index = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CellOutcome o{cells[i], {}, {}, std::nullopt};
    const fs::path dir = out / "cells" / cell_dir_name(i, cells[i].name);
    fs::create_directories(dir);
    io::write_json(dir / "config.json", cells[i].config);
    for (std::uint64_t seed : g.seeds) {
      try {
        const auto cfg = cells[i].config.get<pipeline::PipelineConfig>();
        auto r = runner(cfg, seed);
        io::write_json(dir / ("seed" + std::to_string(seed) + ".json"), pipeline::result_json(r));
        o.runs.push_back(std::move(r));
      } catch (const std::exception& e) {
        o.failures.emplace_back(seed, e.what());
        io::write_json(dir / ("seed" + std::to_string(seed) + ".json"), {{"error", e.what()}});
      }
      if (log) {
        *log << "[ablate] " << cells[i].name << " seed " << seed
             << (o.failures.empty() || o.failures.back().first != seed ? " ok" : " FAILED: " + o.failures.back().second)
             << "\n";
      }
    }
    json summary = {{"cell", cells[i].name}, {"seeds", g.seeds}, {"seeds_ok", o.runs.size()}};
    json fails = json::array();
    for (const auto& [seed, msg] : o.failures) fails.push_back({{"seed", seed}, {"error", msg}});
    summary["failures"] = fails;
    if (!o.runs.empty()) {
      o.mean = mean_result(o.runs);
      summary["mean"] = pipeline::result_json(*o.mean);
    }
    io::write_json(dir / "summary.json", summary);
    index.push_back({{"cell", cells[i].name}, {"dir", dir.filename().string()}, {"seeds_ok", o.runs.size()},
                     {"seeds_failed", o.failures.size()}});
    outcomes.push_back(std::move(o));
  }
  io::write_json(out / "index.json", index);
  write_rollup(g, outcomes, out / "rollup.csv");
  return outcomes;
}

}  // namespace ear::ablation
