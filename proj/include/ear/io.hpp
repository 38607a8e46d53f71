// SPDX-License-Identifier: Apache-2.0
//
// TensorFile binary container, JSON corpus manifests and label sets, and the
// synthetic latent-event corpus generator.
//
// TensorFile layout (little-endian):
//   0  "EART"            magic
//   4  u16 version       currently 1
//   6  u8  dtype         0 = f32, 1 = f64
//   7  u8  ndim          >= 1
//   8  u32 dims[ndim]
//   .. payload           product(dims) values, row-major
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/error.hpp"
#include "ear/tensor.hpp"

namespace ear::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr char kMagic[4] = {'E', 'A', 'R', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr int kSchemaVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in[at + i]) << (8 * i));
  return v;
}

inline std::string at_byte(const std::string& source, std::size_t offset) {
  return source + ": at byte " + std::to_string(offset) + ": ";
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype = DType::F64) {
  if (t.rank() > 255) throw FormatError("tensor rank " + std::to_string(t.rank()) + " exceeds 255");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  detail::put_le<std::uint16_t>(out, kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) {
    if (d > UINT32_MAX) throw FormatError("tensor dimension " + std::to_string(d) + " exceeds u32");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + t.size() * dtype_size(dtype));
  for (double v : t.values()) {
    if (dtype == DType::F64) {
      detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    } else {
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

/// Decodes a TensorFile image; f32 payloads widen exactly to f64.
inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>",
                            DType* dtype_out = nullptr) {
  if (bytes.size() < 8) {
    throw FormatError(detail::at_byte(source, bytes.size()) + "truncated header: expected at least 8 bytes, got " +
                      std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(detail::at_byte(source, 0) + "bad magic");
  const auto version = detail::get_le<std::uint16_t>(bytes, 4);
  if (version != kTensorVersion) {
    throw FormatError(detail::at_byte(source, 4) + "unsupported version " + std::to_string(version));
  }
  const std::uint8_t code = bytes[6];
  if (code > 1) throw FormatError(detail::at_byte(source, 6) + "unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t ndim = bytes[7];
  if (ndim == 0) throw FormatError(detail::at_byte(source, 7) + "ndim must be at least 1");
  const std::size_t header = 8 + 4 * ndim;
  if (bytes.size() < header) {
    throw FormatError(detail::at_byte(source, bytes.size()) + "truncated header: expected " + std::to_string(header) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  Dims dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    dims[i] = detail::get_le<std::uint32_t>(bytes, 8 + 4 * i);
    if (dims[i] == 0) throw FormatError(detail::at_byte(source, 8 + 4 * i) + "zero dimension");
  }
  const std::size_t n = dims_product(dims);
  const std::size_t expected = header + n * dtype_size(dtype);
  if (bytes.size() != expected) {
    throw FormatError(detail::at_byte(source, header) + (bytes.size() < expected ? "truncated payload" : "trailing bytes") +
                      ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == DType::F64) {
      values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, header + 8 * i));
    } else {
      values[i] = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, header + 4 * i)));
    }
  }
  if (dtype_out) *dtype_out = dtype;
  return Tensor(std::move(dims), std::move(values));
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_tensor(const fs::path& path, const Tensor& t, DType dtype = DType::F64) {
  write_bytes(path, encode_tensor(t, dtype));
}

inline Tensor read_tensor(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return decode_tensor(bytes, path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
}

/// Companion directory holding the tensors of a manifest or label set:
/// "runs/train.json" keeps its tensors in "runs/train.d/".
inline fs::path tensor_dir(const fs::path& json_path) {
  fs::path p = json_path;
  return p.replace_extension(".d");
}

// ---------------------------------------------------------------------------
// Corpus manifests

struct VideoRecord {
  std::string id;
  std::size_t segments = 0;
  Tensor audio;   // T×D_A
  Tensor visual;  // T×D_V
  Tensor labels;  // 1×C video-level Y
  std::optional<Tensor> gt_audio, gt_visual, gt_av;
  std::optional<Tensor> pseudo_audio, pseudo_visual;

  bool has_unimodal_gt() const { return gt_audio.has_value() && gt_visual.has_value(); }

  /// Segment audio-visual labels: gt_av when present, else gt_audio ∧ gt_visual.
  Tensor av_ground_truth() const {
    if (gt_av) return *gt_av;
    if (!has_unimodal_gt()) throw IngestionError("video " + id + " has no segment-level ground truth");
    Tensor av(gt_audio->dims());
    for (std::size_t i = 0; i < av.size(); ++i) av[i] = ((*gt_audio)[i] != 0.0 && (*gt_visual)[i] != 0.0) ? 1.0 : 0.0;
    return av;
  }
};

struct Corpus {
  std::vector<std::string> categories;
  std::size_t dim_audio = 0, dim_visual = 0;
  std::optional<Tensor> text_audio, text_visual;  // C×D_m
  std::map<std::string, std::string> text_templates;
  std::vector<VideoRecord> videos;

  std::size_t num_categories() const { return categories.size(); }

  const VideoRecord& find(const std::string& id) const {
    for (const auto& v : videos)
      if (v.id == id) return v;
    throw AlignmentError("no video with id " + id);
  }
};

namespace detail {

inline void expect_dims(const Tensor& t, Dims want, const std::string& video, const std::string& what) {
  if (t.dims() != want) {
    throw FormatError("video " + video + ": " + what + " has dims " + dims_to_string(t.dims()) + ", expected " +
                      dims_to_string(want));
  }
}

inline void expect_binary(const Tensor& t, const std::string& video, const std::string& what) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] != 0.0 && t[i] != 1.0) throw FormatError("video " + video + ": " + what + " is not binary");
}

inline std::string safe_file_id(const std::string& id) {
  std::string s = id;
  for (char& ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return s;
}

}  // namespace detail

inline void validate_corpus(const Corpus& c) {
  const std::size_t k = c.num_categories();
  if (k == 0) throw FormatError("corpus has no categories");
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j)
      if (c.categories[i] == c.categories[j]) throw FormatError("duplicate category " + c.categories[i]);
  if (c.text_audio) detail::expect_dims(*c.text_audio, {k, c.dim_audio}, "<text>", "audio text features");
  if (c.text_visual) detail::expect_dims(*c.text_visual, {k, c.dim_visual}, "<text>", "visual text features");
  std::map<std::string, int> seen;
  for (const auto& v : c.videos) {
    if (seen[v.id]++) throw FormatError("duplicate video id " + v.id);
    if (v.segments == 0) throw FormatError("video " + v.id + ": T must be positive");
    const std::size_t t = v.segments;
    detail::expect_dims(v.audio, {t, c.dim_audio}, v.id, "audio features");
    detail::expect_dims(v.visual, {t, c.dim_visual}, v.id, "visual features");
    detail::expect_dims(v.labels, {1, k}, v.id, "video labels");
    detail::expect_binary(v.labels, v.id, "video labels");
    if (!v.audio.all_finite() || !v.visual.all_finite()) throw FormatError("video " + v.id + ": non-finite features");
    for (const auto& [gt, name] : {std::pair{&v.gt_audio, "gt_audio"}, {&v.gt_visual, "gt_visual"}, {&v.gt_av, "gt_av"}})
      if (*gt) {
        detail::expect_dims(**gt, {t, k}, v.id, name);
        detail::expect_binary(**gt, v.id, name);
      }
    for (const auto& [p, name] : {std::pair{&v.pseudo_audio, "pseudo_audio"}, {&v.pseudo_visual, "pseudo_visual"}})
      if (*p) detail::expect_dims(**p, {t, k}, v.id, name);
  }
}

inline Corpus load_manifest(const fs::path& path) {
  const json j = read_json(path);
  const fs::path base = path.parent_path();
  auto tensor_at = [&](const json& node, const std::string& key) { return read_tensor(base / node.at(key).get<std::string>()); };
  Corpus c;
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion) throw FormatError(path.string() + ": unsupported schema_version " + std::to_string(version));
    c.categories = j.at("categories").get<std::vector<std::string>>();
    c.dim_audio = j.at("feature_dims").at("audio").get<std::size_t>();
    c.dim_visual = j.at("feature_dims").at("visual").get<std::size_t>();
    if (j.contains("text_features")) {
      c.text_audio = tensor_at(j["text_features"], "audio");
      c.text_visual = tensor_at(j["text_features"], "visual");
    }
    if (j.contains("text_templates")) c.text_templates = j["text_templates"].get<std::map<std::string, std::string>>();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < c.categories.size(); ++i) index[c.categories[i]] = i;
    for (const auto& r : j.at("videos")) {
      VideoRecord v;
      v.id = r.at("id").get<std::string>();
      try {
        v.segments = r.at("T").get<std::size_t>();
        v.audio = tensor_at(r, "audio");
        v.visual = tensor_at(r, "visual");
        v.labels = Tensor::matrix(1, c.categories.size());
        for (const auto& name : r.at("labels").get<std::vector<std::string>>()) {
          auto it = index.find(name);
          if (it == index.end()) throw FormatError("video " + v.id + ": unknown category " + name);
          v.labels(0, it->second) = 1.0;
        }
        for (auto [field, key] : {std::pair{&v.gt_audio, "gt_audio"}, {&v.gt_visual, "gt_visual"}, {&v.gt_av, "gt_av"},
                                  {&v.pseudo_audio, "pseudo_audio"}, {&v.pseudo_visual, "pseudo_visual"}})
          if (r.contains(key)) *field = tensor_at(r, key);
      } catch (const FormatError& e) {
        const std::string msg = e.what();
        throw FormatError(msg.rfind("video ", 0) == 0 ? msg : "video " + v.id + ": " + msg);
      }
      c.videos.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  validate_corpus(c);
  return c;
}

/// Writes the manifest and all its tensors (into tensor_dir(path)).
inline void save_manifest(const Corpus& c, const fs::path& path) {
  validate_corpus(c);
  const fs::path dir = tensor_dir(path);
  const std::string rel = dir.filename().string();
  json j;
  j["schema_version"] = kSchemaVersion;
  j["categories"] = c.categories;
  j["feature_dims"] = {{"audio", c.dim_audio}, {"visual", c.dim_visual}};
  if (c.text_audio && c.text_visual) {
    write_tensor(dir / "text_audio.eart", *c.text_audio);
    write_tensor(dir / "text_visual.eart", *c.text_visual);
    j["text_features"] = {{"audio", rel + "/text_audio.eart"}, {"visual", rel + "/text_visual.eart"}};
  }
  if (!c.text_templates.empty()) j["text_templates"] = c.text_templates;
  j["videos"] = json::array();
  for (const auto& v : c.videos) {
    const std::string stem = detail::safe_file_id(v.id);
    json r;
    r["id"] = v.id;
    r["T"] = v.segments;
    auto put = [&](const char* key, const Tensor& t) {
      const std::string file = stem + "." + key + ".eart";
      write_tensor(dir / file, t);
      r[key] = rel + "/" + file;
    };
    put("audio", v.audio);
    put("visual", v.visual);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < c.categories.size(); ++k)
      if (v.labels(0, k) != 0.0) names.push_back(c.categories[k]);
    r["labels"] = names;
    for (auto [field, key] : {std::pair{&v.gt_audio, "gt_audio"}, {&v.gt_visual, "gt_visual"}, {&v.gt_av, "gt_av"},
                              {&v.pseudo_audio, "pseudo_audio"}, {&v.pseudo_visual, "pseudo_visual"}})
      if (*field) put(key, **field);
    j["videos"].push_back(std::move(r));
  }
  write_json(path, j);
}

// ---------------------------------------------------------------------------
// Label sets: per-video audio/visual T×C planes (pseudo-labels or predictions)

struct LabelEntry {
  std::string id;
  Tensor audio, visual;
};

struct LabelSet {
  std::string kind = "prediction";  // "pseudo", "prediction" or "ground_truth"
  std::vector<std::string> categories;
  std::vector<LabelEntry> videos;
};

inline void save_label_set(const LabelSet& s, const fs::path& path) {
  const fs::path dir = tensor_dir(path);
  const std::string rel = dir.filename().string();
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = s.kind;
  j["categories"] = s.categories;
  j["videos"] = json::array();
  for (const auto& v : s.videos) {
    if (v.audio.dims() != v.visual.dims() || v.audio.cols() != s.categories.size()) {
      throw ShapeError("label set: video " + v.id + " planes " + dims_to_string(v.audio.dims()) + "/" +
                       dims_to_string(v.visual.dims()));
    }
    const std::string stem = detail::safe_file_id(v.id);
    write_tensor(dir / (stem + ".audio.eart"), v.audio);
    write_tensor(dir / (stem + ".visual.eart"), v.visual);
    j["videos"].push_back({{"id", v.id}, {"audio", rel + "/" + stem + ".audio.eart"}, {"visual", rel + "/" + stem + ".visual.eart"}});
  }
  write_json(path, j);
}

/// Ground truth of a corpus as a label set.
inline LabelSet ground_truth_labels(const Corpus& c) {
  LabelSet s{"ground_truth", c.categories, {}};
  for (const auto& v : c.videos) {
    if (!v.has_unimodal_gt()) throw IngestionError("video " + v.id + " lacks gt_audio/gt_visual");
    s.videos.push_back({v.id, *v.gt_audio, *v.gt_visual});
  }
  return s;
}

/// Reads a label set, or a corpus manifest whose uni-modal ground truth is
/// returned as a label set.
inline LabelSet load_label_set(const fs::path& path) {
  const json j = read_json(path);
  if (!j.contains("kind")) return ground_truth_labels(load_manifest(path));
  LabelSet s;
  const fs::path base = path.parent_path();
  try {
    s.kind = j.at("kind").get<std::string>();
    s.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& r : j.at("videos")) {
      LabelEntry e{r.at("id").get<std::string>(), read_tensor(base / r.at("audio").get<std::string>()),
                   read_tensor(base / r.at("visual").get<std::string>())};
      if (e.audio.rank() != 2 || e.audio.dims() != e.visual.dims() || e.audio.cols() != s.categories.size()) {
        throw FormatError("video " + e.id + ": label planes " + dims_to_string(e.audio.dims()) + "/" +
                          dims_to_string(e.visual.dims()) + " do not match " + std::to_string(s.categories.size()) +
                          " categories");
      }
      s.videos.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return s;
}

/// Attaches a label set as pseudo-labels of the matching corpus videos.
inline void attach_pseudo_labels(Corpus& c, const LabelSet& s) {
  if (s.categories != c.categories) throw AlignmentError("pseudo-label categories differ from the corpus categories");
  std::map<std::string, const LabelEntry*> by_id;
  for (const auto& e : s.videos) by_id[e.id] = &e;
  std::vector<std::string> missing;
  for (auto& v : c.videos) {
    auto it = by_id.find(v.id);
    if (it == by_id.end()) {
      missing.push_back(v.id);
      continue;
    }
    detail::expect_dims(it->second->audio, {v.segments, c.num_categories()}, v.id, "pseudo audio labels");
    v.pseudo_audio = it->second->audio;
    v.pseudo_visual = it->second->visual;
  }
  if (!missing.empty()) {
    std::string msg = "no pseudo-labels for:";
    for (const auto& id : missing) msg += " " + id;
    throw AlignmentError(msg);
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Latent-event generator. Each category owns one prototype per modality; a
/// segment's feature is a shared background vector plus the prototypes of its
/// active events plus N(0, σ²) noise. Text features are the clean prototypes.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t num_pretrain = 200;
  std::size_t num_train = 200;
  std::size_t num_test = 50;
  std::size_t segments = 10;  // T
  std::size_t categories = 5;  // C
  std::size_t dim_audio = 16;
  std::size_t dim_visual = 16;
  double prototype_scale = 4.0;
  double background_scale = 1.0;
  double noise_sigma = 0.1;
  double occurrence_prob = 0.35;  // per category and video
  std::size_t min_duration = 2;
  std::size_t max_duration = 6;
  double asymmetry_rate = 0.3;  // P(event is audio-only or visual-only), split evenly
  bool orthogonal_prototypes = true;

  void validate() const {
    if (segments == 0 || categories == 0 || dim_audio == 0 || dim_visual == 0)
      throw ConfigError("synthetic spec: T, C and feature dims must be positive");
    if (orthogonal_prototypes && (categories > dim_audio || categories > dim_visual)) {
      throw ConfigError("synthetic spec: " + std::to_string(categories) +
                        " orthogonal prototypes do not fit feature dims " + std::to_string(dim_audio) + "/" +
                        std::to_string(dim_visual));
    }
    if (!(noise_sigma >= 0.0) || !(prototype_scale > 0.0) || !(background_scale >= 0.0))
      throw ConfigError("synthetic spec: scales must be nonnegative and prototype_scale positive");
    if (background_scale == 0.0 && noise_sigma == 0.0)
      throw ConfigError("synthetic spec: background_scale and noise_sigma cannot both be 0 (event-free segments would be zero)");
    if (!(occurrence_prob >= 0.0 && occurrence_prob <= 1.0) || !(asymmetry_rate >= 0.0 && asymmetry_rate <= 1.0))
      throw ConfigError("synthetic spec: probabilities must lie in [0, 1]");
    if (min_duration == 0 || min_duration > max_duration || min_duration > segments)
      throw ConfigError("synthetic spec: need 1 <= min_duration <= max_duration and min_duration <= T");
  }
};

inline void to_json(json& j, const SyntheticSpec& s) {
  j = {{"seed", s.seed},
       {"num_pretrain", s.num_pretrain},
       {"num_train", s.num_train},
       {"num_test", s.num_test},
       {"T", s.segments},
       {"C", s.categories},
       {"dim_audio", s.dim_audio},
       {"dim_visual", s.dim_visual},
       {"prototype_scale", s.prototype_scale},
       {"background_scale", s.background_scale},
       {"noise_sigma", s.noise_sigma},
       {"occurrence_prob", s.occurrence_prob},
       {"min_duration", s.min_duration},
       {"max_duration", s.max_duration},
       {"asymmetry_rate", s.asymmetry_rate},
       {"orthogonal_prototypes", s.orthogonal_prototypes}};
}

inline void from_json(const json& j, SyntheticSpec& s) {
  static const char* known[] = {"seed",           "num_pretrain",    "num_train",       "num_test",
                                "T",              "C",               "dim_audio",       "dim_visual",
                                "prototype_scale", "background_scale", "noise_sigma",    "occurrence_prob",
                                "min_duration",   "max_duration",    "asymmetry_rate",  "orthogonal_prototypes"};
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("synthetic spec: unknown key " + key);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("seed", s.seed);
  get("num_pretrain", s.num_pretrain);
  get("num_train", s.num_train);
  get("num_test", s.num_test);
  get("T", s.segments);
  get("C", s.categories);
  get("dim_audio", s.dim_audio);
  get("dim_visual", s.dim_visual);
  get("prototype_scale", s.prototype_scale);
  get("background_scale", s.background_scale);
  get("noise_sigma", s.noise_sigma);
  get("occurrence_prob", s.occurrence_prob);
  get("min_duration", s.min_duration);
  get("max_duration", s.max_duration);
  get("asymmetry_rate", s.asymmetry_rate);
  get("orthogonal_prototypes", s.orthogonal_prototypes);
}

struct SyntheticWorld {
  Tensor proto_audio, proto_visual;  // C×D_m, rows scaled to prototype_scale
  Tensor background_audio, background_visual;  // 1×D_m, norm background_scale
};

struct SyntheticCorpus {
  SyntheticWorld world;
  Corpus pretrain, train, test;
};

namespace detail {

/// Rows of a Gram-Schmidt orthonormalized Gaussian matrix; falls back to plain
/// normalized Gaussian rows past the dimension.
inline Tensor random_directions(std::size_t n, std::size_t d, bool orthogonal, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      std::vector<double> v(d);
      for (auto& x : v) x = normal(rng);
      if (orthogonal && i < d) {
        for (std::size_t p = 0; p < i; ++p) {
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) dot += v[k] * out(p, k);
          for (std::size_t k = 0; k < d; ++k) v[k] -= dot * out(p, k);
        }
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6 && attempt < 16) continue;
      for (std::size_t k = 0; k < d; ++k) out(i, k) = v[k] / norm;
      break;
    }
  }
  return out;
}

inline SyntheticWorld make_world(const SyntheticSpec& spec, std::mt19937_64& rng) {
  SyntheticWorld w;
  auto build = [&](std::size_t d, Tensor& proto, Tensor& bg) {
    // the background takes the next orthogonal direction when one is left
    const Tensor dirs = random_directions(spec.categories + 1, d, spec.orthogonal_prototypes, rng);
    proto = Tensor::matrix(spec.categories, d);
    bg = Tensor::matrix(1, d);
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t c = 0; c < spec.categories; ++c) proto(c, k) = dirs(c, k) * spec.prototype_scale;
      bg(0, k) = dirs(spec.categories, k) * spec.background_scale;
    }
  };
  build(spec.dim_audio, w.proto_audio, w.background_audio);
  build(spec.dim_visual, w.proto_visual, w.background_visual);
  return w;
}

inline VideoRecord make_video(const SyntheticSpec& spec, const SyntheticWorld& w, const std::string& id,
                              std::mt19937_64& rng) {
  const std::size_t t = spec.segments, c = spec.categories;
  std::bernoulli_distribution occurs(spec.occurrence_prob);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> cats;
  for (std::size_t k = 0; k < c; ++k)
    if (occurs(rng)) cats.push_back(k);
  if (cats.empty()) cats.push_back(std::uniform_int_distribution<std::size_t>(0, c - 1)(rng));

  Tensor ga = Tensor::matrix(t, c), gv = Tensor::matrix(t, c);
  const std::size_t max_dur = std::min(spec.max_duration, t);
  for (std::size_t k : cats) {
    const std::size_t dur = std::uniform_int_distribution<std::size_t>(spec.min_duration, max_dur)(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, t - dur)(rng);
    const double u = unit(rng);
    const bool audio = !(u < spec.asymmetry_rate / 2.0);                         // else visual-only
    const bool visual = !(u >= spec.asymmetry_rate / 2.0 && u < spec.asymmetry_rate);  // else audio-only
    for (std::size_t s = start; s < start + dur; ++s) {
      if (audio) ga(s, k) = 1.0;
      if (visual) gv(s, k) = 1.0;
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  auto features = [&](const Tensor& gt, const Tensor& proto, const Tensor& bg) {
    const std::size_t d = proto.cols();
    Tensor f = Tensor::matrix(t, d);
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < d; ++k) {
        double v = bg(0, k) + spec.noise_sigma * noise(rng);
        for (std::size_t e = 0; e < c; ++e)
          if (gt(s, e) != 0.0) v += proto(e, k);
        f(s, k) = v;
      }
    return f;
  };

  VideoRecord v;
  v.id = id;
  v.segments = t;
  v.audio = features(ga, w.proto_audio, w.background_audio);
  v.visual = features(gv, w.proto_visual, w.background_visual);
  v.labels = Tensor::matrix(1, c);
  for (std::size_t s = 0; s < t; ++s)
    for (std::size_t k = 0; k < c; ++k)
      if (ga(s, k) != 0.0 || gv(s, k) != 0.0) v.labels(0, k) = 1.0;
  Tensor av(ga.dims());
  for (std::size_t i = 0; i < av.size(); ++i) av[i] = (ga[i] != 0.0 && gv[i] != 0.0) ? 1.0 : 0.0;
  v.gt_audio = std::move(ga);
  v.gt_visual = std::move(gv);
  v.gt_av = std::move(av);
  return v;
}

}  // namespace detail

/// Pure function of the spec: the same seed yields the same corpus bit for bit.
inline SyntheticCorpus synthesize_corpus(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticCorpus out;
  out.world = detail::make_world(spec, rng);
  auto split = [&](const std::string& prefix, std::size_t n) {
    Corpus c;
    for (std::size_t k = 0; k < spec.categories; ++k) c.categories.push_back("event" + std::to_string(k));
    c.dim_audio = spec.dim_audio;
    c.dim_visual = spec.dim_visual;
    c.text_audio = out.world.proto_audio;
    c.text_visual = out.world.proto_visual;
    c.text_templates = {{"audio", "This is the sound of <event>"}, {"visual", "A photo of <event>"}};
    for (std::size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s%04zu", prefix.c_str(), i);
      c.videos.push_back(detail::make_video(spec, out.world, id, rng));
    }
    return c;
  };
  out.pretrain = split("pre", spec.num_pretrain);
  out.train = split("train", spec.num_train);
  out.test = split("test", spec.num_test);
  // the pre-training corpus is densely annotated with audio-visual events only
  for (auto& v : out.pretrain.videos) {
    v.gt_audio.reset();
    v.gt_visual.reset();
  }
  return out;
}

struct CorpusPaths {
  fs::path pretrain, train, test;
};

inline CorpusPaths write_synthetic_corpus(const SyntheticCorpus& c, const fs::path& dir) {
  CorpusPaths p{dir / "pretrain.json", dir / "train.json", dir / "test.json"};
  save_manifest(c.pretrain, p.pretrain);
  save_manifest(c.train, p.train);
  save_manifest(c.test, p.test);
  return p;
}

}  // namespace ear::io
