// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand reads an optional --config file
// (the pipeline-config JSON, see docs/formats.md), then applies flags on top:
// defaults < --config < flags. Artifacts go under --out, logs to stderr,
// machine-readable summaries to stdout with --format json.
//
// Exit codes: 0 success, 1 validation or usage error, 2 numerical abort.
#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ear/ablation.hpp"
#include "ear/error.hpp"
#include "ear/generator.hpp"
#include "ear/io.hpp"
#include "ear/metrics.hpp"
#include "ear/migration.hpp"
#include "ear/pipeline.hpp"

namespace ear::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Format { Table, Json, Csv };

struct Common {
  std::string config;
  std::string format = "table";
  int verbosity = 1;
  std::optional<std::uint64_t> seed;
};

/// Training-schedule flags shared by pretrain and train.
struct ScheduleFlags {
  std::string preset;  // desk | full
  std::optional<std::size_t> epochs, batch_size, warmup;
  std::optional<double> lr_peak, lr_min, weight_decay, clip;
  std::string checkpoint;
  bool resume = false;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "schedule preset: desk or full")->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch_size, "videos per mini-batch");
    app->add_option("--warmup", warmup, "linear warmup epochs");
    app->add_option("--lr-peak", lr_peak, "learning rate after warmup");
    app->add_option("--lr-min", lr_min, "learning rate at the end of the cosine");
    app->add_option("--weight-decay", weight_decay, "decoupled AdamW weight decay");
    app->add_option("--clip", clip, "global gradient-norm clip (<= 0 disables)");
    app->add_option("--checkpoint", checkpoint, "checkpoint file written after every epoch");
    app->add_flag("--resume", resume, "continue from --checkpoint when it exists");
  }

  void apply(train::TrainConfig& c, bool generator_stage) const {
    if (preset == "full") {
      c = generator_stage ? train::full_generator_preset() : train::full_parser_preset();
    } else if (preset == "desk") {
      c = generator_stage ? train::desk_generator_preset() : train::desk_parser_preset();
    }
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (warmup) c.warmup_epochs = *warmup;
    if (lr_peak) c.lr_peak = *lr_peak;
    if (lr_min) c.lr_min = *lr_min;
    if (weight_decay) c.optim.weight_decay = *weight_decay;
    if (clip) c.optim.clip_norm = *clip;
  }

  train::FitOptions fit_options(const json& key) const {
    train::FitOptions o;
    if (!checkpoint.empty()) o.checkpoint = checkpoint;
    o.resume = resume;
    o.config_key = key.dump();
    if (resume && checkpoint.empty()) throw ConfigError("--resume needs --checkpoint");
    return o;
  }
};

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    CLI::App app{"EAR weakly supervised audio-visual video parsing"};
    app.set_help_all_flag("--help-all", "all subcommands' help");
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", common_.config, "pipeline config JSON; flags override it");
    app.add_option("--format", common_.format, "output format")->check(CLI::IsMember({"table", "json", "csv"}));
    app.add_option("--seed", common_.seed, "seed for every random stream of the command");
    app.add_flag("-q,--quiet", [this](std::int64_t) { common_.verbosity = 0; }, "no progress logs");
    app.add_flag("-v,--verbose", [this](std::int64_t n) { common_.verbosity = 1 + static_cast<int>(n); },
                 "per-epoch loss terms");

    add_synth(app);
    add_migrate(app);
    add_pretrain(app);
    add_genlabels(app);
    add_train(app);
    add_parse(app);
    add_eval(app);
    add_ablate(app);

    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out_ << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n";
      const CLI::App* failing = &app;
      for (const auto* sub : app.get_subcommands()) failing = sub;
      err_ << failing->help();
      return 1;
    }
    try {
      load_config();
      action_();
      return 0;
    } catch (const NumericalError& e) {
      err_ << "numerical abort: " << e.what() << "\n";
      return 2;
    } catch (const Error& e) {
      err_ << "error: " << e.what() << "\n";
      return 1;
    } catch (const json::exception& e) {
      err_ << "error: malformed JSON: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << "\n";
      return 1;
    }
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  Common common_;
  pipeline::PipelineConfig cfg_;
  std::function<void()> action_;

  // subcommand state
  std::string spec_, corpus_, pseudo_, model_, out_path_, pred_, gt_, grid_;
  std::optional<double> mu_a_, mu_v_, lambda_a_, lambda_v_, theta_a_, theta_v_;
  std::optional<double> tau_, iou_, w_, alpha_, gamma_;
  std::optional<std::size_t> m_layers_, width_, migrate_batch_;
  std::optional<std::string> fusion_, erm_, selector_, matching_, averaging_;
  bool per_video_ = false, dump_ = false, audio_fed_visual_ = false;
  bool no_mix_ = false, no_soft_a_ = false, no_soft_v_ = false, no_video_ = false;
  ScheduleFlags schedule_;

  Format format() const {
    return common_.format == "json" ? Format::Json : common_.format == "csv" ? Format::Csv : Format::Table;
  }

  void log(const std::string& msg, int level = 1) const {
    if (common_.verbosity >= level) err_ << msg << "\n";
  }

  void load_config() {
    if (common_.config.empty()) return;
    json merged = cfg_;
    pipeline::merge_json(merged, io::read_json(common_.config));
    cfg_ = merged.get<pipeline::PipelineConfig>();
  }

  void ensure_parent(const fs::path& p) const {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }

  std::function<void(std::size_t, double)> epoch_logger(const std::string& stage, std::size_t epochs) const {
    return [this, stage, epochs](std::size_t e, double loss) {
      std::ostringstream os;
      os << "[" << stage << "] epoch " << e + 1 << "/" << epochs << " loss " << loss;
      log(os.str());
    };
  }

  void emit(const json& summary, const std::string& text) const {
    if (format() == Format::Json) out_ << summary.dump(2) << "\n";
    else out_ << text;
  }

  // -------------------------------------------------------------------------

  void add_synth(CLI::App& app) {
    auto* sub = app.add_subcommand("synth", "write a synthetic latent-event corpus (pretrain/train/test manifests)");
    sub->add_option("--spec", spec_, "SyntheticSpec JSON file, or 'default'")->default_val("default");
    sub->add_option("--out", out_path_, "output directory")->required();
    sub->callback([this] { action_ = [this] { synth(); }; });
  }

  void synth() {
    io::SyntheticSpec spec = cfg_.synthetic;
    if (spec_ != "default") spec = io::read_json(spec_).get<io::SyntheticSpec>();
    if (common_.seed) spec.seed = *common_.seed;
    spec.validate();
    const auto corpus = io::synthesize_corpus(spec);
    fs::create_directories(out_path_);
    const auto paths = io::write_synthetic_corpus(corpus, out_path_);
    io::write_json(fs::path(out_path_) / "spec.json", spec);
    log("[synth] wrote " + std::to_string(corpus.pretrain.videos.size()) + "/" +
        std::to_string(corpus.train.videos.size()) + "/" + std::to_string(corpus.test.videos.size()) +
        " pretrain/train/test videos to " + out_path_);
    emit({{"pretrain", paths.pretrain.string()}, {"train", paths.train.string()}, {"test", paths.test.string()},
          {"spec", spec}},
         "pretrain " + paths.pretrain.string() + "\ntrain    " + paths.train.string() + "\ntest     " +
             paths.test.string() + "\n");
  }

  // -------------------------------------------------------------------------

  void add_migrate(CLI::App& app) {
    auto* sub = app.add_subcommand("migrate", "uni-modal label migration over a corpus with audio-visual segment labels");
    sub->add_option("--corpus", corpus_, "corpus manifest")->required();
    sub->add_option("--out", out_path_, "output directory")->required();
    sub->add_option("--mu-a", mu_a_, "audio similarity threshold (default 0.98)");
    sub->add_option("--mu-v", mu_v_, "visual similarity threshold (default 0.95)");
    sub->add_option("--batch", migrate_batch_, "videos per migration pool (default: pre-training batch size)");
    sub->add_flag("--per-video", per_video_, "restrict migration to segments of the same video");
    sub->add_flag("--dump", dump_, "also write S, M, masked S, raw, duplicate counts and labels per pool");
    sub->callback([this] { action_ = [this] { migrate(); }; });
  }

  void apply_generator_flags() {
    if (mu_a_) cfg_.generator.mu_a = *mu_a_;
    if (mu_v_) cfg_.generator.mu_v = *mu_v_;
    if (lambda_a_) cfg_.generator.lambda_a = *lambda_a_;
    if (lambda_v_) cfg_.generator.lambda_v = *lambda_v_;
    if (theta_a_) cfg_.generator.theta_a = *theta_a_;
    if (theta_v_) cfg_.generator.theta_v = *theta_v_;
    if (per_video_) cfg_.generator.per_video_migration = true;
    cfg_.generator.validate();
  }

  void migrate() {
    apply_generator_flags();
    const io::Corpus corpus = io::load_manifest(corpus_);
    const std::size_t pool = migrate_batch_.value_or(cfg_.pretrain.batch_size);
    if (pool == 0) throw ConfigError("--batch must be positive");
    const fs::path out(out_path_);
    fs::create_directories(out);
    io::LabelSet migrated{"migrated", corpus.categories, {}};
    std::size_t pools = 0, donated_a = 0, donated_v = 0;
    for (std::size_t next = 0; next < corpus.videos.size();) {
      // consecutive equal-length videos, at most `pool` of them
      std::vector<std::size_t> idx{next++};
      while (next < corpus.videos.size() && idx.size() < pool &&
             corpus.videos[next].segments == corpus.videos[idx[0]].segments)
        idx.push_back(next++);
      const auto batch = generator::stack_videos(corpus, idx);
      std::vector<Tensor> labels;
      for (migration::Modality m : {migration::Modality::Audio, migration::Modality::Visual}) {
        const bool audio = m == migration::Modality::Audio;
        migration::SegmentBatch sb{audio ? batch.audio : batch.visual, batch.y_av, m, batch.video};
        const auto r = migration::migrate_batch(sb, audio ? cfg_.generator.mu_a : cfg_.generator.mu_v,
                                                cfg_.generator.per_video_migration);
        std::size_t& donated = audio ? donated_a : donated_v;
        for (std::size_t i = 0; i < r.labels.size(); ++i) donated += r.labels[i] > batch.y_av[i];
        if (dump_) {
          const fs::path d = out / "dump" / ("pool" + std::to_string(pools)) / (audio ? "audio" : "visual");
          fs::create_directories(d);
          io::write_tensor(d / "similarity.eart", r.similarity);
          io::write_tensor(d / "mask.eart", r.mask);
          io::write_tensor(d / "masked.eart", r.masked);
          io::write_tensor(d / "raw.eart", r.raw);
          io::write_tensor(d / "duplicates.eart", r.duplicates);
          io::write_tensor(d / "labels.eart", r.labels);
        }
        labels.push_back(r.labels);
      }
      for (std::size_t k = 0; k < idx.size(); ++k) {
        migrated.videos.push_back({corpus.videos[idx[k]].id, labels[0].row_slice(k * batch.seq_len, batch.seq_len),
                                   labels[1].row_slice(k * batch.seq_len, batch.seq_len)});
      }
      ++pools;
    }
    io::save_label_set(migrated, out / "migrated.json");
    log("[migrate] " + std::to_string(pools) + " pools; cells raised above Y_AV: audio " + std::to_string(donated_a) +
        ", visual " + std::to_string(donated_v));
    emit({{"pools", pools},
          {"labels", (out / "migrated.json").string()},
          {"raised_cells", {{"audio", donated_a}, {"visual", donated_v}}},
          {"mu_a", cfg_.generator.mu_a},
          {"mu_v", cfg_.generator.mu_v}},
         "pools " + std::to_string(pools) + "\nraised cells: audio " + std::to_string(donated_a) + ", visual " +
             std::to_string(donated_v) + "\nlabels " + (out / "migrated.json").string() + "\n");
  }

  // -------------------------------------------------------------------------

  void add_pretrain(CLI::App& app) {
    auto* sub = app.add_subcommand("pretrain", "pre-train the pseudo-label generator");
    sub->add_option("--corpus", corpus_, "pre-training manifest (audio-visual segment labels, text features)")->required();
    sub->add_option("--out", out_path_, "model file to write")->required();
    sub->add_option("--mu-a", mu_a_, "audio migration threshold (0.98)");
    sub->add_option("--mu-v", mu_v_, "visual migration threshold (0.95)");
    sub->add_option("--lambda-a", lambda_a_, "weight of the migrated audio term (0.05)");
    sub->add_option("--lambda-v", lambda_v_, "weight of the migrated visual term (0.15)");
    sub->add_flag("--per-video", per_video_, "migrate only within each video");
    schedule_.add(sub);
    sub->callback([this] { action_ = [this] { pretrain(); }; });
  }

  void pretrain() {
    apply_generator_flags();
    schedule_.apply(cfg_.pretrain, true);
    if (common_.seed) cfg_.pretrain.seed = *common_.seed;
    const io::Corpus corpus = io::load_manifest(corpus_);
    auto opts = schedule_.fit_options({{"generator", cfg_.generator}, {"train", cfg_.pretrain}});
    opts.on_epoch = epoch_logger("pretrain", cfg_.pretrain.epochs);
    const auto r = generator::pretrain(corpus, cfg_.generator, cfg_.pretrain, opts);
    ensure_parent(out_path_);
    r.model.save(out_path_);
    const double last = r.history.epoch_loss.empty() ? 0.0 : r.history.epoch_loss.back();
    emit({{"model", out_path_}, {"epochs", r.history.epoch_loss.size()}, {"final_loss", last},
          {"config", cfg_.generator}, {"train", cfg_.pretrain}},
         "model " + out_path_ + "\nfinal epoch loss " + std::to_string(last) + "\n");
  }

  // -------------------------------------------------------------------------

  void add_genlabels(CLI::App& app) {
    auto* sub = app.add_subcommand("genlabels", "emit soft segment pseudo-labels with a frozen generator");
    sub->add_option("--model", model_, "generator model file")->required();
    sub->add_option("--corpus", corpus_, "corpus manifest to label")->required();
    sub->add_option("--out", out_path_, "pseudo-label file to write")->required();
    sub->add_option("--theta-a", theta_a_, "audio emission threshold (0.5)");
    sub->add_option("--theta-v", theta_v_, "visual emission threshold (0.5)");
    sub->callback([this] { action_ = [this] { genlabels(); }; });
  }

  void genlabels() {
    auto model = generator::GeneratorModel::load(model_);
    if (theta_a_) model.cfg.theta_a = *theta_a_;
    if (theta_v_) model.cfg.theta_v = *theta_v_;
    model.cfg.validate();
    const io::Corpus corpus = io::load_manifest(corpus_);
    const auto labels = generator::generate_pseudo_labels(model, corpus);
    ensure_parent(out_path_);
    io::save_label_set(labels, out_path_);
    log("[genlabels] labelled " + std::to_string(labels.videos.size()) + " videos");
    emit({{"labels", out_path_}, {"videos", labels.videos.size()}, {"theta_a", model.cfg.theta_a},
          {"theta_v", model.cfg.theta_v}},
         "labels " + out_path_ + " (" + std::to_string(labels.videos.size()) + " videos)\n");
  }

  // -------------------------------------------------------------------------

  void add_train(CLI::App& app) {
    auto* sub = app.add_subcommand("train", "train the parsing model on pseudo-labels");
    sub->add_option("--corpus", corpus_, "training manifest")->required();
    sub->add_option("--pseudo", pseudo_, "pseudo-label file")->required();
    sub->add_option("--out", out_path_, "model file to write")->required();
    sub->add_option("--m-layers", m_layers_, "relationship layers M (3)");
    sub->add_option("--fusion", fusion_, "amdf, han or msa-mca")->check(CLI::IsMember({"amdf", "han", "msa-mca"}));
    sub->add_option("--erm", erm_, "interleaved, stacked or off")->check(CLI::IsMember({"interleaved", "stacked", "off"}));
    sub->add_option("--width", width_, "shared model width D (32)");
    sub->add_flag("--visual-units-read-audio", audio_fed_visual_, "feed the audio stream to the visual relationship units");
    sub->add_option("--w", w_, "balance scale W (1)");
    sub->add_option("--alpha", alpha_, "mixup Beta(alpha, alpha) parameter (0.5)");
    sub->add_option("--mix-gamma", gamma_, "fixed mixup coefficient instead of sampling");
    sub->add_option("--selector", selector_, "soft-loss positives: pseudo or video")->check(CLI::IsMember({"pseudo", "video"}));
    sub->add_flag("--no-mix", no_mix_, "drop both mixup terms");
    sub->add_flag("--no-soft-a", no_soft_a_, "drop the audio soft loss");
    sub->add_flag("--no-soft-v", no_soft_v_, "drop the visual soft loss");
    sub->add_flag("--no-video", no_video_, "drop the video-level loss");
    schedule_.add(sub);
    sub->callback([this] { action_ = [this] { train(); }; });
  }

  void train() {
    if (m_layers_) cfg_.parser.m_layers = *m_layers_;
    if (fusion_) cfg_.parser.fusion = parser::parse_fusion(*fusion_);
    if (erm_) cfg_.parser.erm = parser::parse_erm(*erm_);
    if (width_) cfg_.parser.width = *width_;
    if (audio_fed_visual_) cfg_.parser.visual_units_read_audio = true;
    if (w_) cfg_.loss.balance_scale = *w_;
    if (alpha_) cfg_.loss.mixup.alpha = *alpha_;
    if (gamma_) cfg_.loss.mixup.forced_gamma = *gamma_;
    if (selector_) cfg_.loss.selector = losses::parse_selector(*selector_);
    if (no_mix_) cfg_.loss.use_mix = false;
    if (no_soft_a_) cfg_.loss.use_soft_a = false;
    if (no_soft_v_) cfg_.loss.use_soft_v = false;
    if (no_video_) cfg_.loss.use_video = false;
    cfg_.parser.validate();
    cfg_.loss.validate();
    schedule_.apply(cfg_.train, false);
    if (common_.seed) cfg_.train.seed = *common_.seed;
    io::Corpus corpus = io::load_manifest(corpus_);
    io::attach_pseudo_labels(corpus, io::load_label_set(pseudo_));
    auto opts = schedule_.fit_options({{"parser", cfg_.parser}, {"loss", cfg_.loss}, {"train", cfg_.train}});
    opts.on_epoch = epoch_logger("train", cfg_.train.epochs);
    auto r = pipeline::train_parser(corpus, cfg_.parser, cfg_.loss, cfg_.train, opts);
    ensure_parent(out_path_);
    r.model.save(out_path_);
    const double last = r.history.epoch_loss.empty() ? 0.0 : r.history.epoch_loss.back();
    emit({{"model", out_path_},
          {"epochs", r.history.epoch_loss.size()},
          {"final_loss", last},
          {"balance_weights",
           {{"pos_a", r.weights.pos_a}, {"neg_a", r.weights.neg_a}, {"pos_v", r.weights.pos_v}, {"neg_v", r.weights.neg_v}}},
          {"parser", cfg_.parser},
          {"loss", cfg_.loss},
          {"train", cfg_.train}},
         "model " + out_path_ + "\nfinal epoch loss " + std::to_string(last) + "\n");
  }

  // -------------------------------------------------------------------------

  void add_parse(CLI::App& app) {
    auto* sub = app.add_subcommand("parse", "segment probabilities for every video of a corpus");
    sub->add_option("--model", model_, "parser model file")->required();
    sub->add_option("--corpus", corpus_, "corpus manifest")->required();
    sub->add_option("--out", out_path_, "prediction file to write")->required();
    sub->callback([this] { action_ = [this] { parse(); }; });
  }

  void parse() {
    auto model = parser::ParserModel::load(model_);
    const io::Corpus corpus = io::load_manifest(corpus_);
    if (corpus.dim_audio != model.dim_audio || corpus.dim_visual != model.dim_visual ||
        corpus.num_categories() != model.categories) {
      throw ShapeError("parse: model expects dims " + std::to_string(model.dim_audio) + "/" +
                       std::to_string(model.dim_visual) + " and " + std::to_string(model.categories) +
                       " categories; corpus has " + std::to_string(corpus.dim_audio) + "/" +
                       std::to_string(corpus.dim_visual) + " and " + std::to_string(corpus.num_categories()));
    }
    const auto probs = pipeline::parse_corpus(model, corpus);
    ensure_parent(out_path_);
    io::save_label_set(pipeline::predictions(probs, corpus.categories), out_path_);
    emit({{"predictions", out_path_}, {"videos", probs.size()}},
         "predictions " + out_path_ + " (" + std::to_string(probs.size()) + " videos)\n");
  }

  // -------------------------------------------------------------------------

  void add_eval(CLI::App& app) {
    auto* sub = app.add_subcommand("eval", "segment- and event-level F-scores");
    sub->add_option("--pred", pred_, "prediction or label-set file")->required();
    sub->add_option("--gt", gt_, "ground-truth label set or corpus manifest")->required();
    sub->add_option("--tau", tau_, "binarization threshold for predictions (0.5)");
    sub->add_option("--iou", iou_, "event-level IoU threshold (0.5)");
    sub->add_option("--matching", matching_, "greedy or optimal")->check(CLI::IsMember({"greedy", "optimal"}));
    sub->add_option("--averaging", averaging_, "macro or micro")->check(CLI::IsMember({"macro", "micro"}));
    sub->add_option("--out", out_path_, "also write the JSON report here");
    sub->callback([this] { action_ = [this] { eval(); }; });
  }

  void eval() {
    if (tau_) cfg_.tau = *tau_;
    if (iou_) cfg_.eval.iou_min = *iou_;
    json patch = json::object();
    if (matching_) patch["matching"] = *matching_;
    if (averaging_) patch["averaging"] = *averaging_;
    if (!patch.empty()) cfg_.eval = [&] {
      json e = cfg_.eval;
      pipeline::merge_json(e, patch);
      return e.get<metrics::EvalOptions>();
    }();
    if (!(cfg_.tau > 0.0 && cfg_.tau < 1.0)) throw ConfigError("--tau must lie in (0, 1)");
    if (!(cfg_.eval.iou_min > 0.0 && cfg_.eval.iou_min <= 1.0)) throw ConfigError("--iou must lie in (0, 1]");
    const io::LabelSet pred = io::load_label_set(pred_);
    const io::LabelSet gt = io::load_label_set(gt_);
    const auto report = pipeline::evaluate(pred, gt, cfg_.tau, cfg_.eval);
    const json j = pipeline::report_json(report);
    if (!out_path_.empty()) {
      ensure_parent(out_path_);
      io::write_json(out_path_, j);
    }
    if (format() == Format::Csv) out_ << metrics::csv_header() << "\n" << metrics::format_csv_row(report) << "\n";
    else emit(j, metrics::format_table(report));
  }

  // -------------------------------------------------------------------------

  void add_ablate(CLI::App& app) {
    auto* sub = app.add_subcommand("ablate", "run an ablation grid of synthetic three-stage pipelines");
    sub->add_option("--grid", grid_, "grid JSON file")->required();
    sub->add_option("--out", out_path_, "output directory")->required();
    sub->callback([this] { action_ = [this] { ablate(); }; });
  }

  void ablate() {
    json j = io::read_json(grid_);
    if (!common_.config.empty()) {
      // the config file acts as an extra base layer under the grid's own base
      json base = io::read_json(common_.config);
      pipeline::merge_json(base, j.value("base", json::object()));
      j["base"] = base;
    }
    if (common_.seed) j["seeds"] = {*common_.seed};
    const auto grid = ablation::parse_grid(j);
    const auto outcomes = ablation::run_ablation(grid, out_path_, {}, common_.verbosity > 0 ? &err_ : nullptr);
    json cells = json::array();
    std::ostringstream text;
    for (const auto& o : outcomes) {
      json c = {{"cell", o.cell.name}, {"seeds_ok", o.runs.size()}, {"seeds_failed", o.failures.size()}};
      if (o.mean) c["segment_type"] = o.mean->parser.segment.type;
      cells.push_back(c);
      text << o.cell.name << ": " << o.runs.size() << " ok, " << o.failures.size() << " failed";
      if (o.mean) text << ", segment Type " << o.mean->parser.segment.type;
      text << "\n";
    }
    text << "rollup " << (fs::path(out_path_) / "rollup.csv").string() << "\n";
    emit({{"cells", cells}, {"rollup", (fs::path(out_path_) / "rollup.csv").string()}}, text.str());
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Runner r(out, err);
  return r.run(argc, argv);
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"ear"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ear::cli
