// cmsei: command-line entry point for data generation, training and evaluation.
//
// Streams: JSON-lines events on stdout, human-readable text on stderr.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <optional>
#include <string>

#include "cmsei/checkpoint.hpp"
#include "cmsei/config.hpp"
#include "cmsei/data.hpp"
#include "cmsei/errors.hpp"
#include "cmsei/evaluation.hpp"
#include "cmsei/gradcheck.hpp"
#include "cmsei/training.hpp"

namespace {

using namespace cmsei;
using json = nlohmann::ordered_json;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void emit(const std::string& event, json body) {
  json line;
  line["event"] = event;
  for (auto& [k, v] : body.items()) line[k] = v;
  std::cout << line.dump() << "\n" << std::flush;
}

void say(const std::string& text) { std::cerr << text << (text.empty() || text.back() != '\n' ? "\n" : ""); }

struct ModelFlags {
  std::optional<int> visual_dim, text_dim, embed_dim, rounds;
  std::optional<double> lambda, mu;
  std::optional<std::string> direction, gate, semantic_input, ablate;
  bool normalize_adjacency = false;

  void add(CLI::App* app) {
    app->add_option("--visual-dim", visual_dim, "Raw region feature width (default: from the data)");
    app->add_option("--text-dim", text_dim, "Raw word feature width (default: from the data)");
    app->add_option("--embed-dim", embed_dim, "Joint embedding width D (default 1024; desk preset 64)");
    app->add_option("--rounds", rounds, "Local-local interaction rounds (default 2)");
    app->add_option("--lambda", lambda, "Attention inverse temperature (default 9)");
    app->add_option("--mu", mu, "IoU threshold of the spatial graph (default 0.4)");
    app->add_option("--direction", direction, "i2t or t2i (default i2t)");
    app->add_option("--gate", gate, "Local-global gate: vector or scalar (default vector)");
    app->add_option("--semantic-input", semantic_input, "Semantic GCN input: V or Vs (default V)");
    app->add_option("--ablate", ablate, "Comma list of none, no-vsg, no-vsrg, no-tg, no-llii, no-lgii");
    app->add_flag("--normalize-adjacency", normalize_adjacency, "Symmetrically normalise adjacencies");
  }

  void apply(ModelConfig& c) const {
    if (visual_dim) c.visual_dim = *visual_dim;
    if (text_dim) c.text_dim = *text_dim;
    if (embed_dim) c.embed_dim = *embed_dim;
    if (rounds) c.rounds = *rounds;
    if (lambda) c.lambda = *lambda;
    if (mu) c.graph.mu = *mu;
    if (direction) c.direction = parse_direction(*direction);
    if (gate) c.gate_mode = parse_gate_mode(*gate);
    if (semantic_input) c.semantic_input = parse_semantic_input(*semantic_input);
    if (ablate) c.ablations = parse_ablations(*ablate);
    if (normalize_adjacency) c.normalize_adjacency = true;
  }
};

struct TrainFlags {
  std::optional<double> margin, lr, decay_rate;
  std::optional<int> decay_every, batch_size, epochs;
  std::optional<std::string> negatives;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--margin", margin, "Triplet margin (default 0.2)");
    app->add_option("--lr", lr, "Initial learning rate (default 2e-4; desk preset 1e-3)");
    app->add_option("--decay-rate", decay_rate, "Learning-rate decay factor (default 0.1)");
    app->add_option("--decay-every", decay_every, "Epochs between decays, <= 0 disables (default 15; desk preset 0)");
    app->add_option("--batch-size", batch_size, "Pairs per batch (default 64; desk preset 16)");
    app->add_option("--epochs", epochs, "Total epochs (default 30; desk preset 40)");
    app->add_option("--negatives", negatives, "sum or hardest (default sum)");
    app->add_option("--seed", seed, "Initialisation and shuffling seed (default 0)");
  }

  void apply(TrainConfig& c) const {
    if (margin) c.margin = *margin;
    if (lr) c.lr = *lr;
    if (decay_rate) c.decay_rate = *decay_rate;
    if (decay_every) c.decay_every = *decay_every;
    if (batch_size) c.batch_size = *batch_size;
    if (epochs) c.max_epochs = *epochs;
    if (negatives) c.negatives = parse_negative_mode(*negatives);
    if (seed) c.seed = *seed;
  }
};

std::string summary_line(const Dataset& d) {
  const auto& img = d.images.front();
  const auto& sent = d.sentences.front();
  return std::to_string(d.images.size()) + " images (" + std::to_string(img.regions()) + "x" +
         std::to_string(img.region_features.cols()) + " regions), " + std::to_string(d.sentences.size()) +
         " sentences (word width " + std::to_string(sent.word_features.cols()) + ")";
}

Dataset load_checked(const std::string& path) {
  Dataset d = load_bundle_set(path);
  d.validate();
  if (d.images.empty() || d.sentences.empty()) {
    throw DataError(DataError::Kind::kValue, path + ": bundle set has no image/sentence pairs");
  }
  return d;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---- subcommands --------------------------------------------------------------

struct GenDataArgs {
  int images = 32, captions = 5, k = kDefaultRegions, n = 12;
  double signal = 0.7;
  std::uint64_t seed = 0, projection_seed = 0;
  int visual_dim = kDefaultVisualDim, text_dim = kDefaultTextDim, latent_dim = 16, word_jitter = 0;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  SynthesisOptions o;
  o.visual_dim = a.visual_dim;
  o.text_dim = a.text_dim;
  o.latent_dim = a.latent_dim;
  o.projection_seed = a.projection_seed;
  o.word_jitter = a.word_jitter;
  const Dataset d = synthesize_dataset(a.images, a.captions, a.k, a.n, a.signal, a.seed, o);

  RunConfig run;
  run.command = "gen-data";
  run.model.visual_dim = a.visual_dim;
  run.model.text_dim = a.text_dim;
  json prov = provenance(run);
  prov["synthesis"] = {{"images", a.images},         {"captions", a.captions},
                       {"regions", a.k},             {"words", a.n},
                       {"signal_strength", a.signal}, {"seed", a.seed},
                       {"projection_seed", a.projection_seed}, {"latent_dim", a.latent_dim},
                       {"word_jitter", a.word_jitter}};
  const auto manifest = write_bundle_set(d, a.out, prov.dump());
  emit("gen-data", {{"manifest", manifest.string()}, {"images", d.images.size()}, {"sentences", d.sentences.size()}});
  say("wrote " + summary_line(d) + " to " + a.out);
  return kOk;
}

int cmd_validate(const std::string& path) {
  const Dataset d = load_checked(path);
  emit("validate", {{"path", path}, {"valid", true}, {"images", d.images.size()}, {"sentences", d.sentences.size()}});
  say(path + ": OK, " + summary_line(d));
  return kOk;
}

struct TrainArgs {
  std::string data, val, out, resume, preset = "desk";
  int threads = 1;
  ModelFlags model;
  TrainFlags train;
};

int cmd_train(const TrainArgs& a) {
  const Dataset data = load_checked(a.data);
  std::optional<Dataset> validation;
  if (!a.val.empty()) validation = load_checked(a.val);

  ModelConfig model;
  TrainConfig train;
  ModelParams params;
  std::optional<AdamState> adam;
  TrainProgress progress;
  if (!a.resume.empty()) {
    Checkpoint c = load_checkpoint(a.resume);
    model = c.model;
    train = c.train;
    a.train.apply(train);  // e.g. a larger --epochs extends the run
    params = std::move(c.params);
    adam = c.optimizer;
    progress = c.progress;
    say("resuming " + a.resume + " after epoch " + std::to_string(progress.epochs_completed));
  } else {
    if (a.preset == "desk") {
      train = TrainConfig::desk_scale();
      model.embed_dim = 64;
    } else if (a.preset != "full") {
      throw CLI::ValidationError("--preset", "expected desk or full, got " + a.preset);
    }
    model.visual_dim = static_cast<int>(data.images.front().region_features.cols());
    model.text_dim = static_cast<int>(data.sentences.front().word_features.cols());
    a.model.apply(model);
    a.train.apply(train);
    model.validate();
    train.validate();
    params = ModelParams::initialize(model, train.seed);
  }

  RunConfig run{model, train, "train", a.data, a.val, a.out, a.threads};
  const json prov = provenance(run);
  emit("config", prov);
  say("training " + to_string(model.direction) + " model, ablations: " + model.ablations.describe() + ", " +
      std::to_string(params.scalar_count()) + " parameters");

  Trainer trainer = adam ? Trainer(model, train, std::move(params), *adam, progress)
                         : Trainer(model, train, std::move(params));
  TrainOptions opts;
  opts.validation = validation ? &*validation : nullptr;
  opts.output_dir = std::filesystem::path(a.out);
  opts.threads = a.threads;
  opts.run_config_json = prov.dump();
  opts.on_epoch = [](const EpochRecord& r) {
    json j{{"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}};
    j["rsum"] = r.rsum ? json(*r.rsum) : json(nullptr);
    emit("epoch", j);
    std::ostringstream os;
    os << "epoch " << r.epoch << "  loss " << r.loss << "  lr " << r.lr;
    if (r.rsum) os << "  val rSum " << *r.rsum;
    say(os.str());
  };
  trainer.fit(data, opts);
  emit("done", {{"output", a.out},
                {"epochs_completed", trainer.progress().epochs_completed},
                {"best_epoch", trainer.progress().best_epoch},
                {"best_rsum", trainer.progress().best_rsum}});
  say("checkpoints in " + a.out);
  return kOk;
}

struct EvalArgs {
  std::string data, checkpoint, dump_graphs, report;
  std::vector<std::string> ensemble;
  int threads = 1;
  int fold_size = 0;
};

SimilarityMatrix score_checkpoint(const std::string& path, const Dataset& d, int threads, json& configs) {
  const Checkpoint c = load_checkpoint(path);
  configs.push_back({{"checkpoint", path}, {"model_config", to_json(c.model)}});
  return compute_similarity(c.model, c.params, d, {threads, 32});
}

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.ensemble.empty()) {
    throw CLI::ValidationError("eval", "give exactly one of --checkpoint or --ensemble A B");
  }
  const Dataset d = load_checked(a.data);
  json models = json::array();
  SimilarityMatrix sim;
  std::string label;
  if (!a.checkpoint.empty()) {
    sim = score_checkpoint(a.checkpoint, d, a.threads, models);
    label = std::filesystem::path(a.checkpoint).filename().string();
  } else {
    sim = ensemble(score_checkpoint(a.ensemble[0], d, a.threads, models),
                   score_checkpoint(a.ensemble[1], d, a.threads, models));
    label = "ensemble";
  }
  const RetrievalReport r = a.fold_size > 0 ? five_fold_average(sim, a.fold_size) : retrieval_report(sim);

  RunConfig run;
  run.command = a.ensemble.empty() ? "eval" : "ensemble";
  run.data_path = a.data;
  run.output_path = a.report;
  run.threads = a.threads;
  json out = provenance(run);
  out["models"] = models;
  if (a.fold_size > 0) out["fold_size"] = a.fold_size;
  out["report"] = r.to_json();
  emit("report", out);
  if (!a.report.empty()) write_json_file(a.report, out);
  say(r.table(label));

  if (!a.dump_graphs.empty()) {
    // Graphs come from the first model; an ensemble shares its data.
    const Checkpoint c = load_checkpoint(a.checkpoint.empty() ? a.ensemble[0] : a.checkpoint);
    dump_graphs(c.model, c.params, d, a.dump_graphs);
    write_json_file(std::filesystem::path(a.dump_graphs) / "run_config.json", out);
    emit("graphs", {{"dir", a.dump_graphs}, {"files", d.images.size() + d.sentences.size()}});
  }
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& direction) {
  std::vector<Direction> dirs;
  if (direction == "both") {
    dirs = {Direction::kImageToText, Direction::kTextToImage};
  } else {
    dirs = {parse_direction(direction)};
  }
  bool ok = true;
  for (Direction dir : dirs) {
    GradcheckOptions o;
    o.direction = dir;
    const GradcheckReport r = gradient_check(seed, o);
    json j = r.to_json();
    j["direction"] = to_string(dir);
    j["tool"] = "cmsei";
    j["version"] = kToolVersion;
    emit("gradcheck", j);
    std::ostringstream os;
    os << "gradcheck seed " << seed << " (" << to_string(dir) << ")\n";
    for (const auto& g : r.groups) {
      os << "  " << (g.passed ? "PASS " : "FAIL ") << std::left << std::setw(12) << g.group << " max rel error "
         << std::scientific << std::setprecision(3) << g.max_rel_error << std::defaultfloat << "  (" << g.checked
         << " entries)\n";
    }
    say(os.str());
    ok = ok && r.passed();
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal graph-enhanced image-sentence retrieval"};
  app.set_version_flag("--version", std::string(cmsei::kToolVersion));
  app.set_config("--config", "", "Key=value config file; command-line flags take precedence");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic bundle set");
  gen_cmd->add_option("--images", gen.images, "Images")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--captions", gen.captions, "Captions per image")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--k", gen.k, "Regions per image")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--n", gen.n, "Words per sentence")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--signal", gen.signal, "Signal strength in [0, 1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--seed", gen.seed, "Data seed")->capture_default_str();
  gen_cmd->add_option("--projection-seed", gen.projection_seed, "Feature-space seed")->capture_default_str();
  gen_cmd->add_option("--visual-dim", gen.visual_dim, "Region feature width")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--text-dim", gen.text_dim, "Word feature width")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--latent-dim", gen.latent_dim, "Shared latent width")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--word-jitter", gen.word_jitter, "Sentence length jitter")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  std::string validate_path;
  auto* val_cmd = app.add_subcommand("validate", "Check a bundle set for format and shape errors");
  val_cmd->add_option("data", validate_path, "Bundle-set directory or manifest")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints");
  train_cmd->add_option("--data", train.data, "Training bundle set")->required();
  train_cmd->add_option("--val", train.val, "Validation bundle set (selects best.ckpt)");
  train_cmd->add_option("--out", train.out, "Output directory for checkpoints and metrics")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint directory to continue from");
  train_cmd->add_option("--preset", train.preset, "desk or full")->capture_default_str();
  train_cmd->add_option("--threads", train.threads, "Validation scoring threads")->capture_default_str()->check(CLI::PositiveNumber);
  train.model.add(train_cmd);
  train.train.add(train_cmd);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score a bundle set and report recall");
  eval_cmd->add_option("--data", eval.data, "Evaluation bundle set")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory");
  eval_cmd->add_option("--ensemble", eval.ensemble, "Two checkpoints whose scores are averaged")->expected(2);
  eval_cmd->add_option("--dump-graphs", eval.dump_graphs, "Write per-sample adjacency JSON here");
  eval_cmd->add_option("--report", eval.report, "Also write the JSON report to this file");
  eval_cmd->add_option("--fold-size", eval.fold_size, "Average over contiguous folds of this many images");
  eval_cmd->add_option("--threads", eval.threads, "Scoring threads")->capture_default_str()->check(CLI::PositiveNumber);

  EvalArgs ens;
  auto* ens_cmd = app.add_subcommand("ensemble", "Evaluate the average of two models' scores");
  ens_cmd->add_option("--data", ens.data, "Evaluation bundle set")->required();
  ens_cmd->add_option("checkpoints", ens.ensemble, "Two checkpoint directories")->expected(2)->required();
  ens_cmd->add_option("--report", ens.report, "Also write the JSON report to this file");
  ens_cmd->add_option("--fold-size", ens.fold_size, "Average over contiguous folds of this many images");
  ens_cmd->add_option("--threads", ens.threads, "Scoring threads")->capture_default_str()->check(CLI::PositiveNumber);

  std::uint64_t gc_seed = 0;
  std::string gc_direction = "both";
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradient");
  gc_cmd->add_option("--seed", gc_seed, "Seed of the tiny model and batch")->capture_default_str();
  gc_cmd->add_option("--direction", gc_direction, "i2t, t2i or both")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*val_cmd) return cmd_validate(validate_path);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*ens_cmd) return cmd_eval(ens);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_direction);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const cmsei::DataError& e) {
    emit("error", {{"kind", "data"}, {"message", e.what()}});
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const cmsei::DimensionError& e) {
    emit("error", {{"kind", "data"}, {"message", e.what()}});
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const cmsei::NumericError& e) {
    emit("error", {{"kind", "numeric"}, {"message", e.what()}});
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const cmsei::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    emit("error", {{"kind", "internal"}, {"message", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
