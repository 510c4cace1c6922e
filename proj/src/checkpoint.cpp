#include "cmsei/checkpoint.hpp"

#include <cctype>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cmsei/errors.hpp"

namespace cmsei {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kFormatName = "cmsei-checkpoint";
constexpr int kFormatVersion = 1;
// float64 keeps resumed runs bit-identical to uninterrupted ones.
constexpr const char* kDtype = "float64";

std::string blob_name(const std::string& prefix, const std::string& name) {
  std::string out = prefix;
  for (char c : name) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '.';
  return out + ".f64";
}

json matrix_entry(const fs::path& dir, const std::string& prefix, const std::string& name, const Matrix& m) {
  const std::string blob = blob_name(prefix, name);
  write_float64_blob(dir / blob, m);
  json j;
  j["name"] = name;
  j["shape"] = {m.rows(), m.cols()};
  j["dtype"] = kDtype;
  j["blob"] = blob;
  return j;
}

Matrix read_entry(const fs::path& dir, const json& j, const std::string& expected_name, Eigen::Index rows,
                  Eigen::Index cols) {
  const std::string name = j.at("name").get<std::string>();
  if (name != expected_name) {
    throw DataError(DataError::Kind::kManifest,
                    "checkpoint: expected parameter '" + expected_name + "', found '" + name + "'");
  }
  const auto shape = j.at("shape");
  const auto r = shape.at(0).get<Eigen::Index>();
  const auto c = shape.at(1).get<Eigen::Index>();
  if (r != rows || c != cols) {
    throw DataError(DataError::Kind::kShape, "checkpoint: parameter '" + name + "' is " + std::to_string(r) + "x" +
                                                 std::to_string(c) + ", model expects " + std::to_string(rows) + "x" +
                                                 std::to_string(cols));
  }
  const std::string blob = j.at("blob").get<std::string>();
  if (blob.find("..") != std::string::npos || fs::path(blob).is_absolute()) {
    throw DataError(DataError::Kind::kManifest, "checkpoint: invalid blob name for '" + name + "'");
  }
  return read_blob(dir / blob, rows, cols, j.at("dtype").get<std::string>(), "checkpoint parameter '" + name + "'");
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(DataError::Kind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  json manifest;
  manifest["format"] = kFormatName;
  manifest["version"] = kFormatVersion;
  manifest["tool_version"] = kToolVersion;
  manifest["model_config"] = to_json(ckpt.model);
  manifest["train_config"] = to_json(ckpt.train);
  if (!ckpt.run_config_json.empty()) manifest["run_config"] = json::parse(ckpt.run_config_json);
  json progress;
  progress["epochs_completed"] = ckpt.progress.epochs_completed;
  progress["best_rsum"] = ckpt.progress.best_rsum;
  progress["best_epoch"] = ckpt.progress.best_epoch;
  manifest["progress"] = progress;

  json params = json::array();
  for (const Parameter* p : ckpt.params.all()) params.push_back(matrix_entry(dir, "param.", p->name, p->value));
  manifest["parameters"] = std::move(params);

  if (ckpt.optimizer) {
    const AdamState& a = *ckpt.optimizer;
    json opt;
    opt["kind"] = "adam";
    opt["beta1"] = a.beta1;
    opt["beta2"] = a.beta2;
    opt["eps"] = a.eps;
    opt["step"] = a.step;
    json moments = json::array();
    const auto names = ckpt.params.all();
    for (std::size_t i = 0; i < names.size(); ++i) {
      json pair;
      pair["m"] = matrix_entry(dir, "adam_m.", names[i]->name, a.first_moment.at(i));
      pair["v"] = matrix_entry(dir, "adam_v.", names[i]->name, a.second_moment.at(i));
      moments.push_back(std::move(pair));
    }
    opt["moments"] = std::move(moments);
    manifest["optimizer"] = std::move(opt);
  }

  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  out << manifest.dump(1) << "\n";
  if (!out) throw DataError(DataError::Kind::kIo, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::kIo, "checkpoint manifest not found: " + path.string());
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format").get<std::string>() != kFormatName) {
      throw DataError(DataError::Kind::kManifest, path.string() + " is not a checkpoint manifest");
    }
    if (manifest.at("version").get<int>() != kFormatVersion) {
      throw DataError(DataError::Kind::kManifest, path.string() + ": unsupported checkpoint version");
    }
    Checkpoint c;
    c.model = model_config_from_json(manifest.at("model_config"));
    c.train = train_config_from_json(manifest.at("train_config"));
    if (manifest.contains("run_config")) c.run_config_json = manifest.at("run_config").dump();
    const json& progress = manifest.at("progress");
    c.progress.epochs_completed = progress.at("epochs_completed").get<int>();
    c.progress.best_rsum = progress.at("best_rsum").get<double>();
    c.progress.best_epoch = progress.at("best_epoch").get<int>();

    // Shapes come from the config; the blobs must agree with them.
    c.params = ModelParams::initialize(c.model, 0);
    auto all = c.params.all();
    const json& entries = manifest.at("parameters");
    if (entries.size() != all.size()) {
      throw DataError(DataError::Kind::kManifest, "checkpoint: " + std::to_string(entries.size()) +
                                                      " parameters stored, model has " + std::to_string(all.size()));
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
      Parameter& p = *all[i];
      p.value = read_entry(dir, entries[i], p.name, p.value.rows(), p.value.cols());
      p.zero_grad();
    }
    if (manifest.contains("optimizer")) {
      const json& opt = manifest.at("optimizer");
      AdamState a;
      a.beta1 = opt.at("beta1").get<double>();
      a.beta2 = opt.at("beta2").get<double>();
      a.eps = opt.at("eps").get<double>();
      a.step = opt.at("step").get<std::int64_t>();
      const json& moments = opt.at("moments");
      if (moments.size() != all.size()) {
        throw DataError(DataError::Kind::kManifest, "checkpoint: optimiser state does not match parameters");
      }
      for (std::size_t i = 0; i < all.size(); ++i) {
        const Parameter& p = *all[i];
        a.first_moment.push_back(read_entry(dir, moments[i].at("m"), p.name, p.value.rows(), p.value.cols()));
        a.second_moment.push_back(read_entry(dir, moments[i].at("v"), p.name, p.value.rows(), p.value.cols()));
      }
      c.optimizer = std::move(a);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataError::Kind::kManifest, path.string() + ": " + e.what());
  }
}

}  // namespace cmsei
