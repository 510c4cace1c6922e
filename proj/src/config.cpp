#include "cmsei/config.hpp"

#include <cmath>

#include "cmsei/errors.hpp"

namespace cmsei {

using json = nlohmann::ordered_json;

std::string to_string(NegativeMode m) { return m == NegativeMode::kSum ? "sum" : "hardest"; }

NegativeMode parse_negative_mode(const std::string& s) {
  if (s == "sum") return NegativeMode::kSum;
  if (s == "hardest") return NegativeMode::kHardest;
  throw ContractError("unknown negative mode '" + s + "' (expected sum or hardest)");
}

TrainConfig TrainConfig::desk_scale() {
  TrainConfig c;
  c.batch_size = 16;
  c.lr = 1e-3;
  c.decay_every = 0;
  c.max_epochs = 40;
  return c;
}

double TrainConfig::lr_at(int epoch) const {
  if (decay_every <= 0) return lr;
  return lr * std::pow(decay_rate, epoch / decay_every);
}

void TrainConfig::validate() const {
  if (!(margin >= 0.0)) throw ContractError("margin must be non-negative");
  if (!(lr >= 0.0)) throw ContractError("learning rate must be non-negative");
  if (!(decay_rate > 0.0)) throw ContractError("decay rate must be positive");
  if (batch_size < 2) throw ContractError("batch size must be at least 2");
  if (max_epochs < 0) throw ContractError("epoch count must be non-negative");
}

json to_json(const ModelConfig& c) {
  json j;
  j["visual_dim"] = c.visual_dim;
  j["text_dim"] = c.text_dim;
  j["embed_dim"] = c.embed_dim;
  j["lambda"] = c.lambda;
  j["mu"] = c.graph.mu;
  j["rounds"] = c.rounds;
  j["direction"] = to_string(c.direction);
  j["gate_mode"] = to_string(c.gate_mode);
  j["semantic_gcn_input"] = to_string(c.semantic_input);
  j["normalize_adjacency"] = c.normalize_adjacency;
  j["ablations"] = c.ablations.describe();
  return j;
}

json to_json(const TrainConfig& c) {
  json j;
  j["margin"] = c.margin;
  j["lr"] = c.lr;
  j["decay_rate"] = c.decay_rate;
  j["decay_every"] = c.decay_every;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["negatives"] = to_string(c.negatives);
  j["seed"] = c.seed;
  return j;
}

json to_json(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["data"] = c.data_path;
  j["validation"] = c.validation_path;
  j["output"] = c.output_path;
  j["threads"] = c.threads;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.visual_dim = j.at("visual_dim").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.lambda = j.at("lambda").get<double>();
    c.graph.mu = j.at("mu").get<double>();
    c.rounds = j.at("rounds").get<int>();
    c.direction = parse_direction(j.at("direction").get<std::string>());
    c.gate_mode = parse_gate_mode(j.at("gate_mode").get<std::string>());
    c.semantic_input = parse_semantic_input(j.at("semantic_gcn_input").get<std::string>());
    c.normalize_adjacency = j.at("normalize_adjacency").get<bool>();
    c.ablations = parse_ablations(j.at("ablations").get<std::string>());
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::kManifest, std::string("model config: ") + e.what());
  } catch (const ContractError& e) {
    throw DataError(DataError::Kind::kManifest, std::string("model config: ") + e.what());
  }
}

TrainConfig train_config_from_json(const json& j) {
  try {
    TrainConfig c;
    c.margin = j.at("margin").get<double>();
    c.lr = j.at("lr").get<double>();
    c.decay_rate = j.at("decay_rate").get<double>();
    c.decay_every = j.at("decay_every").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.negatives = parse_negative_mode(j.at("negatives").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::kManifest, std::string("train config: ") + e.what());
  } catch (const ContractError& e) {
    throw DataError(DataError::Kind::kManifest, std::string("train config: ") + e.what());
  }
}

json provenance(const RunConfig& c) {
  json j;
  j["tool"] = "cmsei";
  j["version"] = kToolVersion;
  j["run_config"] = to_json(c);
  return j;
}

}  // namespace cmsei
