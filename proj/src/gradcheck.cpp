#include "cmsei/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "cmsei/config.hpp"
#include "cmsei/data.hpp"
#include "cmsei/training.hpp"

namespace cmsei {

bool GradcheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.passed; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

nlohmann::ordered_json GradcheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["passed"] = passed();
  j["max_rel_error"] = max_rel_error();
  nlohmann::ordered_json gs = nlohmann::ordered_json::array();
  for (const auto& g : groups) {
    gs.push_back({{"group", g.group}, {"max_rel_error", g.max_rel_error}, {"checked", g.checked}, {"passed", g.passed}});
  }
  j["groups"] = std::move(gs);
  return j;
}

GradcheckReport gradient_check(std::uint64_t seed, const GradcheckOptions& options) {
  SynthesisOptions synth;
  synth.visual_dim = options.visual_dim;
  synth.text_dim = options.text_dim;
  synth.latent_dim = 4;
  synth.feature_scale = 1.0;
  synth.projection_seed = seed;
  const Dataset data = synthesize_dataset(options.images, 1, options.regions, options.words, 0.7, seed, synth);

  ModelConfig model;
  model.visual_dim = options.visual_dim;
  model.text_dim = options.text_dim;
  model.embed_dim = options.embed_dim;
  model.direction = options.direction;
  // Coarse boxes make the IoU mask mix kept and dropped pairs.
  model.graph.mu = 0.3;

  TrainConfig train;
  train.margin = options.margin;

  ModelParams params = ModelParams::initialize(model, seed);
  const std::vector<int> owner = data.sentence_image_index();
  std::vector<int> batch(data.sentences.size());
  std::iota(batch.begin(), batch.end(), 0);

  auto loss_value = [&]() {
    Tape tape(false);
    const BoundParams bound = bind_frozen(tape, params);
    return batch_loss(tape, bound, data, owner, batch, model, train).scalar();
  };

  params.zero_grad();
  {
    Tape tape;
    const BoundParams bound = bind(tape, params);
    tape.backward(batch_loss(tape, bound, data, owner, batch, model, train));
  }

  std::map<std::string, GroupResult> groups;
  std::vector<std::string> order;
  for (Parameter* p : params.all()) {
    const std::string g = parameter_group(p->name);
    if (!groups.count(g)) {
      order.push_back(g);
      groups[g].group = g;
    }
    GroupResult& r = groups[g];
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      const double analytic = p->grad.data()[i];
      // An activation within one step of a ReLU kink spoils the difference
      // quotient; shrinking the step moves the probe off the kink. A larger
      // step lifts tiny gradients above the roundoff of a large loss.
      double best = std::numeric_limits<double>::infinity();
      for (double h : {options.step, options.step / 10, options.step / 100, options.step * 10}) {
        if (best < options.tolerance) break;
        x = saved + h;
        const double up = loss_value();
        x = saved - h;
        const double down = loss_value();
        x = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), options.abs_floor});
        best = std::min(best, std::abs(numeric - analytic) / denom);
      }
      r.max_rel_error = std::max(r.max_rel_error, best);
      ++r.checked;
    }
  }

  GradcheckReport report;
  report.seed = seed;
  for (const auto& g : order) {
    GroupResult r = groups[g];
    r.passed = r.max_rel_error < options.tolerance;
    report.groups.push_back(r);
  }
  return report;
}

}  // namespace cmsei
