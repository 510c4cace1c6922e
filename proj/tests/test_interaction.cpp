#include <doctest.h>

#include <numeric>
#include <random>

#include "cmsei/interaction.hpp"
#include "support/oracles.hpp"

using namespace cmsei;
namespace o = cmsei::oracle;

namespace {

o::Fusion random_fusion(std::mt19937_64& rng, int d) {
  return {o::random(rng, d, d, 0.5), o::random(rng, 1, d, 0.1), o::random(rng, d, d, 0.5),
          o::random(rng, 1, d, 0.1), o::random(rng, d, d, 0.5), o::random(rng, 1, d, 0.1)};
}

BoundFusion bind_fusion(Tape& tape, const o::Fusion& f) {
  return {tape.constant(f.w1), tape.constant(f.b1), tape.constant(f.w2),
          tape.constant(f.b2), tape.constant(f.w3), tape.constant(f.b3)};
}

o::Fusion fusion_of(const FusionParams& p) {
  return {p.w1.value, p.b1.value, p.w2.value, p.b2.value, p.w3.value, p.b3.value};
}

struct Pair {
  ModelConfig config;
  ModelParams params;
  Dataset data;
};

Pair small_pair(std::uint64_t seed, Direction dir = Direction::kImageToText) {
  Pair p;
  p.config.visual_dim = 9;
  p.config.text_dim = 7;
  p.config.embed_dim = 6;
  p.config.direction = dir;
  p.params = ModelParams::initialize(p.config, seed);
  SynthesisOptions so;
  so.visual_dim = 9;
  so.text_dim = 7;
  so.latent_dim = 3;
  so.feature_scale = 1.0;
  p.data = synthesize_dataset(2, 1, 5, 4, 0.6, seed, so);
  return p;
}

double model_score(const Pair& p, const ImageBundle& img, const SentenceBundle& s, const ModelConfig& config) {
  Tape tape(false);
  const BoundParams b = bind_frozen(tape, p.params);
  return score_pair(b, encode_image(tape, b, img, config), encode_sentence(tape, b, s, config), config).scalar();
}

}  // namespace

TEST_CASE("a single context fragment takes all the attention") {
  std::mt19937_64 rng(1);
  Tape tape;
  for (double lambda : {0.1, 1.0, 9.0, 50.0}) {
    const Matrix a = attention_weights(tape.constant(o::random(rng, 4, 3)), tape.constant(o::random(rng, 1, 3)),
                                       lambda).value();
    CHECK(a == Matrix::Ones(4, 1));
  }
  // With one word, every query attends exactly to it.
  const Matrix x = o::random(rng, 3, 4), c = o::random(rng, 1, 4);
  const o::Fusion f = random_fusion(rng, 4);
  const Matrix got = local_local_round(tape.constant(x), tape.constant(c), 9.0, bind_fusion(tape, f)).value();
  CHECK(o::max_abs_diff(got, o::local_local_round(x, c, 123.0, f)) < 1e-12);
}

TEST_CASE("equal similarities give uniform attention and the mean context") {
  Tape tape;
  Matrix dir(1, 3);
  dir << 1.0, -2.0, 0.5;
  Matrix c(4, 3);
  for (int j = 0; j < 4; ++j) c.row(j) = (j + 1.0) * dir;  // parallel rows: equal cosines
  std::mt19937_64 rng(2);
  const Var alpha = attention_weights(tape.constant(o::random(rng, 3, 3)), tape.constant(c), 9.0);
  CHECK((alpha.value().array() - 0.25).abs().maxCoeff() < 1e-15);
  const Matrix attended = matmul(alpha, tape.constant(c)).value();
  for (int i = 0; i < 3; ++i) CHECK(o::max_abs_diff(attended.row(i), o::mean_of_rows(c)) < 1e-12);
}

TEST_CASE("attention rows are distributions") {
  std::mt19937_64 rng(3);
  Tape tape;
  for (int t = 0; t < 20; ++t) {
    const Matrix a =
        attention_weights(tape.constant(o::random(rng, 5, 4)), tape.constant(o::random(rng, 7, 4)), 9.0).value();
    CHECK((a.array() > 0.0).all());
    CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("local-local round matches the elementwise oracle") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const int k = 1 + t % 6, n = 1 + t % 8, d = 2 + t % 7;
    const Matrix x = o::random(rng, k, d), c = o::random(rng, n, d);
    const o::Fusion f = random_fusion(rng, d);
    const double lambda = 0.5 + (t % 10);
    Tape tape;
    const Matrix got = local_local_round(tape.constant(x), tape.constant(c), lambda, bind_fusion(tape, f)).value();
    CHECK(o::max_abs_diff(got, o::local_local_round(x, c, lambda, f)) < 1e-9);
  }
}

TEST_CASE("gate identities: zero context or zero weight gives 1.5 x + relu(v)") {
  std::mt19937_64 rng(5);
  Tape tape;
  const Matrix xt = o::random(rng, 4, 5), v = o::random(rng, 4, 5);
  const Matrix expected = 1.5 * xt + v.cwiseMax(0.0);
  for (GateMode mode : {GateMode::kVector, GateMode::kScalar}) {
    const Matrix zero_g = local_global_gate(tape.constant(xt), tape.constant(Matrix::Zero(1, 5)), tape.constant(v),
                                            tape.constant(o::random(rng, 5, 5)), mode)
                              .value();
    CHECK(o::max_abs_diff(zero_g, expected) < 1e-15);
    const Matrix zero_w = local_global_gate(tape.constant(xt), tape.constant(o::random(rng, 1, 5)), tape.constant(v),
                                            tape.constant(Matrix::Zero(5, 5)), mode)
                              .value();
    CHECK(o::max_abs_diff(zero_w, expected) < 1e-15);
  }
}

TEST_CASE("gate matches the elementwise oracle in both modes") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const int k = 1 + t % 6, d = 2 + t % 7;
    const Matrix xt = o::random(rng, k, d), v = o::random(rng, k, d), g = o::random(rng, 1, d),
                 wr = o::random(rng, d, d);
    for (bool scalar : {false, true}) {
      Tape tape;
      const Matrix got = local_global_gate(tape.constant(xt), tape.constant(g), tape.constant(v), tape.constant(wr),
                                           scalar ? GateMode::kScalar : GateMode::kVector)
                             .value();
      CHECK(o::max_abs_diff(got, o::local_global_gate(xt, g, v, wr, scalar)) < 1e-9);
    }
  }
}

TEST_CASE("pair score identities and oracle") {
  Tape tape;
  Matrix g(1, 3);
  g << 0.3, -1.0, 2.0;
  Matrix same(4, 3);
  for (int i = 0; i < 4; ++i) same.row(i) = g;
  CHECK(pair_score(tape.constant(same), tape.constant(g)).scalar() == doctest::Approx(1.0).epsilon(1e-15));

  Matrix ortho(2, 3);
  ortho << 1.0, 0.3, 0.0, 1.0, 0.3, 0.0;  // pooled (1, 0.3, 0) . g = 0
  CHECK(std::abs(pair_score(tape.constant(ortho), tape.constant(g)).scalar()) < 1e-15);

  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    const Matrix f = o::random(rng, 1 + t % 6, 5), gl = o::random(rng, 1, 5);
    const double s = pair_score(tape.constant(f), tape.constant(gl)).scalar();
    CHECK(std::abs(s - o::pair_score(f, gl)) < 1e-12);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("full pair score equals the composed oracle in both directions") {
  for (Direction dir : {Direction::kImageToText, Direction::kTextToImage}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Pair p = small_pair(seed, dir);
      Tape tape(false);
      const BoundParams b = bind_frozen(tape, p.params);
      const VisualEncoding ve = encode_image(tape, b, p.data.images[0], p.config);
      const TextEncoding te = encode_sentence(tape, b, p.data.sentences[1], p.config);
      const bool i2t = dir == Direction::kImageToText;
      Matrix x = i2t ? ve.final.value() : te.final.value();
      const Matrix c = i2t ? te.final.value() : ve.final.value();
      const Matrix proj = i2t ? ve.projected.value() : te.projected.value();
      const Matrix g = i2t ? o::mean_of_rows(te.projected.value()) : o::mean_of_rows(ve.projected.value());
      for (const auto& f : p.params.fusion) x = o::local_local_round(x, c, p.config.lambda, fusion_of(f));
      x = o::local_global_gate(x, g, proj, p.params.gate.value, false);
      const double got = score_pair(b, ve, te, p.config).scalar();
      CHECK(std::abs(got - o::pair_score(x, g)) < 1e-9);
    }
  }
}

TEST_CASE("score is invariant to word order and region order") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (Direction dir : {Direction::kImageToText, Direction::kTextToImage}) {
      Pair p = small_pair(seed, dir);
      const ImageBundle& img = p.data.images[0];
      const SentenceBundle& s = p.data.sentences[0];
      const double base = model_score(p, img, s, p.config);

      std::mt19937_64 rng(seed);
      SentenceBundle ps = s;
      std::vector<int> wp(s.words());
      std::iota(wp.begin(), wp.end(), 0);
      std::shuffle(wp.begin(), wp.end(), rng);
      for (int i = 0; i < int(wp.size()); ++i) ps.word_features.row(i) = s.word_features.row(wp[i]);
      CHECK(std::abs(model_score(p, img, ps, p.config) - base) < 1e-12);

      ImageBundle pi = img;
      std::vector<int> rp(img.regions()), inverse(img.regions());
      std::iota(rp.begin(), rp.end(), 0);
      std::shuffle(rp.begin(), rp.end(), rng);
      for (int i = 0; i < int(rp.size()); ++i) {
        pi.region_features.row(i) = img.region_features.row(rp[i]);
        pi.boxes[i] = img.boxes[rp[i]];
        inverse[rp[i]] = i;
      }
      for (auto& [a, b] : pi.scene_edges) {
        a = inverse[a];
        b = inverse[b];
      }
      CHECK(std::abs(model_score(p, pi, s, p.config) - base) < 1e-12);
    }
  }
}

TEST_CASE("disabling both interactions scores the enhanced features directly") {
  Pair p = small_pair(3);
  ModelConfig c = p.config;
  c.ablations.no_llii = true;
  c.ablations.no_lgii = true;
  Tape tape(false);
  const BoundParams b = bind_frozen(tape, p.params);
  const VisualEncoding ve = encode_image(tape, b, p.data.images[1], c);
  const TextEncoding te = encode_sentence(tape, b, p.data.sentences[0], c);
  CHECK(refine(b, ve, te, c).value() == ve.final.value());
  CHECK(std::abs(score_pair(b, ve, te, c).scalar() -
                 o::pair_score(ve.final.value(), o::mean_of_rows(te.projected.value()))) < 1e-12);

  // Without the local-global gate the refined features are the last round's output.
  ModelConfig only_llii = p.config;
  only_llii.ablations.no_lgii = true;
  Matrix x = ve.final.value();
  for (const auto& f : p.params.fusion) x = o::local_local_round(x, te.final.value(), c.lambda, fusion_of(f));
  CHECK(o::max_abs_diff(refine(b, ve, te, only_llii).value(), x) < 1e-12);
}

TEST_CASE("rounds use their own weights") {
  Pair p = small_pair(4);
  ModelConfig one = p.config;
  one.rounds = 1;
  ModelParams single = ModelParams::initialize(one, 4);
  CHECK(single.fusion.size() == 1);
  CHECK(p.params.fusion[0].w1.value != p.params.fusion[1].w1.value);
}
