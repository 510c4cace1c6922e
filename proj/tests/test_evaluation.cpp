#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "cmsei/checkpoint.hpp"
#include "cmsei/errors.hpp"
#include "cmsei/evaluation.hpp"
#include "cmsei/interaction.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace cmsei;
namespace o = cmsei::oracle;
namespace fs = std::filesystem;

namespace {

SimilarityMatrix random_sim(std::mt19937_64& rng, int images, int per_image) {
  SimilarityMatrix s;
  s.scores = o::random(rng, images, images * per_image);
  for (int i = 0; i < images; ++i)
    for (int c = 0; c < per_image; ++c) s.sentence_image.push_back(i);
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.visual_dim = 8;
  c.text_dim = 6;
  c.embed_dim = 6;
  return c;
}

Dataset small_data(int images, int captions, std::uint64_t seed, double signal) {
  SynthesisOptions so;
  so.visual_dim = 8;
  so.text_dim = 6;
  so.latent_dim = 4;
  so.feature_scale = 1.0;
  so.projection_seed = seed;
  return synthesize_dataset(images, captions, 4, 4, signal, seed, so);
}

}  // namespace

TEST_CASE("diagonal-dominant identity pairing recalls everything") {
  SimilarityMatrix s;
  s.scores = Matrix::Identity(12, 12);
  for (int i = 0; i < 12; ++i) s.sentence_image.push_back(i);
  const RetrievalReport r = retrieval_report(s);
  CHECK(r.sentence_r1 == 100.0);
  CHECK(r.image_r1 == 100.0);
  CHECK(r.rsum == 600.0);
}

TEST_CASE("true items ranked second give R@1 = 0 and R@5 = 100") {
  const int n = 12;
  SimilarityMatrix s;
  s.scores = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    s.sentence_image.push_back(i);
    s.scores(i, i) = 0.5;
    s.scores(i, (i + 1) % n) = 0.9;  // a distractor above the truth in row i and column i+1
    s.scores((i + 1) % n, i) = 0.0;
  }
  CHECK(recall_at_k(s, 1, RetrievalDirection::kSentenceRetrieval) == 0.0);
  CHECK(recall_at_k(s, 5, RetrievalDirection::kSentenceRetrieval) == 100.0);
  CHECK(recall_at_k(s, 1, RetrievalDirection::kImageRetrieval) == 0.0);
  CHECK(recall_at_k(s, 5, RetrievalDirection::kImageRetrieval) == 100.0);
}

TEST_CASE("ties rank by lower candidate index") {
  SimilarityMatrix s;
  s.scores = Matrix::Constant(2, 2, 0.3);
  s.sentence_image = {0, 1};
  // Image 0 finds sentence 0 first; image 1 finds sentence 0 first too (miss).
  CHECK(recall_at_k(s, 1, RetrievalDirection::kSentenceRetrieval) == 50.0);
  CHECK(recall_at_k(s, 1, RetrievalDirection::kImageRetrieval) == 50.0);
}

TEST_CASE("recall agrees with an exhaustive sort on random matrices") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 30; ++t) {
    SimilarityMatrix s = random_sim(rng, 10 + t, 1 + t % 5);
    if (t % 4 == 0) s.scores = (s.scores * 2.0).array().round() / 2.0;  // many ties
    for (int k : {1, 5, 10}) {
      CHECK(recall_at_k(s, k, RetrievalDirection::kSentenceRetrieval) ==
            o::recall_sentence(s.scores, s.sentence_image, k));
      CHECK(recall_at_k(s, k, RetrievalDirection::kImageRetrieval) == o::recall_image(s.scores, s.sentence_image, k));
    }
  }
}

TEST_CASE("recall preconditions") {
  std::mt19937_64 rng(2);
  const SimilarityMatrix s = random_sim(rng, 4, 2);
  CHECK_THROWS_AS(recall_at_k(s, 0, RetrievalDirection::kImageRetrieval), ContractError);
  CHECK_THROWS_AS(recall_at_k(s, 5, RetrievalDirection::kImageRetrieval), ContractError);
  CHECK_NOTHROW(recall_at_k(s, 8, RetrievalDirection::kSentenceRetrieval));
  SimilarityMatrix bad = s;
  bad.sentence_image.pop_back();
  CHECK_THROWS_AS(recall_at_k(bad, 1, RetrievalDirection::kImageRetrieval), DimensionError);
}

TEST_CASE("five-fold averaging") {
  std::mt19937_64 rng(3);
  // Identical folds average to one fold's report.
  const SimilarityMatrix one = random_sim(rng, 10, 2);
  SimilarityMatrix five;
  five.scores = Matrix::Constant(50, 100, -10.0);
  for (int f = 0; f < 5; ++f) {
    five.scores.block(f * 10, f * 20, 10, 20) = one.scores;
    for (int img : one.sentence_image) five.sentence_image.push_back(img + f * 10);
  }
  const RetrievalReport single = retrieval_report(one);
  const RetrievalReport avg = five_fold_average(five, 10);
  CHECK(avg.rsum == doctest::Approx(single.rsum).epsilon(1e-12));
  CHECK(avg.image_r5 == doctest::Approx(single.image_r5).epsilon(1e-12));

  // Random 50 images against a per-fold recomputation.
  const SimilarityMatrix big = random_sim(rng, 50, 2);
  RetrievalReport manual;
  for (int f = 0; f < 5; ++f) {
    SimilarityMatrix part;
    part.scores = big.scores.block(f * 10, f * 20, 10, 20);
    for (int c = 0; c < 20; ++c) part.sentence_image.push_back(c / 2);
    manual.rsum += retrieval_report(part).rsum / 5.0;
  }
  CHECK(five_fold_average(big, 10).rsum == doctest::Approx(manual.rsum).epsilon(1e-12));

  // A perfect fold and a hopeless fold average to 50 everywhere.
  SimilarityMatrix mixed;
  mixed.scores = Matrix::Zero(20, 20);
  for (int i = 0; i < 20; ++i) mixed.sentence_image.push_back(i);
  for (int i = 0; i < 10; ++i) mixed.scores(i, i) = 1.0;
  mixed.scores.block(10, 10, 10, 10).setConstant(1.0);
  for (int i = 10; i < 20; ++i) mixed.scores(i, i) = -1.0;  // truth ranked last
  const RetrievalReport half = five_fold_average(mixed, 10);
  CHECK(half.sentence_r1 == 50.0);
  CHECK(half.sentence_r5 == 50.0);
  CHECK(half.sentence_r10 == 100.0);  // R@10 over 10 candidates always hits
  CHECK(half.image_r1 == 50.0);
  CHECK_THROWS_AS(five_fold_average(mixed, 7), ContractError);
}

TEST_CASE("ensemble is the elementwise mean") {
  std::mt19937_64 rng(4);
  const SimilarityMatrix a = random_sim(rng, 6, 2), b = random_sim(rng, 6, 2);
  CHECK(ensemble(a, a).scores == a.scores);
  SimilarityMatrix neg = a;
  neg.scores = -a.scores;
  CHECK(ensemble(a, neg).scores.isZero(0.0));
  const Matrix e = ensemble(a, b).scores;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 12; ++j) CHECK(e(i, j) == (a.scores(i, j) + b.scores(i, j)) / 2.0);
  SimilarityMatrix other = random_sim(rng, 5, 2);
  CHECK_THROWS_AS(ensemble(a, other), DimensionError);
}

TEST_CASE("report renders as json and as an aligned table") {
  RetrievalReport r;
  r.sentence_r1 = 12.5;
  r.rsum = 12.5;
  const auto j = r.to_json();
  CHECK(j["sentence_retrieval"]["R@1"] == 12.5);
  CHECK(j["rsum"] == 12.5);
  const std::string t = r.table("CMSEI");
  CHECK(t.find("rSum") != std::string::npos);
  CHECK(t.find("12.5") != std::string::npos);
  CHECK(t.find("CMSEI") != std::string::npos);
}

TEST_CASE("blocked, threaded scoring equals per-pair scoring") {
  const ModelConfig config = small_model();
  const ModelParams params = ModelParams::initialize(config, 2);
  const Dataset d = small_data(7, 2, 5, 0.5);
  const SimilarityMatrix serial = compute_similarity(config, params, d, {1, 32});
  const SimilarityMatrix blocked = compute_similarity(config, params, d, {3, 2});
  CHECK(serial.scores == blocked.scores);
  CHECK(serial.sentence_image == d.sentence_image_index());
  for (int i = 0; i < 7; ++i)
    for (int s = 0; s < 14; ++s) {
      Tape tape(false);
      const BoundParams b = bind_frozen(tape, params);
      const double ref = score_pair(b, encode_image(tape, b, d.images[i], config),
                                    encode_sentence(tape, b, d.sentences[s], config), config)
                             .scalar();
      CHECK(serial.scores(i, s) == ref);
    }
}

TEST_CASE("untrained model on signal-free data scores at chance") {
  // One caption per image: chance R@1 is 100 / n_images in both directions.
  const int n = 10;
  double sentence = 0.0, image = 0.0;
  const int seeds = 60;
  for (int seed = 0; seed < seeds; ++seed) {
    const ModelConfig config = small_model();
    const ModelParams params = ModelParams::initialize(config, 1000 + seed);
    const SimilarityMatrix s = compute_similarity(config, params, small_data(n, 1, seed, 0.0));
    sentence += recall_at_k(s, 1, RetrievalDirection::kSentenceRetrieval) / seeds;
    image += recall_at_k(s, 1, RetrievalDirection::kImageRetrieval) / seeds;
  }
  // Standard error of a 60-seed mean of a 10-trial binomial at p = 0.1 is ~1.2 points.
  CHECK(std::abs(sentence - 100.0 / n) < 4.0);
  CHECK(std::abs(image - 100.0 / n) < 4.0);
}

TEST_CASE("graph dumps hold one file per sample") {
  testing::TempDir tmp;
  const ModelConfig config = small_model();
  const Dataset d = small_data(3, 2, 1, 0.5);
  dump_graphs(config, ModelParams::initialize(config, 1), d, tmp.path());
  const auto img = nlohmann::json::parse(std::ifstream(tmp.path() / "img_00000.json"));
  CHECK(img["graphs"].size() == 2);
  CHECK(img["graphs"][0]["kind"] == "spatial");
  CHECK(img["graphs"][1]["kind"] == "semantic");
  CHECK(img["graphs"][0]["size"] == 4);
  const auto sent = nlohmann::json::parse(std::ifstream(tmp.path() / "img_00002_s1.json"));
  CHECK(sent["graphs"][0]["kind"] == "textual");
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path())) ++files;
  CHECK(files == 9);
}

TEST_CASE("checkpoint roundtrip preserves every parameter bit") {
  testing::TempDir tmp;
  Checkpoint c;
  c.model = small_model();
  c.model.ablations.no_llii = true;
  c.model.direction = Direction::kTextToImage;
  c.train = TrainConfig::desk_scale();
  c.params = ModelParams::initialize(c.model, 3);
  AdamState a = AdamState::for_params(c.params);
  a.step = 7;
  a.first_moment[2].setConstant(0.125);
  c.optimizer = a;
  c.progress = {4, 321.5, 3};
  c.run_config_json = R"({"command":"train"})";
  save_checkpoint(c, tmp.path() / "x.ckpt");
  const Checkpoint back = load_checkpoint(tmp.path() / "x.ckpt");
  CHECK(back.model == c.model);
  CHECK(back.train == c.train);
  CHECK(back.progress.best_rsum == 321.5);
  CHECK(back.optimizer->step == 7);
  CHECK(back.optimizer->first_moment[2] == a.first_moment[2]);
  const auto pa = c.params.all();
  const auto pb = back.params.all();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(nlohmann::json::parse(back.run_config_json)["command"] == "train");
}

TEST_CASE("damaged checkpoints are data errors") {
  testing::TempDir tmp;
  Checkpoint c;
  c.model = small_model();
  c.params = ModelParams::initialize(c.model, 3);
  save_checkpoint(c, tmp.path());
  fs::resize_file(tmp.path() / "param.spatial.gcn.f64", 8);
  CHECK_THROWS_AS(load_checkpoint(tmp.path()), DataError);
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "nowhere"), DataError);
}
