#include "pcaplm/fda.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

using namespace pcaplm;

namespace {

ChunkPrediction synthetic_prediction(DetRng& rng, int m, int vocab) {
  ChunkPrediction p;
  p.capture_id = "s";
  p.chunk_index = 0;
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd logits(vocab);
    for (int v = 0; v < vocab; ++v) logits[v] = rng.next_normal() * 2.0;
    Eigen::VectorXd probs = softmax(logits);
    int arg = 0;
    for (int v = 1; v < vocab; ++v)
      if (probs[v] > probs[arg]) arg = v;
    p.masked_positions.push_back(i);
    p.probabilities.push_back(probs);
    p.predicted_ids.push_back(arg);
    p.true_ids.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab))));
  }
  return p;
}

std::vector<PcapScore> scores_from(const std::vector<std::pair<double, double>>& pts) {
  std::vector<PcapScore> out;
  for (size_t i = 0; i < pts.size(); ++i) {
    PcapScore s;
    s.capture_id = "p" + std::to_string(i);
    s.nom_k = pts[i].first;
    s.mnll_k = pts[i].second;
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("score_chunk analytic cases") {
  ChunkPrediction perfect;
  perfect.masked_positions = {0, 1};
  perfect.true_ids = {3, 4};
  perfect.predicted_ids = {3, 4};
  Eigen::VectorXd sure = Eigen::VectorXd::Zero(8);
  sure[3] = 1.0;
  perfect.probabilities.push_back(sure);
  Eigen::VectorXd sure2 = Eigen::VectorXd::Zero(8);
  sure2[4] = 1.0;
  perfect.probabilities.push_back(sure2);
  ChunkMetrics m = score_chunk(perfect);
  CHECK(m.nom == 0);
  CHECK(m.mnll == 0.0);

  ChunkPrediction wrong;
  for (int i = 0; i < 13; ++i) {
    wrong.masked_positions.push_back(i);
    wrong.true_ids.push_back(1);
    wrong.predicted_ids.push_back(2);
    wrong.probabilities.push_back(Eigen::VectorXd::Constant(4, 0.25));
  }
  CHECK(score_chunk(wrong).nom == 13);

  ChunkPrediction empty;
  try {
    score_chunk(empty);
    FAIL("expected EmptyMask");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_mask);
  }
}

TEST_CASE("score_chunk matches a brute-force per-position scan") {
  DetRng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    ChunkPrediction p = synthetic_prediction(rng, 1 + static_cast<int>(rng.next_below(13)), 17);
    ChunkMetrics m = score_chunk(p);
    int nom = 0;
    double nll = 0;
    for (size_t i = 0; i < p.masked_positions.size(); ++i) {
      // Direct scan oracle, including the lowest-id argmax tie rule.
      int arg = 0;
      for (int v = 1; v < 17; ++v)
        if (p.probabilities[i][v] > p.probabilities[i][arg]) arg = v;
      if (arg != p.true_ids[i]) ++nom;
      nll -= std::log(p.probabilities[i][p.true_ids[i]]);
    }
    CHECK(m.nom == nom);
    CHECK(m.mnll ==
          doctest::Approx(nll / static_cast<double>(p.masked_positions.size())).epsilon(1e-12));
  }
}

TEST_CASE("aggregate analytic cases") {
  std::vector<ChunkMetrics> metrics;
  int noms[] = {5, 1, 0, 7};
  for (int i = 0; i < 4; ++i) {
    ChunkMetrics m;
    m.capture_id = "a";
    m.chunk_index = i;
    m.nom = noms[i];
    m.mnll = noms[i] * 0.5;
    metrics.push_back(m);
  }
  PcapScore s = aggregate(metrics, 3);
  CHECK(s.nom_k == doctest::Approx(13.0 / 3).epsilon(1e-12));
  CHECK(s.top_chunks == std::vector<int>{3, 0, 1});

  PcapScore single = aggregate({metrics[0]}, 3);
  CHECK(single.nom_k == 5.0);
  CHECK(single.mnll_k == 2.5);

  try {
    aggregate({}, 3);
    FAIL("expected EmptyMetrics");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_metrics);
  }
}

TEST_CASE("aggregate matches a sort-based oracle on random lists") {
  DetRng rng(72);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 1 + static_cast<int>(rng.next_below(12));
    std::vector<ChunkMetrics> metrics;
    std::vector<double> noms, mnlls;
    for (int i = 0; i < n; ++i) {
      ChunkMetrics m;
      m.capture_id = "r";
      m.chunk_index = i;
      m.nom = static_cast<int>(rng.next_below(20));
      m.mnll = rng.next_double() * 9;
      metrics.push_back(m);
      noms.push_back(m.nom);
      mnlls.push_back(m.mnll);
    }
    int k = 1 + static_cast<int>(rng.next_below(5));
    PcapScore s = aggregate(metrics, k);
    std::sort(noms.rbegin(), noms.rend());
    std::sort(mnlls.rbegin(), mnlls.rend());
    size_t take = std::min(static_cast<size_t>(k), noms.size());
    double nom_k = 0, mnll_k = 0;
    for (size_t i = 0; i < take; ++i) {
      nom_k += noms[i];
      mnll_k += mnlls[i];
    }
    CHECK(s.nom_k == doctest::Approx(nom_k / take).epsilon(1e-12));
    CHECK(s.mnll_k == doctest::Approx(mnll_k / take).epsilon(1e-12));
    // Aggregation bound: min <= top-k mean <= max.
    CHECK(s.nom_k >= *std::min_element(noms.begin(), noms.end()) - 1e-12);
    CHECK(s.nom_k <= *std::max_element(noms.begin(), noms.end()) + 1e-12);
  }
}

TEST_CASE("fit_threshold analytic cases") {
  auto equal = scores_from({{4, 0}, {4, 0}, {4, 0}});
  ThresholdModel m = fit_threshold(equal, 3.0);
  CHECK(m.threshold == 4.0);
  CHECK(m.std_nom_k == 0.0);

  auto pair = scores_from({{0, 0}, {2, 0}});
  m = fit_threshold(pair, 3.0);
  CHECK(m.mean_nom_k == 1.0);
  CHECK(m.std_nom_k == 1.0);  // population std
  CHECK(m.threshold == 4.0);

  try {
    fit_threshold(scores_from({{1, 1}}), 3.0);
    FAIL("expected TooFewSamples");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::too_few_samples);
  }
}

TEST_CASE("one-sided gaussian exceedance sits near 0.00135") {
  DetRng rng(73);
  std::vector<PcapScore> scores;
  scores.reserve(100000);
  for (int i = 0; i < 100000; ++i) {
    PcapScore s;
    s.nom_k = rng.next_normal();
    scores.push_back(s);
  }
  ThresholdModel m = fit_threshold(scores, 3.0);
  int above = 0;
  for (const PcapScore& s : scores)
    if (s.nom_k > m.threshold) ++above;
  double fraction = static_cast<double>(above) / 100000.0;
  CHECK(std::abs(fraction - 0.00135) < 0.0005);
}

TEST_CASE("elliptic fit analytic cases") {
  // Axis points with exact identity covariance around the origin.
  const double r = std::sqrt(2.0);
  auto pts = scores_from({{r, 0}, {-r, 0}, {0, r}, {0, -r}});
  // Level chosen so the squared cutoff is exactly 9.
  double level = 1.0 - std::exp(-4.5);
  EllipticModel m = fit_elliptic(pts, level);
  CHECK(m.cutoff_d2 == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(m.mean[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.covariance(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m.covariance(1, 1) == doctest::Approx(1.0).epsilon(1e-9));

  // A point exactly on the boundary is a success under the strict rule.
  PcapScore boundary;
  boundary.capture_id = "b";
  boundary.nom_k = 3.0;
  boundary.mnll_k = 0.0;
  CHECK(mahalanobis_d2(m, 3.0, 0.0) == doctest::Approx(9.0).epsilon(1e-9));
  CHECK(classify(boundary, m).label == Label::success);

  // Pythagorean distance with identity covariance and zero mean.
  EllipticModel ident;
  ident.fitted = true;
  ident.mean = Eigen::Vector2d::Zero();
  ident.covariance = Eigen::Matrix2d::Identity();
  CHECK(std::sqrt(mahalanobis_d2(ident, 3.0, 4.0)) == doctest::Approx(5.0).epsilon(1e-12));

  try {
    fit_elliptic(scores_from({{1, 1}, {2, 2}}), 0.997);
    FAIL("expected TooFewSamples");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::too_few_samples);
  }
}

TEST_CASE("mahalanobis agrees with the closed-form 2x2 inverse oracle") {
  DetRng rng(74);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 3 + static_cast<int>(rng.next_below(40));
    std::vector<std::pair<double, double>> pts;
    double ax = 1 + rng.next_double() * 4, bx = rng.next_double() * 2;
    for (int i = 0; i < n; ++i) {
      double u = rng.next_normal(), v = rng.next_normal();
      pts.push_back({3 + ax * u, 1 + bx * u + v});
    }
    auto scores = scores_from(pts);
    EllipticModel m = fit_elliptic(scores, 0.997);

    // Closed-form inverse: [[a,b],[c,d]]^-1 = 1/det [[d,-b],[-c,a]].
    double a = m.covariance(0, 0), b = m.covariance(0, 1);
    double c = m.covariance(1, 0), d = m.covariance(1, 1);
    double det = a * d - b * c;
    for (int q = 0; q < 20; ++q) {
      double x = rng.next_normal() * 6, y = rng.next_normal() * 6;
      double dx = x - m.mean[0], dy = y - m.mean[1];
      double oracle = (dx * (d * dx - b * dy) + dy * (-c * dx + a * dy)) / det;
      double got = mahalanobis_d2(m, x, y);
      CHECK(std::abs(got - oracle) < 1e-9);
      PcapScore s;
      s.capture_id = "q";
      s.nom_k = x;
      s.mnll_k = y;
      CHECK(classify(s, m).label == (oracle > m.cutoff_d2 ? Label::failure : Label::success));
    }
  }
}

TEST_CASE("threshold classification boundary is strict") {
  auto train = scores_from({{0, 0}, {2, 0}});
  ThresholdModel m = fit_threshold(train, 3.0);  // threshold 4
  PcapScore at;
  at.capture_id = "at";
  at.nom_k = 4.0;
  CHECK(classify(at, m).label == Label::success);
  PcapScore above = at;
  above.nom_k = 4.0 + 1e-9;
  CHECK(classify(above, m).label == Label::failure);

  ThresholdModel unfitted;
  try {
    classify(at, unfitted);
    FAIL("expected UnfittedModel");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::unfitted_model);
  }
}

TEST_CASE("classification matches an independent rule re-implementation") {
  DetRng rng(75);
  auto train = scores_from({{1, 1}, {2, 2}, {3, 1.5}, {2.5, 1.2}, {1.5, 0.8}});
  ThresholdModel tm = fit_threshold(train, 3.0);
  EllipticModel em = fit_elliptic(train, 0.997);
  for (int i = 0; i < 200; ++i) {
    PcapScore s;
    s.capture_id = "x";
    s.nom_k = rng.next_double() * 10;
    s.mnll_k = rng.next_double() * 5;
    CHECK(classify(s, tm).label == (s.nom_k > tm.threshold ? Label::failure : Label::success));
    double d2 = mahalanobis_d2(em, s.nom_k, s.mnll_k);
    CHECK(classify(s, em).label == (d2 > em.cutoff_d2 ? Label::failure : Label::success));
  }
}

TEST_CASE("threshold monotonicity: raising a chunk nom never unflags a failure") {
  DetRng rng(76);
  auto train = scores_from({{1, 1}, {2, 2}, {1.5, 1.2}});
  ThresholdModel tm = fit_threshold(train, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ChunkMetrics> metrics;
    int n = 1 + static_cast<int>(rng.next_below(8));
    for (int i = 0; i < n; ++i) {
      ChunkMetrics m;
      m.capture_id = "mono";
      m.chunk_index = i;
      m.nom = static_cast<int>(rng.next_below(10));
      m.mnll = rng.next_double();
      metrics.push_back(m);
    }
    Verdict before = classify(aggregate(metrics, 3), tm);
    size_t bump = rng.next_below(metrics.size());
    metrics[bump].nom += 1 + static_cast<int>(rng.next_below(5));
    Verdict after = classify(aggregate(metrics, 3), tm);
    if (before.label == Label::failure) CHECK(after.label == Label::failure);
  }
}

TEST_CASE("elliptic scale coherence: common rescaling never flips verdicts") {
  DetRng rng(77);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 40; ++i)
    pts.push_back({5 + rng.next_normal() * 2, 2 + rng.next_normal()});
  const double factor = 37.5;
  std::vector<std::pair<double, double>> scaled;
  for (auto [x, y] : pts) scaled.push_back({x * factor, y * factor});
  EllipticModel m1 = fit_elliptic(scores_from(pts), 0.997);
  EllipticModel m2 = fit_elliptic(scores_from(scaled), 0.997);
  for (int q = 0; q < 100; ++q) {
    double x = rng.next_double() * 20, y = rng.next_double() * 8;
    double d1 = mahalanobis_d2(m1, x, y);
    double d2 = mahalanobis_d2(m2, x * factor, y * factor);
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-6));
  }
}

TEST_CASE("fit-set sanity: training scores inside the threshold stay successes") {
  DetRng rng(78);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 50; ++i) pts.push_back({rng.next_double() * 6, 0});
  auto scores = scores_from(pts);
  ThresholdModel tm = fit_threshold(scores, 3.0);
  for (const PcapScore& s : scores)
    if (s.nom_k <= tm.threshold) CHECK(classify(s, tm).label == Label::success);
}

TEST_CASE("fda model file round-trips both detectors") {
  auto train = scores_from({{1, 1}, {2, 2}, {3, 1.5}, {2.5, 1.2}});
  FdaModel model;
  model.active = DetectorKind::elliptic;
  model.k = 3;
  model.config_hash = 0xfeed;
  model.vocab_hash = 0xbeef;
  model.threshold = fit_threshold(train, 3.0);
  model.elliptic = fit_elliptic(train, 0.997);

  auto dir = std::filesystem::temp_directory_path() / "pcaplm_test_fda";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "fda.txt").string();
  save_fda(model, path);
  FdaModel back = load_fda(path);
  CHECK(back.active == DetectorKind::elliptic);
  CHECK(back.k == 3);
  CHECK(back.config_hash == 0xfeed);
  CHECK(back.vocab_hash == 0xbeef);
  CHECK(back.threshold.threshold == model.threshold.threshold);
  CHECK(back.threshold.mean_nom_k == model.threshold.mean_nom_k);
  CHECK(back.elliptic.cutoff_d2 == model.elliptic.cutoff_d2);
  CHECK(back.elliptic.covariance(0, 1) == model.elliptic.covariance(0, 1));

  // Verdicts agree after the round trip.
  DetRng rng(79);
  for (int i = 0; i < 50; ++i) {
    PcapScore s;
    s.capture_id = "rt";
    s.nom_k = rng.next_double() * 8;
    s.mnll_k = rng.next_double() * 4;
    CHECK(classify(s, model).label == classify(s, back).label);
  }
}

TEST_CASE("chi-square quantile for 2 dof") {
  // F(x) = 1 - exp(-x/2), so the quantile is -2 ln(1 - p).
  CHECK(chi2_2dof_quantile(1.0 - std::exp(-4.5)) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(chi2_2dof_quantile(0.997) == doctest::Approx(11.618285980628055).epsilon(1e-12));
}
