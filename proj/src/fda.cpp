#include "pcaplm/fda.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "pcaplm/util.hpp"

namespace pcaplm {

const char* detector_name(DetectorKind kind) {
  return kind == DetectorKind::threshold ? "threshold" : "elliptic";
}

DetectorKind detector_from_name(const std::string& name) {
  std::string n = to_lower(name);
  if (n == "threshold" || n == "t") return DetectorKind::threshold;
  if (n == "elliptic" || n == "ee") return DetectorKind::elliptic;
  fail(Errc::bad_config, "unknown detector '" + name + "'");
}

const char* label_name(Label label) { return label == Label::failure ? "failure" : "success"; }

ChunkMetrics score_chunk(const ChunkPrediction& pred) {
  if (pred.masked_positions.empty()) fail(Errc::empty_mask, "prediction has no masked positions");
  ChunkMetrics m;
  m.capture_id = pred.capture_id;
  m.chunk_index = pred.chunk_index;
  for (size_t i = 0; i < pred.masked_positions.size(); ++i)
    if (pred.predicted_ids[i] != pred.true_ids[i]) ++m.nom;
  m.mnll = nll_loss(pred);
  return m;
}

namespace {

double top_k_mean(std::vector<double> values, int k) {
  std::sort(values.begin(), values.end(), std::greater<double>());
  size_t take = std::min(values.size(), static_cast<size_t>(k));
  double sum = 0;
  for (size_t i = 0; i < take; ++i) sum += values[i];
  return sum / static_cast<double>(take);
}

}  // namespace

PcapScore aggregate(const std::vector<ChunkMetrics>& metrics, int k) {
  if (metrics.empty()) fail(Errc::empty_metrics, "no chunk metrics to aggregate");
  if (k < 1) fail(Errc::bad_config, "k must be >= 1");
  PcapScore score;
  score.capture_id = metrics.front().capture_id;
  score.k = k;
  std::vector<double> noms, mnlls;
  noms.reserve(metrics.size());
  mnlls.reserve(metrics.size());
  for (const ChunkMetrics& m : metrics) {
    noms.push_back(static_cast<double>(m.nom));
    mnlls.push_back(m.mnll);
  }
  score.nom_k = top_k_mean(noms, k);
  score.mnll_k = top_k_mean(mnlls, k);

  std::vector<int> order(metrics.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& ma = metrics[static_cast<size_t>(a)];
    const auto& mb = metrics[static_cast<size_t>(b)];
    if (ma.nom != mb.nom) return ma.nom > mb.nom;
    return ma.chunk_index < mb.chunk_index;
  });
  size_t take = std::min(order.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < take; ++i)
    score.top_chunks.push_back(metrics[static_cast<size_t>(order[i])].chunk_index);
  return score;
}

PcapScore aggregate_mean(const std::vector<ChunkMetrics>& metrics) {
  if (metrics.empty()) fail(Errc::empty_metrics, "no chunk metrics to aggregate");
  PcapScore score = aggregate(metrics, static_cast<int>(metrics.size()));
  score.k = static_cast<int>(metrics.size());
  return score;
}

ThresholdModel fit_threshold(const std::vector<PcapScore>& train_scores, double multiplier) {
  if (train_scores.size() < 2)
    fail(Errc::too_few_samples, "threshold fit needs at least two scores");
  ThresholdModel model;
  model.multiplier = multiplier;
  double n = static_cast<double>(train_scores.size());
  double mean = 0;
  for (const PcapScore& s : train_scores) mean += s.nom_k;
  mean /= n;
  double var = 0;
  for (const PcapScore& s : train_scores) var += (s.nom_k - mean) * (s.nom_k - mean);
  var /= n;  // population variance
  model.mean_nom_k = mean;
  model.std_nom_k = std::sqrt(var);
  model.threshold = mean + multiplier * model.std_nom_k;
  model.fitted = true;
  return model;
}

double chi2_2dof_quantile(double level) {
  if (level <= 0.0 || level >= 1.0) fail(Errc::bad_config, "level must lie strictly in (0,1)");
  return -2.0 * std::log(1.0 - level);
}

EllipticModel fit_elliptic(const std::vector<PcapScore>& train_scores, double level) {
  if (train_scores.size() < 3) fail(Errc::too_few_samples, "elliptic fit needs at least three scores");
  EllipticModel model;
  model.level = level;
  const double n = static_cast<double>(train_scores.size());
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const PcapScore& s : train_scores) mean += Eigen::Vector2d(s.nom_k, s.mnll_k);
  mean /= n;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const PcapScore& s : train_scores) {
    Eigen::Vector2d d = Eigen::Vector2d(s.nom_k, s.mnll_k) - mean;
    cov += d * d.transpose();
  }
  cov /= n;
  // Ridge if near singular; scaled to the data so affine coherence survives.
  double scale = std::max(cov.trace(), 1e-300);
  double det = cov.determinant();
  if (!(det > 1e-12 * scale * scale)) cov += (1e-9 * scale + 1e-30) * Eigen::Matrix2d::Identity();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  if (es.eigenvalues().minCoeff() <= 0.0)
    fail(Errc::degenerate_covariance, "covariance is singular even after ridge regularization");
  model.mean = mean;
  model.covariance = cov;
  model.cutoff_d2 = chi2_2dof_quantile(level);
  model.fitted = true;
  return model;
}

double mahalanobis_d2(const EllipticModel& model, double nom_k, double mnll_k) {
  if (!model.fitted) fail(Errc::unfitted_model, "elliptic model is not fitted");
  Eigen::Vector2d d(nom_k - model.mean[0], mnll_k - model.mean[1]);
  Eigen::Vector2d x = model.covariance.ldlt().solve(d);
  return d.dot(x);
}

Verdict classify(const PcapScore& score, const ThresholdModel& model) {
  if (!model.fitted) fail(Errc::unfitted_model, "threshold model is not fitted");
  Verdict v;
  v.capture_id = score.capture_id;
  v.score = score;
  v.detector = DetectorKind::threshold;
  v.evidence = score.top_chunks;
  // Strict inequality: a score sitting exactly on the threshold is a success.
  v.label = score.nom_k > model.threshold ? Label::failure : Label::success;
  return v;
}

Verdict classify(const PcapScore& score, const EllipticModel& model) {
  if (!model.fitted) fail(Errc::unfitted_model, "elliptic model is not fitted");
  Verdict v;
  v.capture_id = score.capture_id;
  v.score = score;
  v.detector = DetectorKind::elliptic;
  v.evidence = score.top_chunks;
  v.label = mahalanobis_d2(model, score.nom_k, score.mnll_k) > model.cutoff_d2 ? Label::failure
                                                                               : Label::success;
  return v;
}

Verdict classify(const PcapScore& score, const FdaModel& model) {
  return model.active == DetectorKind::threshold ? classify(score, model.threshold)
                                                 : classify(score, model.elliptic);
}

void save_fda(const FdaModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "# pcaplm-fda v1\n";
  out << "active\t" << detector_name(model.active) << '\n';
  out << "k\t" << model.k << '\n';
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(model.config_hash));
  out << "config_hash\t" << buf << '\n';
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(model.vocab_hash));
  out << "vocab_hash\t" << buf << '\n';
  out << "threshold.fitted\t" << (model.threshold.fitted ? 1 : 0) << '\n';
  out << "threshold.mean\t" << num(model.threshold.mean_nom_k) << '\n';
  out << "threshold.std\t" << num(model.threshold.std_nom_k) << '\n';
  out << "threshold.multiplier\t" << num(model.threshold.multiplier) << '\n';
  out << "threshold.value\t" << num(model.threshold.threshold) << '\n';
  out << "elliptic.fitted\t" << (model.elliptic.fitted ? 1 : 0) << '\n';
  out << "elliptic.mean\t" << num(model.elliptic.mean[0]) << '\t' << num(model.elliptic.mean[1])
      << '\n';
  out << "elliptic.cov\t" << num(model.elliptic.covariance(0, 0)) << '\t'
      << num(model.elliptic.covariance(0, 1)) << '\t' << num(model.elliptic.covariance(1, 0))
      << '\t' << num(model.elliptic.covariance(1, 1)) << '\n';
  out << "elliptic.cutoff_d2\t" << num(model.elliptic.cutoff_d2) << '\n';
  out << "elliptic.level\t" << num(model.elliptic.level) << '\n';
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

FdaModel load_fda(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# pcaplm-fda", 0) != 0)
    fail(Errc::io_failure, path + ": not an FDA model file");
  FdaModel model;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto parts = split_char(line, '\t');
    const std::string& key = parts[0];
    auto want = [&](size_t n) {
      if (parts.size() < n + 1) fail(Errc::io_failure, path + ": malformed line '" + line + "'");
    };
    if (key == "active") {
      want(1);
      model.active = detector_from_name(parts[1]);
    } else if (key == "k") {
      want(1);
      model.k = std::stoi(parts[1]);
    } else if (key == "config_hash") {
      want(1);
      model.config_hash = std::stoull(parts[1], nullptr, 16);
    } else if (key == "vocab_hash") {
      want(1);
      model.vocab_hash = std::stoull(parts[1], nullptr, 16);
    } else if (key == "threshold.fitted") {
      want(1);
      model.threshold.fitted = parts[1] == "1";
    } else if (key == "threshold.mean") {
      want(1);
      model.threshold.mean_nom_k = std::stod(parts[1]);
    } else if (key == "threshold.std") {
      want(1);
      model.threshold.std_nom_k = std::stod(parts[1]);
    } else if (key == "threshold.multiplier") {
      want(1);
      model.threshold.multiplier = std::stod(parts[1]);
    } else if (key == "threshold.value") {
      want(1);
      model.threshold.threshold = std::stod(parts[1]);
    } else if (key == "elliptic.fitted") {
      want(1);
      model.elliptic.fitted = parts[1] == "1";
    } else if (key == "elliptic.mean") {
      want(2);
      model.elliptic.mean[0] = std::stod(parts[1]);
      model.elliptic.mean[1] = std::stod(parts[2]);
    } else if (key == "elliptic.cov") {
      want(4);
      model.elliptic.covariance(0, 0) = std::stod(parts[1]);
      model.elliptic.covariance(0, 1) = std::stod(parts[2]);
      model.elliptic.covariance(1, 0) = std::stod(parts[3]);
      model.elliptic.covariance(1, 1) = std::stod(parts[4]);
    } else if (key == "elliptic.cutoff_d2") {
      want(1);
      model.elliptic.cutoff_d2 = std::stod(parts[1]);
    } else if (key == "elliptic.level") {
      want(1);
      model.elliptic.level = std::stod(parts[1]);
    }
  }
  return model;
}

}  // namespace pcaplm
