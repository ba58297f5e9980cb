#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pcaplm/model.hpp"

namespace pcaplm {

struct ChunkMetrics {
  std::string capture_id;
  int chunk_index = 0;
  int nom = 0;      // masked positions whose argmax misses the true token
  double mnll = 0;  // mean NLL over the chunk's masked positions
  uint32_t first_frame = 0;
  uint32_t last_frame = 0;
};

struct PcapScore {
  std::string capture_id;
  double nom_k = 0;
  double mnll_k = 0;
  int k = 3;
  std::vector<int> top_chunks;  // chunk indexes by nom descending, at most k
};

struct ThresholdModel {
  double mean_nom_k = 0;
  double std_nom_k = 0;  // population standard deviation
  double multiplier = 3.0;
  double threshold = 0;  // mean + multiplier * std
  bool fitted = false;
};

struct EllipticModel {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();  // over (nom_k, mnll_k)
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Identity();
  double cutoff_d2 = 0;  // squared Mahalanobis cutoff
  double level = 0.997;
  bool fitted = false;
};

enum class DetectorKind { threshold, elliptic };
enum class Label { success, failure };

const char* detector_name(DetectorKind kind);
DetectorKind detector_from_name(const std::string& name);
const char* label_name(Label label);

struct Verdict {
  std::string capture_id;
  Label label = Label::success;
  PcapScore score;
  DetectorKind detector = DetectorKind::threshold;
  std::vector<int> evidence;  // top_chunks of the score
};

ChunkMetrics score_chunk(const ChunkPrediction& pred);

// nom_k / mnll_k are means of the k largest chunk values, ranked
// independently per metric (all chunks when fewer than k).
PcapScore aggregate(const std::vector<ChunkMetrics>& metrics, int k);

// Rejected aggregation kept for the ablation harness: plain means over all
// chunks instead of top-k.
PcapScore aggregate_mean(const std::vector<ChunkMetrics>& metrics);

ThresholdModel fit_threshold(const std::vector<PcapScore>& train_scores, double multiplier = 3.0);
EllipticModel fit_elliptic(const std::vector<PcapScore>& train_scores, double level = 0.997);

double mahalanobis_d2(const EllipticModel& model, double nom_k, double mnll_k);

// chi-square(2 dof) quantile: -2 ln(1 - level).
double chi2_2dof_quantile(double level);

Verdict classify(const PcapScore& score, const ThresholdModel& model);
Verdict classify(const PcapScore& score, const EllipticModel& model);

// Both detectors are fitted at train time and persisted together; `active`
// names the configured default.
struct FdaModel {
  DetectorKind active = DetectorKind::threshold;
  int k = 3;
  ThresholdModel threshold;
  EllipticModel elliptic;
  uint64_t config_hash = 0;
  uint64_t vocab_hash = 0;
};

Verdict classify(const PcapScore& score, const FdaModel& model);

void save_fda(const FdaModel& model, const std::string& path);
FdaModel load_fda(const std::string& path);

}  // namespace pcaplm
